//! Test support shared by the integration suites: a finite-difference
//! harness, independent reference implementations, and synthetic images.

#![allow(dead_code)]

use dfn_core::autograd::BnStats;
use dfn_core::data::{make_sr_pair, BlurSpec, ImagePair};
use dfn_core::gradcheck::relative_error;
use dfn_core::metrics::{hybrid_loss, mae_loss, mse_loss, ssim_loss_term};
use dfn_core::nn::{Cbam, EntryKind, GhostConv};
use dfn_core::{Ctx, Mode, ParamStore, Result, Rng, Shape4, SsimConfig, Tape, Tensor4, Var, Variant};

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for relative errors, so entries that are zero up to
/// round-off compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;
/// Inputs this close to a non-differentiable point are not compared.
pub const KINK_BAND: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub excluded: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, rel: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = what();
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel < tol
    }
}

pub type Graph<'g> = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + 'g;

/// Reduces a graph output to `Σ out ⊙ r` so every output element carries a
/// distinct random weight.
fn weighted_loss(ctx: &mut Ctx<'_, f64>, out: Var, r: &Tensor4<f64>) -> Result<Var> {
    let rv = ctx.tape.constant(r.clone());
    let p = ctx.tape.mul(out, rv)?;
    Ok(ctx.tape.sum(p))
}

fn loss_value(store: &ParamStore<f64>, inputs: &[Tensor4<f64>], r: &Tensor4<f64>, f: &Graph) -> f64 {
    let mut ctx = Ctx::new(store, Mode::Train, false);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone(), false)).collect();
    let out = f(&mut ctx, &vars).unwrap();
    let l = weighted_loss(&mut ctx, out, r).unwrap();
    ctx.tape.value(l).data()[0]
}

/// Options for [`check_graph`].
pub struct CheckOpts<'a> {
    /// Per input, elements that sit inside the kink band.
    pub input_kinks: Vec<Vec<bool>>,
    /// Compare at most this many random elements per parameter tensor.
    pub param_sample: Option<usize>,
    pub tol_floor: f64,
    pub rng: &'a mut Rng,
}

/// Compares tape gradients of `Σ f(inputs, params) ⊙ r` with central
/// differences for every input element and every learnable entry of
/// `store`. An element is excluded only when its comparison fails and
/// the two one-sided slopes disagree, i.e. the step straddled a kink.
pub fn check_graph(store: &ParamStore<f64>, inputs: &[Tensor4<f64>], f: &Graph, opts: CheckOpts<'_>) -> GradReport {
    let out_shape = {
        let mut ctx = Ctx::new(store, Mode::Train, false);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone(), false)).collect();
        let out = f(&mut ctx, &vars).unwrap();
        ctx.tape.shape(out)
    };
    let r = Tensor4::uniform(out_shape, -1.0, 1.0, opts.rng);

    let mut ctx = Ctx::new(store, Mode::Train, true);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone(), true)).collect();
    let out = f(&mut ctx, &vars).unwrap();
    let l = weighted_loss(&mut ctx, out, &r).unwrap();
    ctx.tape.backward(l).unwrap();
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| ctx.tape.grad(*v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let learnable: Vec<_> = store.learnable().map(|(id, _)| id).collect();
    let param_grads: Vec<Vec<f64>> = learnable
        .iter()
        .map(|id| {
            let n = store.value(*id).len();
            ctx.bound(*id)
                .and_then(|v| ctx.tape.grad(v))
                .map_or(vec![0.0; n], <[f64]>::to_vec)
        })
        .collect();
    drop(ctx);

    let mut report = GradReport::default();
    let judge = |report: &mut GradReport, analytic: f64, up: f64, mid: f64, down: f64, kink: bool, what: &dyn Fn() -> String| {
        let numeric = (up - down) / (2.0 * FD_EPS);
        let rel = relative_error(analytic, numeric, opts.tol_floor);
        if kink {
            report.excluded += 1;
            return;
        }
        if rel >= GRAD_TOL {
            let fwd = (up - mid) / FD_EPS;
            let bwd = (mid - down) / FD_EPS;
            if relative_error(fwd, bwd, 1.0) > 1e-2 {
                report.excluded += 1;
                return;
            }
        }
        report.record(rel, what);
    };

    let mut probe = inputs.to_vec();
    let mid = loss_value(store, &probe, &r, f);
    for i in 0..probe.len() {
        for j in 0..probe[i].len() {
            let kink = opts.input_kinks.get(i).is_some_and(|m| m[j]);
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_EPS;
            let up = loss_value(store, &probe, &r, f);
            probe[i].data_mut()[j] = orig - FD_EPS;
            let down = loss_value(store, &probe, &r, f);
            probe[i].data_mut()[j] = orig;
            judge(&mut report, input_grads[i][j], up, mid, down, kink, &|| format!("input {i}[{j}]"));
        }
    }

    let mut work = store.clone();
    for (k, id) in learnable.iter().enumerate() {
        let n = work.value(*id).len();
        let picks: Vec<usize> = match opts.param_sample {
            Some(s) if s < n => (0..s).map(|_| opts.rng.below(n as u32) as usize).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = work.value(*id).data()[j];
            work.value_mut(*id).data_mut()[j] = orig + FD_EPS;
            let up = loss_value(&work, inputs, &r, f);
            work.value_mut(*id).data_mut()[j] = orig - FD_EPS;
            let down = loss_value(&work, inputs, &r, f);
            work.value_mut(*id).data_mut()[j] = orig;
            let name = &work.entry(*id).name;
            judge(&mut report, param_grads[k][j], up, mid, down, false, &|| format!("{name}[{j}]"));
        }
    }
    report
}

pub fn opts(rng: &mut Rng) -> CheckOpts<'_> {
    CheckOpts {
        input_kinks: Vec::new(),
        param_sample: None,
        tol_floor: REL_FLOOR,
        rng,
    }
}

pub fn rand_shape(rng: &mut Rng, max_c: usize, lo_hw: usize, hi_hw: usize) -> Shape4 {
    let pick = |rng: &mut Rng, lo: usize, hi: usize| lo + rng.below((hi - lo + 1) as u32) as usize;
    let n = pick(rng, 1, 2);
    let c = pick(rng, 1, max_c);
    let h = pick(rng, lo_hw, hi_hw);
    let w = pick(rng, lo_hw, hi_hw);
    Shape4::new(n, c, h, w).unwrap()
}

pub fn rand_tensor(rng: &mut Rng, shape: Shape4) -> Tensor4<f64> {
    Tensor4::uniform(shape, -2.0, 2.0, rng)
}

fn empty() -> ParamStore<f64> {
    ParamStore::new()
}

// ---- per-op gradient checks, each a pure function of a seed ----

pub fn grad_conv(seed: u64, k: usize) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, k.max(2), 9);
    let c_out = 1 + rng.below(3) as usize;
    let x = rand_tensor(&mut rng, s);
    let w = rand_tensor(&mut rng, Shape4::new(c_out, s.c, k, k).unwrap());
    let b = rand_tensor(&mut rng, Shape4::new(1, c_out, 1, 1).unwrap());
    let f = move |ctx: &mut Ctx<'_, f64>, v: &[Var]| ctx.tape.conv2d(v[0], v[1], Some(v[2]), 1, k / 2, 1);
    check_graph(&empty(), &[x, w, b], &f, opts(&mut rng))
}

pub fn grad_depthwise(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 4, 3, 9);
    let x = rand_tensor(&mut rng, s);
    let w = rand_tensor(&mut rng, Shape4::new(s.c, 1, 3, 3).unwrap());
    let b = rand_tensor(&mut rng, Shape4::new(1, s.c, 1, 1).unwrap());
    let groups = s.c;
    let f = move |ctx: &mut Ctx<'_, f64>, v: &[Var]| ctx.tape.conv2d(v[0], v[1], Some(v[2]), 1, 1, groups);
    check_graph(&empty(), &[x, w, b], &f, opts(&mut rng))
}

pub fn grad_ghost(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 3, 8);
    let c_out = 2 * (1 + rng.below(2) as usize);
    let mut store = ParamStore::new();
    let ghost = GhostConv::new(&mut store, "g", s.c, c_out, &mut rng).unwrap();
    randomize_store(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, s);
    let f = move |ctx: &mut Ctx<'_, f64>, v: &[Var]| ghost.forward(ctx, v[0]);
    check_graph(&store, &[x], &f, opts(&mut rng))
}

/// Moves values off `0` and out of the kink band by redrawing.
fn away_from_zero(rng: &mut Rng, t: &mut Tensor4<f64>) {
    for v in t.data_mut() {
        while v.abs() < 2.0 * KINK_BAND {
            *v = rng.uniform(-2.0, 2.0);
        }
    }
}

pub fn grad_prelu(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 4, 1, 8);
    let mut x = rand_tensor(&mut rng, s);
    // Plant a few values inside the band; those must be excluded.
    for j in 0..x.len().min(3) {
        x.data_mut()[j] = rng.uniform(-KINK_BAND / 2.0, KINK_BAND / 2.0);
    }
    let kinks: Vec<bool> = x.data().iter().map(|v| v.abs() < KINK_BAND).collect();
    let alpha = rand_tensor(&mut rng, Shape4::new(1, s.c, 1, 1).unwrap());
    let f = |ctx: &mut Ctx<'_, f64>, v: &[Var]| ctx.tape.prelu(v[0], v[1]);
    let alpha_kinks = vec![false; alpha.len()];
    check_graph(
        &empty(),
        &[x, alpha],
        &f,
        CheckOpts {
            input_kinks: vec![kinks, alpha_kinks],
            ..opts(&mut rng)
        },
    )
}

pub fn grad_batch_norm_train(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 2, 6);
    let x = rand_tensor(&mut rng, s);
    let gamma = rand_tensor(&mut rng, Shape4::new(1, s.c, 1, 1).unwrap());
    let beta = rand_tensor(&mut rng, Shape4::new(1, s.c, 1, 1).unwrap());
    let f = |ctx: &mut Ctx<'_, f64>, v: &[Var]| {
        Ok(ctx.tape.batch_norm(v[0], v[1], v[2], BnStats::Batch { eps: 1e-5 })?.0)
    };
    check_graph(&empty(), &[x, gamma, beta], &f, opts(&mut rng))
}

pub fn grad_batch_norm_eval(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 1, 6);
    let x = rand_tensor(&mut rng, s);
    let gamma = rand_tensor(&mut rng, Shape4::new(1, s.c, 1, 1).unwrap());
    let beta = rand_tensor(&mut rng, Shape4::new(1, s.c, 1, 1).unwrap());
    let mean: Vec<f64> = (0..s.c).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let var: Vec<f64> = (0..s.c).map(|_| rng.uniform(0.2, 2.0)).collect();
    let f = move |ctx: &mut Ctx<'_, f64>, v: &[Var]| {
        let stats = BnStats::Running {
            mean: &mean,
            var: &var,
            eps: 1e-5,
        };
        Ok(ctx.tape.batch_norm(v[0], v[1], v[2], stats)?.0)
    };
    check_graph(&empty(), &[x, gamma, beta], &f, opts(&mut rng))
}

pub fn grad_max_pool(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 1, 5);
    let s = Shape4::new(s.n, s.c, 2 * s.h, 2 * s.w).unwrap();
    let mut x = rand_tensor(&mut rng, s);
    // Force an exact tie for the maximum of the first window; ties are kinks.
    x.data_mut()[0] = 2.5;
    x.data_mut()[1] = 2.5;
    let mut kinks = vec![false; x.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in (0..s.h).step_by(2) {
                for xx in (0..s.w).step_by(2) {
                    let idx = [
                        s.index(n, c, y, xx),
                        s.index(n, c, y, xx + 1),
                        s.index(n, c, y + 1, xx),
                        s.index(n, c, y + 1, xx + 1),
                    ];
                    let mut vals: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    if vals[0] - vals[1] < KINK_BAND {
                        for &i in &idx {
                            kinks[i] = true;
                        }
                    }
                }
            }
        }
    }
    let f = |ctx: &mut Ctx<'_, f64>, v: &[Var]| ctx.tape.max_pool2(v[0]);
    check_graph(
        &empty(),
        &[x],
        &f,
        CheckOpts {
            input_kinks: vec![kinks],
            ..opts(&mut rng)
        },
    )
}

pub fn grad_upsample(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 1, 8);
    let x = rand_tensor(&mut rng, s);
    let f = |ctx: &mut Ctx<'_, f64>, v: &[Var]| ctx.tape.upsample_nearest2(v[0]);
    check_graph(&empty(), &[x], &f, opts(&mut rng))
}

pub fn grad_sigmoid(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 1, 8);
    let x = rand_tensor(&mut rng, s);
    let f = |ctx: &mut Ctx<'_, f64>, v: &[Var]| Ok(ctx.tape.sigmoid(v[0]));
    check_graph(&empty(), &[x], &f, opts(&mut rng))
}

/// Elementwise and broadcast primitives the layers are assembled from.
pub fn grad_primitives(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 1, 6);
    let a = rand_tensor(&mut rng, s);
    let mut b = rand_tensor(&mut rng, s);
    away_from_zero(&mut rng, &mut b);
    let sc = rand_tensor(&mut rng, Shape4::new(s.n, s.c, 1, 1).unwrap());
    let sp = rand_tensor(&mut rng, Shape4::new(s.n, 1, s.h, s.w).unwrap());
    let mut report = GradReport::default();
    let graphs: Vec<Box<Graph>> = vec![
        Box::new(|ctx, v| ctx.tape.add(v[0], v[1])),
        Box::new(|ctx, v| ctx.tape.sub(v[0], v[1])),
        Box::new(|ctx, v| ctx.tape.mul(v[0], v[1])),
        Box::new(|ctx, v| ctx.tape.div(v[0], v[1])),
        Box::new(|ctx, v| ctx.tape.concat_channels(v[0], v[1])),
        Box::new(|ctx, v| {
            let t = ctx.tape.square(v[0]);
            let t = ctx.tape.mul_scalar(t, 0.3);
            Ok(ctx.tape.add_scalar(t, 1.5))
        }),
        Box::new(|ctx, v| ctx.tape.mul_channel_scale(v[0], v[2])),
        Box::new(|ctx, v| ctx.tape.mul_spatial_scale(v[0], v[3])),
        Box::new(|ctx, v| ctx.tape.global_avg_pool(v[0])),
        Box::new(|ctx, v| ctx.tape.channel_mean(v[0])),
        Box::new(|ctx, v| Ok(ctx.tape.mean(v[0]))),
        Box::new(|ctx, v| Ok(ctx.tape.abs(v[1]))),
    ];
    for g in &graphs {
        report.merge(check_graph(&empty(), &[a.clone(), b.clone(), sc.clone(), sp.clone()], g.as_ref(), opts(&mut rng)));
    }
    report
}

/// Max-type reductions on inputs whose maxima are separated by more than
/// the kink band.
pub fn grad_max_reductions(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 1, 5);
    let mut vals: Vec<f64> = (0..s.numel()).map(|i| -2.0 + 4.0 * i as f64 / s.numel() as f64).collect();
    rng.shuffle(&mut vals);
    let x = Tensor4::from_vec(s, vals).unwrap();
    let mut report = GradReport::default();
    let graphs: Vec<Box<Graph>> = vec![
        Box::new(|ctx, v| ctx.tape.global_max_pool(v[0])),
        Box::new(|ctx, v| ctx.tape.channel_max(v[0])),
        Box::new(|ctx, v| Ok(ctx.tape.relu(v[0]))),
    ];
    for g in &graphs {
        report.merge(check_graph(&empty(), std::slice::from_ref(&x), g.as_ref(), opts(&mut rng)));
    }
    report
}

/// Overwrites every learnable entry with values in [-1, 1] so that zero
/// initializations (biases) do not hide gradient paths.
pub fn randomize_store(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for e in store.entries_mut() {
        if e.kind == EntryKind::Learnable {
            for v in e.value.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
        }
    }
}

pub enum AttentionPart {
    Channel,
    Spatial,
    Full,
}

pub fn grad_attention(seed: u64, part: AttentionPart) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 2, 2, 8);
    let s = Shape4::new(s.n, 4 * s.c, s.h, s.w).unwrap();
    let mut store = ParamStore::new();
    let cbam = Cbam::new(&mut store, "cbam", s.c, 2, true, &mut rng).unwrap();
    randomize_store(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, s);
    let f = move |ctx: &mut Ctx<'_, f64>, v: &[Var]| match part {
        AttentionPart::Channel => cbam.channel_attention(ctx, v[0]),
        AttentionPart::Spatial => cbam.spatial_attention(ctx, v[0]),
        AttentionPart::Full => cbam.forward(ctx, v[0]),
    };
    check_graph(&store, &[x], &f, opts(&mut rng))
}

fn image_pair(rng: &mut Rng, lo: usize, hi: usize) -> (Tensor4<f64>, Tensor4<f64>) {
    let s = rand_shape(rng, 3, lo, hi);
    (Tensor4::uniform(s, 0.0, 1.0, rng), Tensor4::uniform(s, 0.0, 1.0, rng))
}

pub enum LossKind {
    Ssim,
    Hybrid,
    Mse,
    Mae,
}

/// Loss gradients wrt both arguments on images in `[0, 1]`, the range SSIM
/// is defined for.
pub fn grad_loss(seed: u64, kind: LossKind) -> GradReport {
    let mut rng = Rng::new(seed);
    let (a, b) = image_pair(&mut rng, 11, 16);
    let cfg = SsimConfig::default();
    let f = move |ctx: &mut Ctx<'_, f64>, v: &[Var]| match kind {
        LossKind::Ssim => ssim_loss_term(&mut ctx.tape, v[0], v[1], &cfg),
        LossKind::Hybrid => hybrid_loss(&mut ctx.tape, v[0], v[1], 0.7, &cfg),
        LossKind::Mse => mse_loss(&mut ctx.tape, v[0], v[1]),
        LossKind::Mae => mae_loss(&mut ctx.tape, v[0], v[1]),
    };
    check_graph(&empty(), &[a, b], &f, opts(&mut rng))
}

/// A random chain of three differentiable ops.
pub fn grad_chain(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let s = rand_shape(&mut rng, 3, 2, 6);
    let x = rand_tensor(&mut rng, s);
    let ops: Vec<u32> = (0..3).map(|_| rng.below(6)).collect();
    let f = move |ctx: &mut Ctx<'_, f64>, v: &[Var]| {
        let mut h = v[0];
        for op in &ops {
            h = match op {
                0 => ctx.tape.sigmoid(h),
                1 => ctx.tape.square(h),
                2 => ctx.tape.mul_scalar(h, -1.3),
                3 => {
                    let u = ctx.tape.upsample_nearest2(h)?;
                    ctx.tape.max_pool2(u)?
                }
                4 => ctx.tape.concat_channels(h, h)?,
                _ => ctx.tape.add(h, v[0]).or_else(|_| ctx.tape.add(h, h))?,
            };
        }
        Ok(h)
    };
    check_graph(&empty(), &[x], &f, opts(&mut rng))
}

/// Every op family named by the gradient contract, at one seed.
pub fn gradient_battery(seed: u64) -> Vec<(&'static str, GradReport)> {
    vec![
        ("conv k=1", grad_conv(seed, 1)),
        ("conv k=3", grad_conv(seed, 3)),
        ("conv k=5", grad_conv(seed, 5)),
        ("conv k=7", grad_conv(seed, 7)),
        ("depthwise", grad_depthwise(seed)),
        ("ghost", grad_ghost(seed)),
        ("prelu", grad_prelu(seed)),
        ("batch-norm train", grad_batch_norm_train(seed)),
        ("batch-norm eval", grad_batch_norm_eval(seed)),
        ("max-pool", grad_max_pool(seed)),
        ("upsample", grad_upsample(seed)),
        ("sigmoid", grad_sigmoid(seed)),
        ("primitives", grad_primitives(seed)),
        ("max reductions", grad_max_reductions(seed)),
        ("channel attention", grad_attention(seed, AttentionPart::Channel)),
        ("spatial attention", grad_attention(seed, AttentionPart::Spatial)),
        ("cbam", grad_attention(seed, AttentionPart::Full)),
        ("ssim", grad_loss(seed, LossKind::Ssim)),
        ("hybrid loss", grad_loss(seed, LossKind::Hybrid)),
        ("mse", grad_loss(seed, LossKind::Mse)),
        ("mae", grad_loss(seed, LossKind::Mae)),
        ("3-op chain", grad_chain(seed)),
    ]
}

// ---- reference implementations ----

/// Direct six-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, b: Option<&[f64]>, stride: usize, pad: usize, groups: usize) -> Tensor4<f64> {
    let s = x.shape();
    let ws = w.shape();
    let (c_out, cin_g, k) = (ws.n, ws.c, ws.h);
    let cout_g = c_out / groups;
    let ho = (s.h + 2 * pad - k) / stride + 1;
    let wo = (s.w + 2 * pad - k) / stride + 1;
    let os = Shape4::new(s.n, c_out, ho, wo).unwrap();
    let mut out = Tensor4::zeros(os);
    for n in 0..s.n {
        for co in 0..c_out {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w.get(co, ci, ky, kx) * x.get(n, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[os.index(n, co, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

/// Embeds a depthwise weight `(c, 1, k, k)` in a dense `(c, c, k, k)` one.
pub fn block_diagonal(w: &Tensor4<f64>) -> Tensor4<f64> {
    let ws = w.shape();
    let ds = Shape4::new(ws.n, ws.n, ws.h, ws.w).unwrap();
    let mut d = Tensor4::zeros(ds);
    for c in 0..ws.n {
        for y in 0..ws.h {
            for x in 0..ws.w {
                d.data_mut()[ds.index(c, c, y, x)] = w.get(c, 0, y, x);
            }
        }
    }
    d
}

/// SSIM evaluated window by window with explicit Gaussian weights.
pub fn brute_force_ssim(a: &Tensor4<f64>, b: &Tensor4<f64>, cfg: &SsimConfig) -> f64 {
    let s = a.shape();
    let k = cfg.window;
    let r = (k / 2) as f64;
    let g: Vec<f64> = (0..k).map(|i| (-(i as f64 - r).powi(2) / (2.0 * cfg.sigma * cfg.sigma)).exp()).collect();
    let z: f64 = g.iter().sum::<f64>().powi(2);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y0 in 0..=s.h - k {
                for x0 in 0..=s.w - k {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let wt = g[dy] * g[dx] / z;
                            let pa = a.get(n, c, y0 + dy, x0 + dx);
                            let pb = b.get(n, c, y0 + dy, x0 + dx);
                            ma += wt * pa;
                            mb += wt * pb;
                            saa += wt * pa * pa;
                            sbb += wt * pb * pb;
                            sab += wt * pa * pb;
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

/// One bias-corrected Adam update of a single scalar, written out longhand.
pub fn adam_reference(theta: f64, grad: f64, m: f64, v: f64, t: i32, lr: f64) -> (f64, f64, f64) {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let m = b1 * m + (1.0 - b1) * grad;
    let v = b2 * v + (1.0 - b2) * grad * grad;
    let m_hat = m / (1.0 - f64::powi(b1, t));
    let v_hat = v / (1.0 - f64::powi(b2, t));
    (theta - lr * m_hat / (v_hat.sqrt() + eps), m, v)
}

/// Shrinks every width so model-level checks run in milliseconds.
pub fn tiny_config(variant: Variant) -> dfn_core::ModelConfig {
    dfn_core::ModelConfig {
        variant,
        head_branch_width: 2,
        encoder_channels: vec![4, 4, 8],
        bottleneck_channels: 8,
        bottleneck_reduced: 4,
        bottleneck_growth: 2,
        bottleneck_layers: 2,
        decoder_channels: vec![4, 4, 4],
        cbam_reduction: 2,
        sr_mid_width: 2,
        cbam_bias: true,
    }
}

/// Learnable element count derived from the layer-by-layer topology,
/// without touching a built model.
pub fn topology_count(cfg: &dfn_core::ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let dw = |c: usize| c * 9 + c;
    let bn = |c: usize| 2 * c;
    let cbam = |c: usize| {
        let h = c / cfg.cbam_reduction;
        let b = usize::from(cfg.cbam_bias);
        (c * h + h * b) + (h * c + c * b) + (2 * 49 + b)
    };
    let w0 = cfg.head_branch_width;
    let [c1, c2, c3] = [cfg.encoder_channels[0], cfg.encoder_channels[1], cfg.encoder_channels[2]];
    let c4 = cfg.bottleneck_channels;
    let [d1, d2, d3] = [cfg.decoder_channels[0], cfg.decoder_channels[1], cfg.decoder_channels[2]];

    let head = conv(3, w0, 3) + w0 + dw(w0) + conv(3, w0, 5) + w0 + dw(w0) + w0 + conv(4 * w0, c1, 3) + c1 + bn(c1) + cbam(c1);
    let enc = |cin: usize, cout: usize| conv(cin, cout / 2, 1) + dw(cout / 2) + cout + conv(cout, cout, 3) + bn(cout) + conv(cin, cout, 1) + cbam(cout);
    let (r, g, l) = (cfg.bottleneck_reduced, cfg.bottleneck_growth, cfg.bottleneck_layers);
    let mut bott = conv(c4, r, 1) + conv(r + l * g, c4, 1) + bn(c4) + cbam(c4);
    for i in 0..l {
        bott += conv(if i == 0 { r } else { g }, g, 3) + g;
    }
    let dec = |prev: usize, skip: usize, d: usize| conv(prev + skip, d, 3) + d + conv(d, d, 3) + bn(d) + cbam(d);
    let out = match cfg.variant {
        Variant::Enhancement => conv(d3, 3, 3),
        Variant::SuperResolution => conv(d3, cfg.sr_mid_width, 3) + cfg.sr_mid_width + conv(cfg.sr_mid_width, 3, 3),
    };
    head + enc(c1, c2) + enc(c2, c3) + enc(c3, c4) + bott + dec(c4, c3, d1) + dec(d1, c2, d2) + dec(d2, c1, d3) + out
}

pub fn brute_force_walk<T: dfn_core::Scalar>(store: &ParamStore<T>) -> usize {
    store
        .entries()
        .iter()
        .filter(|e| e.kind == EntryKind::Learnable)
        .map(|e| e.value.shape().dims().iter().product::<usize>())
        .sum()
}

// ---- synthetic images ----

/// A smooth colour image: a few plane waves plus Gaussian blobs per
/// channel, squeezed into `[0.02, 0.98]`.
pub fn scene(rng: &mut Rng, h: usize, w: usize) -> Tensor4<f32> {
    let sh = Shape4::new(1, 3, h, w).unwrap();
    let mut t = Tensor4::zeros(sh);
    let (hf, wf) = (h as f64, w as f64);
    for c in 0..3 {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| [rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.0, 6.3), rng.uniform(0.3, 1.0)])
            .collect();
        let blobs: Vec<[f64; 4]> = (0..3)
            .map(|_| [rng.uniform(0.0, hf), rng.uniform(0.0, wf), rng.uniform(4.0, 12.0), rng.uniform(-1.0, 1.0)])
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = 0.0;
                for q in &waves {
                    v += q[3] * (q[0] * xf + q[1] * yf + q[2]).sin();
                }
                for q in &blobs {
                    v += q[3] * (-((yf - q[0]).powi(2) + (xf - q[1]).powi(2)) / (2.0 * q[2] * q[2])).exp();
                }
                t.data_mut()[sh.index(0, c, y, x)] = (0.5 + 0.15 * v).clamp(0.02, 0.98) as f32;
            }
        }
    }
    t
}

/// Low-light rendition of a well-exposed image.
pub fn darken(t: &Tensor4<f32>) -> Tensor4<f32> {
    t.map(|v| 0.3 * v.powf(1.8))
}

/// Four fixed `size × size` training pairs for `variant`.
pub fn overfit_pairs(variant: Variant, size: usize, seed: u64) -> Vec<ImagePair<f32>> {
    let mut rng = Rng::new(seed);
    let blur = BlurSpec::new(vec![3, 5, 7], seed).unwrap();
    (0..4)
        .map(|i| {
            let id = format!("{i:02}");
            let high = scene(&mut rng, size, size);
            match variant {
                Variant::Enhancement => ImagePair {
                    id,
                    input: darken(&high),
                    target: high,
                },
                Variant::SuperResolution => make_sr_pair(&id, &high, &blur, &mut rng).unwrap(),
            }
        })
        .collect()
}

pub fn tape_value(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).data()[0]
}
