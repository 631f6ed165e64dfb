use crate::autograd::{BnStats, Var};
use crate::error::{DfnError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

use super::{Ctx, EntryKind, Mode, ParamId, ParamStore, RunningUpdate};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding, dense, with bias.
    pub fn same(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride: 1,
            pad: k / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(c: usize, k: usize) -> Self {
        ConvSpec {
            groups: c,
            ..ConvSpec::same(c, c, k)
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.k * self.k + if self.bias { self.c_out } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(DfnError::invalid("conv spec", detail));
        if self.c_in == 0 || self.c_out == 0 || self.groups == 0 || self.stride == 0 {
            return bad(format!("zero-sized field in {self:?}"));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return bad(format!(
                "channels {}→{} not divisible by {} groups",
                self.c_in, self.c_out, self.groups
            ));
        }
        if self.k % 2 == 0 {
            return bad(format!("kernel size {} is even", self.k));
        }
        Ok(())
    }
}

/// Dense or grouped 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    /// Weights drawn from U(±√(6/fan_in)) with `fan_in = c_in/groups·k²`;
    /// bias starts at zero.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.c_in / spec.groups) * spec.k * spec.k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let ws = Shape4::new(spec.c_out, spec.c_in / spec.groups, spec.k, spec.k)?;
        let weight = store.add(
            format!("{name}.weight"),
            EntryKind::Learnable,
            Tensor4::uniform(ws, -bound, bound, rng),
        );
        let bias = spec.bias.then(|| {
            store.add(
                format!("{name}.bias"),
                EntryKind::Learnable,
                Tensor4::zeros(Shape4 { n: 1, c: spec.c_out, h: 1, w: 1 }),
            )
        });
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        if c != self.spec.c_in {
            return Err(DfnError::ShapeMismatch {
                context: "conv2d input",
                axis: "c",
                left: c,
                right: self.spec.c_in,
            });
        }
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.spec.stride, self.spec.pad, self.spec.groups)
    }
}

/// Per-channel learnable slope for negative inputs.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: ParamId,
    pub channels: usize,
}

impl PRelu {
    pub const INIT_ALPHA: f64 = 0.25;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let alpha = store.add(
            format!("{name}.alpha"),
            EntryKind::Learnable,
            Tensor4::full(
                Shape4 { n: 1, c: channels, h: 1, w: 1 },
                T::from_f64_lossy(Self::INIT_ALPHA),
            ),
        );
        PRelu { alpha, channels }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = ctx.param(self.alpha);
        ctx.tape.prelu(x, a)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let s = Shape4 { n: 1, c: channels, h: 1, w: 1 };
        let gamma = store.add(format!("{name}.gamma"), EntryKind::Learnable, Tensor4::ones(s));
        let beta = store.add(format!("{name}.beta"), EntryKind::Learnable, Tensor4::zeros(s));
        let running_mean = store.add(format!("{name}.running_mean"), EntryKind::Buffer, Tensor4::zeros(s));
        let running_var = store.add(format!("{name}.running_var"), EntryKind::Buffer, Tensor4::ones(s));
        BatchNorm2d {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    /// Train mode normalizes by batch statistics and schedules
    /// `running ← (1−m)·running + m·batch` (unbiased variance); eval mode
    /// normalizes by the running statistics.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let eps = T::from_f64_lossy(self.eps);
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, BnStats::Batch { eps })?;
                let stats = stats.expect("batch statistics are returned in train mode");
                let corr = T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap();
                ctx.push_running_update(RunningUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: stats.mean,
                    batch_var: stats.var.iter().map(|&v| v * corr).collect(),
                    momentum: T::from_f64_lossy(self.momentum),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let mean = store.value(self.running_mean).data();
                let var = store.value(self.running_var).data();
                let (y, _) = ctx.tape.batch_norm(x, g, b, BnStats::Running { mean, var, eps })?;
                Ok(y)
            }
        }
    }
}

/// Ghost convolution: a 1×1 primary conv produces half the output
/// channels, a 3×3 depthwise conv over those produces the other half.
#[derive(Clone, Debug)]
pub struct GhostConv {
    pub primary: Conv2d,
    pub cheap: Conv2d,
}

impl GhostConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_primary_kernel(store, name, c_in, c_out, 1, rng)
    }

    pub fn with_primary_kernel<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        primary_k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(DfnError::invalid("ghost_conv", format!("c_out={c_out} is odd")));
        }
        let half = c_out / 2;
        let primary = Conv2d::new(store, &format!("{name}.primary"), ConvSpec::same(c_in, half, primary_k), rng)?;
        let cheap = Conv2d::new(store, &format!("{name}.cheap"), ConvSpec::depthwise(half, 3), rng)?;
        Ok(GhostConv { primary, cheap })
    }

    pub fn param_count(&self) -> usize {
        self.primary.spec.param_count() + self.cheap.spec.param_count()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let p = self.primary.forward(ctx, x)?;
        let q = self.cheap.forward(ctx, p)?;
        ctx.tape.concat_channels(p, q)
    }
}
