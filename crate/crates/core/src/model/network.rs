use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{DfnError, Result};
use crate::nn::{BatchNorm2d, Cbam, Conv2d, ConvSpec, Ctx, GhostConv, Mode, PRelu, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

use super::config::{ModelConfig, Variant};

/// Two parallel branches (3×3 and 5×5), each widened by a depthwise conv,
/// fused by a 3×3 conv, normalized and attended.
#[derive(Clone, Debug)]
struct Head {
    conv_a: Conv2d,
    prelu_a: PRelu,
    dw_a: Conv2d,
    conv_b: Conv2d,
    prelu_b: PRelu,
    dw_b: Conv2d,
    prelu_b2: PRelu,
    fuse: Conv2d,
    fuse_prelu: PRelu,
    fuse_bn: BatchNorm2d,
    cbam: Cbam,
}

impl Head {
    fn new<T: Scalar>(s: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let w0 = cfg.head_branch_width;
        let c1 = cfg.encoder_channels[0];
        Ok(Head {
            conv_a: Conv2d::new(s, "head.conv_a", ConvSpec::same(3, w0, 3), rng)?,
            prelu_a: PRelu::new(s, "head.prelu_a", w0),
            dw_a: Conv2d::new(s, "head.dw_a", ConvSpec::depthwise(w0, 3), rng)?,
            conv_b: Conv2d::new(s, "head.conv_b", ConvSpec::same(3, w0, 5), rng)?,
            prelu_b: PRelu::new(s, "head.prelu_b", w0),
            dw_b: Conv2d::new(s, "head.dw_b", ConvSpec::depthwise(w0, 3), rng)?,
            prelu_b2: PRelu::new(s, "head.prelu_b2", w0),
            fuse: Conv2d::new(s, "head.fuse", ConvSpec::same(4 * w0, c1, 3), rng)?,
            fuse_prelu: PRelu::new(s, "head.fuse_prelu", c1),
            fuse_bn: BatchNorm2d::new(s, "head.fuse_bn", c1),
            cbam: Cbam::new(s, "head.cbam", c1, cfg.cbam_reduction, cfg.cbam_bias, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a1 = self.conv_a.forward(ctx, x)?;
        let a1 = self.prelu_a.forward(ctx, a1)?;
        let a2 = self.dw_a.forward(ctx, a1)?;
        let a = ctx.tape.concat_channels(a1, a2)?;

        let b1 = self.conv_b.forward(ctx, x)?;
        let b1 = self.prelu_b.forward(ctx, b1)?;
        let b2 = self.dw_b.forward(ctx, b1)?;
        let b2 = self.prelu_b2.forward(ctx, b2)?;
        let b = ctx.tape.concat_channels(b1, b2)?;

        let f = ctx.tape.concat_channels(a, b)?;
        let y = self.fuse.forward(ctx, f)?;
        let y = self.fuse_prelu.forward(ctx, y)?;
        let y = self.fuse_bn.forward(ctx, y)?;
        attend(&self.cbam, ctx, y)
    }
}

/// Max-pool, then a residual block whose first conv is a ghost conv and
/// whose shortcut is a 1×1 projection, then attention.
#[derive(Clone, Debug)]
struct EncoderStage {
    ghost: GhostConv,
    prelu: PRelu,
    conv: Conv2d,
    bn: BatchNorm2d,
    proj: Conv2d,
    cbam: Cbam,
}

impl EncoderStage {
    fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderStage {
            ghost: GhostConv::new(s, &format!("{name}.ghost"), c_in, c_out, rng)?,
            prelu: PRelu::new(s, &format!("{name}.prelu"), c_out),
            conv: Conv2d::new(s, &format!("{name}.conv"), ConvSpec::same(c_out, c_out, 3), rng)?,
            bn: BatchNorm2d::new(s, &format!("{name}.bn"), c_out),
            proj: Conv2d::new(s, &format!("{name}.proj"), ConvSpec::same(c_in, c_out, 1), rng)?,
            cbam: Cbam::new(s, &format!("{name}.cbam"), c_out, cfg.cbam_reduction, cfg.cbam_bias, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let p = ctx.tape.max_pool2(x)?;
        let h = self.ghost.forward(ctx, p)?;
        let h = self.prelu.forward(ctx, h)?;
        let h = self.conv.forward(ctx, h)?;
        let h = self.bn.forward(ctx, h)?;
        let shortcut = self.proj.forward(ctx, p)?;
        let y = ctx.tape.add(h, shortcut)?;
        attend(&self.cbam, ctx, y)
    }
}

/// 1×1 reduction, a chain of 3×3 convs, dense concatenation of every
/// intermediate, 1×1 fusion back to the input width.
#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv2d,
    layers: Vec<(Conv2d, PRelu)>,
    fuse: Conv2d,
    bn: BatchNorm2d,
    cbam: Cbam,
}

impl Bottleneck {
    fn new<T: Scalar>(s: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c4 = cfg.bottleneck_channels;
        let reduce = Conv2d::new(s, "bottleneck.reduce", ConvSpec::same(c4, cfg.bottleneck_reduced, 1), rng)?;
        let mut layers = Vec::with_capacity(cfg.bottleneck_layers);
        let mut width = cfg.bottleneck_reduced;
        for i in 0..cfg.bottleneck_layers {
            let conv = Conv2d::new(
                s,
                &format!("bottleneck.dense{i}.conv"),
                ConvSpec::same(width, cfg.bottleneck_growth, 3),
                rng,
            )?;
            let prelu = PRelu::new(s, &format!("bottleneck.dense{i}.prelu"), cfg.bottleneck_growth);
            layers.push((conv, prelu));
            width = cfg.bottleneck_growth;
        }
        let dense_width = cfg.bottleneck_reduced + cfg.bottleneck_layers * cfg.bottleneck_growth;
        Ok(Bottleneck {
            reduce,
            layers,
            fuse: Conv2d::new(s, "bottleneck.fuse", ConvSpec::same(dense_width, c4, 1), rng)?,
            bn: BatchNorm2d::new(s, "bottleneck.bn", c4),
            cbam: Cbam::new(s, "bottleneck.cbam", c4, cfg.cbam_reduction, cfg.cbam_bias, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let p0 = self.reduce.forward(ctx, x)?;
        let mut dense = p0;
        let mut cur = p0;
        for (conv, prelu) in &self.layers {
            cur = conv.forward(ctx, cur)?;
            cur = prelu.forward(ctx, cur)?;
            dense = ctx.tape.concat_channels(dense, cur)?;
        }
        let y = self.fuse.forward(ctx, dense)?;
        let y = self.bn.forward(ctx, y)?;
        attend(&self.cbam, ctx, y)
    }
}

/// Upsample, concatenate the matching encoder output, two 3×3 convs,
/// normalize, attend.
#[derive(Clone, Debug)]
struct DecoderStage {
    conv1: Conv2d,
    prelu: PRelu,
    conv2: Conv2d,
    bn: BatchNorm2d,
    cbam: Cbam,
}

impl DecoderStage {
    fn new<T: Scalar>(
        s: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_skip: usize,
        c_out: usize,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(DecoderStage {
            conv1: Conv2d::new(s, &format!("{name}.conv1"), ConvSpec::same(c_in + c_skip, c_out, 3), rng)?,
            prelu: PRelu::new(s, &format!("{name}.prelu"), c_out),
            conv2: Conv2d::new(s, &format!("{name}.conv2"), ConvSpec::same(c_out, c_out, 3), rng)?,
            bn: BatchNorm2d::new(s, &format!("{name}.bn"), c_out),
            cbam: Cbam::new(s, &format!("{name}.cbam"), c_out, cfg.cbam_reduction, cfg.cbam_bias, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let u = ctx.tape.upsample_nearest2(x)?;
        let c = ctx.tape.concat_channels(u, skip)?;
        let y = self.conv1.forward(ctx, c)?;
        let y = self.prelu.forward(ctx, y)?;
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn.forward(ctx, y)?;
        attend(&self.cbam, ctx, y)
    }
}

#[derive(Clone, Debug)]
enum OutputHead {
    Enhancement {
        conv: Conv2d,
    },
    /// Upsample ×2 → conv → PReLU → conv.
    SuperResolution {
        conv1: Conv2d,
        prelu: PRelu,
        conv2: Conv2d,
    },
}

impl OutputHead {
    fn new<T: Scalar>(s: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d3 = cfg.decoder_channels[2];
        Ok(match cfg.variant {
            Variant::Enhancement => OutputHead::Enhancement {
                conv: Conv2d::new(s, "out.conv", ConvSpec::same(d3, 3, 3), rng)?,
            },
            Variant::SuperResolution => {
                let mid = cfg.sr_mid_width;
                OutputHead::SuperResolution {
                    conv1: Conv2d::new(s, "sr.conv1", ConvSpec::same(d3, mid, 3), rng)?,
                    prelu: PRelu::new(s, "sr.prelu", mid),
                    conv2: Conv2d::new(s, "sr.conv2", ConvSpec::same(mid, 3, 3), rng)?,
                }
            }
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let logits = match self {
            OutputHead::Enhancement { conv } => conv.forward(ctx, x)?,
            OutputHead::SuperResolution { conv1, prelu, conv2 } => {
                let u = ctx.tape.upsample_nearest2(x)?;
                let y = conv1.forward(ctx, u)?;
                let y = prelu.forward(ctx, y)?;
                conv2.forward(ctx, y)?
            }
        };
        Ok(ctx.tape.sigmoid(logits))
    }
}

fn attend<T: Scalar>(cbam: &Cbam, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let before = ctx.tape.shape(x);
    let y = cbam.forward(ctx, x)?;
    let after = ctx.tape.shape(y);
    if before != after {
        return Err(DfnError::invalid("cbam", format!("reshaped {before} to {after}")));
    }
    Ok(y)
}

/// One learnable tensor in a [`ParameterReport`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub shape: [usize; 4],
    pub count: usize,
}

/// Learnable element counts; batch-norm running statistics are excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<width$}  {:<20}  {:>10}", "name", "shape", "count")?;
        for r in &self.rows {
            let shape = format!("{:?}", r.shape);
            writeln!(f, "{:<width$}  {:<20}  {:>10}", r.name, shape, r.count)?;
        }
        write!(f, "total parameters: {}", self.total)
    }
}

/// DeepFusionNet: fusion head, three encoder stages, dense bottleneck,
/// three decoder stages with skip concatenation, sigmoid output.
#[derive(Debug)]
pub struct DfnModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    head: Head,
    encoder: Vec<EncoderStage>,
    bottleneck: Bottleneck,
    decoder: Vec<DecoderStage>,
    out: OutputHead,
    clamped: AtomicU64,
}

impl<T: Scalar> Clone for DfnModel<T> {
    fn clone(&self) -> Self {
        DfnModel {
            config: self.config.clone(),
            store: self.store.clone(),
            head: self.head.clone(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            out: self.out.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

/// Pooling stages between the input and the bottleneck.
pub const DOWNSAMPLE_FACTOR: usize = 8;

impl<T: Scalar> DfnModel<T> {
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let head = Head::new(s, &config, rng)?;
        let ins = [config.encoder_channels[0], config.encoder_channels[1], config.encoder_channels[2]];
        let outs = [config.encoder_channels[1], config.encoder_channels[2], config.bottleneck_channels];
        let encoder = (0..3)
            .map(|k| EncoderStage::new(s, &format!("enc{}", k + 1), ins[k], outs[k], &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let bottleneck = Bottleneck::new(s, &config, rng)?;
        let d = &config.decoder_channels;
        let dec_in = [config.bottleneck_channels, d[0], d[1]];
        let skips = [config.encoder_channels[2], config.encoder_channels[1], config.encoder_channels[0]];
        let decoder = (0..3)
            .map(|j| DecoderStage::new(s, &format!("dec{}", j + 1), dec_in[j], skips[j], d[j], &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = OutputHead::new(s, &config, rng)?;
        let model = DfnModel {
            config,
            store,
            head,
            encoder,
            bottleneck,
            decoder,
            out,
            clamped: AtomicU64::new(0),
        };
        model.probe()?;
        Ok(model)
    }

    /// Runs the smallest valid input through the graph so every concat and
    /// conv width is checked before the model is handed out.
    fn probe(&self) -> Result<()> {
        let side = DOWNSAMPLE_FACTOR;
        let x = Tensor4::zeros(Shape4::new(1, 3, side, side)?);
        let y = self.infer(&x)?;
        let want = Shape4::new(1, 3, side * self.config.variant.scale(), side * self.config.variant.scale())?;
        if y.shape() != want {
            return Err(DfnError::invalid("model probe", format!("output {} != {want}", y.shape())));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Input elements clamped into `[0, 1]` so far.
    pub fn clamped_inputs(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check_input(input)?;
        let s = self.config.variant.scale();
        Shape4::new(input.n, 3, input.h * s, input.w * s)
    }

    fn check_input(&self, s: Shape4) -> Result<()> {
        if s.c != 3 {
            return Err(DfnError::ShapeMismatch {
                context: "model input",
                axis: "c",
                left: s.c,
                right: 3,
            });
        }
        if s.h % DOWNSAMPLE_FACTOR != 0 || s.w % DOWNSAMPLE_FACTOR != 0 {
            return Err(DfnError::invalid(
                "model input",
                format!("spatial dims {}×{} must be divisible by {DOWNSAMPLE_FACTOR}", s.h, s.w),
            ));
        }
        Ok(())
    }

    /// Validates the input geometry, clamps values into `[0, 1]` and puts
    /// the image on the tape as a constant.
    pub fn input(&self, ctx: &mut Ctx<'_, T>, x: &Tensor4<T>) -> Result<Var> {
        self.check_input(x.shape())?;
        let outside = x
            .data()
            .iter()
            .filter(|v| !(T::zero()..=T::one()).contains(*v))
            .count() as u64;
        let clamped = x.map(|v| v.max(T::zero()).min(T::one()));
        if outside > 0 {
            self.clamped.fetch_add(outside, Ordering::Relaxed);
            warn!("clamped {outside} input values into [0, 1]");
        }
        Ok(ctx.input(clamped, false))
    }

    /// Full graph on an input already on the tape.
    pub fn forward_var(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let e1 = self.head.forward(ctx, x)?;
        let e2 = self.encoder[0].forward(ctx, e1)?;
        let e3 = self.encoder[1].forward(ctx, e2)?;
        let e4 = self.encoder[2].forward(ctx, e3)?;
        let z = self.bottleneck.forward(ctx, e4)?;
        let d = self.decoder[0].forward(ctx, z, e3)?;
        let d = self.decoder[1].forward(ctx, d, e2)?;
        let d = self.decoder[2].forward(ctx, d, e1)?;
        self.out.forward(ctx, d)
    }

    pub fn forward_ctx(&self, ctx: &mut Ctx<'_, T>, x: &Tensor4<T>) -> Result<Var> {
        let v = self.input(ctx, x)?;
        self.forward_var(ctx, v)
    }

    /// Eval-mode forward; reads running statistics and mutates nothing.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval, false);
        let y = self.forward_ctx(&mut ctx, x)?;
        let mut out = ctx.tape.value(y).clone();
        out.clear_grad();
        Ok(out)
    }

    /// Forward without gradients. Train mode also folds the batch
    /// statistics into the running statistics.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        let mut ctx = Ctx::new(&self.store, Mode::Train, false);
        let y = self.forward_ctx(&mut ctx, x)?;
        let mut out = ctx.tape.value(y).clone();
        out.clear_grad();
        let outcome = ctx.finish();
        self.store.apply(outcome)?;
        Ok(out)
    }

    pub fn count_parameters(&self) -> ParameterReport {
        let rows: Vec<ParamRow> = self
            .store
            .learnable()
            .map(|(_, e)| ParamRow {
                name: e.name.clone(),
                shape: e.value.shape().dims(),
                count: e.value.len(),
            })
            .collect();
        let total = rows.iter().map(|r| r.count).sum();
        ParameterReport { rows, total }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            head_branch_width: 2,
            encoder_channels: vec![4, 4, 8],
            bottleneck_channels: 8,
            bottleneck_reduced: 4,
            bottleneck_growth: 2,
            bottleneck_layers: 2,
            decoder_channels: vec![8, 4, 4],
            cbam_reduction: 2,
            sr_mid_width: 4,
            cbam_bias: true,
        }
    }

    #[test]
    fn tiny_models_map_shapes() {
        let mut rng = Rng::new(1);
        let m = DfnModel::<f32>::build(tiny(Variant::Enhancement), &mut rng).unwrap();
        let x = Tensor4::full(Shape4::new(2, 3, 16, 24).unwrap(), 0.5);
        assert_eq!(m.infer(&x).unwrap().shape(), x.shape());
        let m = DfnModel::<f32>::build(tiny(Variant::SuperResolution), &mut rng).unwrap();
        assert_eq!(m.infer(&x).unwrap().shape(), Shape4::new(2, 3, 32, 48).unwrap());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = DfnModel::<f32>::build(tiny(Variant::Enhancement), &mut Rng::new(1)).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 3, 12, 16).unwrap());
        assert!(m.infer(&x).is_err());
        let x = Tensor4::zeros(Shape4::new(1, 1, 16, 16).unwrap());
        assert!(m.infer(&x).is_err());
    }

    #[test]
    fn out_of_range_inputs_are_clamped_and_counted() {
        let m = DfnModel::<f32>::build(tiny(Variant::Enhancement), &mut Rng::new(1)).unwrap();
        let mut x = Tensor4::full(Shape4::new(1, 3, 8, 8).unwrap(), 0.5);
        x.data_mut()[0] = -1.0;
        x.data_mut()[1] = 3.0;
        let y = m.infer(&x).unwrap();
        assert_eq!(m.clamped_inputs(), 2);
        let mut fixed = x.clone();
        fixed.data_mut()[0] = 0.0;
        fixed.data_mut()[1] = 1.0;
        assert_eq!(m.infer(&fixed).unwrap(), y);
    }

    #[test]
    fn train_forward_moves_running_stats_eval_does_not() {
        let mut m = DfnModel::<f64>::build(tiny(Variant::Enhancement), &mut Rng::new(2)).unwrap();
        let x = Tensor4::uniform(Shape4::new(2, 3, 8, 8).unwrap(), 0.0, 1.0, &mut Rng::new(3));
        let id = m.store().find("head.fuse_bn.running_mean").unwrap();
        let before = m.store().value(id).clone();
        m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(m.store().value(id), &before);
        m.forward(&x, Mode::Train).unwrap();
        assert_ne!(m.store().value(id), &before);
    }
}
