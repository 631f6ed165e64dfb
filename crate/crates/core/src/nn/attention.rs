use crate::autograd::Var;
use crate::error::{DfnError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{Conv2d, ConvSpec, Ctx, ParamStore};

/// Convolutional block attention: channel gating from a shared two-layer
/// MLP over average- and max-pooled descriptors, then spatial gating from a
/// 7×7 conv over channel-pooled maps. Output shape equals input shape.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub spatial: Conv2d,
}

impl Cbam {
    pub const SPATIAL_KERNEL: usize = 7;

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(DfnError::invalid(
                "cbam",
                format!("{channels} channels not divisible by reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        let dense = |c_in, c_out, k| ConvSpec {
            bias,
            ..ConvSpec::same(c_in, c_out, k)
        };
        let fc1 = Conv2d::new(store, &format!("{name}.fc1"), dense(channels, hidden, 1), rng)?;
        let fc2 = Conv2d::new(store, &format!("{name}.fc2"), dense(hidden, channels, 1), rng)?;
        let spatial = Conv2d::new(store, &format!("{name}.spatial"), dense(2, 1, Self::SPATIAL_KERNEL), rng)?;
        Ok(Cbam {
            channels,
            reduction,
            fc1,
            fc2,
            spatial,
        })
    }

    fn mlp<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, v)?;
        let h = ctx.tape.relu(h);
        self.fc2.forward(ctx, h)
    }

    pub fn channel_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        if c != self.channels {
            return Err(DfnError::ShapeMismatch {
                context: "channel attention width",
                axis: "c",
                left: c,
                right: self.channels,
            });
        }
        let avg = ctx.tape.global_avg_pool(x)?;
        let max = ctx.tape.global_max_pool(x)?;
        let a = self.mlp(ctx, avg)?;
        let m = self.mlp(ctx, max)?;
        let logits = ctx.tape.add(a, m)?;
        let s = ctx.tape.sigmoid(logits);
        ctx.tape.mul_channel_scale(x, s)
    }

    pub fn spatial_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mean = ctx.tape.channel_mean(x)?;
        let max = ctx.tape.channel_max(x)?;
        let pooled = ctx.tape.concat_channels(mean, max)?;
        let logits = self.spatial.forward(ctx, pooled)?;
        let m = ctx.tape.sigmoid(logits);
        ctx.tape.mul_spatial_scale(x, m)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.channel_attention(ctx, x)?;
        self.spatial_attention(ctx, y)
    }
}
