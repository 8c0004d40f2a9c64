//! Spatial Saliency Information Exploration: fuses an upsampled deep feature
//! `f_h` with the symmetric encoder feature `f_l`.
//!
//! The noise-rejection branch gates both inputs with `SA_n(f_h − f_l)`, the
//! edge-refinement branch with `SA_e(f_h ⊙ f_l)`. Gated features are summed
//! per level and concatenated: `[F'_h, F'_l]`, `2C` channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops::Conv2dSpec;
use crate::params::{Ctx, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const SA_KERNEL: usize = 7;

/// Channel max and mean → 7×7 conv → sigmoid, giving an `N×1×H×W` gate.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            2,
            1,
            SA_KERNEL,
            Conv2dSpec::same(SA_KERNEL, 1),
            true,
            rng,
        )?;
        Ok(SpatialAttention { conv })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let max = ctx.tape.channel_max(x)?;
        let mean = ctx.tape.channel_mean(x)?;
        let pooled = ctx.tape.concat(&[max, mean], 1)?;
        let logits = self.conv.forward(ctx, pooled)?;
        Ok(ctx.tape.sigmoid(logits))
    }
}

/// Replaces both attention gates, for wiring checks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum GateOverride {
    #[default]
    None,
    Constant(f32),
}

#[derive(Clone, Debug)]
pub struct Ssie {
    pub noise: SpatialAttention,
    pub edge: SpatialAttention,
    pub gate_override: GateOverride,
}

#[derive(Clone, Copy, Debug)]
pub struct SsieTrace {
    /// `F_n = f_h − f_l`
    pub noise_input: Var,
    /// `F_e = f_h ⊙ f_l`
    pub edge_input: Var,
    pub noise_gate: Var,
    pub edge_gate: Var,
    pub output: Var,
}

impl Ssie {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        Ok(Ssie {
            noise: SpatialAttention::new(store, &format!("{name}.noise"), rng)?,
            edge: SpatialAttention::new(store, &format!("{name}.edge"), rng)?,
            gate_override: GateOverride::None,
        })
    }

    fn gate(&self, ctx: &mut Ctx<'_>, sa: &SpatialAttention, x: Var) -> Result<Var> {
        match self.gate_override {
            GateOverride::None => sa.forward(ctx, x),
            GateOverride::Constant(v) => {
                let (n, _, h, w) = ctx.tape.value(x).dims4()?;
                Ok(ctx.tape.constant(Tensor::full(&[n, 1, h, w], v)))
            }
        }
    }

    pub fn fuse_traced(&self, ctx: &mut Ctx<'_>, f_h: Var, f_l: Var) -> Result<SsieTrace> {
        if ctx.tape.shape(f_h) != ctx.tape.shape(f_l) {
            return Err(Error::shape(
                "ssie",
                format!(
                    "high-level {:?} and low-level {:?} features differ",
                    ctx.tape.shape(f_h),
                    ctx.tape.shape(f_l)
                ),
            ));
        }
        let (_, c, _, _) = ctx.tape.value(f_h).dims4()?;
        let noise_input = ctx.tape.sub(f_h, f_l)?;
        let edge_input = ctx.tape.mul(f_h, f_l)?;
        let noise_gate = self.gate(ctx, &self.noise, noise_input)?;
        let edge_gate = self.gate(ctx, &self.edge, edge_input)?;
        let gn = ctx.tape.broadcast_channels(noise_gate, c)?;
        let ge = ctx.tape.broadcast_channels(edge_gate, c)?;

        let h_n = ctx.tape.mul(gn, f_h)?;
        let h_e = ctx.tape.mul(ge, f_h)?;
        let l_n = ctx.tape.mul(gn, f_l)?;
        let l_e = ctx.tape.mul(ge, f_l)?;
        let high = ctx.tape.add(h_n, h_e)?;
        let low = ctx.tape.add(l_n, l_e)?;
        let output = ctx.tape.concat(&[high, low], 1)?;
        Ok(SsieTrace {
            noise_input,
            edge_input,
            noise_gate,
            edge_gate,
            output,
        })
    }

    pub fn fuse(&self, ctx: &mut Ctx<'_>, f_h: Var, f_l: Var) -> Result<Var> {
        Ok(self.fuse_traced(ctx, f_h, f_l)?.output)
    }
}
