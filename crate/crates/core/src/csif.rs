//! Channel Saliency Information Focus: spatial context perception (SCIP)
//! followed by channel saliency interaction (CSII).
//!
//! SCIP is criss-cross attention with the query and key projected to a
//! single channel each; its aggregation is added back onto the input.
//!
//! CSII builds a `C×C` channel-similarity map from globally pooled query and
//! key projections, `A = softmax_rows(Q'·K'ᵀ)`, aggregates `P = A·V` over the
//! flattened value projection and returns `α·P + x` with a learnable scalar
//! `α` initialized to 0.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops::Conv2dSpec;
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn pointwise(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) -> Result<Conv2d> {
    Conv2d::new(store, name, c_in, c_out, 1, Conv2dSpec::default(), true, rng)
}

#[derive(Clone, Debug)]
pub struct Scip {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
}

/// Intermediate SCIP values, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ScipTrace {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub aggregated: Var,
    pub output: Var,
}

impl Scip {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Scip {
            query: pointwise(store, &format!("{name}.query"), channels, 1, rng)?,
            key: pointwise(store, &format!("{name}.key"), channels, 1, rng)?,
            value: pointwise(store, &format!("{name}.value"), channels, channels, rng)?,
        })
    }

    pub fn forward_traced(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<ScipTrace> {
        let query = self.query.forward(ctx, x)?;
        let key = self.key.forward(ctx, x)?;
        let value = self.value.forward(ctx, x)?;
        let aggregated = ctx.tape.criss_cross(query, key, value)?;
        let output = ctx.tape.add(aggregated, x)?;
        Ok(ScipTrace {
            query,
            key,
            value,
            aggregated,
            output,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.output)
    }
}

#[derive(Clone, Debug)]
pub struct Csii {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub alpha: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CsiiTrace {
    /// Row-stochastic channel attention, `[N, C, C]`.
    pub attention: Var,
    /// `A·V` reshaped to `[N, C, H, W]`, before scaling by `α`.
    pub aggregated: Var,
    pub output: Var,
}

impl Csii {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Csii {
            query: pointwise(store, &format!("{name}.query"), channels, channels, rng)?,
            key: pointwise(store, &format!("{name}.key"), channels, channels, rng)?,
            value: pointwise(store, &format!("{name}.value"), channels, channels, rng)?,
            alpha: store.add(format!("{name}.alpha"), Tensor::scalar(0.0), Init::Constant(0.0))?,
        })
    }

    pub fn forward_traced(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<CsiiTrace> {
        let (n, c, h, w) = ctx.tape.value(x).dims4()?;
        let q = self.query.forward(ctx, x)?;
        let q = ctx.tape.global_avg_pool(q)?;
        let q = ctx.tape.reshape(q, &[n, c, 1])?;
        let k = self.key.forward(ctx, x)?;
        let k = ctx.tape.global_avg_pool(k)?;
        let k = ctx.tape.reshape(k, &[n, 1, c])?;
        let energy = ctx.tape.matmul(q, k)?;
        let attention = ctx.tape.softmax(energy, 2)?;

        let v = self.value.forward(ctx, x)?;
        let v = ctx.tape.reshape(v, &[n, c, h * w])?;
        let p = ctx.tape.matmul(attention, v)?;
        let aggregated = ctx.tape.reshape(p, &[n, c, h, w])?;
        let alpha = ctx.param(self.alpha);
        let scaled = ctx.tape.scale(aggregated, alpha)?;
        let output = ctx.tape.add(scaled, x)?;
        Ok(CsiiTrace {
            attention,
            aggregated,
            output,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.output)
    }
}

#[derive(Clone, Debug)]
pub struct Csif {
    pub scip: Scip,
    pub csii: Csii,
}

#[derive(Clone, Copy, Debug)]
pub struct CsifTrace {
    pub scip: ScipTrace,
    pub csii: CsiiTrace,
}

impl Csif {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Csif {
            scip: Scip::new(store, &format!("{name}.scip"), channels, rng)?,
            csii: Csii::new(store, &format!("{name}.csii"), channels, rng)?,
        })
    }

    pub fn forward_traced(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<CsifTrace> {
        let scip = self.scip.forward_traced(ctx, x)?;
        let csii = self.csii.forward_traced(ctx, scip.output)?;
        Ok(CsifTrace { scip, csii })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.csii.output)
    }
}

/// One `C×C` channel attention matrix `A`, where `A[i][j]` weighs the
/// contribution of channel `j` to channel `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionMap {
    channels: usize,
    data: Vec<f32>,
}

impl ChannelAttentionMap {
    /// Extracts batch item `n` from a CSII attention node.
    pub fn from_tape(tape: &Tape, attention: Var, n: usize) -> Result<Self> {
        let t = tape.value(attention);
        let &[batch, c, c2] = t.shape() else {
            return Err(Error::shape("channel_attention", format!("{:?}", t.shape())));
        };
        if c != c2 || n >= batch {
            return Err(Error::shape(
                "channel_attention",
                format!("item {n} of {:?}", t.shape()),
            ));
        }
        Ok(ChannelAttentionMap {
            channels: c,
            data: t.data()[n * c * c..(n + 1) * c * c].to_vec(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.channels + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_sums(&self) -> Vec<f32> {
        (0..self.channels)
            .map(|i| self.row(i).iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    }
}
