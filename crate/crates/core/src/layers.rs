//! Convolution and normalization layers built on [`crate::Ctx`].

use rand::Rng;

use crate::error::Result;
use crate::ops::Conv2dSpec;
use crate::params::{Ctx, Init, ParamId, ParamStore, StatsId};
use crate::tape::Var;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add_init(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::KaimingUniform { fan_in },
            rng,
        )?;
        let bias = if bias {
            Some(store.add_init(
                format!("{name}.bias"),
                &[c_out],
                Init::FanInUniform { fan_in },
                rng,
            )?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let gamma = store.add_init(format!("{name}.gamma"), &[channels], Init::Constant(1.0), rng)?;
        let beta = store.add_init(format!("{name}.beta"), &[channels], Init::Constant(0.0), rng)?;
        let stats = store.add_running_stats(name, channels);
        Ok(BatchNorm2d { gamma, beta, stats })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let mode = ctx.bn_mode(self.stats);
        ctx.tape.batch_norm(x, g, b, mode)
    }
}

/// Conv → BN → ReLU with "same" padding.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            c_in,
            c_out,
            kernel,
            Conv2dSpec::same(kernel, dilation),
            true,
            rng,
        )?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), c_out, rng)?;
        Ok(ConvBnRelu { conv, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}
