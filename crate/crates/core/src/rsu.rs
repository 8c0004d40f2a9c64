//! Residual U-blocks (RSU-L and the dilated RSU-LD variant).
//!
//! An RSU-L block computes `F1 = ReLU(BN(conv3x3(x)))`, runs `F1` through an
//! internal U-shaped encoder/decoder to get `F2`, concatenates `[F1, F2]`
//! along channels and reduces the `2·Cout` channels back to `Cout` with a
//! 1×1 conv+BN+ReLU.
//!
//! Internal layout for depth `L` (pooled variant): `L−1` conv levels separated
//! by `L−2` 2×2 max-pools, a dilation-2 bottom conv at the coarsest level,
//! then `L−1` decoder convs that each upsample, concatenate the matching
//! encoder level and convolve. The dilated variant keeps full resolution and
//! grows the dilation `1, 2, 4, …` per level instead of pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::ConvBnRelu;
use crate::params::{Ctx, ParamStore};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RsuConfig {
    pub depth: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub dilated: bool,
}

impl RsuConfig {
    pub const fn pooled(depth: usize, c_in: usize, c_mid: usize, c_out: usize) -> Self {
        RsuConfig {
            depth,
            c_in,
            c_mid,
            c_out,
            dilated: false,
        }
    }

    pub const fn dilated(depth: usize, c_in: usize, c_mid: usize, c_out: usize) -> Self {
        RsuConfig {
            depth,
            c_in,
            c_mid,
            c_out,
            dilated: true,
        }
    }

    /// `RSU-7`, `RSU-4D`, ...
    pub fn label(&self) -> String {
        format!("RSU-{}{}", self.depth, if self.dilated { "D" } else { "" })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "{}: depth must be at least 2",
                self.label()
            )));
        }
        if self.c_in == 0 || self.c_mid == 0 || self.c_out == 0 {
            return Err(Error::Config(format!(
                "{}: channel counts must be positive, got {}/{}/{}",
                self.label(),
                self.c_in,
                self.c_mid,
                self.c_out
            )));
        }
        Ok(())
    }

    /// Number of internal 2×2 max-pool halvings.
    pub fn pool_count(&self) -> usize {
        if self.dilated {
            0
        } else {
            self.depth - 2
        }
    }

    /// Spatial sizes must be positive multiples of `2^pool_count`.
    pub fn check_input(&self, stage: &str, h: usize, w: usize) -> Result<()> {
        let unit = 1usize << self.pool_count();
        if h == 0 || w == 0 || !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "{stage} ({}): input {h}x{w} too small or not divisible for {} internal poolings \
                 (needs positive multiples of {unit})",
                self.label(),
                self.pool_count()
            )));
        }
        Ok(())
    }
}

/// Encoder stages 1–6 as `(depth, C_in, M, C_out)`.
pub const ENCODER_STAGES: [RsuConfig; 6] = [
    RsuConfig::pooled(7, 3, 16, 64),
    RsuConfig::pooled(6, 64, 16, 64),
    RsuConfig::pooled(5, 64, 16, 64),
    RsuConfig::pooled(4, 64, 16, 64),
    RsuConfig::dilated(4, 64, 32, 128),
    RsuConfig::dilated(4, 128, 32, 128),
];

/// Decoder stages 1–5 (Decoder 1 is the full-resolution one).
pub const DECODER_STAGES: [RsuConfig; 5] = [
    RsuConfig::pooled(7, 128, 16, 64),
    RsuConfig::pooled(6, 128, 16, 64),
    RsuConfig::pooled(5, 128, 16, 64),
    RsuConfig::pooled(4, 128, 16, 64),
    RsuConfig::dilated(4, 256, 32, 64),
];

#[derive(Clone, Debug)]
pub struct RsuBlock {
    cfg: RsuConfig,
    stage: String,
    input: ConvBnRelu,
    down: Vec<ConvBnRelu>,
    bottom: ConvBnRelu,
    /// `up[i]` produces decoder level `i`; `up[0]` emits `C_out` channels.
    up: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
}

impl RsuBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: RsuConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let RsuConfig {
            depth,
            c_in,
            c_mid,
            c_out,
            dilated,
        } = cfg;
        let dil = |level: usize| if dilated { 1 << level } else { 1 };
        let input = ConvBnRelu::new(store, &format!("{name}.in"), c_in, c_out, 3, 1, rng)?;
        let mut down = Vec::with_capacity(depth - 1);
        for level in 0..depth - 1 {
            let cin = if level == 0 { c_out } else { c_mid };
            down.push(ConvBnRelu::new(
                store,
                &format!("{name}.down{level}"),
                cin,
                c_mid,
                3,
                dil(level),
                rng,
            )?);
        }
        let bottom_dilation = if dilated { 1 << (depth - 1) } else { 2 };
        let bottom = ConvBnRelu::new(
            store,
            &format!("{name}.bottom"),
            c_mid,
            c_mid,
            3,
            bottom_dilation,
            rng,
        )?;
        let mut up = Vec::with_capacity(depth - 1);
        for level in 0..depth - 1 {
            let cout = if level == 0 { c_out } else { c_mid };
            up.push(ConvBnRelu::new(
                store,
                &format!("{name}.up{level}"),
                2 * c_mid,
                cout,
                3,
                dil(level),
                rng,
            )?);
        }
        let fuse = ConvBnRelu::new(store, &format!("{name}.fuse"), 2 * c_out, c_out, 1, 1, rng)?;
        Ok(RsuBlock {
            cfg,
            stage: name.to_string(),
            input,
            down,
            bottom,
            up,
            fuse,
        })
    }

    pub fn config(&self) -> &RsuConfig {
        &self.cfg
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (_, c, h, w) = ctx.tape.value(x).dims4()?;
        if c != self.cfg.c_in {
            return Err(Error::shape(
                "rsu",
                format!(
                    "{} ({}) expects {} input channels, got {c}",
                    self.stage,
                    self.cfg.label(),
                    self.cfg.c_in
                ),
            ));
        }
        self.cfg.check_input(&self.stage, h, w)?;

        let f1 = self.input.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut cur = f1;
        for (level, conv) in self.down.iter().enumerate() {
            if level > 0 && !self.cfg.dilated {
                cur = ctx.tape.maxpool2x2(cur)?;
            }
            cur = conv.forward(ctx, cur)?;
            skips.push(cur);
        }
        let mut cur = self.bottom.forward(ctx, cur)?;
        for level in (0..self.up.len()).rev() {
            let skip = skips[level];
            let (_, _, sh, sw) = ctx.tape.value(skip).dims4()?;
            if ctx.tape.shape(cur)[2..] != [sh, sw] {
                cur = ctx.tape.upsample_bilinear(cur, sh, sw)?;
            }
            let cat = ctx.tape.concat(&[cur, skip], 1)?;
            cur = self.up[level].forward(ctx, cat)?;
        }
        let f3 = ctx.tape.concat(&[f1, cur], 1)?;
        self.fuse.forward(ctx, f3)
    }
}
