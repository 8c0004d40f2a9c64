//! Full network: six RSU encoder stages each followed by CSIF, five decoder
//! stages fed through SSIE fusion, and the deep-supervision fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csif::Csif;
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops::Conv2dSpec;
use crate::params::{Ctx, Mode, ParamStore};
use crate::rsu::{RsuBlock, RsuConfig, DECODER_STAGES, ENCODER_STAGES};
use crate::ssie::Ssie;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SIDE_OUTPUTS: usize = 6;
/// Total encoder downsampling factor; input sides must be multiples of it.
pub const INPUT_MULTIPLE: usize = 32;
pub const MIN_INPUT: usize = 64;

/// Parameter-name prefix of every SSIE module (used for freezing).
pub const SSIE_PREFIX: &str = "ssie";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: [RsuConfig; 6],
    pub decoder: [RsuConfig; 5],
    /// CSIF after every encoder stage; identity when false.
    pub csif: bool,
    /// SSIE fusion in front of every decoder; plain concatenation when false.
    pub ssie: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn agsenet(seed: u64) -> Self {
        ModelConfig {
            encoder: ENCODER_STAGES,
            decoder: DECODER_STAGES,
            csif: true,
            ssie: true,
            seed,
        }
    }

    /// Ablation base: the same encoder/decoder without CSIF and SSIE.
    pub fn baseline(seed: u64) -> Self {
        ModelConfig {
            csif: false,
            ssie: false,
            ..Self::agsenet(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        for (i, pair) in self.encoder.windows(2).enumerate() {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::Config(format!(
                    "encoder{} emits {} channels but encoder{} expects {}",
                    i + 1,
                    pair[0].c_out,
                    i + 2,
                    pair[1].c_in
                )));
            }
        }
        // Decoder i fuses the upsampled deeper feature with encoder i.
        for i in 0..5 {
            let deep = if i == 4 {
                self.encoder[5].c_out
            } else {
                self.decoder[i + 1].c_out
            };
            let skip = self.encoder[i].c_out;
            if deep != skip {
                return Err(Error::Config(format!(
                    "decoder{} fuses {deep} with {skip} channels; they must match",
                    i + 1
                )));
            }
            if self.decoder[i].c_in != 2 * skip {
                return Err(Error::Config(format!(
                    "decoder{} expects {} input channels, fusion yields {}",
                    i + 1,
                    self.decoder[i].c_in,
                    2 * skip
                )));
            }
        }
        Ok(())
    }
}

/// Side and fused maps as tape nodes.
#[derive(Clone, Debug)]
pub struct SaliencyVars {
    /// Decoder 1–5, then Encoder 6; each `N×1×H×W` probabilities.
    pub side: Vec<Var>,
    pub fused: Var,
    pub side_logits: Vec<Var>,
    pub fused_logits: Var,
}

impl SaliencyVars {
    /// All seven probability maps, side maps first.
    pub fn all_maps(&self) -> Vec<Var> {
        let mut v = self.side.clone();
        v.push(self.fused);
        v
    }
}

/// Materialized side and fused probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyOutputs {
    pub side: Vec<Tensor>,
    pub fused: Tensor,
}

#[derive(Clone, Debug)]
pub struct Agsenet {
    config: ModelConfig,
    store: ParamStore,
    encoders: Vec<RsuBlock>,
    csifs: Vec<Csif>,
    decoders: Vec<RsuBlock>,
    ssies: Vec<Ssie>,
    side_heads: Vec<Conv2d>,
    fuse_head: Conv2d,
}

pub fn count_parameters(store: &ParamStore) -> usize {
    store.count_parameters()
}

impl Agsenet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut encoders = Vec::new();
        let mut csifs = Vec::new();
        for (i, cfg) in config.encoder.iter().enumerate() {
            encoders.push(RsuBlock::new(&mut store, &format!("enc{}", i + 1), *cfg, &mut rng)?);
            if config.csif {
                csifs.push(Csif::new(&mut store, &format!("csif{}", i + 1), cfg.c_out, &mut rng)?);
            }
        }
        let mut decoders = Vec::new();
        let mut ssies = Vec::new();
        for (i, cfg) in config.decoder.iter().enumerate() {
            decoders.push(RsuBlock::new(&mut store, &format!("dec{}", i + 1), *cfg, &mut rng)?);
            if config.ssie {
                ssies.push(Ssie::new(&mut store, &format!("{SSIE_PREFIX}{}", i + 1), &mut rng)?);
            }
        }
        let side_channels = config
            .decoder
            .iter()
            .map(|c| c.c_out)
            .chain(std::iter::once(config.encoder[5].c_out));
        let mut side_heads = Vec::new();
        for (i, c) in side_channels.enumerate() {
            side_heads.push(Conv2d::new(
                &mut store,
                &format!("side{}", i + 1),
                c,
                1,
                3,
                Conv2dSpec::same(3, 1),
                true,
                &mut rng,
            )?);
        }
        let fuse_head = Conv2d::new(
            &mut store,
            "fuse",
            SIDE_OUTPUTS,
            1,
            1,
            Conv2dSpec::default(),
            true,
            &mut rng,
        )?;
        Ok(Agsenet {
            config,
            store,
            encoders,
            csifs,
            decoders,
            ssies,
            side_heads,
            fuse_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_parameters()
    }

    pub fn ssie_modules_mut(&mut self) -> &mut [Ssie] {
        &mut self.ssies
    }

    pub fn csif_modules(&self) -> &[Csif] {
        &self.csifs
    }

    pub fn set_ssie_frozen(&mut self, frozen: bool) {
        self.store.set_frozen(SSIE_PREFIX, frozen);
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h < MIN_INPUT || w < MIN_INPUT || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!(
                "input {h}x{w} must be at least {MIN_INPUT}x{MIN_INPUT} with sides divisible by \
                 {INPUT_MULTIPLE} (try resizing to {}x{})",
                round_size(h),
                round_size(w)
            )));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<SaliencyVars> {
        let (_, c, h, w) = ctx.tape.value(image).dims4()?;
        if c != self.config.encoder[0].c_in {
            return Err(Error::shape(
                "agsenet",
                format!("expected {} image channels, got {c}", self.config.encoder[0].c_in),
            ));
        }
        Self::check_input(h, w)?;

        let mut skips = Vec::with_capacity(6);
        let mut cur = image;
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 {
                cur = ctx.tape.maxpool2x2(cur)?;
            }
            cur = enc.forward(ctx, cur)?;
            if let Some(csif) = self.csifs.get(i) {
                cur = csif.forward(ctx, cur)?;
            }
            skips.push(cur);
        }

        let mut dec_out = vec![None; 5];
        let mut deep = skips[5];
        for i in (0..5).rev() {
            let skip = skips[i];
            let (_, _, sh, sw) = ctx.tape.value(skip).dims4()?;
            let f_h = ctx.tape.upsample_bilinear(deep, sh, sw)?;
            let fused = match self.ssies.get(i) {
                Some(ssie) => ssie.fuse(ctx, f_h, skip)?,
                None => ctx.tape.concat(&[f_h, skip], 1)?,
            };
            deep = self.decoders[i].forward(ctx, fused)?;
            dec_out[i] = Some(deep);
        }

        let taps: Vec<Var> = dec_out
            .into_iter()
            .map(|v| v.expect("every decoder ran"))
            .chain(std::iter::once(skips[5]))
            .collect();
        let mut side_logits = Vec::with_capacity(SIDE_OUTPUTS);
        for (head, tap) in self.side_heads.iter().zip(taps) {
            let mut logit = head.forward(ctx, tap)?;
            if ctx.tape.shape(logit)[2..] != [h, w] {
                logit = ctx.tape.upsample_bilinear(logit, h, w)?;
            }
            side_logits.push(logit);
        }
        let stacked = ctx.tape.concat(&side_logits, 1)?;
        let fused_logits = self.fuse_head.forward(ctx, stacked)?;
        let side = side_logits.iter().map(|&l| ctx.tape.sigmoid(l)).collect();
        let fused = ctx.tape.sigmoid(fused_logits);
        Ok(SaliencyVars {
            side,
            fused,
            side_logits,
            fused_logits,
        })
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&self, image: &Tensor) -> Result<SaliencyOutputs> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .store
            .params()
            .map(|p| tape.leaf(p.value.clone(), false))
            .collect();
        let x = tape.constant(image.clone());
        let mut ctx = Ctx::new(&mut tape, &self.store, &vars, Mode::Eval);
        let out = self.forward(&mut ctx, x)?;
        Ok(SaliencyOutputs {
            side: out.side.iter().map(|&v| tape.value(v).clone()).collect(),
            fused: tape.value(out.fused).clone(),
        })
    }
}

/// Nearest valid input side for `size`.
pub fn round_size(size: usize) -> usize {
    let r = ((size + INPUT_MULTIPLE / 2) / INPUT_MULTIPLE) * INPUT_MULTIPLE;
    r.max(MIN_INPUT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_before_compute() {
        assert!(Agsenet::check_input(64, 64).is_ok());
        assert!(Agsenet::check_input(96, 320).is_ok());
        assert!(matches!(Agsenet::check_input(32, 64), Err(Error::Config(_))));
        assert!(matches!(Agsenet::check_input(80, 64), Err(Error::Config(_))));
    }

    #[test]
    fn round_size_snaps_to_multiple() {
        assert_eq!(round_size(360), 352);
        assert_eq!(round_size(640), 640);
        assert_eq!(round_size(10), 64);
    }
}
