//! Hybrid BCE + Dice loss with learnable scales, summed over every side
//! output and the fused map.

use crate::error::{Error, Result};
use crate::model::SaliencyVars;
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BCE_CLAMP: f32 = 1e-7;
pub const DICE_SMOOTH: f32 = 1.0;

/// Learnable `γ` (BCE weight) and `δ` (Dice weight), both starting at 1.
#[derive(Clone, Debug)]
pub struct LossScales {
    store: ParamStore,
    gamma: ParamId,
    delta: ParamId,
}

impl Default for LossScales {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

impl LossScales {
    pub fn new(gamma: f32, delta: f32) -> Self {
        let mut store = ParamStore::new();
        let gamma = store
            .add("loss.gamma", Tensor::scalar(gamma), Init::Constant(1.0))
            .expect("fresh store");
        let delta = store
            .add("loss.delta", Tensor::scalar(delta), Init::Constant(1.0))
            .expect("fresh store");
        LossScales {
            store,
            gamma,
            delta,
        }
    }

    pub fn gamma(&self) -> f32 {
        self.store.value(self.gamma).item()
    }

    pub fn delta(&self) -> f32 {
        self.store.value(self.delta).item()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Binds `(γ, δ)` on the tape as trainable leaves, plus the handles for
    /// gradient accumulation.
    pub fn bind(&self, tape: &mut Tape) -> (Var, Var, Vec<Var>) {
        let vars = self.store.bind(tape);
        (vars[0], vars[1], vars)
    }
}

fn check_pair(tape: &Tape, op: &'static str, pred: Var, target: Var) -> Result<()> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(
            op,
            format!(
                "prediction {:?} vs target {:?}",
                tape.shape(pred),
                tape.shape(target)
            ),
        ));
    }
    Ok(())
}

/// Mean over pixels of `−[t·ln p + (1−t)·ln(1−p)]`, with `p` and `1−p` each
/// clamped below at 1e-7.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "bce_loss", pred, target)?;
    // Clamping 1 − p separately keeps the lower bound exact in f32.
    let p = tape.clamp(pred, BCE_CLAMP, 1.0);
    let ln_p = tape.ln(p);
    let neg_p = tape.mul_scalar(pred, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let q = tape.clamp(one_minus_p, BCE_CLAMP, 1.0);
    let ln_q = tape.ln(q);
    let neg_t = tape.mul_scalar(target, -1.0);
    let one_minus_t = tape.add_scalar(neg_t, 1.0);
    let pos = tape.mul(target, ln_p)?;
    let neg = tape.mul(one_minus_t, ln_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll);
    Ok(tape.mul_scalar(mean, -1.0))
}

/// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)` with `ε = 1`.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "dice_loss", pred, target)?;
    let inter = tape.mul(pred, target)?;
    let inter = tape.sum(inter);
    let num = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let sp = tape.sum(pred);
    let st = tape.sum(target);
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg = tape.mul_scalar(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct HybridTerms {
    pub bce: Var,
    pub dice: Var,
    pub total: Var,
}

/// `γ·BCE + δ·Dice`.
pub fn hybrid_loss(tape: &mut Tape, pred: Var, target: Var, gamma: Var, delta: Var) -> Result<HybridTerms> {
    let bce = bce_loss(tape, pred, target)?;
    let dice = dice_loss(tape, pred, target)?;
    let wb = tape.scale(bce, gamma)?;
    let wd = tape.scale(dice, delta)?;
    let total = tape.add(wb, wd)?;
    Ok(HybridTerms { bce, dice, total })
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: Var,
    /// One entry per side map, then the fused map.
    pub terms: Vec<HybridTerms>,
}

/// Deep supervision: hybrid loss on each side map plus the fused map.
pub fn total_loss_over(tape: &mut Tape, maps: &[Var], target: Var, gamma: Var, delta: Var) -> Result<TotalLoss> {
    let mut terms = Vec::with_capacity(maps.len());
    let mut total: Option<Var> = None;
    for &m in maps {
        let t = hybrid_loss(tape, m, target, gamma, delta)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, t.total)?,
            None => t.total,
        });
        terms.push(t);
    }
    let total = total.ok_or_else(|| Error::Config("total loss over zero maps".into()))?;
    Ok(TotalLoss { total, terms })
}

pub fn total_loss(tape: &mut Tape, outputs: &SaliencyVars, target: Var, gamma: Var, delta: Var) -> Result<TotalLoss> {
    total_loss_over(tape, &outputs.all_maps(), target, gamma, delta)
}
