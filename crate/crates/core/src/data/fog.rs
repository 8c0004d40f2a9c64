use super::Sample;
use crate::error::{Error, Result};

/// Homogeneous fog: extinction `beta` (1/m) and atmospheric light per channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FogParams {
    pub beta: f32,
    pub light: [f32; 3],
}

impl FogParams {
    pub fn new(beta: f32, light: f32) -> Self {
        FogParams {
            beta,
            light: [light; 3],
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("fog beta must be >= 0, got {}", self.beta)));
        }
        if self.light.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config(format!(
                "atmospheric light must lie in [0, 1], got {:?}",
                self.light
            )));
        }
        Ok(())
    }

    /// Transmission `exp(−β·d)`.
    pub fn transmission(&self, depth: f32) -> f32 {
        (-self.beta * depth).exp()
    }
}

/// `I = R·t + L·(1 − t)` per pixel, clamped to [0, 1]. Requires depth.
pub fn synth_fog(sample: &Sample, fog: &FogParams) -> Result<Sample> {
    fog.validate()?;
    let depth = sample
        .depth
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: fog synthesis needs a depth map", sample.id)))?;
    let plane = sample.height() * sample.width();
    let mut image = sample.image.clone();
    for (c, chan) in image.data_mut().chunks_exact_mut(plane).enumerate() {
        let light = fog.light[c];
        for (x, &d) in chan.iter_mut().zip(depth.data()) {
            let t = fog.transmission(d);
            *x = (*x * t + light * (1.0 - t)).clamp(0.0, 1.0);
        }
    }
    Sample::new(sample.id.clone(), image, sample.mask.clone(), sample.depth.clone())
}
