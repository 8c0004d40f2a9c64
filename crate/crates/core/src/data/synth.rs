use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CAMERA_HEIGHT: f32 = 1.5;
const MAX_DEPTH: f32 = 200.0;
const WATER: [f32; 3] = [0.10, 0.12, 0.16];
const REFLECTANCE: f32 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub max_puddles: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        SynthSpec {
            height: size,
            width: size,
            max_puddles: 3,
            seed,
        }
    }
}

/// Axis-aligned ellipse in pixel coordinates (pixel `(x, y)` has its center
/// at `(x + 0.5, y + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl Ellipse {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.rx as f64 * self.ry as f64
    }
}

/// A synthetic road scene with its exact puddle geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub sample: Sample,
    pub puddles: Vec<Ellipse>,
    /// Horizon row in pixels.
    pub horizon: f32,
}

/// Renders a road under a sky with elliptical puddles that mirror the scene
/// above the horizon. Deterministic in `spec.seed`.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    let (h, w) = (spec.height, spec.width);
    if h < 16 || w < 16 || spec.max_puddles == 0 {
        return Err(Error::Config(format!(
            "synthetic scenes need at least 16x16 pixels and one puddle, got {h}x{w} / {}",
            spec.max_puddles
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (hf, wf) = (h as f32, w as f32);
    let horizon = hf * rng.random_range(0.25..0.35);

    let background = render_background(&mut rng, h, w, horizon);

    let road_h = hf - horizon;
    let count = rng.random_range(1..=spec.max_puddles);
    let mut puddles = Vec::with_capacity(count);
    for _ in 0..count {
        let rx = wf * rng.random_range(0.08..0.18);
        let ry = (rx * rng.random_range(0.35..0.7)).min(road_h * 0.45);
        let cx = rng.random_range(rx..wf - rx);
        let cy = rng.random_range(horizon + ry + 1.0..(hf - ry).max(horizon + ry + 1.5));
        puddles.push(Ellipse { cx, cy, rx, ry });
    }

    let plane = h * w;
    let mut image = background.clone();
    let mut mask = vec![0.0f32; plane];
    for y in 0..h {
        let yc = y as f32 + 0.5;
        let mirror = ((2.0 * horizon - yc).floor().max(0.0) as usize).min(h - 1);
        for x in 0..w {
            let xc = x as f32 + 0.5;
            if !puddles.iter().any(|e| e.contains(xc, yc)) {
                continue;
            }
            mask[y * w + x] = 1.0;
            let ripple = rng.random_range(-0.02f32..0.02);
            for c in 0..3 {
                let refl = background[c * plane + mirror * w + x];
                image[c * plane + y * w + x] =
                    (REFLECTANCE * refl + (1.0 - REFLECTANCE) * WATER[c] + ripple).clamp(0.0, 1.0);
            }
        }
    }

    let focal = wf;
    let depth: Vec<f32> = (0..plane)
        .map(|i| {
            let below = (i / w) as f32 + 0.5 - horizon;
            if below <= 0.0 {
                MAX_DEPTH
            } else {
                (CAMERA_HEIGHT * focal / below).clamp(1.0, MAX_DEPTH)
            }
        })
        .collect();

    let sample = Sample::new(
        format!("synth_{:016x}", spec.seed),
        Tensor::new(vec![1, 3, h, w], image)?,
        Tensor::new(vec![1, 1, h, w], mask)?,
        Some(Tensor::new(vec![1, 1, h, w], depth)?),
    )?;
    Ok(SynthScene {
        sample,
        puddles,
        horizon,
    })
}

fn render_background(rng: &mut ChaCha8Rng, h: usize, w: usize, horizon: f32) -> Vec<f32> {
    let plane = h * w;
    let mut img = vec![0.0f32; 3 * plane];
    let sky_top = [
        rng.random_range(0.45..0.7),
        rng.random_range(0.6..0.8),
        rng.random_range(0.8..1.0),
    ];
    let sky_low = [0.85f32, 0.88, 0.92];
    let road = rng.random_range(0.3f32..0.45);
    let tint = [0.0f32, 0.005, 0.015];

    // Dark blocks standing on the horizon (trees, buildings).
    let blocks: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            let x0 = rng.random_range(0.0..w as f32);
            let bw = rng.random_range(0.05..0.25) * w as f32;
            let top = horizon * rng.random_range(0.2..0.8);
            let shade = rng.random_range(0.1f32..0.35);
            let col = [shade, shade + rng.random_range(0.0..0.15), shade * 0.9];
            (x0, x0 + bw, top, col)
        })
        .collect();

    for y in 0..h {
        let yc = y as f32 + 0.5;
        for x in 0..w {
            let xc = x as f32 + 0.5;
            let px = if yc < horizon {
                let t = yc / horizon;
                let mut c = [0.0f32; 3];
                for i in 0..3 {
                    c[i] = sky_top[i] * (1.0 - t) + sky_low[i] * t;
                }
                for &(x0, x1, top, col) in &blocks {
                    if xc >= x0 && xc < x1 && yc >= top {
                        c = col;
                    }
                }
                c
            } else {
                let n = rng.random_range(-0.06f32..0.06);
                [road + tint[0] + n, road + tint[1] + n, road + tint[2] + n]
            };
            for c in 0..3 {
                img[c * plane + y * w + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    img
}
