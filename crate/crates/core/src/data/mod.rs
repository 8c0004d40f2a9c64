//! Samples, PNG/depth IO, augmentation, synthetic scenes and fog synthesis.

mod augment;
mod fog;
mod io;
mod manifest;
mod synth;

pub use augment::{augment, augment_with, AugmentParams, BRIGHTNESS_RANGE, SATURATION_RANGE};
pub use fog::{synth_fog, FogParams};
pub use io::{
    load_depth, load_image, load_mask, load_pair, save_depth_png, save_gray_png, save_raw_f32, save_rgb_png,
    load_raw_f32,
};
pub use manifest::{load_manifest, load_samples, write_manifest, ManifestEntry};
pub use synth::{synth_scene, Ellipse, SynthScene, SynthSpec};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary mask and optional metric depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1×3×H×W`, values in [0, 1].
    pub image: Tensor,
    /// `1×1×H×W`, values in {0, 1}.
    pub mask: Tensor,
    /// `1×1×H×W`, meters, positive.
    pub depth: Option<Tensor>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor, depth: Option<Tensor>) -> Result<Self> {
        let (n, c, h, w) = image.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Data(format!("image must be 1x3xHxW, got {:?}", image.shape())));
        }
        if mask.shape() != [1, 1, h, w] {
            return Err(Error::Data(format!(
                "mask {:?} not aligned with image {h}x{w}",
                mask.shape()
            )));
        }
        if let Some(d) = &depth {
            if d.shape() != [1, 1, h, w] {
                return Err(Error::Data(format!(
                    "depth {:?} not aligned with image {h}x{w}",
                    d.shape()
                )));
            }
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
            depth,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }

    /// Fraction of foreground pixels.
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum_f64() / self.mask.numel() as f64
    }
}

/// Concatenates `1×C×H×W` tensors along the batch axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let inner = &first.shape()[1..];
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape()[0] != 1 || &t.shape()[1..] != inner {
            return Err(Error::shape(
                "stack",
                format!("{:?} does not match {:?}", t.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(inner);
    Tensor::new(shape, data)
}

/// Deterministic 80/20 train/validation assignment by hashed sample id.
pub fn is_validation(id: &str) -> bool {
    let digest = Sha256::digest(id.as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    v % 5 == 0
}

pub fn split_train_val(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| !is_validation(&s.id))
}

/// Bilinear resize of every plane of an `N×C×H×W` tensor.
pub fn resize_bilinear(t: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if (h, w) == (th, tw) {
        return Ok(t.clone());
    }
    let y = crate::ops::resize::bilinear(t.data(), n * c, h, w, th, tw);
    Tensor::new(vec![n, c, th, tw], y)
}

/// Nearest-neighbour resize (half-pixel centers), used for masks.
pub fn resize_nearest(t: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if (h, w) == (th, tw) {
        return Ok(t.clone());
    }
    let src = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut data = Vec::with_capacity(n * c * th * tw);
    for p in 0..n * c {
        let plane = &t.data()[p * h * w..(p + 1) * h * w];
        for y in 0..th {
            let sy = src(y, th, h);
            for x in 0..tw {
                data.push(plane[sy * w + src(x, tw, w)]);
            }
        }
    }
    Tensor::new(vec![n, c, th, tw], data)
}
