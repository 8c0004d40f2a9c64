use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{resize_bilinear, resize_nearest, Sample};
use crate::error::Result;
use crate::tensor::Tensor;

pub const BRIGHTNESS_RANGE: (f32, f32) = (0.8, 1.2);
pub const SATURATION_RANGE: (f32, f32) = (0.8, 1.2);

/// One draw of the augmentation pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub brightness: f32,
    pub saturation: f32,
    /// Output `(height, width)`.
    pub size: (usize, usize),
}

impl AugmentParams {
    pub fn identity(size: (usize, usize)) -> Self {
        AugmentParams {
            flip: false,
            brightness: 1.0,
            saturation: 1.0,
            size,
        }
    }

    pub fn sample(seed: u64, size: (usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AugmentParams {
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1),
            saturation: rng.random_range(SATURATION_RANGE.0..=SATURATION_RANGE.1),
            size,
        }
    }
}

/// Random flip, brightness and saturation jitter, then resize to `size`.
/// The same seed always yields the same output.
pub fn augment(sample: &Sample, seed: u64, size: (usize, usize)) -> Result<(Sample, AugmentParams)> {
    let params = AugmentParams::sample(seed, size);
    Ok((augment_with(sample, &params)?, params))
}

pub fn augment_with(sample: &Sample, p: &AugmentParams) -> Result<Sample> {
    let (th, tw) = p.size;
    let mut image = resize_bilinear(&sample.image, th, tw)?;
    let mut mask = resize_nearest(&sample.mask, th, tw)?;
    let mut depth = sample
        .depth
        .as_ref()
        .map(|d| resize_bilinear(d, th, tw))
        .transpose()?;
    if p.flip {
        flip_horizontal(&mut image, tw);
        flip_horizontal(&mut mask, tw);
        if let Some(d) = depth.as_mut() {
            flip_horizontal(d, tw);
        }
    }
    if p.saturation != 1.0 {
        scale_saturation(&mut image, p.saturation);
    }
    if p.brightness != 1.0 {
        for v in image.data_mut() {
            *v = (*v * p.brightness).clamp(0.0, 1.0);
        }
    }
    Sample::new(sample.id.clone(), image, mask, depth)
}

fn flip_horizontal(t: &mut Tensor, w: usize) {
    for row in t.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Scales HSV saturation by `factor` while keeping hue and value.
///
/// At fixed hue and value every channel is `v − v·s·g(hue)`, so scaling `s`
/// moves each channel toward `v` linearly.
fn scale_saturation(image: &mut Tensor, factor: f32) {
    let plane = image.shape()[2] * image.shape()[3];
    let data = image.data_mut();
    for i in 0..plane {
        let (r, g, b) = (data[i], data[plane + i], data[2 * plane + i]);
        let v = r.max(g).max(b);
        let min = r.min(g).min(b);
        if v <= 0.0 || v == min {
            continue;
        }
        let s = (v - min) / v;
        let s_new = (s * factor).clamp(0.0, 1.0);
        let k = s_new / s;
        for c in 0..3 {
            let x = &mut data[c * plane + i];
            *x = (v - (v - *x) * k).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        let image = Tensor::from_fn(&[1, 3, 8, 12], |i| ((i * 37) % 101) as f32 / 100.0);
        let mask = Tensor::from_fn(&[1, 1, 8, 12], |i| (i % 12 < 4) as u8 as f32);
        Sample::new("s", image, mask, None).unwrap()
    }

    #[test]
    fn same_seed_same_output() {
        let s = sample();
        let (a, pa) = augment(&s, 42, (16, 16)).unwrap();
        let (b, pb) = augment(&s, 42, (16, 16)).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a, b);
    }

    #[test]
    fn flip_moves_mask_with_image() {
        let s = sample();
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::identity((8, 12))
        };
        let f = augment_with(&s, &p).unwrap();
        assert_eq!(f.mask.get4(0, 0, 0, 11), 1.0);
        assert_eq!(f.mask.get4(0, 0, 0, 0), 0.0);
        assert_eq!(f.image.get4(0, 1, 3, 11), s.image.get4(0, 1, 3, 0));
    }

    #[test]
    fn saturation_keeps_value_and_gray() {
        // Planar layout: pixel 0 is (0.8, 0.4, 0.2), pixel 1 is gray 0.5.
        let mut t = Tensor::new(vec![1, 3, 1, 2], vec![0.8, 0.5, 0.4, 0.5, 0.2, 0.5]).unwrap();
        scale_saturation(&mut t, 0.5);
        // v = 0.8, s = 0.75 -> 0.375: channels move halfway to v.
        let want = [0.8, 0.5, 0.6, 0.5, 0.5, 0.5];
        for (got, want) in t.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{:?}", t.data());
        }
        let mut gray = Tensor::full(&[1, 3, 2, 2], 0.3);
        scale_saturation(&mut gray, 1.2);
        assert!(gray.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn drawn_factors_in_range() {
        for seed in 0..200 {
            let p = AugmentParams::sample(seed, (4, 4));
            assert!((0.8..=1.2).contains(&p.brightness));
            assert!((0.8..=1.2).contains(&p.saturation));
        }
    }
}
