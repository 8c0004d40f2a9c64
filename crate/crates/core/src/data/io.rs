use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mask pixels farther than this from both 0 and 255 count as ambiguous.
const MASK_TOLERANCE: u8 = 32;
/// Loading fails if more than this fraction of mask pixels is ambiguous.
const MAX_AMBIGUOUS_FRACTION: f64 = 0.05;

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// 8-bit RGB image as a `1×3×H×W` tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// 8-bit grayscale mask binarized at 0.5. Masks whose maximum is 1 are read
/// as `{0, 1}` label maps.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let max = raw.iter().copied().max().unwrap_or(0);
    if max <= 1 {
        return Tensor::new(vec![1, 1, h, w], raw.iter().map(|&v| v as f32).collect());
    }
    let ambiguous = raw
        .iter()
        .filter(|&&v| v > MASK_TOLERANCE && v < 255 - MASK_TOLERANCE)
        .count();
    if ambiguous as f64 > MAX_AMBIGUOUS_FRACTION * raw.len() as f64 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!(
                "mask is not binary: {ambiguous} of {} pixels are neither near 0 nor near 255",
                raw.len()
            ),
        });
    }
    Tensor::new(
        vec![1, 1, h, w],
        raw.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect(),
    )
}

/// Depth in meters from a 16-bit millimeter PNG or a raw f32 blob
/// (`u32 H`, `u32 W`, then `H·W` little-endian f32).
pub fn load_depth(path: &Path) -> Result<Tensor> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let t = if is_png {
        let img = open(path)?.to_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Tensor::new(
            vec![1, 1, h, w],
            img.into_raw().iter().map(|&mm| mm as f32 / 1000.0).collect(),
        )?
    } else {
        load_raw_f32(path)?
    };
    if let Some(bad) = t.data().iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(Error::Data(format!(
            "{}: depth must be positive and finite, found {bad}",
            path.display()
        )));
    }
    Ok(t)
}

pub fn load_raw_f32(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!("{}: truncated header", path.display())));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(Error::Data(format!(
            "{}: header says {h}x{w} but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![1, 1, h, w], data)
}

pub fn save_raw_f32(path: &Path, plane: &Tensor) -> Result<()> {
    let (_, _, h, w) = plane.dims4()?;
    let mut bytes = Vec::with_capacity(8 + 4 * h * w);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in &plane.data()[..h * w] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    if image.shape()[2..] != mask.shape()[2..] {
        return Err(Error::Data(format!(
            "{} is {:?} but mask {} is {:?}",
            image_path.display(),
            &image.shape()[2..],
            mask_path.display(),
            &mask.shape()[2..]
        )));
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(id, image, mask, None)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn save_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::Data(format!("expected 3 channels, got {c}")));
    }
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| image.data()[(ch * h + y as usize) * w + x as usize];
        Rgb([to_u8(at(0)), to_u8(at(1)), to_u8(at(2))])
    });
    save(path, img.save(path))
}

/// First plane of `image` as 8-bit gray, `round(v·255)`.
pub fn save_gray_png(path: &Path, plane: &Tensor) -> Result<()> {
    let (_, _, h, w) = plane.dims4()?;
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(plane.data()[y as usize * w + x as usize])])
    });
    save(path, img.save(path))
}

/// Depth in meters as 16-bit millimeters.
pub fn save_depth_png(path: &Path, depth: &Tensor) -> Result<()> {
    let (_, _, h, w) = depth.dims4()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let m = depth.data()[y as usize * w + x as usize];
        Luma([(m * 1000.0).round().clamp(1.0, u16::MAX as f32) as u16])
    });
    save(path, img.save(path))
}
