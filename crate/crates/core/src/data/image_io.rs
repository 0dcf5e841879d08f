//! 8-bit RGB images stored as binary PPM (P6): an ASCII header
//! `P6\n<width> <height> 255\n` followed by `width * height * 3` bytes,
//! row-major, RGB interleaved. No compression, so bytes are identical on
//! every platform.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use loda_tensor::Tensor;

use crate::error::{Error, Result};

/// Pixel normalization applied when images enter the model.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::Input(format!("PPM encoding failed: {e}")))?;
    Ok(out)
}

pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

/// `(3, H, W)` tensor of normalized pixels `(v/255 - mean) / std`.
pub fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = (px[c] as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image has positive size")
}

/// Quantize `(3, H, W)` values in `[0, 1]` to 8 bits (clamped, rounded).
pub fn from_unit_planes(planes: &[f64], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (planes[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}
