//! PNG / binary PPM decoding and PNG / PGM writing.

use std::fs;
use std::path::Path;

use dsdf_core::image::RgbImage;
use dsdf_core::Tensor;
use image::{DynamicImage, ImageFormat};

use crate::error::{io_err, Error, Result};

/// Decodes an RGB(A) PNG or P6 PPM into [0,1] RGB. Alpha is dropped,
/// 16-bit samples are scaled by 1/65535 and grayscale input is rejected.
pub fn decode(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_bytes(&bytes, path)
}

pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let format = match image::guess_format(bytes) {
        Ok(ImageFormat::Png) => ImageFormat::Png,
        Ok(ImageFormat::Pnm) if bytes.starts_with(b"P6") => ImageFormat::Pnm,
        _ => return Err(Error::UnsupportedFormat { path: path.into() }),
    };
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Decode {
        path: path.into(),
        message: e.to_string(),
    })?;
    if !img.color().has_color() {
        return Err(Error::UnsupportedFormat { path: path.into() });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = match img {
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let data = img.to_rgb16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
            RgbImage::new(w, h, data)
        }
        other => RgbImage::from_u8(w, h, &other.to_rgb8().into_raw()),
    };
    out.map_err(|e| Error::Decode {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io { path: path.into(), source },
        other => Error::Decode {
            path: path.into(),
            message: other.to_string(),
        },
    })
}

/// Writes a 2-D map as an 8-bit binary PGM, min-max stretched to 0..255.
pub fn save_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Config(format!("PGM export needs a 2-D map, got {s:?}"))),
    };
    let (lo, hi) = map.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| {
        if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }
    }));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes a 2-D map as comma-separated rows.
pub fn save_csv(map: &Tensor, path: &Path) -> Result<()> {
    let w = *map.shape().last().unwrap_or(&1);
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}
