//! RGB images, resizing, normalization, color transforms and LBP codes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Smallest side accepted as a resize target.
pub const MIN_SIDE: usize = 8;

pub const GRAY_WEIGHTS: [f64; 3] = [0.2989, 0.5870, 0.1140];

/// Interleaved RGB image with channel values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(dim_err(format!("empty image {width}×{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(dim_err(format!(
                "{width}×{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from 8-bit samples using `v / 255`.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Quantizes back to 8-bit samples (round to nearest).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| math::round(v * 255.0) as u8).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone()).expect("image invariant")
    }

    fn map_pixels(&self, f: impl Fn([f64; 3]) -> f64) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| {
            let p = &self.data[i * 3..i * 3 + 3];
            f([p[0], p[1], p[2]])
        })
    }

    pub fn channel(&self, c: usize) -> Tensor {
        self.map_pixels(|p| p[c])
    }
}

/// Bilinear resize to `target`×`target` using pixel-center alignment.
/// Model inputs must be at least [`MIN_SIDE`] on a side.
pub fn resize(img: &RgbImage, target: usize) -> Result<RgbImage> {
    if target < MIN_SIDE {
        return Err(dim_err(format!("resize target {target} below minimum {MIN_SIDE}")));
    }
    bilinear(img, target, target)
}

/// Bilinear interpolation to any positive `width`×`height`.
pub fn bilinear(img: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(dim_err(format!("cannot resize to {width}×{height}")));
    }
    if img.width == width && img.height == height {
        return Ok(img.clone());
    }
    let xs = sample_axis(img.width, width);
    let ys = sample_axis(img.height, height);
    let mut data = Vec::with_capacity(width * height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.data[(y * img.width + x) * 3 + c];
                let top = lerp(at(x0, y0), at(x1, y0), fx);
                let bottom = lerp(at(x0, y1), at(x1, y1), fx);
                data.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
            }
        }
    }
    RgbImage::new(width, height, data)
}

/// `a + (b − a)·t`, exact when `a == b`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Per output index: (lower source index, upper source index, upper weight).
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = math::floor(pos) as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// H×W×3 tensor with values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage(pub Tensor);

pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.5;

/// `(v − mean) / std` per channel value.
pub fn normalize(img: &RgbImage, mean: f64, std: f64) -> Result<NormalizedImage> {
    if std == 0.0 || !std.is_finite() {
        return Err(Error::Config(format!("normalization std must be non-zero, got {std}")));
    }
    let t = img.to_tensor();
    Ok(NormalizedImage(Tensor::from_fn(t.shape(), |i| (t.data()[i] - mean) / std)))
}

pub fn denormalize(img: &NormalizedImage, mean: f64, std: f64) -> Tensor {
    let t = &img.0;
    Tensor::from_fn(t.shape(), |i| t.data()[i] * std + mean)
}

/// `0.2989 R + 0.5870 G + 0.1140 B`
pub fn to_grayscale(img: &RgbImage) -> Tensor {
    img.map_pixels(|[r, g, b]| GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b)
}

/// Full-range BT.601 Cr, offset by +0.5 into [0,1].
pub fn cr_of(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    (0.5 * r - 0.418688 * g - 0.081312 * b + 0.5).clamp(0.0, 1.0)
}

pub fn to_ycbcr_cr(img: &RgbImage) -> Tensor {
    img.map_pixels(cr_of)
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        math::powf((c + 0.055) / 1.055, 2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        math::cbrt(t)
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIE a* (D65) of an sRGB pixel, unscaled.
pub fn lab_a_of(rgb: [f64; 3]) -> f64 {
    let lin = rgb.map(srgb_to_linear);
    let row = |r: &[f64; 3]| r[0] * lin[0] + r[1] * lin[1] + r[2] * lin[2];
    // White point is the image of (1,1,1) so the neutral axis maps to a* = 0.
    let white = |r: &[f64; 3]| r[0] + r[1] + r[2];
    let x = row(&SRGB_TO_XYZ[0]) / white(&SRGB_TO_XYZ[0]);
    let y = row(&SRGB_TO_XYZ[1]) / white(&SRGB_TO_XYZ[1]);
    500.0 * (lab_f(x) - lab_f(y))
}

/// a* rescaled from [−128, 127] to [0, 1].
pub fn to_lab_a(img: &RgbImage) -> Tensor {
    img.map_pixels(|p| ((lab_a_of(p) + 128.0) / 255.0).clamp(0.0, 1.0))
}

/// Neighbor offsets (dy, dx), clockwise from the top-left.
pub const LBP_NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// Radius-1, 8-neighbor local binary pattern over the interior pixels.
///
/// The top-left neighbor is the most significant bit; a neighbor sets its
/// bit when it is `>=` the center.
pub fn lbp(gray: &Tensor) -> Result<Tensor> {
    let (h, w) = match gray.shape() {
        [h, w] => (*h, *w),
        s => return Err(dim_err(format!("lbp expects an H×W map, got {s:?}"))),
    };
    if h < 3 || w < 3 {
        return Err(dim_err(format!("lbp needs at least 3×3, got {h}×{w}")));
    }
    let d = gray.data();
    let mut codes = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = d[y * w + x];
            let mut code = 0u32;
            for (dy, dx) in LBP_NEIGHBORS {
                let ny = (y as isize + dy) as usize;
                let nx = (x as isize + dx) as usize;
                code = (code << 1) | u32::from(d[ny * w + nx] >= center);
            }
            codes.push(code as f64);
        }
    }
    Tensor::new(&[h - 2, w - 2], codes)
}

/// Separable Gaussian blur with edge clamping; radius ⌈3σ⌉.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (t, k) in kernel.iter().enumerate() {
                        let off = t as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x + off).clamp(0, w - 1), y)
                        } else {
                            (x, (y + off).clamp(0, h - 1))
                        };
                        acc += k * src[((sy * w + sx) * 3) as usize + c];
                    }
                    out[((y * w + x) * 3) as usize + c] = acc.clamp(0.0, 1.0);
                }
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    let data = pass(&tmp, false);
    RgbImage {
        width: img.width,
        height: img.height,
        data,
    }
}
