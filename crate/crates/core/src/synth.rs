//! Synthetic real/fake image pairs with a controlled spectral asymmetry.
//!
//! A "real" image is a smooth random color gradient with low-frequency
//! undulation and fine pixel texture. Its "fake" counterpart keeps the
//! original pixels plus a checkerboard (Nyquist-rate) pattern inside a
//! random rectangle and is Gaussian-blurred everywhere else.

use core::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::image::{gaussian_blur, RgbImage};
use crate::math;

/// Blur applied outside the injected rectangle.
pub const FAKE_BLUR_SIGMA: f64 = 1.5;

pub fn real_image<R: Rng>(rng: &mut R, size: usize) -> Result<RgbImage> {
    let base = [
        rng.random_range(0.35..0.75),
        rng.random_range(0.25..0.6),
        rng.random_range(0.2..0.55),
    ];
    let angle = rng.random_range(0.0..2.0 * PI);
    let (dy, dx) = math::sin_cos(angle);
    let slope = rng.random_range(0.1..0.3);
    let freq = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let wave_amp = rng.random_range(0.03..0.08);
    let texture = rng.random_range(0.03..0.06);
    let n = size as f64;
    let mut noise = || rng.random_range(-1.0..1.0);
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
        let ramp = slope * (u * dx + v * dy);
        let wave = wave_amp
            * libm::sin(2.0 * PI * freq[0] * u + phase[0])
            * libm::cos(2.0 * PI * freq[1] * v + phase[1]);
        let shared = texture * noise();
        let mut px = [0.0; 3];
        for (c, p) in px.iter_mut().enumerate() {
            *p = base[c] + ramp + wave + shared + 0.3 * texture * noise();
        }
        px
    })
}

pub fn fake_from<R: Rng>(real: &RgbImage, rng: &mut R) -> Result<RgbImage> {
    let size = real.width();
    let blurred = gaussian_blur(real, FAKE_BLUR_SIGMA);
    let (w, h) = (
        rng.random_range(size / 4..=size / 2),
        rng.random_range(size / 4..=size / 2),
    );
    let (x0, y0) = (rng.random_range(0..=size - w), rng.random_range(0..=size - h));
    let amp = rng.random_range(0.08..0.15);
    RgbImage::from_fn(size, size, |x, y| {
        if (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y) {
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            real.pixel(x, y).map(|v| v + sign * amp)
        } else {
            blurred.pixel(x, y)
        }
    })
}

/// One real image and its manipulated counterpart.
pub fn pair<R: Rng>(rng: &mut R, size: usize) -> Result<(RgbImage, RgbImage)> {
    let real = real_image(rng, size)?;
    let fake = fake_from(&real, rng)?;
    Ok((real, fake))
}
