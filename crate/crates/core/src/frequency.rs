//! Spectral preprocessing: shifted spectrum, magnitude/phase, radial band
//! decomposition, per-band energy/entropy/PSD and the band feature map fed
//! to the frequency encoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::fft::{dft2, fft_shift, idft2};
use crate::math;
use crate::tensor::{ComplexTensor, Tensor};

pub const N_BANDS: usize = 8;

/// Centered spectrum with its polar decomposition.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub shifted: ComplexTensor,
    pub magnitude: Tensor,
    /// Two-argument arctangent, in (−π, π].
    pub phase: Tensor,
    /// Min-max normalized magnitude in [0, 1].
    pub magnitude_norm: Tensor,
}

impl Spectrum {
    pub fn of(gray: &Tensor) -> Result<Self> {
        let shifted = fft_shift(&dft2(gray)?)?;
        let (magnitude, phase) = magnitude_phase(&shifted);
        let magnitude_norm = min_max(&magnitude);
        Ok(Self {
            shifted,
            magnitude,
            phase,
            magnitude_norm,
        })
    }

    /// `[|F_norm|, φ]` as an M×N×2 tensor.
    pub fn stacked(&self) -> Result<Tensor> {
        normalize_stack(&self.magnitude, &self.phase)
    }
}

/// `|F| = √(Re² + Im²)` and `φ = atan2(Im, Re)` (0 where both vanish).
pub fn magnitude_phase(f: &ComplexTensor) -> (Tensor, Tensor) {
    let mag = Tensor::from_fn(f.shape(), |i| math::sqrt(f.re[i] * f.re[i] + f.im[i] * f.im[i]));
    let phase = Tensor::from_fn(f.shape(), |i| {
        if f.re[i] == 0.0 && f.im[i] == 0.0 {
            0.0
        } else {
            let p = math::atan2(f.im[i], f.re[i]);
            // atan2 yields −π for (−x, −0.0); fold onto the closed end.
            if p == -core::f64::consts::PI { core::f64::consts::PI } else { p }
        }
    });
    (mag, phase)
}

/// Min-max scaling to [0,1]; a constant input maps to zeros.
pub fn min_max(t: &Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return Tensor::zeros(t.shape());
    }
    Tensor::from_fn(t.shape(), |i| (t.data()[i] - lo) / span)
}

/// Normalized magnitude and raw phase stacked as two channels.
pub fn normalize_stack(mag: &Tensor, phase: &Tensor) -> Result<Tensor> {
    if mag.shape() != phase.shape() || mag.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "normalize_stack",
            lhs: mag.shape().to_vec(),
            rhs: phase.shape().to_vec(),
        });
    }
    let norm = min_max(mag);
    let (m, n) = (mag.shape()[0], mag.shape()[1]);
    Tensor::new(
        &[m, n, 2],
        norm.data()
            .iter()
            .zip(phase.data())
            .flat_map(|(a, b)| [*a, *b])
            .collect(),
    )
}

fn even_dims(m: usize, n: usize) -> Result<()> {
    if m < 2 || n < 2 || !m.is_multiple_of(2) || !n.is_multiple_of(2) {
        return Err(dim_err(format!("band decomposition needs even sides, got {m}×{n}")));
    }
    Ok(())
}

/// Band of shifted bin (u, v): equal-width annuli out to the corner radius,
/// with the last band closed at `r_max`.
pub fn band_of(u: usize, v: usize, m: usize, n: usize, n_bands: usize) -> usize {
    let du = u as f64 - (m / 2) as f64;
    let dv = v as f64 - (n / 2) as f64;
    let r = math::sqrt(du * du + dv * dv);
    let r_max = math::sqrt(((m / 2) * (m / 2) + (n / 2) * (n / 2)) as f64);
    let b = math::floor(r * n_bands as f64 / r_max) as usize;
    b.min(n_bands - 1)
}

/// Per-bin band labels in shifted coordinates, row-major.
pub fn band_labels(m: usize, n: usize, n_bands: usize) -> Result<Vec<usize>> {
    even_dims(m, n)?;
    if n_bands == 0 {
        return Err(Error::Config("at least one band is required".into()));
    }
    Ok((0..m * n).map(|i| band_of(i / n, i % n, m, n, n_bands)).collect())
}

/// Binary M×N×bands masks (channel-minor) forming an exact partition.
pub fn band_masks(m: usize, n: usize, n_bands: usize) -> Result<Tensor> {
    let labels = band_labels(m, n, n_bands)?;
    let mut data = vec![0.0; m * n * n_bands];
    for (i, &b) in labels.iter().enumerate() {
        data[i * n_bands + b] = 1.0;
    }
    Tensor::new(&[m, n, n_bands], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BandStat {
    /// `Σ_band |F|²`
    pub energy: f64,
    /// Shannon entropy (nats) of the in-band power distribution.
    pub entropy: f64,
    /// Band mean of `|F|²/T` with `T = M·N`.
    pub psd: f64,
    pub bins: usize,
}

/// Energy, entropy and PSD of each band of a shifted spectrum.
pub fn band_stats(shifted: &ComplexTensor, masks: &Tensor) -> Result<Vec<BandStat>> {
    let (m, n) = match shifted.shape() {
        [m, n] => (*m, *n),
        s => return Err(dim_err(format!("band_stats expects an M×N spectrum, got {s:?}"))),
    };
    let nb = match masks.shape() {
        [a, b, c] if *a == m && *b == n => *c,
        s => {
            return Err(Error::ShapeMismatch {
                op: "band_stats",
                lhs: shifted.shape().to_vec(),
                rhs: s.to_vec(),
            })
        }
    };
    let power = shifted.power();
    let total = (m * n) as f64;
    let mut stats = vec![BandStat::default(); nb];
    for (i, &p) in power.iter().enumerate() {
        for (b, st) in stats.iter_mut().enumerate() {
            if masks.data()[i * nb + b] != 0.0 {
                st.energy += p;
                st.bins += 1;
            }
        }
    }
    for (b, st) in stats.iter_mut().enumerate() {
        if st.energy <= 0.0 || st.bins == 0 {
            st.energy = 0.0;
            continue;
        }
        let mut h = 0.0;
        for (i, &p) in power.iter().enumerate() {
            if masks.data()[i * nb + b] != 0.0 && p > 0.0 {
                let q = p / st.energy;
                h -= q * math::ln(q);
            }
        }
        st.entropy = h.max(0.0);
        st.psd = st.energy / total / st.bins as f64;
    }
    Ok(stats)
}

/// Spatial band components: inverse DFT of each band-masked spectrum.
/// Summed over bands they reproduce `gray`.
pub fn band_components(gray: &Tensor, n_bands: usize) -> Result<Vec<Tensor>> {
    let (m, n) = match gray.shape() {
        [m, n] => (*m, *n),
        s => return Err(dim_err(format!("expected a grayscale M×N grid, got {s:?}"))),
    };
    let labels = band_labels(m, n, n_bands)?;
    let shifted = fft_shift(&dft2(gray)?)?;
    (0..n_bands)
        .map(|b| {
            let mut masked = ComplexTensor::zeros(&[m, n]);
            for (i, &l) in labels.iter().enumerate() {
                if l == b {
                    masked.re[i] = shifted.re[i];
                    masked.im[i] = shifted.im[i];
                }
            }
            Ok(idft2(&fft_shift(&masked)?)?.real())
        })
        .collect()
}

/// H×W×bands map whose channel `c` is the min-max normalized band-`c`
/// spatial component.
pub fn band_feature_maps(gray: &Tensor, n_bands: usize) -> Result<Tensor> {
    let comps = band_components(gray, n_bands)?;
    let (m, n) = (gray.shape()[0], gray.shape()[1]);
    let normed: Vec<Tensor> = comps.iter().map(min_max).collect();
    Ok(Tensor::from_fn(&[m, n, n_bands], |i| normed[i % n_bands].data()[i / n_bands]))
}

/// Everything the preprocessing layer derives from one grayscale image.
#[derive(Debug, Clone)]
pub struct FrequencyFeatures {
    pub spectrum: Spectrum,
    pub masks: Tensor,
    pub stats: Vec<BandStat>,
    pub feature_map: Tensor,
}

impl FrequencyFeatures {
    pub fn analyze(gray: &Tensor) -> Result<Self> {
        let (m, n) = match gray.shape() {
            [m, n] => (*m, *n),
            s => return Err(dim_err(format!("expected a grayscale M×N grid, got {s:?}"))),
        };
        let spectrum = Spectrum::of(gray)?;
        let masks = band_masks(m, n, N_BANDS)?;
        let stats = band_stats(&spectrum.shifted, &masks)?;
        let feature_map = band_feature_maps(gray, N_BANDS)?;
        Ok(Self {
            spectrum,
            masks,
            stats,
            feature_map,
        })
    }

    pub fn total_energy(&self) -> f64 {
        self.stats.iter().map(|s| s.energy).sum()
    }

    pub fn total_entropy(&self) -> f64 {
        self.stats.iter().map(|s| s.entropy).sum()
    }

    pub fn total_psd(&self) -> f64 {
        self.stats.iter().map(|s| s.psd).sum()
    }
}

/// Band statistics only, skipping the feature map.
pub fn spectral_stats(gray: &Tensor) -> Result<Vec<BandStat>> {
    let (m, n) = (gray.shape()[0], gray.shape().get(1).copied().unwrap_or(0));
    let spectrum = fft_shift(&dft2(gray)?)?;
    band_stats(&spectrum, &band_masks(m, n, N_BANDS)?)
}
