//! Per-image band statistics as CSV rows.

use std::fmt::Write as _;

use dsdf_core::frequency::{spectral_stats, BandStat, N_BANDS};
use dsdf_core::image::{self, RgbImage};

use crate::error::Result;

pub fn csv_header() -> String {
    let mut cols = vec!["id".to_string(), "label".to_string()];
    for prefix in ["E", "H", "S"] {
        cols.extend((0..N_BANDS).map(|b| format!("{prefix}_{b}")));
    }
    cols.extend(["E_total", "H_total", "S_total"].map(String::from));
    cols.join(",")
}

/// Band statistics of `img` after resizing to `size`.
pub fn band_stats(img: &RgbImage, size: usize) -> Result<Vec<BandStat>> {
    let img = image::resize(img, size)?;
    Ok(spectral_stats(&image::to_grayscale(&img))?)
}

pub fn csv_row(id: &str, label: &str, stats: &[BandStat]) -> String {
    let mut row = format!("{id},{label}");
    for f in [|s: &BandStat| s.energy, |s: &BandStat| s.entropy, |s: &BandStat| s.psd] {
        for s in stats {
            let _ = write!(row, ",{}", f(s));
        }
    }
    let total = |f: fn(&BandStat) -> f64| stats.iter().map(f).sum::<f64>();
    let _ = write!(row, ",{},{},{}", total(|s| s.energy), total(|s| s.entropy), total(|s| s.psd));
    row
}
