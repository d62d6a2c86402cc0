//! Single-image verdicts and attention-map dumps.

use std::fs;
use std::path::Path;

use dsdf_core::blood::PAIRS;
use dsdf_core::model::{self, ModelConfig, Prepared, Verdict};
use dsdf_core::params::ModelParams;
use serde::Serialize;

use crate::error::{io_err, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferRecord {
    pub id: String,
    pub p_i: f64,
    pub p_j: f64,
    pub p: f64,
    pub label: String,
    /// Stage name → output shape, in execution order.
    pub shapes: Vec<(String, Vec<usize>)>,
}

pub fn run(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<(InferRecord, Verdict)> {
    let img = io::decode(path)?;
    let input = Prepared::from_image(&img, cfg)?;
    let v = model::predict(params, cfg, &input, false)?;
    let d = v.decision;
    let record = InferRecord {
        id: path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
        p_i: d.p_i,
        p_j: d.p_j,
        p: d.p,
        label: d.label.to_string(),
        shapes: v.trace.iter().map(|(n, s)| ((*n).to_owned(), s.clone())).collect(),
    };
    Ok((record, v))
}

/// Writes `<id>.<pair>.csv` and `<id>.<pair>.pgm` for both histogram pairings.
pub fn dump_attention(verdict: &Verdict, id: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = Path::new(id).file_stem().map_or_else(|| id.to_owned(), |s| s.to_string_lossy().into_owned());
    for ((prefix, _, _), map) in PAIRS.iter().zip(&verdict.blood_maps) {
        let pair = prefix.rsplit('.').next().unwrap_or(prefix);
        io::save_csv(map, &dir.join(format!("{stem}.{pair}.csv")))?;
        io::save_pgm(map, &dir.join(format!("{stem}.{pair}.pgm")))?;
    }
    Ok(())
}
