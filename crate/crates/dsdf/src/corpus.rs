//! `real/` + `fake/` image directories and the seeded train/val split.

use std::fs;
use std::path::{Path, PathBuf};

use dsdf_core::fusion::Label;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};

/// Fraction of each class held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    /// Path relative to the corpus root, `/`-separated.
    pub id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    /// Indices into `samples`, ascending.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
}

fn list_class(root: &Path, class: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(class);
    if !dir.is_dir() {
        return Err(Error::Corpus(format!("missing class directory {}", dir.display())));
    }
    let mut paths = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.is_file() && is_image(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Sorted enumeration of both classes plus a per-class seeded 80/20 split.
pub fn ingest(root: &Path, seed: u64) -> Result<Corpus> {
    let mut samples = Vec::new();
    let mut classes = Vec::new();
    for (class, label) in [("real", Label::Real), ("fake", Label::Fake)] {
        let paths = list_class(root, class)?;
        if paths.len() < 2 {
            return Err(Error::Corpus(format!(
                "class `{class}` has {} image(s); at least 2 are needed to populate both splits",
                paths.len()
            )));
        }
        let start = samples.len();
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
            samples.push(Sample {
                id: format!("{class}/{name}"),
                path,
                label,
            });
        }
        classes.push(start..samples.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for range in classes {
        let n = range.len();
        let n_val = ((n as f64 * VAL_FRACTION).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = range.collect();
        idx.shuffle(&mut rng);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Corpus {
        root: root.into(),
        samples,
        train,
        val,
        seed,
    })
}

impl Corpus {
    pub fn subset(&self, which: &[usize]) -> Vec<&Sample> {
        which.iter().map(|&i| &self.samples[i]).collect()
    }
}
