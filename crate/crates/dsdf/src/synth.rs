//! Writes a synthetic real/fake corpus to disk.

use std::fs;
use std::path::{Path, PathBuf};

use dsdf_core::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};
use crate::io::save_png;

/// Writes `n/2` real images and their manipulated counterparts as
/// `real/real_NNNN.png` and `fake/fake_NNNN.png`.
pub fn write_corpus(out: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!("synthetic corpus size must be even and positive, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::with_capacity(n);
    for class in ["real", "fake"] {
        let dir = out.join(class);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for i in 0..n / 2 {
        let (real, fake) = synth::pair(&mut rng, size)?;
        for (class, img) in [("real", &real), ("fake", &fake)] {
            let path = out.join(class).join(format!("{class}_{i:04}.png"));
            save_png(img, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
