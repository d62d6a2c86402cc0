//! Residual CNN producing the P×P×C spatial feature map (P = side/4).
//!
//! stem 3×3/2 (3→C/4) → ReLU → residual block at C/2 (3×3/2, 3×3/1, 1×1/2
//! projection skip) → ReLU → 1×1 conv to C.

use alloc::format;

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::model::ModelConfig;
use crate::params::{ParamBuilder, Session};

fn conv(b: &mut ParamBuilder, name: &str, k: usize, c_in: usize, c_out: usize) {
    b.uniform(&format!("{name}.k"), &[k, k, c_in, c_out], k * k * c_in);
    b.zeros(&format!("{name}.b"), &[c_out]);
}

pub fn declare(b: &mut ParamBuilder, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    conv(b, "spatial.stem", 3, 3, c / 4);
    conv(b, "spatial.block.conv_a", 3, c / 4, c / 2);
    conv(b, "spatial.block.conv_b", 3, c / 2, c / 2);
    conv(b, "spatial.block.skip", 1, c / 4, c / 2);
    conv(b, "spatial.proj", 1, c / 2, c);
}

fn apply(s: &mut Session<'_>, x: Var, name: &str, stride: usize, padding: usize) -> Result<Var> {
    let k = s.p(&format!("{name}.k"))?;
    let b = s.p(&format!("{name}.b"))?;
    let y = s.tape.conv2d(x, k, stride, padding)?;
    s.tape.add_row(y, b)
}

/// Maps a normalized H×H×3 image to the P×P×C spatial feature map.
pub fn forward(s: &mut Session<'_>, image: Var) -> Result<Var> {
    match s.tape.shape(image) {
        [h, w, 3] if h == w && h % 4 == 0 => {}
        other => {
            return Err(dim_err(format!(
                "spatial encoder needs a square RGB input with side divisible by 4, got {other:?}"
            )))
        }
    }
    let x = apply(s, image, "spatial.stem", 2, 1)?;
    let x = s.tape.relu(x);

    let a = apply(s, x, "spatial.block.conv_a", 2, 1)?;
    let a = s.tape.relu(a);
    let a = apply(s, a, "spatial.block.conv_b", 1, 1)?;
    let skip = apply(s, x, "spatial.block.skip", 2, 0)?;
    let x = s.tape.add(a, skip)?;
    let x = s.tape.relu(x);

    apply(s, x, "spatial.proj", 1, 0)
}

/// Channel means of the spatial map (diagnostic descriptor).
pub fn pooled(s: &mut Session<'_>, map: Var) -> Result<Var> {
    s.tape.global_avg_pool(map)
}
