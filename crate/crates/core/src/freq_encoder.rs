//! Shallow transformer over k×k patches of the band feature map.

use alloc::format;

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::model::ModelConfig;
use crate::nn;
use crate::params::{ParamBuilder, Session};

pub const BLOCKS: usize = 2;

pub fn declare(b: &mut ParamBuilder, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    let k = cfg.freq_patch();
    let in_width = k * k * cfg.bands;
    nn::declare_linear(b, "freq.patch", in_width, d);
    let n = cfg.grid() * cfg.grid();
    b.uniform("freq.pos", &[n, d], d);
    for i in 0..BLOCKS {
        nn::declare_pre_norm_block(b, &format!("freq.blocks.{i}"), d);
    }
}

/// `T_p = W·Flatten(patch) + b + E_p` for every k×k patch.
pub fn embed_patches(s: &mut Session<'_>, fmap: Var, k: usize) -> Result<Var> {
    let patches = nn::patchify(&mut s.tape, fmap, k)?;
    let tokens = nn::linear(s, patches, "freq.patch")?;
    let pos = s.p("freq.pos")?;
    if s.tape.shape(pos) != s.tape.shape(tokens) {
        return Err(dim_err(format!(
            "positional table {:?} does not match {:?} tokens",
            s.tape.shape(pos),
            s.tape.shape(tokens)
        )));
    }
    s.tape.add(tokens, pos)
}

/// H×W×bands map → P×P×D frequency embedding.
pub fn forward(s: &mut Session<'_>, fmap: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut x = embed_patches(s, fmap, cfg.freq_patch())?;
    for i in 0..BLOCKS {
        x = nn::pre_norm_block(s, x, &format!("freq.blocks.{i}"), cfg.heads)?;
    }
    let p = cfg.grid();
    s.tape.reshape(x, &[p, p, cfg.embed_dim])
}
