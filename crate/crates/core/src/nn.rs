//! Layers shared by the encoders, fusion and refinement stages.

use alloc::format;
use alloc::string::String;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, Session};

/// Projection matrices of one multi-head attention layer (no biases).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `Concat(head₁..head_h)·W_O` with queries from `q_src` and keys/values
/// from `kv_src`. Self-attention passes the same value for both.
pub fn multi_head(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    w: &AttentionWeights,
    heads: usize,
    label: &str,
) -> Result<Var> {
    let q = tape.matmul(q_src, w.wq)?;
    let k = tape.matmul(kv_src, w.wk)?;
    let v = tape.matmul(kv_src, w.wv)?;
    let heads_out = tape.attention(q, k, v, heads, label)?;
    tape.matmul(heads_out, w.wo)
}

/// `ReLU(x·W₁ + b₁)·W₂ + b₂`
pub fn feed_forward(tape: &mut Tape, x: Var, w: &FfnWeights) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w.w2)?;
    tape.add_row(o, w.b2)
}

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

pub fn declare_linear(b: &mut ParamBuilder, prefix: &str, fan_in: usize, fan_out: usize) {
    b.uniform(&name(prefix, "w"), &[fan_in, fan_out], fan_in);
    b.zeros(&name(prefix, "b"), &[fan_out]);
}

pub fn linear(s: &mut Session<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = s.p(&name(prefix, "w"))?;
    let b = s.p(&name(prefix, "b"))?;
    let y = s.tape.matmul(x, w)?;
    s.tape.add_row(y, b)
}

pub fn declare_attention(b: &mut ParamBuilder, prefix: &str, dim: usize) {
    for leaf in ["wq", "wk", "wv", "wo"] {
        b.uniform(&name(prefix, leaf), &[dim, dim], dim);
    }
}

pub fn attention_weights(s: &mut Session<'_>, prefix: &str) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        wq: s.p(&name(prefix, "wq"))?,
        wk: s.p(&name(prefix, "wk"))?,
        wv: s.p(&name(prefix, "wv"))?,
        wo: s.p(&name(prefix, "wo"))?,
    })
}

pub fn declare_ffn(b: &mut ParamBuilder, prefix: &str, dim: usize, hidden: usize) {
    b.uniform(&name(prefix, "w1"), &[dim, hidden], dim);
    b.zeros(&name(prefix, "b1"), &[hidden]);
    b.uniform(&name(prefix, "w2"), &[hidden, dim], hidden);
    b.zeros(&name(prefix, "b2"), &[dim]);
}

pub fn ffn_weights(s: &mut Session<'_>, prefix: &str) -> Result<FfnWeights> {
    Ok(FfnWeights {
        w1: s.p(&name(prefix, "w1"))?,
        b1: s.p(&name(prefix, "b1"))?,
        w2: s.p(&name(prefix, "w2"))?,
        b2: s.p(&name(prefix, "b2"))?,
    })
}

pub fn declare_layer_norm(b: &mut ParamBuilder, prefix: &str, dim: usize) {
    b.ones(&name(prefix, "gain"), &[dim]);
    b.zeros(&name(prefix, "bias"), &[dim]);
}

pub fn layer_norm(s: &mut Session<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = s.p(&name(prefix, "gain"))?;
    let b = s.p(&name(prefix, "bias"))?;
    s.tape.layer_norm(x, g, b)
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Pre-norm encoder block: `x + MHSA(LN(x))`, then `+ FFN(LN(·))`; hidden 4D.
pub fn declare_pre_norm_block(b: &mut ParamBuilder, prefix: &str, dim: usize) {
    declare_layer_norm(b, &name(prefix, "ln1"), dim);
    declare_attention(b, &name(prefix, "attn"), dim);
    declare_layer_norm(b, &name(prefix, "ln2"), dim);
    declare_ffn(b, &name(prefix, "ffn"), dim, 4 * dim);
}

pub fn pre_norm_block(s: &mut Session<'_>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(s, x, &name(prefix, "ln1"))?;
    let w = attention_weights(s, &name(prefix, "attn"))?;
    let a = multi_head(&mut s.tape, h, h, &w, heads, prefix)?;
    let x = s.tape.add(x, a)?;
    let h = layer_norm(s, x, &name(prefix, "ln2"))?;
    let w = ffn_weights(s, &name(prefix, "ffn"))?;
    let f = feed_forward(&mut s.tape, h, &w)?;
    s.tape.add(x, f)
}

/// Post-norm encoder layer: `X ← LN(X + MultiHead(X))`, `X ← LN(X + FFN(X))`.
pub fn declare_post_norm_layer(b: &mut ParamBuilder, prefix: &str, dim: usize) {
    declare_attention(b, &name(prefix, "attn"), dim);
    declare_layer_norm(b, &name(prefix, "ln1"), dim);
    declare_ffn(b, &name(prefix, "ffn"), dim, 4 * dim);
    declare_layer_norm(b, &name(prefix, "ln2"), dim);
}

pub fn post_norm_layer(s: &mut Session<'_>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let w = attention_weights(s, &name(prefix, "attn"))?;
    let a = multi_head(&mut s.tape, x, x, &w, heads, prefix)?;
    let x = s.tape.add(x, a)?;
    let x = layer_norm(s, x, &name(prefix, "ln1"))?;
    let w = ffn_weights(s, &name(prefix, "ffn"))?;
    let f = feed_forward(&mut s.tape, x, &w)?;
    let x = s.tape.add(x, f)?;
    layer_norm(s, x, &name(prefix, "ln2"))
}

/// Non-overlapping k×k patches of an H×W×C map flattened row-major,
/// channel-minor into (H/k · W/k) × (k²·C) rows.
pub fn patchify(tape: &mut Tape, fmap: Var, k: usize) -> Result<Var> {
    let (h, w, c) = match tape.shape(fmap) {
        [h, w, c] => (*h, *w, *c),
        s => return Err(crate::error::dim_err(format!("patchify expects H×W×C, got {s:?}"))),
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(crate::error::dim_err(format!(
            "{h}×{w} map is not divisible into {k}×{k} patches"
        )));
    }
    let (gh, gw) = (h / k, w / k);
    let width = k * k * c;
    let mut index = alloc::vec::Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for m in 0..k {
                for n in 0..k {
                    let base = ((py * k + m) * w + px * k + n) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    tape.gather(fmap, index, &[gh * gw, width])
}
