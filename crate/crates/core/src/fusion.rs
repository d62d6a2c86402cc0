//! Cross-stream attention fusion, multiscale patch embedding, class-token
//! refinement and the final probability combination.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::model::ModelConfig;
use crate::nn;
use crate::params::{ParamBuilder, Session};
use crate::tensor::Tensor;

pub const CTRM_LAYERS: usize = 2;

pub fn declare(b: &mut ParamBuilder, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    nn::declare_attention(b, "csaf.s2f", d);
    nn::declare_attention(b, "csaf.f2s", d);
    nn::declare_ffn(b, "csaf.ffn", d, 4 * d);

    let p = cfg.grid();
    for &k in &cfg.scales_coarse_first() {
        let prefix = format!("mpe.k{k}");
        nn::declare_linear(b, &format!("{prefix}.proj"), k * k * d, d);
        b.uniform(&format!("{prefix}.pos"), &[(p / k) * (p / k), d], d);
        nn::declare_pre_norm_block(b, &format!("{prefix}.block"), d);
    }
    b.zeros("mpe.scale_logits", &[cfg.scales.len()]);

    b.uniform("ctrm.cls", &[1, d], d);
    for i in 0..CTRM_LAYERS {
        nn::declare_post_norm_layer(b, &format!("ctrm.layers.{i}"), d);
    }

    nn::declare_linear(b, "head", d, 1);
}

/// `H₁ = Attn(Q=S, KV=F) + F`, `H₂ = Attn(Q=F, KV=S) + S`,
/// `H = H₁ + H₂`, output `H + FFN(H)` reshaped to P×P×C.
pub fn csaf(s: &mut Session<'_>, spatial: Var, freq: Var, heads: usize) -> Result<Var> {
    if s.tape.shape(spatial) != s.tape.shape(freq) {
        return Err(Error::ShapeMismatch {
            op: "csaf",
            lhs: s.tape.shape(spatial).to_vec(),
            rhs: s.tape.shape(freq).to_vec(),
        });
    }
    let shape = s.tape.shape(spatial).to_vec();
    let (p1, p2, c) = match shape[..] {
        [a, b, c] => (a, b, c),
        _ => return Err(dim_err(format!("csaf expects P×P×C maps, got {shape:?}"))),
    };
    let st = s.tape.reshape(spatial, &[p1 * p2, c])?;
    let ft = s.tape.reshape(freq, &[p1 * p2, c])?;

    let w = nn::attention_weights(s, "csaf.s2f")?;
    let a1 = nn::multi_head(&mut s.tape, st, ft, &w, heads, "csaf.s2f")?;
    let h1 = s.tape.add(a1, ft)?;
    let w = nn::attention_weights(s, "csaf.f2s")?;
    let a2 = nn::multi_head(&mut s.tape, ft, st, &w, heads, "csaf.f2s")?;
    let h2 = s.tape.add(a2, st)?;
    let h = s.tape.add(h1, h2)?;

    let w = nn::ffn_weights(s, "csaf.ffn")?;
    let f = nn::feed_forward(&mut s.tape, h, &w)?;
    let fused = s.tape.add(h, f)?;
    s.tape.reshape(fused, &shape)
}

/// Averages each `r×r` group of a `g×g` token grid (`g = r·coarse`).
pub fn group_pool_matrix(fine: usize, coarse: usize) -> Result<Tensor> {
    if coarse == 0 || !fine.is_multiple_of(coarse) {
        return Err(dim_err(format!("token grid {fine} does not pool onto {coarse}")));
    }
    let r = fine / coarse;
    let w = 1.0 / (r * r) as f64;
    Ok(Tensor::from_fn(&[coarse * coarse, fine * fine], |i| {
        let (row, col) = (i / (fine * fine), i % (fine * fine));
        let (cy, cx) = (row / coarse, row % coarse);
        let (fy, fx) = (col / fine, col % fine);
        if fy / r == cy && fx / r == cx { w } else { 0.0 }
    }))
}

/// Per-scale token streams, coarse first, each already pooled to T_min.
pub fn scale_branches(s: &mut Session<'_>, fused: Var, cfg: &ModelConfig) -> Result<Vec<Var>> {
    let p = match s.tape.shape(fused) {
        [a, b, _] if a == b => *a,
        other => return Err(dim_err(format!("multiscale embedding expects P×P×C, got {other:?}"))),
    };
    let scales = cfg.scales_coarse_first();
    let k_max = scales[0];
    if let Some(k) = scales.iter().find(|&&k| k == 0 || p % k != 0) {
        return Err(dim_err(format!("grid {p} is not divisible by patch scale {k}")));
    }
    let coarse = p / k_max;
    let mut branches = Vec::with_capacity(scales.len());
    for &k in &scales {
        let prefix = format!("mpe.k{k}");
        let patches = nn::patchify(&mut s.tape, fused, k)?;
        let tokens = nn::linear(s, patches, &format!("{prefix}.proj"))?;
        let pos = s.p(&format!("{prefix}.pos"))?;
        let tokens = s.tape.add(tokens, pos)?;
        let mut tokens = nn::pre_norm_block(s, tokens, &format!("{prefix}.block"), cfg.heads)?;
        let grid = p / k;
        if grid != coarse {
            let pool = s.tape.constant(group_pool_matrix(grid, coarse)?);
            tokens = s.tape.matmul(pool, tokens)?;
        }
        branches.push(tokens);
    }
    Ok(branches)
}

/// `Σ_s w_s · branch_s` with `w = softmax(logits)`.
pub fn weighted_sum(tape: &mut Tape, branches: &[Var], logits: Var) -> Result<Var> {
    if tape.value(logits).len() != branches.len() || branches.is_empty() {
        return Err(dim_err(format!(
            "{} fusion weights for {} scales",
            tape.value(logits).len(),
            branches.len()
        )));
    }
    let w = tape.softmax(logits, 0)?;
    let mut acc: Option<Var> = None;
    for (i, &b) in branches.iter().enumerate() {
        let wi = tape.gather(w, alloc::vec![i], &[1])?;
        let term = tape.mul_scalar(b, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Fused P×P×C map → T_min×D tokens.
pub fn multiscale_embed(s: &mut Session<'_>, fused: Var, cfg: &ModelConfig) -> Result<Var> {
    let branches = scale_branches(s, fused, cfg)?;
    let logits = s.p("mpe.scale_logits")?;
    weighted_sum(&mut s.tape, &branches, logits)
}

/// Prepends the class token, runs the post-norm layers and returns row 0.
pub fn ctrm(s: &mut Session<'_>, tokens: Var, heads: usize) -> Result<Var> {
    let cls = s.p("ctrm.cls")?;
    let mut x = s.tape.concat_rows(&[cls, tokens])?;
    for i in 0..CTRM_LAYERS {
        x = nn::post_norm_layer(s, x, &format!("ctrm.layers.{i}"), heads)?;
    }
    s.tape.slice_rows(x, 0, 1)
}

/// `p_i = sigmoid(c·W_c + b_c)`
pub fn head(s: &mut Session<'_>, class_token: Var) -> Result<Var> {
    let logit = nn::linear(s, class_token, "head")?;
    Ok(s.tape.sigmoid(logit))
}

/// `(α·p_i + β·p_j) / (α + β)` on the tape.
pub fn combine_on_tape(tape: &mut Tape, p_i: Var, p_j: Var, alpha: f64, beta: f64) -> Result<Var> {
    let a = tape.scale(p_i, alpha / (alpha + beta));
    let b = tape.scale(p_j, beta / (alpha + beta));
    tape.add(a, b)
}

pub fn combine(p_i: f64, p_j: f64, alpha: f64, beta: f64) -> f64 {
    (alpha * p_i + beta * p_j) / (alpha + beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Strict threshold: exactly 0.5 is real.
    pub fn from_probability(p: f64) -> Self {
        if p > 0.5 { Label::Fake } else { Label::Real }
    }

    pub fn as_target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

/// Final decision from both branch probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub p_i: f64,
    pub p_j: f64,
    pub p: f64,
    pub label: Label,
    pub alpha: f64,
    pub beta: f64,
}

pub fn classify(p_i: f64, p_j: f64, alpha: f64, beta: f64) -> Result<Decision> {
    if !(0.0..=1.0).contains(&p_j) || !(0.0..=1.0).contains(&p_i) {
        return Err(Error::Contract(format!("probabilities out of range: p_i={p_i}, p_j={p_j}")));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Config(format!("combination weights must be positive, got α={alpha}, β={beta}")));
    }
    let p = combine(p_i, p_j, alpha, beta);
    Ok(Decision {
        p_i,
        p_j,
        p,
        label: Label::from_probability(p),
        alpha,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_cases() {
        let d = classify(1.0, 0.0, 0.8, 0.2).unwrap();
        assert!((d.p - 0.8).abs() < 1e-15);
        assert_eq!(d.label, Label::Fake);
        let d = classify(0.5, 0.5, 0.8, 0.2).unwrap();
        assert_eq!(d.p, 0.5);
        assert_eq!(d.label, Label::Real);
        for q in [0.0, 0.13, 0.77, 1.0] {
            assert!((combine(q, q, 0.8, 0.2) - q).abs() < 1e-15);
        }
        assert!(classify(0.2, 1.2, 0.8, 0.2).is_err());
        assert!(classify(0.2, 0.2, 0.0, 0.2).is_err());
    }

    #[test]
    fn pool_matrix_groups() {
        let m = group_pool_matrix(4, 2).unwrap();
        assert_eq!(m.shape(), &[4, 16]);
        // Coarse token 1 (row 0, col 1) averages fine tokens 2, 3, 6, 7.
        let row: alloc::vec::Vec<usize> = (0..16).filter(|&c| m.at(&[1, c]) != 0.0).collect();
        assert_eq!(row, [2, 3, 6, 7]);
        assert!(m.data().chunks(16).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-15));
        assert!(group_pool_matrix(5, 2).is_err());
    }
}
