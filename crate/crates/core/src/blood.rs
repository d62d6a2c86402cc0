//! Color/texture histogram branch.
//!
//! Histograms of the red channel, Lab a*, YCbCr Cr and LBP codes are turned
//! into bin tokens; (red → Cr) and (a* → LBP) are each fused with a
//! single-head cross-attention, the two attended vectors are concatenated
//! and an MLP yields the branch probability `p_j`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::image::{lbp, to_grayscale, to_lab_a, to_ycbcr_cr, RgbImage};
use crate::math;
use crate::model::ModelConfig;
use crate::nn;
use crate::ops;
use crate::params::{ParamBuilder, Session};
use crate::tensor::Tensor;

/// (query histogram, key/value histogram) pairings.
pub const PAIRS: [(&str, Channel, Channel); 2] = [
    ("blood.pair_rcr", Channel::Red, Channel::Cr),
    ("blood.pair_alb", Channel::LabA, Channel::Lbp),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Red,
    LabA,
    Cr,
    Lbp,
}

/// Uniform-width histogram over [0,1] (last bin right-closed), L1-normalized.
pub fn histogram(values: &[f64], bins: usize) -> Result<Tensor> {
    if values.is_empty() {
        return Err(dim_err("histogram of an empty channel"));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0.0; bins];
    for &v in values {
        counts[bin_index(v, bins)] += 1.0;
    }
    let n = values.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    Tensor::new(&[bins], counts)
}

#[inline]
pub fn bin_index(v: f64, bins: usize) -> usize {
    let b = math::floor(v.clamp(0.0, 1.0) * bins as f64) as usize;
    b.min(bins - 1)
}

/// The four normalized histograms of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Histograms {
    pub red: Tensor,
    pub lab_a: Tensor,
    pub cr: Tensor,
    pub lbp: Tensor,
}

impl Histograms {
    pub fn of(img: &RgbImage, bins: usize) -> Result<Self> {
        let codes = lbp(&to_grayscale(img))?;
        let scaled: Vec<f64> = codes.data().iter().map(|c| c / 255.0).collect();
        Ok(Self {
            red: histogram(img.channel(0).data(), bins)?,
            lab_a: histogram(to_lab_a(img).data(), bins)?,
            cr: histogram(to_ycbcr_cr(img).data(), bins)?,
            lbp: histogram(&scaled, bins)?,
        })
    }

    pub fn get(&self, c: Channel) -> &Tensor {
        match c {
            Channel::Red => &self.red,
            Channel::LabA => &self.lab_a,
            Channel::Cr => &self.cr,
            Channel::Lbp => &self.lbp,
        }
    }
}

pub fn declare(b: &mut ParamBuilder, cfg: &ModelConfig) {
    let d = cfg.blood_dim;
    for (prefix, _, _) in PAIRS {
        for side in ["q", "kv"] {
            b.uniform(&format!("{prefix}.{side}_embed.w"), &[1, d], 1);
            b.zeros(&format!("{prefix}.{side}_embed.b"), &[d]);
            b.uniform(&format!("{prefix}.{side}_pos"), &[cfg.bins, d], d);
        }
        for w in ["wq", "wk", "wv"] {
            b.uniform(&format!("{prefix}.{w}"), &[d, d], d);
        }
    }
    nn::declare_linear(b, "blood.mlp.fc1", 2 * d, d);
    nn::declare_linear(b, "blood.mlp.fc2", d, 1);
}

/// Learnable tensors of one histogram pairing, already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PairWeights {
    pub q_embed_w: Var,
    pub q_embed_b: Var,
    pub q_pos: Var,
    pub kv_embed_w: Var,
    pub kv_embed_b: Var,
    pub kv_pos: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl PairWeights {
    pub fn bind(s: &mut Session<'_>, prefix: &str) -> Result<Self> {
        let mut p = |leaf: &str| s.p(&format!("{prefix}.{leaf}"));
        Ok(Self {
            q_embed_w: p("q_embed.w")?,
            q_embed_b: p("q_embed.b")?,
            q_pos: p("q_pos")?,
            kv_embed_w: p("kv_embed.w")?,
            kv_embed_b: p("kv_embed.b")?,
            kv_pos: p("kv_pos")?,
            wq: p("wq")?,
            wk: p("wk")?,
            wv: p("wv")?,
        })
    }
}

/// One token per bin: `h_i·w + b + pos_i`.
fn bin_tokens(tape: &mut Tape, hist: Var, w: Var, b: Var, pos: Var) -> Result<Var> {
    let bins = tape.value(hist).len();
    let col = tape.reshape(hist, &[bins, 1])?;
    let t = tape.matmul(col, w)?;
    let t = tape.add_row(t, b)?;
    tape.add(t, pos)
}

/// Cross-attention of `q_hist` bins over `kv_hist` bins.
///
/// Returns the attended vector (query-token mean of the attention output,
/// 1×d_b) and the bins×bins attention weights.
pub fn cross_attend_pair(
    tape: &mut Tape,
    q_hist: Var,
    kv_hist: Var,
    w: &PairWeights,
    label: &str,
) -> Result<(Var, Tensor)> {
    let bins = tape.value(q_hist).len();
    if tape.value(kv_hist).len() != bins {
        return Err(Error::ShapeMismatch {
            op: "cross_attend_pair",
            lhs: tape.shape(q_hist).to_vec(),
            rhs: tape.shape(kv_hist).to_vec(),
        });
    }
    let qt = bin_tokens(tape, q_hist, w.q_embed_w, w.q_embed_b, w.q_pos)?;
    let kvt = bin_tokens(tape, kv_hist, w.kv_embed_w, w.kv_embed_b, w.kv_pos)?;
    let q = tape.matmul(qt, w.wq)?;
    let k = tape.matmul(kvt, w.wk)?;
    let v = tape.matmul(kvt, w.wv)?;
    let map = attention_map(tape.value(q), tape.value(k))?;
    let out = tape.attention(q, k, v, 1, label)?;
    let mean = tape.constant(Tensor::full(&[1, bins], 1.0 / bins as f64));
    let attended = tape.matmul(mean, out)?;
    Ok((attended, map))
}

/// `softmax(QKᵀ/√d)` for a single head.
pub fn attention_map(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.shape()[1] as f64;
    let scores = ops::matmul(q, &ops::transpose(k)?)?;
    let scaled = Tensor::from_fn(scores.shape(), |i| scores.data()[i] / math::sqrt(d));
    ops::softmax(&scaled, 1)
}

/// Tape outputs of the histogram branch.
#[derive(Debug, Clone)]
pub struct BloodOutput {
    pub attended: [Var; 2],
    pub fused: Var,
    pub p_j: Var,
    pub attention_maps: [Tensor; 2],
}

pub fn forward(s: &mut Session<'_>, hist: &Histograms) -> Result<BloodOutput> {
    let mut attended = Vec::with_capacity(2);
    let mut maps = Vec::with_capacity(2);
    for (prefix, qc, kvc) in PAIRS {
        let w = PairWeights::bind(s, prefix)?;
        let q = s.tape.constant(hist.get(qc).clone());
        let kv = s.tape.constant(hist.get(kvc).clone());
        let (a, m) = cross_attend_pair(&mut s.tape, q, kv, &w, prefix)?;
        attended.push(a);
        maps.push(m);
    }
    let fused = s.tape.concat_cols(&attended)?;
    let h = nn::linear(s, fused, "blood.mlp.fc1")?;
    let h = s.tape.relu(h);
    let logit = nn::linear(s, h, "blood.mlp.fc2")?;
    let p_j = s.tape.sigmoid(logit);
    let m1 = maps.pop().expect("two pairs");
    let m0 = maps.pop().expect("two pairs");
    Ok(BloodOutput {
        attended: [attended[0], attended[1]],
        fused,
        p_j,
        attention_maps: [m0, m1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_cases() {
        let h = histogram(&[0.3; 10], 64).unwrap();
        assert_eq!(h.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(histogram(&[], 64).is_err());

        let vals = [0.0, 0.25, 0.5, 0.75, 1.0];
        let h = histogram(&vals, 64).unwrap();
        for (v, expect) in vals.iter().zip([0usize, 16, 32, 48, 63]) {
            assert_eq!(bin_index(*v, 64), expect);
            assert!((h.data()[expect] - 0.2).abs() < 1e-15);
        }
        assert!((h.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_map_rows_are_stochastic() {
        let q = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.91).cos());
        let m = attention_map(&q, &k).unwrap();
        for row in m.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
