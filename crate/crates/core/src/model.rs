//! End-to-end detector: preprocessing, both streams, fusion, refinement,
//! the histogram branch and the combined verdict.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{AttentionRecord, Tape, Var};
use crate::blood::{self, Histograms};
use crate::error::{Error, Result};
use crate::frequency::{self, N_BANDS};
use crate::fusion::{self, Decision, Label};
use crate::image::{self, RgbImage, NORM_MEAN, NORM_STD};
use crate::params::{ModelParams, ParamBuilder, Session};
use crate::tensor::{Precision, Tensor};
use crate::{freq_encoder, spatial};

/// Model geometry and combination weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub scales: Vec<usize>,
    pub bins: usize,
    pub blood_dim: usize,
    pub bands: usize,
    pub alpha: f64,
    pub beta: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    /// 224×224 input, 128-wide embeddings.
    fn default() -> Self {
        Self {
            image_size: 224,
            embed_dim: 128,
            heads: 4,
            scales: vec![2, 4],
            bins: 64,
            blood_dim: 64,
            bands: N_BANDS,
            alpha: 0.8,
            beta: 0.2,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// Gradient-check geometry: 16×16 input, width 8, d_b = 8, 64-bit.
    pub fn reduced() -> Self {
        Self {
            image_size: 16,
            embed_dim: 8,
            blood_dim: 8,
            precision: Precision::F64,
            ..Self::default()
        }
    }

    /// Desk-scale training geometry: 64×64 input, width 32.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            embed_dim: 32,
            ..Self::default()
        }
    }

    /// Side of the shared token grid, `P = image_size / 4`.
    pub fn grid(&self) -> usize {
        self.image_size / 4
    }

    /// Frequency-encoder patch side `k` with `image_size / k = P`.
    pub fn freq_patch(&self) -> usize {
        4
    }

    pub fn scales_coarse_first(&self) -> Vec<usize> {
        let mut s = self.scales.clone();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < image::MIN_SIDE || !self.image_size.is_multiple_of(4) {
            return fail(format!("image_size must be ≥ 8 and divisible by 4, got {}", self.image_size));
        }
        if self.embed_dim < 4 || !self.embed_dim.is_multiple_of(4) {
            return fail(format!("embed_dim must be a positive multiple of 4, got {}", self.embed_dim));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.scales.is_empty() {
            return fail("at least one patch scale is required".into());
        }
        for &k in &self.scales {
            if k == 0 || !self.image_size.is_multiple_of(4 * k) {
                return fail(format!("image_size {} not divisible by 4·{k}", self.image_size));
            }
        }
        if self.scales_coarse_first().len() != self.scales.len() {
            return fail(format!("duplicate patch scales {:?}", self.scales));
        }
        if self.bins == 0 || self.blood_dim == 0 {
            return fail("bins and blood_dim must be positive".into());
        }
        if self.bands != N_BANDS {
            return fail(format!("the frequency map has {N_BANDS} bands, got {}", self.bands));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return fail(format!("alpha and beta must be positive, got {} and {}", self.alpha, self.beta));
        }
        Ok(())
    }

    /// Freshly initialized parameters for this geometry.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let mut b = ParamBuilder::new(seed, self.precision);
        spatial::declare(&mut b, self);
        freq_encoder::declare(&mut b, self);
        blood::declare(&mut b, self);
        fusion::declare(&mut b, self);
        Ok(b.finish())
    }
}

/// Per-image inputs derived once from the decoded image.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// H×W×3 in [−1, 1].
    pub normalized: Tensor,
    /// H×W×8 band feature map.
    pub freq_map: Tensor,
    pub histograms: Histograms,
}

impl Prepared {
    /// Resizes to the configured side and derives all stream inputs. The
    /// histograms are taken from the resized image.
    pub fn from_image(img: &RgbImage, cfg: &ModelConfig) -> Result<Self> {
        let img = image::resize(img, cfg.image_size)?;
        let normalized = image::normalize(&img, NORM_MEAN, NORM_STD)?.0;
        let gray = image::to_grayscale(&img);
        let freq_map = frequency::band_feature_maps(&gray, cfg.bands)?;
        let histograms = Histograms::of(&img, cfg.bins)?;
        Ok(Self {
            normalized,
            freq_map,
            histograms,
        })
    }
}

/// Stage name and output shape, in execution order.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

#[derive(Debug, Clone)]
pub struct Forward {
    pub p_i: Var,
    pub p_j: Var,
    pub p: Var,
    pub trace: ShapeTrace,
    pub blood_maps: [Tensor; 2],
}

pub fn forward(s: &mut Session<'_>, input: &Prepared, cfg: &ModelConfig) -> Result<Forward> {
    let mut trace = ShapeTrace::new();
    let img = s.tape.constant(input.normalized.clone());
    trace.push(("input", s.tape.shape(img).to_vec()));
    let fmap = s.tape.constant(input.freq_map.clone());
    trace.push(("freq_map", s.tape.shape(fmap).to_vec()));

    let spatial_map = spatial::forward(s, img)?;
    trace.push(("spatial", s.tape.shape(spatial_map).to_vec()));
    let freq_map = freq_encoder::forward(s, fmap, cfg)?;
    trace.push(("frequency", s.tape.shape(freq_map).to_vec()));

    let fused = fusion::csaf(s, spatial_map, freq_map, cfg.heads)?;
    trace.push(("csaf", s.tape.shape(fused).to_vec()));
    let tokens = fusion::multiscale_embed(s, fused, cfg)?;
    trace.push(("mpe", s.tape.shape(tokens).to_vec()));
    let cls = fusion::ctrm(s, tokens, cfg.heads)?;
    trace.push(("ctrm", s.tape.shape(cls).to_vec()));
    let p_i = fusion::head(s, cls)?;

    let blood = blood::forward(s, &input.histograms)?;
    trace.push(("blood_fused", s.tape.shape(blood.fused).to_vec()));

    let p = fusion::combine_on_tape(&mut s.tape, p_i, blood.p_j, cfg.alpha, cfg.beta)?;
    Ok(Forward {
        p_i,
        p_j: blood.p_j,
        p,
        trace,
        blood_maps: blood.attention_maps,
    })
}

/// Verdict plus the diagnostics gathered during one inference pass.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub decision: Decision,
    pub trace: ShapeTrace,
    pub blood_maps: [Tensor; 2],
    pub attention: Vec<AttentionRecord>,
}

impl Verdict {
    pub fn p(&self) -> f64 {
        self.decision.p
    }

    pub fn label(&self) -> Label {
        self.decision.label
    }
}

/// Runs the model without recording gradients.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, input: &Prepared, capture: bool) -> Result<Verdict> {
    let mut tape = Tape::inference(cfg.precision);
    if capture {
        tape.capture_attention();
    }
    let mut s = Session::new(params, tape);
    let out = forward(&mut s, input, cfg)?;
    let value = |v: Var, s: &Session<'_>| s.tape.value(v).data()[0];
    let (p_i, p_j) = (value(out.p_i, &s), value(out.p_j, &s));
    let mut decision = fusion::classify(p_i, p_j, cfg.alpha, cfg.beta)?;
    // Report the tape value so training and evaluation agree bit for bit.
    decision.p = value(out.p, &s);
    decision.label = Label::from_probability(decision.p);
    let attention = s.tape.take_attention();
    Ok(Verdict {
        decision,
        trace: out.trace,
        blood_maps: out.blood_maps,
        attention,
    })
}

/// Binary cross-entropy of the combined probability against `label`.
pub fn loss(s: &mut Session<'_>, out: &Forward, label: Label) -> Result<Var> {
    s.tape.bce(out.p, label.as_target())
}
