//! Encoders, fusion stages and the histogram branch against naive oracles.

use dsdf_core::autograd::{Tape, Var};
use dsdf_core::blood::{self, Histograms, PairWeights};
use dsdf_core::fusion::{self, Label};
use dsdf_core::gradcheck::{check_params, STEP};
use dsdf_core::image::RgbImage;
use dsdf_core::model::ModelConfig;
use dsdf_core::params::{ModelParams, Session};
use dsdf_core::{freq_encoder, nn, spatial, synth, Precision, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rows(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Per-head scaled dot-product attention by explicit loops.
fn naive_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let dh = q[0].len() / heads;
    let mut out = vec![vec![0.0; q[0].len()]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * vj[c];
                }
            }
        }
    }
    out
}

fn naive_mha(q_src: &Mat, kv_src: &Mat, w: [&Tensor; 4], heads: usize) -> Mat {
    let [wq, wk, wv, wo] = w.map(rows);
    let o = naive_attention(&mm(q_src, &wq), &mm(kv_src, &wk), &mm(kv_src, &wv), heads);
    mm(&o, &wo)
}

fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    a.iter().flatten().zip(t.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn subset(p: &ModelParams, prefixes: &[&str]) -> ModelParams {
    let mut out = ModelParams::new();
    for (n, t) in p.iter() {
        if prefixes.iter().any(|pre| n.starts_with(pre)) {
            out.insert(n, t.clone());
        }
    }
    out
}

fn zero(p: &mut ModelParams, names: &[String]) {
    for n in names {
        p.get_mut(n).unwrap().data_mut().fill(0.0);
    }
}

fn assert_gradcheck(p: &ModelParams, f: impl Fn(&mut Session<'_>) -> dsdf_core::Result<Var>) {
    for r in check_params(p, Precision::F64, STEP, f).unwrap() {
        assert!(r.max_rel_err < 1e-3, "{}: {}", r.name, r.max_rel_err);
        assert_eq!(r.unresolved, 0, "{}", r.name);
    }
}

fn cfg_with(size: usize, dim: usize, scales: Vec<usize>) -> ModelConfig {
    ModelConfig {
        image_size: size,
        embed_dim: dim,
        scales,
        ..ModelConfig::reduced()
    }
}

#[test]
fn multi_head_matches_naive_oracle() {
    let w = [random(&[4, 4], 1), random(&[4, 4], 2), random(&[4, 4], 3), random(&[4, 4], 4)];
    let (xq, xkv) = (random(&[3, 4], 5), random(&[5, 4], 6));
    let mut tape = Tape::new(Precision::F64);
    let aw = nn::AttentionWeights {
        wq: tape.constant(w[0].clone()),
        wk: tape.constant(w[1].clone()),
        wv: tape.constant(w[2].clone()),
        wo: tape.constant(w[3].clone()),
    };
    let q = tape.constant(xq.clone());
    let kv = tape.constant(xkv.clone());
    let self_out = nn::multi_head(&mut tape, q, q, &aw, 2, "t").unwrap();
    let cross_out = nn::multi_head(&mut tape, q, kv, &aw, 2, "t").unwrap();
    let wr = [&w[0], &w[1], &w[2], &w[3]];
    assert!(max_diff(&naive_mha(&rows(&xq), &rows(&xq), wr, 2), tape.value(self_out)) < 1e-5);
    assert!(max_diff(&naive_mha(&rows(&xq), &rows(&xkv), wr, 2), tape.value(cross_out)) < 1e-5);
}

#[test]
fn single_token_attends_to_itself() {
    let mut tape = Tape::new(Precision::F64);
    tape.capture_attention();
    let x = random(&[1, 4], 7);
    let wv = random(&[4, 4], 8);
    let wo = random(&[4, 4], 9);
    let aw = nn::AttentionWeights {
        wq: tape.constant(random(&[4, 4], 10)),
        wk: tape.constant(random(&[4, 4], 11)),
        wv: tape.constant(wv.clone()),
        wo: tape.constant(wo.clone()),
    };
    let xv = tape.constant(x.clone());
    let out = nn::multi_head(&mut tape, xv, xv, &aw, 2, "t").unwrap();
    let expect = mm(&mm(&rows(&x), &rows(&wv)), &rows(&wo));
    assert!(max_diff(&expect, tape.value(out)) < 1e-12);
    assert!(tape.take_attention()[0].weights.data().iter().all(|&w| w == 1.0));
}

#[test]
fn pre_norm_block_is_identity_without_output_projections() {
    let cfg = cfg_with(16, 8, vec![2, 4]);
    let mut p = subset(&cfg.init_params(1).unwrap(), &["freq.blocks.0."]);
    zero(&mut p, &["freq.blocks.0.attn.wo", "freq.blocks.0.ffn.w2", "freq.blocks.0.ffn.b2"].map(String::from));
    let mut s = Session::new(&p, Tape::new(Precision::F64));
    let x = random(&[5, 8], 12);
    let xv = s.tape.constant(x.clone());
    let y = nn::pre_norm_block(&mut s, xv, "freq.blocks.0", 4).unwrap();
    assert_eq!(s.tape.value(y), &x);
}

#[test]
fn toy_block_gradients() {
    let cfg = cfg_with(16, 4, vec![2, 4]);
    let mut p = subset(&cfg.init_params(2).unwrap(), &["freq.blocks.0."]);
    p.insert("x", random(&[2, 4], 13));
    assert_gradcheck(&p, |s| {
        let x = s.p("x")?;
        let y = nn::pre_norm_block(s, x, "freq.blocks.0", 2)?;
        let w = s.tape.constant(random(&[2, 4], 14));
        let y = s.tape.mul(y, w)?;
        Ok(s.tape.sum(y))
    });
}

#[test]
fn spatial_geometry_at_full_size() {
    let cfg = ModelConfig::default();
    let p = subset(&cfg.init_params(3).unwrap(), &["spatial."]);
    let mut s = Session::new(&p, Tape::inference(Precision::F32));
    let x = s.tape.constant(random(&[224, 224, 3], 15));
    let y = spatial::forward(&mut s, x).unwrap();
    assert_eq!(s.tape.shape(y), &[56, 56, 128]);
    let bad = s.tape.constant(Tensor::zeros(&[30, 30, 3]));
    assert!(spatial::forward(&mut s, bad).is_err());
}

#[test]
fn frequency_tokens_and_embedding() {
    let full = ModelConfig::default();
    let p = subset(&full.init_params(4).unwrap(), &["freq.patch", "freq.pos"]);
    let mut s = Session::new(&p, Tape::inference(Precision::F32));
    let fmap = s.tape.constant(Tensor::zeros(&[224, 224, 8]));
    let tokens = freq_encoder::embed_patches(&mut s, fmap, full.freq_patch()).unwrap();
    assert_eq!(s.tape.shape(tokens), &[3136, 128]);
    // A zero patch with zero bias leaves only the positional embedding.
    assert_eq!(s.tape.value(tokens).data(), p.get("freq.pos").unwrap().data());

    let desk = cfg_with(64, 32, vec![2, 4]);
    let p = desk.init_params(5).unwrap();
    let mut s = Session::new(&p, Tape::inference(Precision::F64));
    let fmap = s.tape.constant(random(&[64, 64, 8], 16));
    let out = freq_encoder::forward(&mut s, fmap, &desk).unwrap();
    assert_eq!(s.tape.shape(out), &[16, 16, 32]);
}

#[test]
fn frequency_encoder_is_patch_permutation_equivariant() {
    let cfg = cfg_with(8, 8, vec![2]);
    let mut p = cfg.init_params(6).unwrap();
    zero(&mut p, &["freq.pos".to_string()]);
    let fmap = random(&[8, 8, 8], 17);
    // Swap the top-left and bottom-right 4×4 patches.
    let mut swapped = fmap.clone();
    for y in 0..4 {
        for x in 0..4 {
            for c in 0..8 {
                let a = fmap.offset(&[y, x, c]);
                let b = fmap.offset(&[y + 4, x + 4, c]);
                swapped.data_mut()[a] = fmap.data()[b];
                swapped.data_mut()[b] = fmap.data()[a];
            }
        }
    }
    let run = |m: &Tensor| {
        let mut s = Session::new(&p, Tape::inference(Precision::F64));
        let v = s.tape.constant(m.clone());
        let out = freq_encoder::forward(&mut s, v, &cfg).unwrap();
        s.tape.value(out).clone()
    };
    let (a, b) = (run(&fmap), run(&swapped));
    let cell = |t: &Tensor, y: usize, x: usize| t.data()[(y * 2 + x) * 8..(y * 2 + x + 1) * 8].to_vec();
    for (ya, xa, yb, xb) in [(0, 0, 1, 1), (1, 1, 0, 0), (0, 1, 0, 1), (1, 0, 1, 0)] {
        let (u, v) = (cell(&a, ya, xa), cell(&b, yb, xb));
        assert!(u.iter().zip(&v).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

fn csaf_params(seed: u64) -> (ModelConfig, ModelParams) {
    let cfg = cfg_with(16, 8, vec![2, 4]);
    let p = subset(&cfg.init_params(seed).unwrap(), &["csaf."]);
    (cfg, p)
}

#[test]
fn csaf_reduces_to_residual_sum() {
    let (_, mut p) = csaf_params(7);
    zero(&mut p, &["csaf.s2f.wo", "csaf.f2s.wo", "csaf.ffn.w1", "csaf.ffn.b1", "csaf.ffn.w2", "csaf.ffn.b2"].map(String::from));
    let (sm, fm) = (random(&[4, 4, 8], 18), random(&[4, 4, 8], 19));
    let mut s = Session::new(&p, Tape::inference(Precision::F64));
    let (a, b) = (s.tape.constant(sm.clone()), s.tape.constant(fm.clone()));
    let out = fusion::csaf(&mut s, a, b, 4).unwrap();
    for ((o, x), y) in s.tape.value(out).data().iter().zip(sm.data()).zip(fm.data()) {
        assert_eq!(*o, x + y);
    }
    let c = s.tape.constant(Tensor::zeros(&[4, 4, 4]));
    assert!(fusion::csaf(&mut s, a, c, 4).is_err());
}

#[test]
fn csaf_matches_naive_bidirectional_oracle() {
    let (_, p) = csaf_params(8);
    let (sm, fm) = (random(&[4, 4, 8], 20), random(&[4, 4, 8], 21));
    let mut s = Session::new(&p, Tape::inference(Precision::F64));
    let (a, b) = (s.tape.constant(sm.clone()), s.tape.constant(fm.clone()));
    let out = fusion::csaf(&mut s, a, b, 4).unwrap();

    let g = |n: &str| p.get(n).unwrap();
    let (st, ft) = (rows(&sm), rows(&fm));
    let w = |pre: &str| [g(&format!("{pre}.wq")), g(&format!("{pre}.wk")), g(&format!("{pre}.wv")), g(&format!("{pre}.wo"))];
    let h1 = add(&naive_mha(&st, &ft, w("csaf.s2f"), 4), &ft);
    let h2 = add(&naive_mha(&ft, &st, w("csaf.f2s"), 4), &st);
    let h = add(&h1, &h2);
    let bias = |m: Mat, b: &Tensor| -> Mat { m.into_iter().map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect()).collect() };
    let hidden: Mat = bias(mm(&h, &rows(g("csaf.ffn.w1"))), g("csaf.ffn.b1"))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let ffn = bias(mm(&hidden, &rows(g("csaf.ffn.w2"))), g("csaf.ffn.b2"));
    assert!(max_diff(&add(&h, &ffn), s.tape.value(out)) < 1e-5);
}

#[test]
fn multiscale_geometry_and_forced_weights() {
    let cfg = ModelConfig::default();
    let mut p = subset(&cfg.init_params(9).unwrap(), &["mpe."]);
    let fused = random(&[56, 56, 128], 22);
    let mut s = Session::new(&p, Tape::inference(Precision::F32));
    let f = s.tape.constant(fused.clone());
    let branches = fusion::scale_branches(&mut s, f, &cfg).unwrap();
    assert_eq!(branches.len(), 2);
    for b in &branches {
        assert_eq!(s.tape.shape(*b), &[196, 128]);
    }
    let patches = nn::patchify(&mut s.tape, f, 2).unwrap();
    assert_eq!(s.tape.shape(patches)[0], 784);

    p.get_mut("mpe.scale_logits").unwrap().data_mut().copy_from_slice(&[1000.0, -1000.0]);
    let mut s = Session::new(&p, Tape::inference(Precision::F32));
    let f = s.tape.constant(fused);
    let coarse = fusion::scale_branches(&mut s, f, &cfg).unwrap()[0];
    let out = fusion::multiscale_embed(&mut s, f, &cfg).unwrap();
    assert_eq!(s.tape.value(out), s.tape.value(coarse));
}

#[test]
fn token_pooling_matches_group_means() {
    let pool = fusion::group_pool_matrix(28, 14).unwrap();
    let tokens = random(&[784, 3], 23);
    let pooled = dsdf_core::ops::matmul(&pool, &tokens).unwrap();
    for cy in 0..14 {
        for cx in 0..14 {
            for c in 0..3 {
                let mean = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| tokens.at(&[(2 * cy + dy) * 28 + 2 * cx + dx, c]))
                    .sum::<f64>()
                    / 4.0;
                assert!((pooled.at(&[cy * 14 + cx, c]) - mean).abs() < 1e-12);
            }
        }
    }
    assert!(fusion::group_pool_matrix(28, 13).is_err());
}

#[test]
fn ctrm_sequence_and_normalization() {
    let cfg = cfg_with(16, 8, vec![2, 4]);
    let p = subset(&cfg.init_params(10).unwrap(), &["ctrm."]);
    let mut tape = Tape::inference(Precision::F64);
    tape.capture_attention();
    let mut s = Session::new(&p, tape);
    let t = s.tape.constant(random(&[4, 8], 24));
    let cls = fusion::ctrm(&mut s, t, 4).unwrap();
    assert_eq!(s.tape.shape(cls), &[1, 8]);
    let records = s.tape.take_attention();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].weights.shape(), &[4, 5, 5]);

    // Freshly initialized LN has unit gain and zero bias.
    let mut s = Session::new(&p, Tape::inference(Precision::F64));
    let x = s.tape.constant(random(&[5, 8], 25));
    let y = nn::post_norm_layer(&mut s, x, "ctrm.layers.0", 4).unwrap();
    for r in s.tape.value(y).data().chunks(8) {
        let mean = r.iter().sum::<f64>() / 8.0;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "mean {mean} var {var}");
    }
}

#[test]
fn ctrm_gradients() {
    let cfg = cfg_with(16, 8, vec![2, 4]);
    let mut p = subset(&cfg.init_params(11).unwrap(), &["ctrm."]);
    p.insert("tokens", random(&[4, 8], 26));
    assert_gradcheck(&p, |s| {
        let t = s.p("tokens")?;
        let c = fusion::ctrm(s, t, 4)?;
        let w = s.tape.constant(random(&[1, 8], 27));
        let y = s.tape.mul(c, w)?;
        Ok(s.tape.sum(y))
    });
}

fn blood_params(seed: u64) -> ModelParams {
    subset(&ModelConfig::reduced().init_params(seed).unwrap(), &["blood."])
}

fn random_hist(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let z: f64 = raw.iter().sum();
    Tensor::new(&[64], raw.iter().map(|v| v / z).collect()).unwrap()
}

#[test]
fn blood_attention_uniform_without_query_key_projections() {
    let mut p = blood_params(12);
    zero(&mut p, &["blood.pair_rcr.wq", "blood.pair_rcr.wk"].map(String::from));
    let mut s = Session::new(&p, Tape::inference(Precision::F64));
    let w = PairWeights::bind(&mut s, "blood.pair_rcr").unwrap();
    let h = s.tape.constant(Tensor::full(&[64], 1.0 / 64.0));
    let (_, map) = blood::cross_attend_pair(&mut s.tape, h, h, &w, "t").unwrap();
    assert_eq!(map.shape(), &[64, 64]);
    assert!(map.data().iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
}

#[test]
fn blood_pair_matches_naive_oracle() {
    let p = blood_params(13);
    let (hq, hkv) = (random_hist(28), random_hist(29));
    let mut s = Session::new(&p, Tape::inference(Precision::F64));
    let w = PairWeights::bind(&mut s, "blood.pair_alb").unwrap();
    let (q, kv) = (s.tape.constant(hq.clone()), s.tape.constant(hkv.clone()));
    let (attended, map) = blood::cross_attend_pair(&mut s.tape, q, kv, &w, "t").unwrap();

    let g = |n: &str| p.get(&format!("blood.pair_alb.{n}")).unwrap();
    let tokens = |h: &Tensor, side: &str| -> Mat {
        let (ew, eb, pos) = (g(&format!("{side}_embed.w")), g(&format!("{side}_embed.b")), rows(g(&format!("{side}_pos"))));
        (0..64).map(|i| (0..8).map(|c| h.data()[i] * ew.data()[c] + eb.data()[c] + pos[i][c]).collect()).collect()
    };
    let (qt, kvt) = (tokens(&hq, "q"), tokens(&hkv, "kv"));
    let (qm, km, vm) = (mm(&qt, &rows(g("wq"))), mm(&kvt, &rows(g("wk"))), mm(&kvt, &rows(g("wv"))));
    let out = naive_attention(&qm, &km, &vm, 1);
    let mean: Vec<f64> = (0..8).map(|c| out.iter().map(|r| r[c]).sum::<f64>() / 64.0).collect();
    assert!(max_diff(&vec![mean], s.tape.value(attended)) < 1e-5);
    for (i, r) in map.data().chunks(64).enumerate() {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let scores: Vec<f64> = km.iter().map(|k| k.iter().zip(&qm[i]).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()).collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (j, &m) in r.iter().enumerate() {
            assert!((m - (scores[j] - max).exp() / z).abs() < 1e-5);
        }
    }
}

#[test]
fn blood_branch_probability_and_determinism() {
    let cfg = ModelConfig::reduced();
    let p = blood_params(14);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..4 {
        let (real, fake) = synth::pair(&mut rng, 16).unwrap();
        for img in [real, fake] {
            let h = Histograms::of(&img, cfg.bins).unwrap();
            let run = || {
                let mut s = Session::new(&p, Tape::inference(Precision::F64));
                let out = blood::forward(&mut s, &h).unwrap();
                s.tape.value(out.p_j).data()[0]
            };
            let pj = run();
            assert!(pj > 0.0 && pj < 1.0);
            assert_eq!(pj.to_bits(), run().to_bits());
        }
    }
}

#[test]
fn color_histograms_ignore_pixel_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let img = synth::real_image(&mut rng, 16).unwrap();
    let mut order: Vec<usize> = (0..256).collect();
    order.shuffle(&mut rng);
    let shuffled = RgbImage::from_fn(16, 16, |x, y| {
        let i = order[y * 16 + x];
        img.pixel(i % 16, i / 16)
    })
    .unwrap();
    let (a, b) = (Histograms::of(&img, 64).unwrap(), Histograms::of(&shuffled, 64).unwrap());
    assert_eq!((&a.red, &a.lab_a, &a.cr), (&b.red, &b.lab_a, &b.cr));
    for h in [&b.red, &b.lab_a, &b.cr, &b.lbp] {
        assert!((h.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn blood_branch_gradients() {
    let cfg = ModelConfig::reduced();
    let p = blood_params(15);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let img = synth::real_image(&mut rng, 16).unwrap();
    let h = Histograms::of(&img, cfg.bins).unwrap();
    assert_gradcheck(&p, |s| {
        let out = blood::forward(s, &h)?;
        s.tape.bce(out.p_j, 1.0)
    });
}

#[test]
fn combination_rule() {
    let d = fusion::classify(1.0, 0.0, 0.8, 0.2).unwrap();
    assert!((d.p - 0.8).abs() < 1e-15);
    assert_eq!(d.label, Label::Fake);
    assert_eq!(fusion::classify(0.5, 0.5, 0.8, 0.2).unwrap().label, Label::Real);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        assert!((fusion::combine(a, a, 0.8, 0.2) - a).abs() < 1e-15);
        let p = fusion::combine(a, b, 0.8, 0.2);
        assert!(p >= a.min(b) - 1e-15 && p <= a.max(b) + 1e-15);
    }
    assert!(fusion::classify(1.2, 0.0, 0.8, 0.2).is_err());
}

#[test]
fn bce_reference_values() {
    use dsdf_core::metrics::bce;
    assert!(bce(1.0, 1.0) < 1e-6);
    assert!(bce(0.0, 0.0) < 1e-6);
    assert!((bce(0.5, 1.0) - core::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce(0.5, 0.0) - core::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce(0.0, 1.0).is_finite());
}
