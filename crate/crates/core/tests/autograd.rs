//! Finite-difference checks for every differentiable tape op, in 64-bit mode.

use dsdf_core::autograd::{Tape, Var};
use dsdf_core::gradcheck::check_params;
use dsdf_core::params::{ModelParams, Session};
use dsdf_core::{Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn params(entries: &[(&str, Tensor)]) -> ModelParams {
    let mut p = ModelParams::new();
    for (n, t) in entries {
        p.insert(n, t.clone());
    }
    p
}

/// Reduces an arbitrary value to a scalar with non-uniform weights so that
/// symmetric ops (softmax, layer norm) get non-trivial gradients.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let w = random(tape.shape(x), seed);
    let w = tape.constant(w);
    let y = tape.mul(x, w).unwrap();
    tape.sum(y)
}

/// Small enough that truncation error stays well below 1e-6 in 64-bit mode.
const OP_STEP: f64 = 1e-5;

fn assert_grads(p: &ModelParams, f: impl Fn(&mut Session<'_>) -> dsdf_core::Result<Var>) {
    for r in check_params(p, Precision::F64, OP_STEP, f).unwrap() {
        assert!(r.max_rel_err < 1e-6, "{}: rel err {} (abs {})", r.name, r.max_rel_err, r.max_abs_err);
    }
}

#[test]
fn sum_and_square_have_closed_forms() {
    let x = random(&[3, 4], 1);
    let p = params(&[("x", x.clone())]);
    let mut s = Session::new(&p, Tape::new(Precision::F64));
    let v = s.p("x").unwrap();
    let l = s.tape.sum(v);
    assert!(s.backward(l).unwrap().get(0).unwrap().iter().all(|&g| g == 1.0));

    let mut s = Session::new(&p, Tape::new(Precision::F64));
    let v = s.p("x").unwrap();
    let sq = s.tape.mul(v, v).unwrap();
    let l = s.tape.sum(sq);
    let g = s.backward(l).unwrap();
    for (gv, xv) in g.get(0).unwrap().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new(Precision::F64);
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(dsdf_core::Error::Contract(_))));
}

#[test]
fn matmul_grad() {
    let p = params(&[("a", random(&[3, 4], 1)), ("b", random(&[4, 2], 2))]);
    assert_grads(&p, |s| {
        let (a, b) = (s.p("a")?, s.p("b")?);
        let c = s.tape.matmul(a, b)?;
        Ok(weighted_sum(&mut s.tape, c, 3))
    });
}

#[test]
fn elementwise_grads() {
    let p = params(&[("a", random(&[2, 3], 4)), ("b", random(&[2, 3], 5)), ("r", random(&[3], 6)), ("s", random(&[1], 7))]);
    assert_grads(&p, |s| {
        let (a, b, r, sc) = (s.p("a")?, s.p("b")?, s.p("r")?, s.p("s")?);
        let x = s.tape.add(a, b)?;
        let x = s.tape.mul(x, a)?;
        let x = s.tape.sub(x, b)?;
        let x = s.tape.add_row(x, r)?;
        let x = s.tape.scale(x, 0.7);
        let x = s.tape.mul_scalar(x, sc)?;
        let x = s.tape.sigmoid(x);
        Ok(weighted_sum(&mut s.tape, x, 8))
    });
}

#[test]
fn relu_grad_away_from_kink() {
    let x = Tensor::new(&[4], vec![-0.8, -0.3, 0.4, 0.9]).unwrap();
    let p = params(&[("x", x)]);
    assert_grads(&p, |s| {
        let x = s.p("x")?;
        let y = s.tape.relu(x);
        Ok(weighted_sum(&mut s.tape, y, 9))
    });
}

#[test]
fn softmax_grad_on_each_axis() {
    let p = params(&[("x", random(&[2, 3, 4], 10))]);
    for axis in 0..3 {
        assert_grads(&p, |s| {
            let x = s.p("x")?;
            let y = s.tape.softmax(x, axis)?;
            Ok(weighted_sum(&mut s.tape, y, 11))
        });
    }
}

#[test]
fn layer_norm_grad() {
    let p = params(&[("x", random(&[3, 5], 12)), ("g", random(&[5], 13)), ("b", random(&[5], 14))]);
    assert_grads(&p, |s| {
        let (x, g, b) = (s.p("x")?, s.p("g")?, s.p("b")?);
        let y = s.tape.layer_norm(x, g, b)?;
        Ok(weighted_sum(&mut s.tape, y, 15))
    });
}

#[test]
fn conv_and_pool_grads() {
    let p = params(&[("x", random(&[6, 6, 2], 16)), ("k", random(&[3, 3, 2, 3], 17))]);
    assert_grads(&p, |s| {
        let (x, k) = (s.p("x")?, s.p("k")?);
        let y = s.tape.conv2d(x, k, 2, 1)?;
        let z = s.tape.conv2d(x, k, 1, 0)?;
        let pooled = s.tape.max_pool2d(z, 2, 2)?;
        let gap = s.tape.global_avg_pool(y)?;
        let a = weighted_sum(&mut s.tape, pooled, 18);
        let b = weighted_sum(&mut s.tape, gap, 19);
        s.tape.add(a, b)
    });
}

#[test]
fn structural_grads() {
    let p = params(&[("a", random(&[3, 4], 20)), ("b", random(&[2, 4], 21)), ("c", random(&[3, 2], 22))]);
    assert_grads(&p, |s| {
        let (a, b, c) = (s.p("a")?, s.p("b")?, s.p("c")?);
        let rows = s.tape.concat_rows(&[a, b])?;
        let t = s.tape.transpose(rows)?;
        let t = s.tape.slice_cols(t, 1, 3)?;
        let t = s.tape.reshape(t, &[3, 4])?;
        let cols = s.tape.concat_cols(&[t, c])?;
        let r = s.tape.slice_rows(cols, 1, 2)?;
        let m = s.tape.mean(r);
        let w = weighted_sum(&mut s.tape, cols, 23);
        s.tape.add(m, w)
    });
}

#[test]
fn attention_grad_multi_head_cross() {
    let p = params(&[("q", random(&[3, 4], 24)), ("k", random(&[5, 4], 25)), ("v", random(&[5, 4], 26))]);
    assert_grads(&p, |s| {
        let (q, k, v) = (s.p("q")?, s.p("k")?, s.p("v")?);
        let o = s.tape.attention(q, k, v, 2, "t")?;
        Ok(weighted_sum(&mut s.tape, o, 27))
    });
}

#[test]
fn bce_grad() {
    let p = params(&[("z", Tensor::new(&[1], vec![0.3]).unwrap())]);
    for target in [0.0, 1.0] {
        assert_grads(&p, |s| {
            let z = s.p("z")?;
            let pr = s.tape.sigmoid(z);
            s.tape.bce(pr, target)
        });
    }
}

#[test]
fn f32_mode_rounds_every_result() {
    let mut tape = Tape::new(Precision::F32);
    let a = tape.leaf(Tensor::new(&[1], vec![0.1]).unwrap(), false);
    let b = tape.scale(a, 1.0 / 3.0);
    let v = tape.value(b).data()[0];
    assert_eq!(v, v as f32 as f64);
}
