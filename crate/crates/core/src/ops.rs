//! Forward kernels on plain tensors.
//!
//! The tape in [`crate::autograd`] records these and supplies the matching
//! backward rules; they are also usable directly for inference-free checks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(dim_err(format!("{op} expects a rank-2 tensor, got {s:?}"))),
    }
}

fn dims3(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(dim_err(format!("{op} expects an H×W×C tensor, got {s:?}"))),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `C += A·B` on raw row-major slices (`a` is m×k, `b` is k×n).
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `C += Aᵀ·B` where `a` is k×m and `b` is k×n.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `C += A·Bᵀ` where `a` is m×k and `b` is n×k.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "transpose")?;
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |i| {
        let (r, c) = (i / m, i % m);
        d[c * n + r]
    }))
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = math::exp(src[idx(j)] - max);
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Row-wise softmax of a contiguous m×n slice, in place.
pub(crate) fn softmax_rows_inplace(x: &mut [f64], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| math::sigmoid(x.data()[i]))
}

/// Per-slice statistics along `axis`: returns (normalized, mean, rstd).
pub(crate) fn normalize_axis(
    x: &Tensor,
    axis: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if len < 2 {
        return Err(dim_err(format!(
            "layer_norm axis extent must be ≥ 2, got {len}"
        )));
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut means = Vec::with_capacity(outer * inner);
    let mut rstds = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mean = (0..len).map(|j| src[base + j * inner]).sum::<f64>() / len as f64;
            let var = (0..len)
                .map(|j| {
                    let d = src[base + j * inner] - mean;
                    d * d
                })
                .sum::<f64>()
                / len as f64;
            let rstd = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for j in 0..len {
                out[base + j * inner] = (src[base + j * inner] - mean) * rstd;
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    Ok((out, means, rstds))
}

/// Layer normalization along `axis` followed by the affine `gain`/`bias`
/// (each with the axis extent).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, axis: usize) -> Result<Tensor> {
    let (_, len, inner) = axis_split(x.shape(), axis)?;
    if gain.len() != len || bias.len() != len {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let (mut out, _, _) = normalize_axis(x, axis)?;
    for (idx, v) in out.iter_mut().enumerate() {
        let j = (idx / inner) % len;
        *v = *v * gain.data()[j] + bias.data()[j];
    }
    Tensor::new(x.shape(), out)
}

/// Geometry of a strided, zero-padded 2-D window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (in_h, in_w, c_in) = dims3(input, "conv2d")?;
        let (k, k2, kc, c_out) = match kernels.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(dim_err(format!("conv2d kernels must be k×k×Cin×Cout, got {s:?}"))),
        };
        if k != k2 {
            return Err(dim_err(format!("conv2d kernels must be square, got {k}×{k2}")));
        }
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernels.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(dim_err("conv2d stride must be positive"));
        }
        if k > in_h + 2 * padding || k > in_w + 2 * padding {
            return Err(dim_err(format!(
                "kernel {k}×{k} larger than padded input {}×{}",
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        Ok(Self {
            in_h,
            in_w,
            c_in,
            c_out,
            k,
            stride,
            padding,
            out_h: (in_h + 2 * padding - k) / stride + 1,
            out_w: (in_w + 2 * padding - k) / stride + 1,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `m`, if inside.
    #[inline]
    pub(crate) fn src(&self, o: usize, m: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + m) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `f[i,j,o] = Σ_{m,n,c} I[i·s+m−p, j·s+n−p, c]·K[m,n,c,o]`, zero padded.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    let mut out = vec![0.0; g.out_h * g.out_w * g.c_out];
    conv2d_raw(&g, input.data(), kernels.data(), &mut out);
    Tensor::new(&[g.out_h, g.out_w, g.c_out], out)
}

pub(crate) fn conv2d_raw(g: &ConvGeometry, input: &[f64], kernels: &[f64], out: &mut [f64]) {
    let (cin, cout) = (g.c_in, g.c_out);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let orow = &mut out[(oy * g.out_w + ox) * cout..][..cout];
            for m in 0..g.k {
                let Some(iy) = g.src(oy, m, g.in_h) else { continue };
                for n in 0..g.k {
                    let Some(ix) = g.src(ox, n, g.in_w) else { continue };
                    let px = &input[(iy * g.in_w + ix) * cin..][..cin];
                    let kbase = (m * g.k + n) * cin * cout;
                    for (c, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kernels[kbase + c * cout..][..cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over `window`×`window` regions; also returns the flat input
/// index that won each output cell.
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = dims3(input, "max_pool2d")?;
    if window == 0 || stride == 0 {
        return Err(dim_err("max_pool2d window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(dim_err(format!(
            "pool window {window} exceeds input {h}×{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let src = input.data();
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for m in 0..window {
                for n in 0..window {
                    let base = ((oy * stride + m) * w + ox * stride + n) * c;
                    for ch in 0..c {
                        let o = (oy * ow + ox) * c + ch;
                        if src[base + ch] > out[o] {
                            out[o] = src[base + ch];
                            arg[o] = base + ch;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[oh, ow, c], out)?, arg))
}

/// Channel means of an H×W×C map.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3(input, "global_avg_pool")?;
    let mut out = vec![0.0; c];
    for px in input.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_hand_cases() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 3], 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&Tensor::new(&[2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);

        let x = random(&[9], 4);
        let s = softmax(&x, 0).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (p, v) in s.data().iter().zip(x.data()) {
            assert!((p - v.exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_middle_axis() {
        let x = random(&[2, 3, 4], 5);
        let s = softmax(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let sum: f64 = (0..3).map(|b| s.at(&[a, b, c])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::new(&[2], vec![-3.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data(), &[0.5]);
    }

    #[test]
    fn layer_norm_definition() {
        let x = Tensor::new(&[3], vec![2.0, 4.0, 6.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 0).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
        assert!(layer_norm(&Tensor::zeros(&[1]), &Tensor::zeros(&[1]), &Tensor::zeros(&[1]), 0).is_err());
    }

    #[test]
    fn conv_identity_and_box() {
        let x = random(&[5, 5, 1], 6);
        let id = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &id, 1, 0).unwrap(), x);

        let ones = Tensor::full(&[5, 5, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&ones, &k, 1, 1).unwrap();
        assert_eq!(y.at(&[2, 2, 0]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);

        let err = conv2d(&Tensor::zeros(&[2, 2, 1]), &Tensor::zeros(&[5, 5, 1, 1]), 1, 1);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = random(&[8, 8, 2], 7);
        let k = random(&[3, 3, 2, 4], 8);
        let (stride, pad) = (2, 1);
        let y = conv2d(&x, &k, stride, pad).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                for o in 0..4 {
                    let mut s = 0.0;
                    for m in 0..3 {
                        for n in 0..3 {
                            let (yy, xx) = ((i * stride + m) as isize - 1, (j * stride + n) as isize - 1);
                            if yy < 0 || xx < 0 || yy >= 8 || xx >= 8 {
                                continue;
                            }
                            for c in 0..2 {
                                s += x.at(&[yy as usize, xx as usize, c]) * k.at(&[m, n, c, o]);
                            }
                        }
                    }
                    assert!((y.at(&[i, j, o]) - s).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn pooling() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        assert!(max_pool2d(&x, 3, 1).is_err());

        let c = Tensor::full(&[4, 4, 2], 0.7);
        for v in global_avg_pool(&c).unwrap().data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
        let r = random(&[6, 6, 3], 9);
        let g = global_avg_pool(&r).unwrap();
        for ch in 0..3 {
            let mean: f64 = (0..36).map(|i| r.data()[i * 3 + ch]).sum::<f64>() / 36.0;
            assert!((g.data()[ch] - mean).abs() < 1e-6);
        }
    }
}
