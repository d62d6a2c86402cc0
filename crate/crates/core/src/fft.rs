//! Separable 2-D discrete Fourier transform.
//!
//! Rows and columns use an iterative radix-2 FFT when their length is a
//! power of two and a table-driven direct sum otherwise; both evaluate the
//! unnormalized forward transform
//! `F(u,v) = Σ_x Σ_y f(x,y)·exp(−2πi(ux/M + vy/N))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{dim_err, Result};
use crate::math;
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

/// Precomputed plan for one axis length.
struct Plan {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    radix2: bool,
}

impl Plan {
    fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|k| {
                let (s, c) = math::sin_cos(2.0 * PI * k as f64 / n as f64);
                (c, s)
            })
            .unzip();
        Self {
            n,
            cos,
            sin,
            radix2: n.is_power_of_two(),
        }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64], dir: Direction, scratch: &mut (Vec<f64>, Vec<f64>)) {
        if self.radix2 {
            self.radix2_inplace(re, im, dir);
        } else {
            self.direct(re, im, dir, scratch);
        }
    }

    fn direct(&self, re: &mut [f64], im: &mut [f64], dir: Direction, scratch: &mut (Vec<f64>, Vec<f64>)) {
        let n = self.n;
        let sign = if dir == Direction::Forward { -1.0 } else { 1.0 };
        let (out_re, out_im) = scratch;
        out_re.clear();
        out_im.clear();
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for j in 0..n {
                let t = (j * k) % n;
                let (c, s) = (self.cos[t], sign * self.sin[t]);
                sr += re[j] * c - im[j] * s;
                si += re[j] * s + im[j] * c;
            }
            out_re.push(sr);
            out_im.push(si);
        }
        re.copy_from_slice(out_re);
        im.copy_from_slice(out_im);
    }

    fn radix2_inplace(&self, re: &mut [f64], im: &mut [f64], dir: Direction) {
        let n = self.n;
        if n < 2 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if dir == Direction::Forward { -1.0 } else { 1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (c, s) = (self.cos[k * step], sign * self.sin[k * step]);
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * c - im[b] * s;
                    let ti = re[b] * s + im[b] * c;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

fn transform(input: &ComplexTensor, dir: Direction) -> Result<ComplexTensor> {
    let (m, n) = match input.shape() {
        [m, n] => (*m, *n),
        s => return Err(dim_err(format!("2-D DFT expects an M×N grid, got {s:?}"))),
    };
    if m < 2 || n < 2 {
        return Err(dim_err(format!("2-D DFT needs M,N ≥ 2, got {m}×{n}")));
    }
    let mut re = input.re.clone();
    let mut im = input.im.clone();
    let mut scratch = (Vec::with_capacity(m.max(n)), Vec::with_capacity(m.max(n)));

    let row_plan = Plan::new(n);
    for r in 0..m {
        row_plan.run(&mut re[r * n..(r + 1) * n], &mut im[r * n..(r + 1) * n], dir, &mut scratch);
    }

    let col_plan = Plan::new(m);
    let (mut cr, mut ci) = (vec![0.0; m], vec![0.0; m]);
    for c in 0..n {
        for r in 0..m {
            cr[r] = re[r * n + c];
            ci[r] = im[r * n + c];
        }
        col_plan.run(&mut cr, &mut ci, dir, &mut scratch);
        for r in 0..m {
            re[r * n + c] = cr[r];
            im[r * n + c] = ci[r];
        }
    }

    if dir == Direction::Inverse {
        let inv = 1.0 / (m * n) as f64;
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= inv);
    }
    ComplexTensor::new(&[m, n], re, im)
}

/// Forward 2-D DFT of a real M×N grid.
pub fn dft2(gray: &Tensor) -> Result<ComplexTensor> {
    transform(&ComplexTensor::from_real(gray), Direction::Forward)
}

pub fn dft2_complex(input: &ComplexTensor) -> Result<ComplexTensor> {
    transform(input, Direction::Forward)
}

/// Inverse 2-D DFT including the `1/(MN)` factor.
pub fn idft2(spectrum: &ComplexTensor) -> Result<ComplexTensor> {
    transform(spectrum, Direction::Inverse)
}

/// `F_shifted(u,v) = F((u + M/2) mod M, (v + N/2) mod N)`; self-inverse for
/// even sides.
pub fn fft_shift(f: &ComplexTensor) -> Result<ComplexTensor> {
    let (m, n) = match f.shape() {
        [m, n] => (*m, *n),
        s => return Err(dim_err(format!("fft_shift expects an M×N grid, got {s:?}"))),
    };
    if m % 2 != 0 || n % 2 != 0 {
        return Err(dim_err(format!("fft_shift needs even sides, got {m}×{n}")));
    }
    let mut out = ComplexTensor::zeros(&[m, n]);
    for u in 0..m {
        for v in 0..n {
            let src = ((u + m / 2) % m) * n + (v + n / 2) % n;
            out.re[u * n + v] = f.re[src];
            out.im[u * n + v] = f.im[src];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[m, n], |_| rng.random_range(0.0..1.0))
    }

    /// O(M²N²) evaluation of the defining double sum.
    fn double_sum(x: &Tensor) -> ComplexTensor {
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let mut out = ComplexTensor::zeros(&[m, n]);
        for u in 0..m {
            for v in 0..n {
                let (mut sr, mut si) = (0.0, 0.0);
                for a in 0..m {
                    for b in 0..n {
                        let ang = -2.0 * PI * ((u * a) as f64 / m as f64 + (v * b) as f64 / n as f64);
                        sr += x.at(&[a, b]) * ang.cos();
                        si += x.at(&[a, b]) * ang.sin();
                    }
                }
                out.re[u * n + v] = sr;
                out.im[u * n + v] = si;
            }
        }
        out
    }

    fn max_rel(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
        let scale = b.power().iter().map(|p| p.sqrt()).fold(0.0, f64::max).max(1e-12);
        a.re.iter()
            .zip(&b.re)
            .chain(a.im.iter().zip(&b.im))
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_is_dc_only() {
        let x = Tensor::full(&[8, 8], 0.75);
        let f = dft2(&x).unwrap();
        assert!((f.re[0] - 64.0 * 0.75).abs() < 1e-9);
        for i in 1..64 {
            assert!(f.re[i].abs() < 1e-6 && f.im[i].abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_is_flat() {
        let mut x = Tensor::zeros(&[8, 4]);
        x.data_mut()[0] = 1.0;
        let f = dft2(&x).unwrap();
        for i in 0..32 {
            assert!((f.re[i] - 1.0).abs() < 1e-12 && f.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn both_paths_match_double_sum() {
        for (m, n, seed) in [(8, 8, 1), (6, 10, 2), (8, 12, 3), (16, 16, 4)] {
            let x = random(m, n, seed);
            let rel = max_rel(&dft2(&x).unwrap(), &double_sum(&x));
            assert!(rel < 1e-10, "{m}×{n}: {rel}");
        }
    }

    #[test]
    fn inverse_round_trip() {
        for (m, n) in [(8, 8), (12, 12), (32, 16)] {
            let x = random(m, n, 9);
            let back = idft2(&dft2(&x).unwrap()).unwrap();
            assert!(back.re.iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!(back.im.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn shift_moves_dc_and_is_involutive() {
        let x = Tensor::full(&[8, 8], 1.0);
        let s = fft_shift(&dft2(&x).unwrap()).unwrap();
        assert!((s.re[4 * 8 + 4] - 64.0).abs() < 1e-9);

        let idx = ComplexTensor::new(&[4, 4], (0..16).map(|i| i as f64).collect(), vec![0.0; 16]).unwrap();
        let s = fft_shift(&idx).unwrap();
        for u in 0..4 {
            for v in 0..4 {
                assert_eq!(s.re[u * 4 + v], (((u + 2) % 4) * 4 + (v + 2) % 4) as f64);
            }
        }
        let r = ComplexTensor::from_real(&random(8, 8, 3));
        assert_eq!(fft_shift(&fft_shift(&r).unwrap()).unwrap(), r);
        assert!(fft_shift(&ComplexTensor::zeros(&[3, 4])).is_err());
    }
}
