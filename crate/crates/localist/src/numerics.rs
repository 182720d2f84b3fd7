//! Dense matrix primitives, temperature softmax, norms, a deterministic
//! generator, and a finite-difference gradient checker.
//!
//! Everything here is a pure function of its inputs; there is no global
//! state. All math is f64: the bound suites evaluate terms like e^(-20)
//! and need the exponent range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged row lengths".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`
    pub fn matmul_transpose(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transpose dimension mismatch");
        Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        })
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Frobenius norm over a contiguous row range (used for per-block weight
    /// groups, which are row slices of W_Q / W_K).
    pub fn frobenius_rows(&self, r0: usize, r1: usize) -> f64 {
        let mut sum = 0.0;
        for r in r0..r1 {
            for &v in self.row(r) {
                sum += v * v;
            }
        }
        sum.sqrt()
    }

    /// Zero a contiguous row range in place.
    pub fn zero_rows(&mut self, r0: usize, r1: usize) {
        for r in r0..r1 {
            for v in self.row_mut(r) {
                *v = 0.0;
            }
        }
    }

    /// Scale a contiguous row range in place.
    pub fn scale_rows(&mut self, r0: usize, r1: usize, s: f64) {
        for r in r0..r1 {
            for v in self.row_mut(r) {
                *v *= s;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frobenius norm: sqrt of the sum of squared entries.
pub fn frobenius(m: &Matrix) -> f64 {
    m.entries().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row-wise softmax at temperature `tau`, with max-subtraction so that
/// localist-regime ratios like e^(delta/tau) = e^20 cannot overflow.
///
/// Each output row is nonnegative and sums to 1; output[i][j] is
/// proportional to exp(m[i][j] / tau).
pub fn softmax_rows(m: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "softmax temperature must be positive and finite, got {tau}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("softmax input has non-finite entries".into()));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Largest singular value via power iteration on M^T M.
pub fn spectral_norm(m: &Matrix, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("spectral_norm tolerance must be positive".into()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("spectral_norm input has non-finite entries".into()));
    }
    let n = m.cols();
    if n == 0 || m.rows() == 0 {
        return Ok(0.0);
    }
    if m.entries().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    const MAX_ITERS: usize = 10_000;
    // Deterministic start; restart from basis vectors if the iterate lands
    // in the null space of M.
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut restart = 0usize;
    let mut lambda_prev = 0.0;
    for iter in 0..MAX_ITERS {
        // w = M^T (M v)
        let mut mv = vec![0.0; m.rows()];
        for (i, mvi) in mv.iter_mut().enumerate() {
            *mvi = dot(m.row(i), &v);
        }
        let mut w = vec![0.0; n];
        for i in 0..m.rows() {
            let s = mv[i];
            if s == 0.0 {
                continue;
            }
            for (wj, &mij) in w.iter_mut().zip(m.row(i)) {
                *wj += s * mij;
            }
        }
        let wnorm = dot(&w, &w).sqrt();
        if wnorm == 0.0 {
            // v is in the null space; try a standard basis vector instead.
            if restart < n {
                v = vec![0.0; n];
                v[restart] = 1.0;
                restart += 1;
                continue;
            }
            return Ok(0.0);
        }
        let lambda = dot(&v, &w); // Rayleigh quotient for M^T M
        for (vj, wj) in v.iter_mut().zip(&w) {
            *vj = wj / wnorm;
        }
        if iter > 0 && (lambda - lambda_prev).abs() <= tol * lambda.abs().max(1e-300) {
            return Ok(lambda.max(0.0).sqrt());
        }
        lambda_prev = lambda;
    }
    Err(Error::NumericFailure(format!(
        "spectral_norm power iteration did not converge after {MAX_ITERS} iterations"
    )))
}

/// Central finite-difference check of an analytic gradient.
///
/// Returns the maximum over coordinates of |fd - an| / max(1e-12, |fd| + |an|).
pub fn grad_check(
    f: &mut dyn FnMut(&Matrix) -> f64,
    analytic_grad: &Matrix,
    at: &Matrix,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("grad_check step must be positive".into()));
    }
    assert_eq!(analytic_grad.rows(), at.rows());
    assert_eq!(analytic_grad.cols(), at.cols());
    let mut max_rel = 0.0f64;
    let mut point = at.clone();
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let orig = point.at(r, c);
            point.set(r, c, orig + step);
            let fp = f(&point);
            point.set(r, c, orig - step);
            let fm = f(&point);
            point.set(r, c, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "grad_check: non-finite function value at coordinate ({r}, {c})"
                )));
            }
            let fd = (fp - fm) / (2.0 * step);
            let an = analytic_grad.at(r, c);
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// The fixed generator behind every random draw in the crate.
pub const RNG_ALGORITHM: &str = "xoshiro256++/splitmix64";

/// Deterministic RNG state. The same seed yields a bit-identical stream
/// across runs; state is plain `u64` words so checkpoints capture the
/// stream position exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    state: [u64; 4],
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        let mut x = seed;
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        RngState { seed, state }
    }

    /// Derive an independent stream seed, e.g. one per sweep grid point.
    pub fn derive_seed(seed: u64, stream: u64) -> u64 {
        let mut x = seed ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
        splitmix64(&mut x)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Marsaglia polar method.
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Uniform in 0..n. Modulo bias is negligible at desk scale.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.next_u64() % n
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.entries_mut() {
            *v = self.next_normal() * scale;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "left {a}, right {b}, tol {tol}");
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let m = Matrix::from_rows(vec![vec![1.0, 1.0, 1.0]]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        for j in 0..3 {
            approx(s.at(0, j), 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_two_logits() {
        // [3, 1] at tau=1: 1/(1+e^-2)
        let m = Matrix::from_rows(vec![vec![3.0, 1.0]]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        approx(s.at(0, 0), 0.880_797_077_977_882_3, 1e-12);
        approx(s.at(0, 1), 0.119_202_922_022_117_7, 1e-12);
    }

    #[test]
    fn softmax_sharp_temperature() {
        // [1, 0] at tau=0.1: 1/(1+e^-10)
        let m = Matrix::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let s = softmax_rows(&m, 0.1).unwrap();
        approx(s.at(0, 0), 0.999_954_602_131_297_6, 1e-12);
        approx(s.at(0, 1), 4.539_786_870_243_439e-5, 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let m = Matrix::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        assert!(matches!(softmax_rows(&m, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(softmax_rows(&m, -1.0), Err(Error::InvalidParameter(_))));
        let mut bad = m.clone();
        bad.entries_mut()[0] = f64::NAN;
        assert!(matches!(softmax_rows(&bad, 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_across_temperatures() {
        let mut rng = RngState::from_seed(7);
        for &tau in &[1e-3, 1e-2, 0.1, 1.0, 10.0, 1e3] {
            let m = rng.normal_matrix(5, 9, 3.0);
            let s = softmax_rows(&m, tau).unwrap();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                approx(sum, 1.0, 1e-12);
                assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = RngState::from_seed(11);
        for _ in 0..20 {
            let m = rng.normal_matrix(3, 6, 2.0);
            let mut shifted = m.clone();
            for r in 0..shifted.rows() {
                let c = rng.next_normal() * 5.0;
                for v in shifted.row_mut(r) {
                    *v += c;
                }
            }
            let a = softmax_rows(&m, 0.7).unwrap();
            let b = softmax_rows(&shifted, 0.7).unwrap();
            for (x, y) in a.entries().iter().zip(b.entries()) {
                approx(*x, *y, 1e-12);
            }
        }
    }

    #[test]
    fn softmax_two_key_ratio_matches_logit_gap() {
        // Direct check of the concentration mechanism at the primitive
        // level: weight ratio equals e^(gap/tau).
        let mut rng = RngState::from_seed(13);
        for _ in 0..50 {
            let gap = rng.next_f64() * 4.0;
            let base = rng.next_normal();
            let tau = 0.2 + rng.next_f64() * 2.0;
            let m = Matrix::from_rows(vec![vec![base + gap, base]]).unwrap();
            let s = softmax_rows(&m, tau).unwrap();
            let ratio = s.at(0, 0) / s.at(0, 1);
            let expected = (gap / tau).exp();
            assert!((ratio - expected).abs() / expected <= 1e-9);
        }
    }

    #[test]
    fn frobenius_examples() {
        let eye = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        approx(frobenius(&eye), 2.0f64.sqrt(), 1e-15);
        approx(frobenius(&Matrix::zeros(3, 4)), 0.0, 0.0);
        let m = Matrix::from_rows(vec![vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        approx(frobenius(&m), 5.0, 1e-15);
    }

    #[test]
    fn spectral_norm_examples() {
        let eye = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        approx(spectral_norm(&eye, 1e-12).unwrap(), 1.0, 1e-9);
        let diag = Matrix::from_rows(vec![vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        approx(spectral_norm(&diag, 1e-12).unwrap(), 3.0, 1e-9);
        let nilpotent = Matrix::from_rows(vec![vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        approx(spectral_norm(&nilpotent, 1e-12).unwrap(), 2.0, 1e-9);
        approx(spectral_norm(&Matrix::zeros(3, 3), 1e-12).unwrap(), 0.0, 0.0);
    }

    #[test]
    fn frobenius_dominates_spectral_norm() {
        let mut rng = RngState::from_seed(29);
        for _ in 0..20 {
            let m = rng.normal_matrix(4, 6, 1.5);
            let s = spectral_norm(&m, 1e-10).unwrap();
            assert!(frobenius(&m) >= s - 1e-8);
        }
    }

    #[test]
    fn grad_check_quadratic() {
        let at = Matrix::from_rows(vec![vec![1.0]]).unwrap();
        let analytic = Matrix::from_rows(vec![vec![2.0]]).unwrap();
        let err = grad_check(&mut |m| m.at(0, 0) * m.at(0, 0), &analytic, &at, 1e-5).unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_frobenius_squared() {
        let mut rng = RngState::from_seed(3);
        let at = rng.normal_matrix(3, 4, 1.0);
        let mut analytic = at.clone();
        analytic.scale(2.0);
        let err = grad_check(
            &mut |m| m.entries().iter().map(|v| v * v).sum::<f64>(),
            &analytic,
            &at,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_cross_entropy_of_softmax() {
        // f(M) = -log softmax(M/tau)[0][target]; the analytic gradient of
        // the row is (p - y) / tau
        let tau = 0.7;
        let target = 2usize;
        let mut rng = RngState::from_seed(17);
        let at = rng.normal_matrix(1, 5, 1.5);
        let p = softmax_rows(&at, tau).unwrap();
        let analytic = Matrix::from_fn(1, 5, |_, j| {
            (p.at(0, j) - if j == target { 1.0 } else { 0.0 }) / tau
        });
        let err = grad_check(
            &mut |m| {
                let p = softmax_rows(m, tau).unwrap();
                -p.at(0, target).ln()
            },
            &analytic,
            &at,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn grad_check_reports_bad_coordinate() {
        let at = Matrix::from_rows(vec![vec![0.0]]).unwrap();
        let analytic = Matrix::zeros(1, 1);
        let err = grad_check(&mut |m| m.at(0, 0).ln(), &analytic, &at, 1e-5);
        match err {
            Err(Error::NumericFailure(msg)) => assert!(msg.contains("(0, 0)")),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = RngState::from_seed(42);
        let mut b = RngState::from_seed(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ma = a.normal_matrix(4, 4, 1.0);
        let mb = b.normal_matrix(4, 4, 1.0);
        assert_eq!(ma.entries(), mb.entries());
    }

    #[test]
    fn rng_serializes_stream_position() {
        let mut a = RngState::from_seed(9);
        for _ in 0..17 {
            a.next_u64();
        }
        let json = serde_json::to_string(&a).unwrap();
        let mut b: RngState = serde_json::from_str(&json).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
