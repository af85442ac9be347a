//! Dense storage plus the probability and divergence primitives the model and
//! losses share. Everything here is 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out = self · x + bias`.
    pub fn affine_into(&self, x: &[f64], bias: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(bias.len(), self.rows);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = bias[r] + dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y`.
    pub fn add_transpose_mul(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += y ⊗ x`.
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, x, self.row_mut(r));
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn ensure_finite(values: &[f64], context: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `ln Σ exp(v)` via max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    ensure_finite(v, "softmax input")?;
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

/// Pulls a gradient w.r.t. softmax outputs `p` back to its inputs.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let mean = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(&pi, &gi)| pi * (gi - mean)).collect()
}

#[inline]
pub(crate) fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "divergence operands",
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::Empty("divergence operands"));
    }
    Ok(())
}

/// `KL(p ‖ q)` in nats, with both arguments clamped at [`LOG_CLAMP`] inside
/// the logarithm.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else {
                pi * (clamped_ln(pi) - clamped_ln(qi))
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Jensen-Shannon divergence against the midpoint mixture, in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_unchecked(p, &m) + 0.5 * kl_unchecked(q, &m))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference probe at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn softmax_basic_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for p in softmax(&[1000.0, 1000.0, 1000.0]).unwrap() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn softmax_matches_naive_formula() {
        // Naive exp/sum is exact enough at these magnitudes.
        let v = [1.0f64, 2.0, 3.0];
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        let naive: Vec<f64> = v.iter().map(|x| x.exp() / z).collect();
        for (a, b) in softmax(&v).unwrap().iter().zip(&naive) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // [1,2,3] → e^k / (e + e² + e³)
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (a, b) in softmax(&v).unwrap().iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(
            kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(kl_div(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_matches_term_by_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_dist(&mut rng, 5);
        let q = random_dist(&mut rng, 5);
        let mut oracle = 0.0;
        for i in 0..5 {
            oracle += p[i] * (p[i] / q[i]).ln();
        }
        assert_abs_diff_eq!(kl_div(&p, &q).unwrap(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn jsd_cases() {
        let p = [0.1, 0.9];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(
            jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], FD_STEP).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], FD_STEP).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(finite_diff_grad(|x| 1.0 / x[0], &[0.0], FD_STEP).is_ok());
        assert!(finite_diff_grad(|x| (x[0] - 1.0).ln(), &[1.0], FD_STEP).is_err());
    }

    #[test]
    fn softmax_ce_gradient_matches_fd() {
        // Analytic CE gradient softmax(z) - onehot(t) against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = 3;
        let ce = |x: &[f64]| log_sum_exp(x) - x[t];
        let fd = finite_diff_grad(ce, &z, FD_STEP).unwrap();
        let mut analytic = softmax(&z).unwrap();
        analytic[t] -= 1.0;
        for (a, n) in analytic.iter().zip(&fd) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let z = [0.3, -1.2, 0.8, 0.1];
        let w = [1.0, -2.0, 0.5, 3.0];
        let f = |x: &[f64]| dot(&softmax_unchecked(x), &w);
        let fd = finite_diff_grad(f, &z, FD_STEP).unwrap();
        let analytic = softmax_backward(&softmax_unchecked(&z), &w);
        for (a, n) in analytic.iter().zip(&fd) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-9);
        }
    }

    #[test]
    fn matrix_ops() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut out = [0.0; 2];
        m.affine_into(&[1.0, 0.0, -1.0], &[0.5, 0.5], &mut out);
        assert_eq!(out, [-1.5, -1.5]);
        let mut back = [0.0; 3];
        m.add_transpose_mul(&[1.0, 1.0], &mut back);
        assert_eq!(back, [5.0, 7.0, 9.0]);
        let mut acc = Matrix::zeros(2, 3);
        acc.add_outer(&[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(acc.as_slice(), &[1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    fn dist_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x > 0.0 && *x <= 1.0);
            }
        }

        #[test]
        fn gibbs_inequality((p, q) in (2usize..10).prop_flat_map(|n| (dist_strategy(n), dist_strategy(n)))) {
            prop_assert!(kl_div(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn jsd_symmetric_and_bounded((p, q) in (2usize..10).prop_flat_map(|n| (dist_strategy(n), dist_strategy(n)))) {
            let a = jsd(&p, &q).unwrap();
            let b = jsd(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0 && a <= std::f64::consts::LN_2 + 1e-12);
        }
    }
}
