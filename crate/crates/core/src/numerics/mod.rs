//! Dense linear algebra, scalar activations, seeded randomness and the
//! central-difference gradient oracle.
//!
//! All arithmetic is 64-bit. Matrix products go through `matrixmultiply`'s
//! single-threaded `dgemm`, so results are bit-identical across runs.

mod matrix;
mod rng;

pub use matrix::{dot, gram, l2_normalize_rows, l2_normalize_rows_with_norms, norm, Matrix, ZERO_NORM};
pub use rng::Rng;

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// GELU with the exact Gaussian CDF: `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

/// `d gelu / dx = Φ(x) + x φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow or `log(0)` for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = min(x, 0) - log(1 + e^{-|x|})
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// `log(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    -log_sigmoid(-x)
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {k} ± {h}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so that near-zero entries compare on an absolute scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731_058_578_6).abs() < 1e-10);
        // log σ(-100) = -100 - log(1 + e^-100)
        assert!((log_sigmoid(-100.0) + 100.0).abs() < 1e-9);
        assert!((log_sigmoid(1e4)).abs() < 1e-300);
        assert_eq!(log_sigmoid(-1e4), -1e4);
    }

    #[test]
    fn gelu_matches_known_value() {
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        assert!((gelu(-1.0) + 0.158_655_253_931_457).abs() < 1e-14);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = finite_diff_grad(|v| gelu(v[0]), &[x], 1e-6).unwrap()[0];
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|v| v[0] * v[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|v| v.iter().sum(), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_diff_errors() {
        assert!(matches!(
            finite_diff_grad(|v| (v[0] - 1e-5).ln(), &[1e-5], 1e-5),
            Err(Error::NonFinite(_))
        ));
        assert!(finite_diff_grad(|v| v[0], &[0.0], 1e-2).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 0.0, -5.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn arb_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    /// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
    fn min_eigenvalue(m: &Matrix) -> f64 {
        let n = m.rows();
        let mut a = m.clone();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a.get(p, q).powi(2);
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        (0..n).map(|i| a.get(i, i)).fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(m in arb_matrix(6, 6)) {
            prop_assume!(m.row_norms().iter().all(|&n| n > 1e-6));
            let once = l2_normalize_rows(&m).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice) <= 1e-12);
            for n in once.row_norms() {
                prop_assert!((n - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn gram_is_symmetric_psd(m in arb_matrix(16, 8)) {
            let g = gram(&m, &m).unwrap();
            prop_assert!(g.max_abs_diff(&g.transpose()) == 0.0);
            prop_assert!(min_eigenvalue(&g) >= -1e-9 * g.frobenius_norm().max(1.0));
        }

        #[test]
        fn gram_transpose_symmetry(a in arb_matrix(5, 4), b_rows in 1usize..5) {
            let b = Matrix::from_fn(b_rows, a.cols(), |i, j| (i as f64 - j as f64) * 0.3);
            let ab = gram(&a, &b).unwrap();
            let ba = gram(&b, &a).unwrap();
            prop_assert!(ab.max_abs_diff(&ba.transpose()) < 1e-12);
        }

        #[test]
        fn log_sigmoid_pair_identity(x in -50.0f64..50.0) {
            let lhs = log_sigmoid(x) + log_sigmoid(-x);
            let rhs = (sigmoid(x) * sigmoid(-x)).ln();
            prop_assert!((lhs - rhs).abs() <= 1e-10);
        }
    }
}
