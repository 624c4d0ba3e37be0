//! Scalar special functions and small dense linear algebra.
//!
//! Everything here operates on plain `f64` / `ndarray` values and is the
//! shared numeric substrate for the probability code: log-space Gaussian
//! evaluation, stable log-sum-exp, and Cholesky-based routines for the
//! small (D <= ~32) covariance matrices used by the mixture ground truth.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Error function, double precision.
///
/// Rational approximations in three ranges (|x| < 0.5, [0.46875, 4], > 4),
/// max relative error around 1e-16.
pub fn erf(x: f64) -> f64 {
    if x.abs() < 0.46875 {
        let z = x * x;
        // Coefficients for erf(x) = x * P(z)/Q(z) on |x| <= 0.46875
        const P: [f64; 5] = [
            3.209377589138469472562e3,
            3.774852376853020208137e2,
            1.138641541510501556495e2,
            3.161123743870565596947e0,
            1.857777061846031526730e-1,
        ];
        const Q: [f64; 5] = [
            2.844236833439170622273e3,
            1.282616526077372275645e3,
            2.440246379344441733056e2,
            2.360129095234412093499e1,
            1.0,
        ];
        let num = ((((P[4] * z + P[3]) * z + P[2]) * z + P[1]) * z) + P[0];
        let den = ((((Q[4] * z + Q[3]) * z + Q[2]) * z + Q[1]) * z) + Q[0];
        x * num / den
    } else {
        let s = x.signum();
        s * (1.0 - erfc(x.abs()))
    }
}

/// Complementary error function for x >= 0 extended by symmetry.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 0.46875 {
        return 1.0 - erf(x);
    }
    if x <= 4.0 {
        const P: [f64; 9] = [
            1.23033935479799725272e3,
            2.05107837782607146532e3,
            1.71204761263407058314e3,
            8.81952221241769090411e2,
            2.98635138197400131132e2,
            6.61191906371416294775e1,
            8.88314979438837594118e0,
            5.64188496988670089180e-1,
            2.15311535474403846343e-8,
        ];
        const Q: [f64; 9] = [
            1.23033935480374942043e3,
            3.43936767414372163696e3,
            4.36261909014324715820e3,
            3.29079923573345962678e3,
            1.62138957456669018874e3,
            5.37181101862009857509e2,
            1.17693950891312499305e2,
            1.57449261107098347253e1,
            1.0,
        ];
        let num = P.iter().rev().fold(0.0, |acc, &c| acc * x + c);
        let den = Q.iter().rev().fold(0.0, |acc, &c| acc * x + c);
        (-x * x).exp() * num / den
    } else {
        // Asymptotic expansion: erfc(x) = exp(-x^2)/(x sqrt(pi)) (1 + sum_n (-1)^n (2n-1)!!/(2x^2)^n).
        // Terms decrease until n ~ x^2; truncate at the smallest term.
        let inv2x2 = 1.0 / (2.0 * x * x);
        let mut term = 1.0f64;
        let mut sum = 1.0f64;
        for n in 1..40 {
            let next = term * -((2 * n - 1) as f64) * inv2x2;
            if next.abs() >= term.abs() || next.abs() < 1e-18 {
                if next.abs() < 1e-18 {
                    sum += next;
                }
                break;
            }
            sum += next;
            term = next;
        }
        (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) * sum
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal log-density.
pub fn std_normal_logpdf(x: f64) -> f64 {
    -0.5 * (LN_2PI + x * x)
}

/// Univariate Gaussian log-density.
pub fn normal_logpdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * (LN_2PI + z * z) - std.ln()
}

/// Stable log(sum(exp(vals))).
pub fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = vals.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// log((1/n) * sum(exp(vals)))
pub fn logmeanexp(vals: &[f64]) -> f64 {
    logsumexp(vals) - (vals.len() as f64).ln()
}

/// Numerically stable softmax.
pub fn softmax(vals: &[f64]) -> Vec<f64> {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cholesky factorization A = L L^T for a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::parameter("cholesky: matrix not square"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::numeric(format!(
                        "cholesky: matrix not positive definite (pivot {i} = {s})"
                    )));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve L x = b with L lower triangular.
pub fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = l[[i, k]] * x[k];
            x[i] -= t;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solve L^T x = b with L lower triangular.
pub fn solve_lower_transpose(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[[k, i]] * x[k];
            x[i] -= t;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Inverse of an SPD matrix via its Cholesky factor.
pub fn spd_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let y = solve_lower(&l, &e);
        let x = solve_lower_transpose(&l, &y);
        inv.column_mut(j).assign(&x);
    }
    // Symmetrize to undo round-off drift.
    let inv_t = inv.t().to_owned();
    Ok((&inv + &inv_t) * 0.5)
}

/// log N(x; mean, cov) via Cholesky, for small dense covariances.
pub fn mvn_logpdf(x: &Array1<f64>, mean: &Array1<f64>, cov_chol: &Array2<f64>) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    let y = solve_lower(cov_chol, &diff);
    let maha: f64 = y.iter().map(|v| v * v).sum();
    let logdet: f64 = cov_chol.diag().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (d * LN_2PI + logdet + maha)
}

/// Trapezoidal-rule node weights for a uniform grid of `n` points with spacing `h`.
pub fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 2);
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Uniform grid of `n` points covering [lo, hi] inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let h = (hi - lo) / (n as f64 - 1.0);
    (0..n).map(|i| lo + h * i as f64).collect()
}
