//! Probability kernels shared by the autodiff tape and the module APIs.
//!
//! Each kernel comes as a forward evaluation plus a hand-derived
//! vector-Jacobian product. Layout conventions:
//!
//! - batches are row-major: `S` latent samples of data row `b` occupy rows
//!   `b*S .. (b+1)*S` of a tall matrix;
//! - per-row mixture parameters are `logits: B x K`, `means/stds: B x (K*L)`
//!   with component-major packing `k*L + d`.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::math::{normal_logpdf, std_normal_cdf, LN_2PI};

/// Raw Bernoulli logits are clamped so probabilities stay in [1e-6, 1-1e-6].
pub const BERNOULLI_LOGIT_CLAMP: f64 = 13.815510557964274;

/// Diagonal-Gaussian log-likelihood summed over observed dimensions.
/// `mean`, `std`, `x`, `mask` all m x d; returns m x 1.
pub fn gauss_loglik_masked_fwd(
    mean: &Array2<f64>,
    std: &Array2<f64>,
    x: &Array2<f64>,
    mask: &Array2<f64>,
) -> Array2<f64> {
    let m = mean.nrows();
    let d = mean.ncols();
    let mut out = Array2::zeros((m, 1));
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..d {
            if mask[[i, j]] != 0.0 {
                acc += normal_logpdf(x[[i, j]], mean[[i, j]], std[[i, j]]);
            }
        }
        out[[i, 0]] = acc;
    }
    out
}

pub fn gauss_loglik_masked_vjp(
    mean: &Array2<f64>,
    std: &Array2<f64>,
    x: &Array2<f64>,
    mask: &Array2<f64>,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let m = mean.nrows();
    let d = mean.ncols();
    let mut gm = Array2::zeros((m, d));
    let mut gs = Array2::zeros((m, d));
    for i in 0..m {
        let g = grad_out[[i, 0]];
        for j in 0..d {
            if mask[[i, j]] != 0.0 {
                let s = std[[i, j]];
                let diff = x[[i, j]] - mean[[i, j]];
                gm[[i, j]] = g * diff / (s * s);
                gs[[i, j]] = g * (diff * diff / (s * s * s) - 1.0 / s);
            }
        }
    }
    (gm, gs)
}

/// Bernoulli log-likelihood over observed dims from raw (pre-sigmoid) logits.
pub fn bernoulli_loglik_masked_fwd(
    raw: &Array2<f64>,
    x: &Array2<f64>,
    mask: &Array2<f64>,
) -> Array2<f64> {
    let m = raw.nrows();
    let d = raw.ncols();
    let mut out = Array2::zeros((m, 1));
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..d {
            if mask[[i, j]] != 0.0 {
                let r = raw[[i, j]].clamp(-BERNOULLI_LOGIT_CLAMP, BERNOULLI_LOGIT_CLAMP);
                let xv = x[[i, j]];
                acc += -xv * crate::math::softplus(-r) - (1.0 - xv) * crate::math::softplus(r);
            }
        }
        out[[i, 0]] = acc;
    }
    out
}

pub fn bernoulli_loglik_masked_vjp(
    raw: &Array2<f64>,
    x: &Array2<f64>,
    mask: &Array2<f64>,
    grad_out: &Array2<f64>,
) -> Array2<f64> {
    let m = raw.nrows();
    let d = raw.ncols();
    let mut gr = Array2::zeros((m, d));
    for i in 0..m {
        let g = grad_out[[i, 0]];
        for j in 0..d {
            if mask[[i, j]] != 0.0 {
                let r = raw[[i, j]];
                if r.abs() < BERNOULLI_LOGIT_CLAMP {
                    gr[[i, j]] = g * (x[[i, j]] - crate::math::sigmoid(r));
                }
            }
        }
    }
    gr
}

/// Standard-normal log-density per row: -0.5 (L ln 2pi + |z|^2).
pub fn std_normal_loglik_fwd(z: &Array2<f64>) -> Array2<f64> {
    let m = z.nrows();
    let l = z.ncols() as f64;
    let mut out = Array2::zeros((m, 1));
    for i in 0..m {
        let ss: f64 = z.row(i).iter().map(|v| v * v).sum();
        out[[i, 0]] = -0.5 * (l * LN_2PI + ss);
    }
    out
}

pub fn std_normal_loglik_vjp(z: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let m = z.nrows();
    let d = z.ncols();
    let mut gz = Array2::zeros((m, d));
    for i in 0..m {
        let g = grad_out[[i, 0]];
        for j in 0..d {
            gz[[i, j]] = -g * z[[i, j]];
        }
    }
    gz
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let lse = crate::math::logsumexp(logits);
    logits.iter().map(|v| v - lse).collect()
}

/// Mixture log-density of each latent sample under its row's mixture.
///
/// `z` has `spr` samples per parameter row; returns (B*spr) x 1.
pub fn mixture_logpdf_fwd(
    logits: &Array2<f64>,
    means: &Array2<f64>,
    stds: &Array2<f64>,
    z: &Array2<f64>,
    spr: usize,
) -> Array2<f64> {
    let b = logits.nrows();
    let k = logits.ncols();
    let l = z.ncols();
    assert_eq!(z.nrows(), b * spr);
    assert_eq!(means.ncols(), k * l);
    let mut out = Array2::zeros((b * spr, 1));
    let mut a = vec![0.0f64; k];
    for row in 0..b {
        let lw = log_softmax_row(logits.row(row).as_slice().unwrap());
        for s in 0..spr {
            let zi = b_row_sample(row, s, spr);
            for (kk, item) in a.iter_mut().enumerate() {
                let mut acc = lw[kk];
                for d in 0..l {
                    acc += normal_logpdf(
                        z[[zi, d]],
                        means[[row, kk * l + d]],
                        stds[[row, kk * l + d]],
                    );
                }
                *item = acc;
            }
            out[[zi, 0]] = crate::math::logsumexp(&a);
        }
    }
    out
}

#[inline]
fn b_row_sample(row: usize, s: usize, spr: usize) -> usize {
    row * spr + s
}

/// VJP of [`mixture_logpdf_fwd`] into (logits, means, stds, z).
pub fn mixture_logpdf_vjp(
    logits: &Array2<f64>,
    means: &Array2<f64>,
    stds: &Array2<f64>,
    z: &Array2<f64>,
    spr: usize,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
    let b = logits.nrows();
    let k = logits.ncols();
    let l = z.ncols();
    let mut g_logits = Array2::zeros((b, k));
    let mut g_means = Array2::zeros((b, k * l));
    let mut g_stds = Array2::zeros((b, k * l));
    let mut g_z = Array2::zeros((b * spr, l));
    let mut a = vec![0.0f64; k];
    for row in 0..b {
        let w = crate::math::softmax(logits.row(row).as_slice().unwrap());
        let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
        for s in 0..spr {
            let zi = b_row_sample(row, s, spr);
            let g = grad_out[[zi, 0]];
            if g == 0.0 {
                continue;
            }
            for (kk, item) in a.iter_mut().enumerate() {
                let mut acc = lw[kk];
                for d in 0..l {
                    acc += normal_logpdf(
                        z[[zi, d]],
                        means[[row, kk * l + d]],
                        stds[[row, kk * l + d]],
                    );
                }
                *item = acc;
            }
            let resp = crate::math::softmax(&a);
            for kk in 0..k {
                // d logq / d logit_m = r_m - w_m
                g_logits[[row, kk]] += g * (resp[kk] - w[kk]);
                for d in 0..l {
                    let idx = kk * l + d;
                    let sd = stds[[row, idx]];
                    let diff = z[[zi, d]] - means[[row, idx]];
                    let u = diff / (sd * sd);
                    g_means[[row, idx]] += g * resp[kk] * u;
                    g_stds[[row, idx]] += g * resp[kk] * (diff * diff / (sd * sd) - 1.0) / sd;
                    g_z[[zi, d]] += g * resp[kk] * (-u);
                }
            }
        }
    }
    (g_logits, g_means, g_stds, g_z)
}

/// Per-dimension terms of the mixture distributional transform at `z`:
/// responsibilities updated by preceding dimensions, conditional CDF `F_d`,
/// and conditional density `q_d`.
pub struct TransformTerms {
    /// r[d][k]: responsibility of component k before dimension d.
    pub resp: Vec<Vec<f64>>,
    /// F[d]: conditional CDF of z_d given z_{<d}.
    pub cdf: Vec<f64>,
    /// q[d]: conditional density of z_d given z_{<d}.
    pub density: Vec<f64>,
}

/// Evaluate the distributional transform of a diagonal-Gaussian mixture at
/// one point. `logits` length K, `means`/`stds` K x L (flattened k*L+d).
pub fn distributional_transform(
    logits: &[f64],
    means: &Array2<f64>,
    stds: &Array2<f64>,
    z: &[f64],
) -> TransformTerms {
    let k = logits.len();
    let l = z.len();
    let lw = log_softmax_row(logits);
    // ell[k] accumulates log w_k + sum_{j<d} log n_kj
    let mut ell = lw.clone();
    let mut resp = Vec::with_capacity(l);
    let mut cdf = Vec::with_capacity(l);
    let mut density = Vec::with_capacity(l);
    for d in 0..l {
        let r = crate::math::softmax(&ell);
        let mut f = 0.0;
        let mut q = 0.0;
        for kk in 0..k {
            let mu = means[[kk, d]];
            let sd = stds[[kk, d]];
            let t = (z[d] - mu) / sd;
            f += r[kk] * std_normal_cdf(t);
            q += r[kk] * (normal_logpdf(z[d], mu, sd)).exp();
        }
        resp.push(r);
        cdf.push(f);
        density.push(q);
        for (kk, e) in ell.iter_mut().enumerate() {
            *e += normal_logpdf(z[d], means[[kk, d]], stds[[kk, d]]);
        }
    }
    TransformTerms { resp, cdf, density }
}

/// Implicit-reparametrization VJP for ancestrally-sampled mixture draws.
///
/// Given the cotangent `grad_z` of a downstream scalar with respect to the
/// samples, returns cotangents on (logits, means, stds). The Jacobian
/// dz/dpsi = -(dF/dz)^-1 dF/dpsi is applied via a triangular solve per
/// sample, with F the per-dimension mixture conditional CDF.
pub fn implicit_ancestral_vjp(
    logits: &Array2<f64>,
    means: &Array2<f64>,
    stds: &Array2<f64>,
    z: &Array2<f64>,
    spr: usize,
    grad_z: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let b = logits.nrows();
    let k = logits.ncols();
    let l = z.ncols();
    let mut g_logits = Array2::zeros((b, k));
    let mut g_means = Array2::zeros((b, k * l));
    let mut g_stds = Array2::zeros((b, k * l));

    for row in 0..b {
        let lg: Vec<f64> = logits.row(row).to_vec();
        let w = crate::math::softmax(&lg);
        let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
        for s in 0..spr {
            let zi = row * spr + s;
            if grad_z.row(zi).iter().all(|g| *g == 0.0) {
                continue;
            }
            // Per-dimension terms of the transform at this sample.
            let mut ell = lw.clone();
            let mut resp = Vec::with_capacity(l);
            let mut cdfs = Vec::with_capacity(l); // C[d][k]
            let mut pdfs = Vec::with_capacity(l); // n[d][k]
            let mut fvals = vec![0.0; l];
            let mut qvals = vec![0.0; l];
            for d in 0..l {
                let r = crate::math::softmax(&ell);
                let mut crow = vec![0.0; k];
                let mut prow = vec![0.0; k];
                let mut f = 0.0;
                let mut q = 0.0;
                for kk in 0..k {
                    let mu = means[[row, kk * l + d]];
                    let sd = stds[[row, kk * l + d]];
                    let t = (z[[zi, d]] - mu) / sd;
                    crow[kk] = std_normal_cdf(t);
                    prow[kk] = normal_logpdf(z[[zi, d]], mu, sd).exp();
                    f += r[kk] * crow[kk];
                    q += r[kk] * prow[kk];
                }
                if q < 1e-290 || !q.is_finite() {
                    return Err(Error::numeric(format!(
                        "mixture density vanished at sample {zi}, dim {d} (q = {q})"
                    )));
                }
                for (kk, e) in ell.iter_mut().enumerate() {
                    *e += normal_logpdf(z[[zi, d]], means[[row, kk * l + d]], stds[[row, kk * l + d]]);
                }
                resp.push(r);
                cdfs.push(crow);
                pdfs.push(prow);
                fvals[d] = f;
                qvals[d] = q;
            }
            // Lower-triangular cross terms T[d][j] = dF_d/dz_j for j < d.
            // dF_d/dz_j = sum_k r_k(d) s_kj (C_kd - F_d), s_kj = dlog n_kj/dz_j.
            let mut tmat = vec![vec![0.0; l]; l];
            for d in 0..l {
                for j in 0..d {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        let sd = stds[[row, kk * l + j]];
                        let skj = -(z[[zi, j]] - means[[row, kk * l + j]]) / (sd * sd);
                        acc += resp[d][kk] * skj * (cdfs[d][kk] - fvals[d]);
                    }
                    tmat[d][j] = acc;
                }
            }
            // Solve (dF/dz)^T lambda = grad_z by back substitution.
            let mut lambda = vec![0.0; l];
            for d in (0..l).rev() {
                let mut rhs = grad_z[[zi, d]];
                for e in (d + 1)..l {
                    rhs -= tmat[e][d] * lambda[e];
                }
                lambda[d] = rhs / qvals[d];
            }
            // psi_bar = -sum_d lambda_d dF_d/dpsi.
            for d in 0..l {
                let lam = lambda[d];
                if lam == 0.0 {
                    continue;
                }
                for kk in 0..k {
                    // logits: dF_d/dlogit_k = r_k(d) (C_kd - F_d)
                    g_logits[[row, kk]] -= lam * resp[d][kk] * (cdfs[d][kk] - fvals[d]);
                    // own-dimension mean/std channel through C_kd
                    let sd = stds[[row, kk * l + d]];
                    let diff = z[[zi, d]] - means[[row, kk * l + d]];
                    g_means[[row, kk * l + d]] -= lam * resp[d][kk] * (-pdfs[d][kk]);
                    g_stds[[row, kk * l + d]] -= lam * resp[d][kk] * (-pdfs[d][kk] * diff / sd);
                    // responsibility channel for earlier dims j < d
                    let fd = fvals[d];
                    let coef = lam * resp[d][kk] * (cdfs[d][kk] - fd);
                    for j in 0..d {
                        let sdj = stds[[row, kk * l + j]];
                        let diffj = z[[zi, j]] - means[[row, kk * l + j]];
                        let u = diffj / (sdj * sdj);
                        let v = (diffj * diffj / (sdj * sdj) - 1.0) / sdj;
                        g_means[[row, kk * l + j]] -= coef * u;
                        g_stds[[row, kk * l + j]] -= coef * v;
                    }
                }
            }
        }
    }
    Ok((g_logits, g_means, g_stds))
}

/// Conditional inverse of the distributional transform: recovers z such
/// that F(z; psi) = eps, dimension by dimension. Used as the independent
/// finite-difference oracle for the implicit gradients.
pub fn transform_inverse(
    logits: &[f64],
    means: &Array2<f64>,
    stds: &Array2<f64>,
    eps: &[f64],
) -> Array1<f64> {
    let k = logits.len();
    let l = eps.len();
    let lw = log_softmax_row(logits);
    let mut ell = lw;
    let mut z = Array1::zeros(l);
    for d in 0..l {
        let r = crate::math::softmax(&ell);
        let cdf = |x: f64| -> f64 {
            (0..k)
                .map(|kk| r[kk] * std_normal_cdf((x - means[[kk, d]]) / stds[[kk, d]]))
                .sum()
        };
        // Bracket then bisect; the conditional CDF is strictly increasing.
        let mut lo = -60.0;
        let mut hi = 60.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < eps[d] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        z[d] = 0.5 * (lo + hi);
        for (kk, e) in ell.iter_mut().enumerate() {
            *e += normal_logpdf(z[d], means[[kk, d]], stds[[kk, d]]);
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn gauss_loglik_matches_scalar_formula() {
        let mean = arr2(&[[0.5, -1.0]]);
        let std = arr2(&[[1.0, 2.0]]);
        let x = arr2(&[[0.7, 9.9]]);
        let mask = arr2(&[[1.0, 0.0]]);
        let ll = gauss_loglik_masked_fwd(&mean, &std, &x, &mask);
        assert!((ll[[0, 0]] - normal_logpdf(0.7, 0.5, 1.0)).abs() < 1e-14);
    }

    #[test]
    fn gauss_loglik_vjp_finite_difference() {
        let mean = arr2(&[[0.5, -1.0, 0.3]]);
        let std = arr2(&[[1.0, 2.0, 0.7]]);
        let x = arr2(&[[0.7, -0.5, 1.1]]);
        let mask = arr2(&[[1.0, 1.0, 0.0]]);
        let g = arr2(&[[1.0]]);
        let (gm, gs) = gauss_loglik_masked_vjp(&mean, &std, &x, &mask, &g);
        let h = 1e-6;
        for j in 0..3 {
            let mut mp = mean.clone();
            mp[[0, j]] += h;
            let mut mm = mean.clone();
            mm[[0, j]] -= h;
            let fd = (gauss_loglik_masked_fwd(&mp, &std, &x, &mask)[[0, 0]]
                - gauss_loglik_masked_fwd(&mm, &std, &x, &mask)[[0, 0]])
                / (2.0 * h);
            assert!((fd - gm[[0, j]]).abs() < 1e-7, "mean dim {j}");
            let mut sp = std.clone();
            sp[[0, j]] += h;
            let mut sm = std.clone();
            sm[[0, j]] -= h;
            let fd = (gauss_loglik_masked_fwd(&mean, &sp, &x, &mask)[[0, 0]]
                - gauss_loglik_masked_fwd(&mean, &sm, &x, &mask)[[0, 0]])
                / (2.0 * h);
            assert!((fd - gs[[0, j]]).abs() < 1e-7, "std dim {j}");
        }
    }

    #[test]
    fn mixture_logpdf_two_identical_components_collapse() {
        let logits = arr2(&[[0.3, 0.3]]);
        let means = arr2(&[[0.5, -0.2, 0.5, -0.2]]);
        let stds = arr2(&[[1.0, 0.8, 1.0, 0.8]]);
        let z = arr2(&[[0.1, 0.4]]);
        let got = mixture_logpdf_fwd(&logits, &means, &stds, &z, 1)[[0, 0]];
        let want = normal_logpdf(0.1, 0.5, 1.0) + normal_logpdf(0.4, -0.2, 0.8);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mixture_logpdf_vjp_finite_difference() {
        let logits = arr2(&[[0.3, -0.6, 0.1]]);
        let means = arr2(&[[0.5, -0.2, -1.0, 0.7, 0.0, 1.2]]);
        let stds = arr2(&[[1.0, 0.8, 0.5, 1.3, 0.9, 0.6]]);
        let z = arr2(&[[0.1, 0.4], [-0.3, 0.9]]);
        let g = arr2(&[[1.0], [0.5]]);
        let (gl, gm, gs, gz) = mixture_logpdf_vjp(&logits, &means, &stds, &z, 2, &g);
        let h = 1e-6;
        let f = |lg: &Array2<f64>, me: &Array2<f64>, st: &Array2<f64>, zz: &Array2<f64>| -> f64 {
            let out = mixture_logpdf_fwd(lg, me, st, zz, 2);
            out[[0, 0]] * 1.0 + out[[1, 0]] * 0.5
        };
        for j in 0..3 {
            let mut p = logits.clone();
            p[[0, j]] += h;
            let mut m = logits.clone();
            m[[0, j]] -= h;
            let fd = (f(&p, &means, &stds, &z) - f(&m, &means, &stds, &z)) / (2.0 * h);
            assert!((fd - gl[[0, j]]).abs() < 1e-6, "logit {j}");
        }
        for j in 0..6 {
            let mut p = means.clone();
            p[[0, j]] += h;
            let mut m = means.clone();
            m[[0, j]] -= h;
            let fd = (f(&logits, &p, &stds, &z) - f(&logits, &m, &stds, &z)) / (2.0 * h);
            assert!((fd - gm[[0, j]]).abs() < 1e-6, "mean {j}");
            let mut p = stds.clone();
            p[[0, j]] += h;
            let mut m = stds.clone();
            m[[0, j]] -= h;
            let fd = (f(&logits, &means, &p, &z) - f(&logits, &means, &m, &z)) / (2.0 * h);
            assert!((fd - gs[[0, j]]).abs() < 1e-6, "std {j}");
        }
        for r in 0..2 {
            for c in 0..2 {
                let mut p = z.clone();
                p[[r, c]] += h;
                let mut m = z.clone();
                m[[r, c]] -= h;
                let fd = (f(&logits, &means, &stds, &p) - f(&logits, &means, &stds, &m)) / (2.0 * h);
                assert!((fd - gz[[r, c]]).abs() < 1e-6, "z [{r},{c}]");
            }
        }
    }

    #[test]
    fn transform_inverse_round_trip() {
        let logits = vec![0.4, -0.3];
        let means = arr2(&[[0.5, -0.2], [-1.0, 0.9]]);
        let stds = arr2(&[[1.0, 0.8], [0.5, 1.2]]);
        let z = vec![0.3, -0.6];
        let t = distributional_transform(&logits, &means, &stds, &z);
        let back = transform_inverse(&logits, &means, &stds, &t.cdf);
        assert!((back[0] - z[0]).abs() < 1e-9);
        assert!((back[1] - z[1]).abs() < 1e-9);
    }
}
