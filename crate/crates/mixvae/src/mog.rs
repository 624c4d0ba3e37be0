//! Mixture-of-Gaussians ground truth: generation, densities, analytic
//! conditionals, and the oracle imputation distributions used by the
//! control study.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, logsumexp, mvn_logpdf, softmax};

/// A finite mixture of full-covariance Gaussians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoGParams {
    /// Component probabilities, length C.
    pub weights: Vec<f64>,
    /// Component means, C x D.
    pub means: Array2<f64>,
    /// Component covariances, C matrices of D x D.
    pub covariances: Vec<Array2<f64>>,
}

/// Serialized form written next to generated datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoGDocument {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    pub dim: usize,
    pub components: usize,
}

impl MoGParams {
    pub fn new(weights: Vec<f64>, means: Array2<f64>, covariances: Vec<Array2<f64>>) -> Result<Self> {
        let p = MoGParams { weights, means, covariances };
        p.validate()?;
        Ok(p)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.weights.len();
        let d = self.means.ncols();
        if c < 1 || d < 1 {
            return Err(Error::parameter("mixture needs C >= 1 and D >= 1"));
        }
        if self.means.nrows() != c || self.covariances.len() != c {
            return Err(Error::parameter("component count mismatch across fields"));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::parameter("weights must be nonnegative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::parameter(format!("weights sum to {sum}, expected 1")));
        }
        for (ci, cov) in self.covariances.iter().enumerate() {
            if cov.nrows() != d || cov.ncols() != d {
                return Err(Error::parameter(format!("covariance {ci} has wrong shape")));
            }
            for i in 0..d {
                for j in 0..d {
                    if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-8 * (1.0 + cov[[i, j]].abs()) {
                        return Err(Error::parameter(format!("covariance {ci} not symmetric")));
                    }
                }
            }
            // Positive definiteness == Cholesky succeeds.
            math::cholesky(cov)
                .map_err(|_| Error::parameter(format!("covariance {ci} not positive definite")))?;
        }
        Ok(())
    }

    fn cholesky_factors(&self) -> Vec<Array2<f64>> {
        self.covariances.iter().map(|c| math::cholesky(c).expect("validated SPD")).collect()
    }

    /// Per-dimension mixture mean.
    pub fn mixture_mean(&self) -> Array1<f64> {
        let d = self.dim();
        let mut m = Array1::zeros(d);
        for (c, w) in self.weights.iter().enumerate() {
            for j in 0..d {
                m[j] += w * self.means[[c, j]];
            }
        }
        m
    }

    /// Per-dimension mixture variance.
    pub fn mixture_variance(&self) -> Array1<f64> {
        let d = self.dim();
        let m = self.mixture_mean();
        let mut v = Array1::zeros(d);
        for (c, w) in self.weights.iter().enumerate() {
            for j in 0..d {
                let mu = self.means[[c, j]];
                v[j] += w * (self.covariances[c][[j, j]] + mu * mu);
            }
        }
        for j in 0..d {
            v[j] -= m[j] * m[j];
        }
        v
    }

    pub fn to_document(&self, seed: u64) -> MoGDocument {
        MoGDocument {
            weights: self.weights.clone(),
            means: self.means.rows().into_iter().map(|r| r.to_vec()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| c.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            seed,
            dim: self.dim(),
            components: self.n_components(),
        }
    }

    pub fn from_document(doc: &MoGDocument) -> Result<Self> {
        let c = doc.components;
        let d = doc.dim;
        let means = Array2::from_shape_fn((c, d), |(i, j)| doc.means[i][j]);
        let covs = doc
            .covariances
            .iter()
            .map(|m| Array2::from_shape_fn((d, d), |(i, j)| m[i][j]))
            .collect();
        MoGParams::new(doc.weights.clone(), means, covs)
    }
}

/// Generate the synthetic ground truth: inverse-Wishart covariances
/// (nu = D, Psi = I), Gaussian means (std 3), symmetric-Dirichlet weights,
/// then an affine standardization so every marginal has mean 0, variance 1.
pub fn generate_mog(seed: u64, dim: usize, components: usize) -> Result<MoGParams> {
    if dim < 1 || components < 1 {
        return Err(Error::parameter("generate_mog: dim and components must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Dirichlet(1) via normalized exponentials.
    let mut weights: Vec<f64> = (0..components)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            -u.ln()
        })
        .collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);

    let mut means = Array2::zeros((components, dim));
    for c in 0..components {
        for j in 0..dim {
            let e: f64 = StandardNormal.sample(&mut rng);
            means[[c, j]] = 3.0 * e;
        }
    }

    let covariances: Vec<Array2<f64>> = (0..components)
        .map(|_| sample_inverse_wishart_identity(dim, dim as f64, &mut rng))
        .collect::<Result<_>>()?;

    let mut params = MoGParams { weights, means, covariances };

    // Analytic standardization: x -> (x - m) / s, applied to the parameters.
    let m = params.mixture_mean();
    let v = params.mixture_variance();
    let s: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
    for c in 0..components {
        for j in 0..dim {
            params.means[[c, j]] = (params.means[[c, j]] - m[j]) / s[j];
        }
        for i in 0..dim {
            for j in 0..dim {
                params.covariances[c][[i, j]] /= s[i] * s[j];
            }
        }
    }
    params.validate()?;
    Ok(params)
}

/// Inverse-Wishart(nu, Psi = I) draw via the Bartlett decomposition of the
/// Wishart and triangular inversion.
fn sample_inverse_wishart_identity(d: usize, nu: f64, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    // W = A A^T with A lower triangular, A_ii^2 ~ chi2(nu - i), A_ij ~ N(0,1).
    let mut a = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let df = nu - i as f64;
        let chi =
            ChiSquared::new(df).map_err(|e| Error::parameter(format!("chi-squared df {df}: {e}")))?;
        a[[i, i]] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[[i, j]] = StandardNormal.sample(rng);
        }
    }
    // Sigma = (A A^T)^-1 = B^T B with B = A^-1 (lower triangular).
    let mut b = Array2::<f64>::zeros((d, d));
    for col in 0..d {
        let mut e = Array1::<f64>::zeros(d);
        e[col] = 1.0;
        let x = math::solve_lower(&a, &e);
        b.column_mut(col).assign(&x);
    }
    let sigma = b.t().dot(&b);
    let sig_t = sigma.t().to_owned();
    Ok((&sigma + &sig_t) * 0.5)
}

/// Ancestral sampling; returns the draws.
pub fn mog_sample(params: &MoGParams, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    Ok(mog_sample_with_components(params, n, rng)?.0)
}

/// Ancestral sampling that also reports the component of each draw.
pub fn mog_sample_with_components(
    params: &MoGParams,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if n < 1 {
        return Err(Error::parameter("mog_sample: n must be >= 1"));
    }
    let d = params.dim();
    let chols = params.cholesky_factors();
    let mut cum = Vec::with_capacity(params.weights.len());
    let mut acc = 0.0;
    for w in &params.weights {
        acc += w;
        cum.push(acc);
    }
    let mut out = Array2::zeros((n, d));
    let mut comps = Vec::with_capacity(n);
    for i in 0..n {
        let c = if params.n_components() == 1 {
            0
        } else {
            let u: f64 = rng.random_range(0.0..1.0);
            cum.iter().position(|&t| u <= t).unwrap_or(cum.len() - 1)
        };
        comps.push(c);
        let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for r in 0..d {
            let mut x = params.means[[c, r]];
            for k in 0..=r {
                x += chols[c][[r, k]] * eps[k];
            }
            out[[i, r]] = x;
        }
    }
    Ok((out, comps))
}

/// Mixture log-density at a point.
pub fn mog_logpdf(params: &MoGParams, x: &Array1<f64>) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::parameter("mog_logpdf: non-finite input"));
    }
    let chols = params.cholesky_factors();
    Ok(logpdf_with_chols(params, &chols, x))
}

fn logpdf_with_chols(params: &MoGParams, chols: &[Array2<f64>], x: &Array1<f64>) -> f64 {
    let terms: Vec<f64> = params
        .weights
        .iter()
        .enumerate()
        .map(|(c, w)| w.ln() + mvn_logpdf(x, &params.means.row(c).to_owned(), &chols[c]))
        .collect();
    logsumexp(&terms)
}

/// Mixture log-density at many points, sharing the Cholesky factors.
pub fn mog_logpdf_many(params: &MoGParams, xs: &Array2<f64>) -> Result<Vec<f64>> {
    let chols = params.cholesky_factors();
    let mut out = Vec::with_capacity(xs.nrows());
    for row in xs.rows() {
        let x = row.to_owned();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::parameter("mog_logpdf: non-finite input"));
        }
        out.push(logpdf_with_chols(params, &chols, &x));
    }
    Ok(out)
}

/// CDF of a one-dimensional mixture.
pub fn mog_cdf_1d(params: &MoGParams, x: f64) -> f64 {
    assert_eq!(params.dim(), 1);
    params
        .weights
        .iter()
        .enumerate()
        .map(|(c, w)| {
            let mu = params.means[[c, 0]];
            let sd = params.covariances[c][[0, 0]].sqrt();
            w * math::std_normal_cdf((x - mu) / sd)
        })
        .sum()
}

/// Marginal mixture over a subset of dimensions (restriction of each component).
pub fn mog_marginal(params: &MoGParams, dims: &[usize]) -> Result<MoGParams> {
    if dims.is_empty() {
        return Err(Error::parameter("mog_marginal: empty dimension set"));
    }
    let c = params.n_components();
    let m = dims.len();
    let mut means = Array2::zeros((c, m));
    let mut covs = Vec::with_capacity(c);
    for ci in 0..c {
        for (a, &da) in dims.iter().enumerate() {
            means[[ci, a]] = params.means[[ci, da]];
        }
        let mut cov = Array2::zeros((m, m));
        for (a, &da) in dims.iter().enumerate() {
            for (b, &db) in dims.iter().enumerate() {
                cov[[a, b]] = params.covariances[ci][[da, db]];
            }
        }
        covs.push(cov);
    }
    MoGParams::new(params.weights.clone(), means, covs)
}

/// Log-density of the observed sub-vector under the mixture marginal.
pub fn mog_marginal_logpdf(params: &MoGParams, values: &Array1<f64>, mask: &[u8]) -> Result<f64> {
    let obs: Vec<usize> =
        mask.iter().enumerate().filter(|(_, &m)| m != 0).map(|(i, _)| i).collect();
    if obs.is_empty() {
        return Err(Error::parameter("mog_marginal_logpdf: no observed dims"));
    }
    let marg = mog_marginal(params, &obs)?;
    let x = Array1::from_iter(obs.iter().map(|&i| values[i]));
    mog_logpdf(&marg, &x)
}

/// Analytic conditional p(x_mis | x_obs): reweighted components with
/// Gaussian conditioning applied per component. Returns a mixture over the
/// missing dimensions (in increasing dimension order).
///
/// A fully missing mask returns the marginal over all dims (the mixture
/// itself); a fully observed mask is an error.
pub fn mog_conditional(params: &MoGParams, values: &Array1<f64>, mask: &[u8]) -> Result<MoGParams> {
    let d = params.dim();
    if mask.len() != d || values.len() != d {
        return Err(Error::parameter("mog_conditional: mask/values length mismatch"));
    }
    let obs: Vec<usize> =
        mask.iter().enumerate().filter(|(_, &m)| m != 0).map(|(i, _)| i).collect();
    let mis: Vec<usize> =
        mask.iter().enumerate().filter(|(_, &m)| m == 0).map(|(i, _)| i).collect();
    if mis.is_empty() {
        return Err(Error::parameter(
            "mog_conditional: fully observed row has nothing to condition",
        ));
    }
    if obs.is_empty() {
        return Ok(params.clone());
    }

    let c = params.n_components();
    let nm = mis.len();
    let no = obs.len();
    let xo = Array1::from_iter(obs.iter().map(|&i| values[i]));

    let mut log_w = Vec::with_capacity(c);
    let mut means = Array2::zeros((c, nm));
    let mut covs = Vec::with_capacity(c);
    for ci in 0..c {
        let cov = &params.covariances[ci];
        let mut soo = Array2::zeros((no, no));
        let mut smm = Array2::zeros((nm, nm));
        let mut smo = Array2::zeros((nm, no));
        for (a, &da) in obs.iter().enumerate() {
            for (b, &db) in obs.iter().enumerate() {
                soo[[a, b]] = cov[[da, db]];
            }
        }
        for (a, &da) in mis.iter().enumerate() {
            for (b, &db) in mis.iter().enumerate() {
                smm[[a, b]] = cov[[da, db]];
            }
            for (b, &db) in obs.iter().enumerate() {
                smo[[a, b]] = cov[[da, db]];
            }
        }
        let mu_o = Array1::from_iter(obs.iter().map(|&i| params.means[[ci, i]]));
        let mu_m = Array1::from_iter(mis.iter().map(|&i| params.means[[ci, i]]));
        let l_oo = math::cholesky(&soo)?;

        // Component weight: w_c * N(x_obs; mu_o, S_oo)
        log_w.push(params.weights[ci].ln() + mvn_logpdf(&xo, &mu_o, &l_oo));

        // mu_{m|o} = mu_m + S_mo S_oo^-1 (x_o - mu_o)
        let diff = &xo - &mu_o;
        let y = math::solve_lower(&l_oo, &diff);
        let alpha = math::solve_lower_transpose(&l_oo, &y);
        for a in 0..nm {
            let mut v = mu_m[a];
            for b in 0..no {
                v += smo[[a, b]] * alpha[b];
            }
            means[[ci, a]] = v;
        }

        // S_{m|o} = S_mm - S_mo S_oo^-1 S_om
        let mut correction = Array2::zeros((nm, nm));
        for a in 0..nm {
            let row = Array1::from_iter((0..no).map(|b| smo[[a, b]]));
            let y = math::solve_lower(&l_oo, &row);
            let col = math::solve_lower_transpose(&l_oo, &y);
            for b in 0..nm {
                let mut v = 0.0;
                for e in 0..no {
                    v += smo[[b, e]] * col[e];
                }
                correction[[a, b]] = v;
            }
        }
        let mut cmm = &smm - &correction;
        let cmm_t = cmm.t().to_owned();
        cmm = (&cmm + &cmm_t) * 0.5;
        covs.push(cmm);
    }
    let weights = softmax(&log_w);
    MoGParams::new(weights, means, covs)
}

/// Oracle 1: widen the conditional along a mixture path. alpha = 0 returns
/// the conditional; alpha = 1 is the per-component-independent marginal
/// mixture; alpha = 2 is an independent standard Gaussian.
///
/// Each phase mixes the endpoint distributions linearly,
/// `(1-t) p + t r`, rather than interpolating moments: the
/// Jensen-Shannon divergence to the conditional is convex along such a
/// segment and zero at its start, so it cannot decrease as alpha grows
/// within a phase.
pub fn oracle_widen(cond: &MoGParams, marginal: &MoGParams, alpha: f64) -> Result<MoGParams> {
    if !(0.0..=2.0).contains(&alpha) {
        return Err(Error::parameter(format!("oracle_widen: alpha {alpha} outside [0, 2]")));
    }
    if cond.dim() != marginal.dim() || cond.n_components() != marginal.n_components() {
        return Err(Error::parameter("oracle_widen: inputs must share dims and components"));
    }
    if alpha == 0.0 {
        return Ok(cond.clone());
    }
    let c = cond.n_components();
    let d = cond.dim();

    // Independent version of the marginal: diagonalized component covariances.
    let indep_cov = |ci: usize| -> Array2<f64> {
        let mut cov = Array2::zeros((d, d));
        for j in 0..d {
            cov[[j, j]] = marginal.covariances[ci][[j, j]];
        }
        cov
    };

    if alpha <= 1.0 {
        let t = alpha;
        if t == 1.0 {
            let covs: Vec<Array2<f64>> = (0..c).map(indep_cov).collect();
            return MoGParams::new(marginal.weights.clone(), marginal.means.clone(), covs);
        }
        // 2C components: (1-t) mass on the conditional, t on the marginal.
        let mut weights = Vec::with_capacity(2 * c);
        let mut means = Array2::zeros((2 * c, d));
        let mut covs = Vec::with_capacity(2 * c);
        for ci in 0..c {
            weights.push((1.0 - t) * cond.weights[ci]);
            means.row_mut(ci).assign(&cond.means.row(ci));
            covs.push(cond.covariances[ci].clone());
        }
        for ci in 0..c {
            weights.push(t * marginal.weights[ci]);
            means.row_mut(c + ci).assign(&marginal.means.row(ci));
            covs.push(indep_cov(ci));
        }
        MoGParams::new(weights, means, covs)
    } else {
        let s = alpha - 1.0;
        if s == 1.0 {
            // Exactly the independent standard Gaussian.
            return MoGParams::new(vec![1.0], Array2::zeros((1, d)), vec![Array2::eye(d)]);
        }
        // C+1 components: (1-s) mass on the marginal, s on N(0, I).
        let mut weights = Vec::with_capacity(c + 1);
        let mut means = Array2::zeros((c + 1, d));
        let mut covs = Vec::with_capacity(c + 1);
        for ci in 0..c {
            weights.push((1.0 - s) * marginal.weights[ci]);
            means.row_mut(ci).assign(&marginal.means.row(ci));
            covs.push(indep_cov(ci));
        }
        weights.push(s);
        covs.push(Array2::eye(d));
        MoGParams::new(weights, means, covs)
    }
}

/// Oracle 2: oversample low-probability modes by pushing component weights
/// toward uniform; means and covariances are untouched.
pub fn oracle_oversample(cond: &MoGParams, beta: f64) -> Result<MoGParams> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::parameter(format!("oracle_oversample: beta {beta} outside [0, 1]")));
    }
    let c = cond.n_components() as f64;
    let weights: Vec<f64> = cond.weights.iter().map(|w| (1.0 - beta) * w + beta / c).collect();
    MoGParams::new(weights, cond.means.clone(), cond.covariances.clone())
}
