//! The amortized finite-mixture variational family: categorical weights
//! over K diagonal-Gaussian components, ancestral sampling with
//! implicit-reparametrization gradients, and stratified sampling with the
//! plain reparametrization trick.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::zero_mask_encode;
use crate::error::{Error, Result};
use crate::kernels;
use crate::math::{logsumexp, normal_logpdf, softmax, softplus};
use crate::nn::{ArchConfig, Mlp, ParamBinding, ParamStore};
use crate::tape::{Tape, Var};
use crate::vae::STD_FLOOR;

/// Variational parameters of one row's mixture: component logits plus
/// per-component diagonal-Gaussian parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureVariationalParams {
    pub logits: Array1<f64>,
    /// K x L component means.
    pub comp_means: Array2<f64>,
    /// K x L component standard deviations (>= 1e-5).
    pub comp_stds: Array2<f64>,
}

impl MixtureVariationalParams {
    pub fn new(logits: Array1<f64>, comp_means: Array2<f64>, comp_stds: Array2<f64>) -> Result<Self> {
        let k = logits.len();
        if k < 1 {
            return Err(Error::parameter("mixture needs K >= 1"));
        }
        if comp_means.nrows() != k || comp_stds.nrows() != k {
            return Err(Error::parameter("component count mismatch"));
        }
        if comp_means.ncols() != comp_stds.ncols() {
            return Err(Error::parameter("latent dim mismatch"));
        }
        if comp_stds.iter().any(|s| !(*s >= STD_FLOOR)) {
            return Err(Error::parameter("component stds must be >= 1e-5"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite mixture logits"));
        }
        Ok(MixtureVariationalParams { logits, comp_means, comp_stds })
    }

    /// Single diagonal Gaussian as a K = 1 mixture.
    pub fn single(mean: Array1<f64>, std: Array1<f64>) -> Self {
        let l = mean.len();
        MixtureVariationalParams {
            logits: Array1::zeros(1),
            comp_means: mean.into_shape_with_order((1, l)).unwrap(),
            comp_stds: std.into_shape_with_order((1, l)).unwrap(),
        }
    }

    pub fn n_components(&self) -> usize {
        self.logits.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.comp_means.ncols()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(self.logits.as_slice().unwrap())
    }

    /// Means/stds flattened to the batched 1 x (K*L) layout.
    pub fn flat_means(&self) -> Array2<f64> {
        let (k, l) = (self.n_components(), self.latent_dim());
        let mut out = Array2::zeros((1, k * l));
        for kk in 0..k {
            for d in 0..l {
                out[[0, kk * l + d]] = self.comp_means[[kk, d]];
            }
        }
        out
    }

    pub fn flat_stds(&self) -> Array2<f64> {
        let (k, l) = (self.n_components(), self.latent_dim());
        let mut out = Array2::zeros((1, k * l));
        for kk in 0..k {
            for d in 0..l {
                out[[0, kk * l + d]] = self.comp_stds[[kk, d]];
            }
        }
        out
    }

    pub fn logits_row(&self) -> Array2<f64> {
        let k = self.n_components();
        let mut out = Array2::zeros((1, k));
        for kk in 0..k {
            out[[0, kk]] = self.logits[kk];
        }
        out
    }
}

/// How a latent batch was drawn; determines its gradient estimator.
#[derive(Debug, Clone)]
pub enum SampleKind {
    Ancestral { component_ids: Vec<usize> },
    Stratified { per_comp: usize },
}

/// A batch of latent samples with the mixture log-density of each.
#[derive(Debug, Clone)]
pub struct LatentSampleBatch {
    pub z: Array2<f64>,
    pub kind: SampleKind,
    pub log_q: Array1<f64>,
}

impl LatentSampleBatch {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// Mixture log-density at one latent point.
pub fn mixture_logpdf(psi: &MixtureVariationalParams, z: &Array1<f64>) -> f64 {
    let k = psi.n_components();
    let lw = {
        let lse = logsumexp(psi.logits.as_slice().unwrap());
        psi.logits.mapv(|v| v - lse)
    };
    let mut terms = Vec::with_capacity(k);
    for kk in 0..k {
        let mut acc = lw[kk];
        for d in 0..psi.latent_dim() {
            acc += normal_logpdf(z[d], psi.comp_means[[kk, d]], psi.comp_stds[[kk, d]]);
        }
        terms.push(acc);
    }
    logsumexp(&terms)
}

/// Mixture log-density of every row of `z`.
pub fn mixture_logpdf_many(psi: &MixtureVariationalParams, z: &Array2<f64>) -> Array1<f64> {
    let out = kernels::mixture_logpdf_fwd(
        &psi.logits_row(),
        &psi.flat_means(),
        &psi.flat_stds(),
        z,
        z.nrows(),
    );
    out.column(0).to_owned()
}

/// Stratified draw: `per_comp` samples from every component, in
/// component-major order. Estimators weight each stratum by the component
/// probability; the explicit reparametrization z = mu + sigma * eps applies.
pub fn sample_stratified(
    psi: &MixtureVariationalParams,
    per_comp: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSampleBatch> {
    if per_comp < 1 {
        return Err(Error::parameter("sample_stratified: per_comp must be >= 1"));
    }
    let (k, l) = (psi.n_components(), psi.latent_dim());
    let mut z = Array2::zeros((k * per_comp, l));
    for kk in 0..k {
        for i in 0..per_comp {
            for d in 0..l {
                let e: f64 = StandardNormal.sample(rng);
                z[[kk * per_comp + i, d]] = psi.comp_means[[kk, d]] + psi.comp_stds[[kk, d]] * e;
            }
        }
    }
    let log_q = mixture_logpdf_many(psi, &z);
    if log_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("stratified sample produced non-finite log q"));
    }
    Ok(LatentSampleBatch { z, kind: SampleKind::Stratified { per_comp }, log_q })
}

/// Ancestral draw: k ~ Categorical(softmax(logits)) by inverse CDF on a
/// single uniform, then z ~ component k. At K = 1 the categorical draw is
/// skipped so the stream matches the single-Gaussian path exactly.
pub fn sample_ancestral(
    psi: &MixtureVariationalParams,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSampleBatch> {
    if n < 1 {
        return Err(Error::parameter("sample_ancestral: n must be >= 1"));
    }
    let (k, l) = (psi.n_components(), psi.latent_dim());
    let w = psi.weights();
    let mut cum = Vec::with_capacity(k);
    let mut acc = 0.0;
    for wi in &w {
        acc += wi;
        cum.push(acc);
    }
    let mut z = Array2::zeros((n, l));
    let mut comps = Vec::with_capacity(n);
    for s in 0..n {
        let kk = if k == 1 {
            0
        } else {
            let u: f64 = rng.random_range(0.0..1.0);
            cum.iter().position(|&t| u <= t).unwrap_or(k - 1)
        };
        comps.push(kk);
        for d in 0..l {
            let e: f64 = StandardNormal.sample(rng);
            z[[s, d]] = psi.comp_means[[kk, d]] + psi.comp_stds[[kk, d]] * e;
        }
    }
    let log_q = mixture_logpdf_many(psi, &z);
    if log_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("ancestral sample produced non-finite log q"));
    }
    Ok(LatentSampleBatch { z, kind: SampleKind::Ancestral { component_ids: comps }, log_q })
}

/// Implicit-reparametrization cotangents on (logits, means, stds) for
/// ancestrally drawn samples of a single mixture.
pub fn implicit_grad(
    psi: &MixtureVariationalParams,
    z: &Array2<f64>,
    grad_z: &Array2<f64>,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let (k, l) = (psi.n_components(), psi.latent_dim());
    let (gl, gm, gs) = kernels::implicit_ancestral_vjp(
        &psi.logits_row(),
        &psi.flat_means(),
        &psi.flat_stds(),
        z,
        z.nrows(),
        grad_z,
    )?;
    let glogits = gl.row(0).to_owned();
    let mut gmeans = Array2::zeros((k, l));
    let mut gstds = Array2::zeros((k, l));
    for kk in 0..k {
        for d in 0..l {
            gmeans[[kk, d]] = gm[[0, kk * l + d]];
            gstds[[kk, d]] = gs[[0, kk * l + d]];
        }
    }
    Ok((glogits, gmeans, gstds))
}

/// Monte Carlo entropy estimate -E[log q] from ancestral samples.
pub fn mixture_entropy_mc(
    psi: &MixtureVariationalParams,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch = sample_ancestral(psi, n, rng)?;
    Ok(-batch.log_q.mean().unwrap())
}

/// Anything that can produce amortized posterior parameters for a row.
/// The MLP encoder is the production implementation; tests substitute
/// analytic posteriors.
pub trait Amortizer {
    fn posterior_params(&self, values: &Array1<f64>, mask: &[u8]) -> Result<MixtureVariationalParams>;

    fn latent_dim(&self) -> usize;
}

/// Amortized encoder: residual MLP from the zero-masked input (length 2D)
/// to component logits, means, and stds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureEncoder {
    pub params: ParamStore,
    pub mlp: Mlp,
    pub n_components: usize,
    pub latent_dim: usize,
    pub data_dim: usize,
    /// Scale of the random offsets added to the component-mean head bias at
    /// init; breaks the symmetry that otherwise collapses components.
    pub component_init_jitter: f64,
}

/// Tape-side variational parameters for a batch of rows.
pub struct PsiVars {
    pub logits: Var,
    pub means: Var,
    pub stds: Var,
}

impl MixtureEncoder {
    pub fn new(
        data_dim: usize,
        latent_dim: usize,
        n_components: usize,
        arch: ArchConfig,
        component_init_jitter: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamStore::new();
        let kl = n_components * latent_dim;
        let mlp = Mlp::new(
            &mut params,
            "enc",
            2 * data_dim,
            arch,
            &[("logits", n_components), ("means", kl), ("raw_stds", kl)],
            rng,
        );
        // Per-component offsets on the mean head bias.
        if component_init_jitter > 0.0 {
            let id = mlp.head_bias_id(1);
            let mut bias = params.get(id).clone();
            for v in bias.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += component_init_jitter * e;
            }
            params.set(id, bias);
        }
        MixtureEncoder { params, mlp, n_components, latent_dim, data_dim, component_init_jitter }
    }

    /// Plain forward on a batch of pre-built encoder inputs (rows of
    /// length 2D). Returns (logits B x K, means B x K*L, stds B x K*L).
    pub fn encode_batch(&self, enc_in: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let heads = self.mlp.forward_plain(&self.params, enc_in);
        for h in &heads {
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("encoder produced non-finite outputs"));
            }
        }
        let stds = heads[2].mapv(|v| softplus(v) + STD_FLOOR);
        Ok((heads[0].clone(), heads[1].clone(), stds))
    }

    /// Tape forward on a constant input batch.
    pub fn encode_tape(&self, tape: &mut Tape, binding: &mut ParamBinding, enc_in: Array2<f64>) -> PsiVars {
        let x = tape.leaf(enc_in);
        let heads = self.mlp.forward_tape(tape, &self.params, binding, x);
        let stds = tape.softplus_shift(heads[2], STD_FLOOR);
        PsiVars { logits: heads[0], means: heads[1], stds }
    }

    /// Amortized parameters for a single row.
    pub fn encode(&self, values: &Array1<f64>, mask: &[u8]) -> Result<MixtureVariationalParams> {
        let enc_in = zero_mask_encode(values, mask)?;
        let enc_in = enc_in.insert_axis(ndarray::Axis(0));
        let (logits, means, stds) = self.encode_batch(&enc_in)?;
        let (k, l) = (self.n_components, self.latent_dim);
        let mut comp_means = Array2::zeros((k, l));
        let mut comp_stds = Array2::zeros((k, l));
        for kk in 0..k {
            for d in 0..l {
                comp_means[[kk, d]] = means[[0, kk * l + d]];
                comp_stds[[kk, d]] = stds[[0, kk * l + d]];
            }
        }
        MixtureVariationalParams::new(logits.row(0).to_owned(), comp_means, comp_stds)
    }
}

impl Amortizer for MixtureEncoder {
    fn posterior_params(&self, values: &Array1<f64>, mask: &[u8]) -> Result<MixtureVariationalParams> {
        self.encode(values, mask)
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}
