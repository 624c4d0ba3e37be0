//! Decomposed training from incomplete data: a persistent store of K
//! imputations per row, approximate conditional samplers that keep the
//! store close to p(x_mis | x_obs) as the model trains (pseudo-Gibbs,
//! Metropolis-within-Gibbs, latent-adaptive importance resampling, and
//! exact rejection sampling at 2D latents), and the two decomposed
//! objectives computed from one shared encoder/decoder pass.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::IncompleteDataset;
use crate::error::{Error, Result};
use crate::math::{logsumexp, softmax};
use crate::mixture::{Amortizer, MixtureEncoder};
use crate::nn::ParamBinding;
use crate::objectives::{draw_ancestral_batch, BatchData};
use crate::tape::{Tape, Var};
use crate::vae::{
    decoder_conditional_sample, marginal_decoder_loglik, prior_logpdf, DecoderOutput, VAEModel,
};

/// Persistent per-row set of K completions. Observed positions always
/// mirror the dataset exactly; missing positions hold the current
/// imputations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationStore {
    /// (N*K) x D completions, chain k of row i at index i*K + k.
    pub imputations: Array2<f64>,
    /// (N*K) x L latents that generated the current imputations, when a
    /// persistent sampler has run.
    pub chain_state: Option<Array2<f64>>,
    pub n_rows: usize,
    pub n_chains: usize,
    pub epoch_initialized: bool,
}

impl ImputationStore {
    pub fn chain_index(&self, row: usize, chain: usize) -> usize {
        row * self.n_chains + chain
    }

    /// K x D completions of one row.
    pub fn completions(&self, row: usize) -> Array2<f64> {
        let d = self.imputations.ncols();
        let mut out = Array2::zeros((self.n_chains, d));
        for k in 0..self.n_chains {
            out.row_mut(k).assign(&self.imputations.row(self.chain_index(row, k)));
        }
        out
    }

    /// Verify that observed positions still mirror the dataset.
    pub fn check_observed_invariant(&self, data: &IncompleteDataset) -> Result<()> {
        for i in 0..self.n_rows {
            for k in 0..self.n_chains {
                let idx = self.chain_index(i, k);
                for j in 0..data.dim() {
                    if data.masks[[i, j]] == 1 && self.imputations[[idx, j]] != data.values[[i, j]]
                    {
                        return Err(Error::numeric(format!(
                            "store corrupted observed value at row {i}, chain {k}, dim {j}"
                        )));
                    }
                    if !self.imputations[[idx, j]].is_finite() {
                        return Err(Error::numeric(format!(
                            "store holds non-finite value at row {i}, chain {k}, dim {j}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Initialize each missing entry with a uniform draw from that dimension's
/// observed values; observed entries are copied.
pub fn init_imputations(
    data: &IncompleteDataset,
    n_chains: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImputationStore> {
    if n_chains < 1 {
        return Err(Error::parameter("init_imputations: K must be >= 1"));
    }
    let (n, d) = (data.n_rows(), data.dim());
    // Observed pools per dimension.
    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); d];
    for i in 0..n {
        for j in 0..d {
            if data.masks[[i, j]] == 1 {
                pools[j].push(data.values[[i, j]]);
            }
        }
    }
    for (j, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::parameter(format!(
                "dimension {j} has no observed values to draw initial imputations from"
            )));
        }
    }
    let mut imputations = Array2::zeros((n * n_chains, d));
    for i in 0..n {
        for k in 0..n_chains {
            let idx = i * n_chains + k;
            for j in 0..d {
                imputations[[idx, j]] = if data.masks[[i, j]] == 1 {
                    data.values[[i, j]]
                } else {
                    pools[j][rng.random_range(0..pools[j].len())]
                };
            }
        }
    }
    Ok(ImputationStore {
        imputations,
        chain_state: None,
        n_rows: n,
        n_chains,
        epoch_initialized: false,
    })
}

/// Batched variational parameters for the completions of a row block:
/// (B*K) x ... arrays in the flat layout of [`crate::objectives`].
fn encode_completions(
    amortizer: &dyn Amortizer,
    store: &ImputationStore,
    rows: &[usize],
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let k = store.n_chains;
    let l = amortizer.latent_dim();
    let d = store.imputations.ncols();
    let b = rows.len() * k;
    let ones = vec![1u8; d];
    let mut logits: Option<Array2<f64>> = None;
    let mut means: Option<Array2<f64>> = None;
    let mut stds: Option<Array2<f64>> = None;
    for (bi, &row) in rows.iter().enumerate() {
        for kk in 0..k {
            let idx = store.chain_index(row, kk);
            let completion = store.imputations.row(idx).to_owned();
            let psi = amortizer.posterior_params(&completion, &ones)?;
            let km = psi.n_components();
            let out_row = bi * k + kk;
            let lg = logits.get_or_insert_with(|| Array2::zeros((b, km)));
            let me = means.get_or_insert_with(|| Array2::zeros((b, km * l)));
            let st = stds.get_or_insert_with(|| Array2::zeros((b, km * l)));
            for c in 0..km {
                lg[[out_row, c]] = psi.logits[c];
                for dd in 0..l {
                    me[[out_row, c * l + dd]] = psi.comp_means[[c, dd]];
                    st[[out_row, c * l + dd]] = psi.comp_stds[[c, dd]];
                }
            }
        }
    }
    Ok((logits.unwrap(), means.unwrap(), stds.unwrap()))
}

/// One full pseudo-Gibbs sweep over the given rows: per chain,
/// z ~ q(z | completion) then x_mis ~ p(x_mis | z). Only missing positions
/// change; the chain state keeps the latents for persistence.
pub fn pseudo_gibbs_step(
    model: &VAEModel,
    amortizer: &dyn Amortizer,
    store: &mut ImputationStore,
    data: &IncompleteDataset,
    rows: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let k = store.n_chains;
    let l = amortizer.latent_dim();
    let (logits, means, stds) = encode_completions(amortizer, store, rows)?;
    let z = draw_ancestral_batch(&logits, &means, &stds, 1, rng);
    let eta = model
        .decoder_forward(&z)
        .map_err(|e| Error::numeric(format!("pseudo-Gibbs decoder failure: {e}")))?;
    if store.chain_state.is_none() {
        store.chain_state = Some(Array2::zeros((store.n_rows * k, l)));
    }
    for (bi, &row) in rows.iter().enumerate() {
        let values = data.row_values(row);
        let mask = data.row_mask(row);
        for kk in 0..k {
            let bidx = bi * k + kk;
            let eta_row = slice_eta(&eta, bidx);
            let draw = decoder_conditional_sample(&eta_row, &values, &mask, rng)
                .map_err(|e| Error::numeric(format!("pseudo-Gibbs chain ({row},{kk}): {e}")))?;
            let sidx = store.chain_index(row, kk);
            store.imputations.row_mut(sidx).assign(&draw.rows.row(0));
            if let Some(cs) = &mut store.chain_state {
                cs.row_mut(sidx).assign(&z.row(bidx));
            }
        }
    }
    Ok(())
}

/// Metropolis-within-Gibbs sweep: the latent update proposes
/// z* ~ q(z | completion) and accepts with the ratio of
/// p(x, z) q(z_t) / [p(x, z_t) q(z*)], computed in log space; the
/// imputation refresh then draws from the decoder at the accepted latent.
pub struct MwgStats {
    pub acceptance_rate: f64,
}

pub fn mwg_step(
    model: &VAEModel,
    amortizer: &dyn Amortizer,
    store: &mut ImputationStore,
    data: &IncompleteDataset,
    rows: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<MwgStats> {
    let k = store.n_chains;
    let l = amortizer.latent_dim();
    let d = data.dim();
    let (logits, means, stds) = encode_completions(amortizer, store, rows)?;
    let proposal = draw_ancestral_batch(&logits, &means, &stds, 1, rng);

    let first_call = store.chain_state.is_none();
    if first_call {
        // No current latents: the proposal draw stands in for them.
        let mut cs = Array2::zeros((store.n_rows * k, l));
        for (bi, &row) in rows.iter().enumerate() {
            for kk in 0..k {
                cs.row_mut(store.chain_index(row, kk)).assign(&proposal.row(bi * k + kk));
            }
        }
        store.chain_state = Some(cs);
    }
    let current = {
        let cs = store.chain_state.as_ref().unwrap();
        let mut cur = Array2::zeros((rows.len() * k, l));
        for (bi, &row) in rows.iter().enumerate() {
            for kk in 0..k {
                cur.row_mut(bi * k + kk).assign(&cs.row(store.chain_index(row, kk)));
            }
        }
        cur
    };

    let eta_star = model.decoder_forward(&proposal)?;
    let eta_cur = model.decoder_forward(&current)?;
    let prior_star = prior_logpdf(&proposal);
    let prior_cur = prior_logpdf(&current);

    let ones_mask = Array2::ones((1, d));
    let mut accepted = 0usize;
    let mut total = 0usize;
    let mut z_new = Array2::zeros((rows.len() * k, l));
    for (bi, &row) in rows.iter().enumerate() {
        for kk in 0..k {
            let bidx = bi * k + kk;
            let completion = store.imputations.row(store.chain_index(row, kk)).to_owned();
            let x = completion.clone().insert_axis(ndarray::Axis(0));
            let es = slice_eta(&eta_star, bidx);
            let ec = slice_eta(&eta_cur, bidx);
            let ll_star = marginal_decoder_loglik(&es, &x, &ones_mask)?[0];
            let ll_cur = marginal_decoder_loglik(&ec, &x, &ones_mask)?[0];
            let psi = psi_of_flat(&logits, &means, &stds, bidx, l);
            let q_star = crate::mixture::mixture_logpdf(&psi, &proposal.row(bidx).to_owned());
            let q_cur = crate::mixture::mixture_logpdf(&psi, &current.row(bidx).to_owned());
            let log_alpha =
                (ll_star + prior_star[bidx] + q_cur) - (ll_cur + prior_cur[bidx] + q_star);
            if !log_alpha.is_finite() {
                return Err(Error::numeric(format!(
                    "MWG chain ({row},{kk}): non-finite acceptance ratio"
                )));
            }
            let u: f64 = rng.random_range(0.0..1.0);
            let accept = u.ln() < log_alpha.min(0.0);
            total += 1;
            if accept {
                accepted += 1;
                z_new.row_mut(bidx).assign(&proposal.row(bidx));
            } else {
                z_new.row_mut(bidx).assign(&current.row(bidx));
            }
        }
    }

    // Refresh x_mis from the accepted latents.
    let eta_new = model.decoder_forward(&z_new)?;
    for (bi, &row) in rows.iter().enumerate() {
        let values = data.row_values(row);
        let mask = data.row_mask(row);
        for kk in 0..k {
            let bidx = bi * k + kk;
            let eta_row = slice_eta(&eta_new, bidx);
            let draw = decoder_conditional_sample(&eta_row, &values, &mask, rng)
                .map_err(|e| Error::numeric(format!("MWG chain ({row},{kk}): {e}")))?;
            let sidx = store.chain_index(row, kk);
            store.imputations.row_mut(sidx).assign(&draw.rows.row(0));
            store.chain_state.as_mut().unwrap().row_mut(sidx).assign(&z_new.row(bidx));
        }
    }
    Ok(MwgStats { acceptance_rate: accepted as f64 / total as f64 })
}

pub struct LairStats {
    /// Mean effective sample size of the normalized weights, over rows.
    pub mean_ess: f64,
}

/// Latent-adaptive importance resampling sweep. Per row: draw z^k from the
/// per-chain posteriors, weight chains by
/// p(x_obs, x_mis^k, z^k) / [q(z^k | x^k) f_hat(x_mis^k)] with f_hat the
/// equal-weight mixture of per-chain decoder conditionals, systematically
/// resample, then refresh the imputations from the surviving latents.
/// `refinements` repeats the inner cycle (R = 0 means a single cycle).
pub fn lair_step(
    model: &VAEModel,
    amortizer: &dyn Amortizer,
    store: &mut ImputationStore,
    data: &IncompleteDataset,
    rows: &[usize],
    refinements: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LairStats> {
    let mut stats = LairStats { mean_ess: 0.0 };
    for cycle in 0..=refinements {
        stats = lair_cycle(model, amortizer, store, data, rows, rng)?;
        let _ = cycle;
    }
    Ok(stats)
}

fn lair_cycle(
    model: &VAEModel,
    amortizer: &dyn Amortizer,
    store: &mut ImputationStore,
    data: &IncompleteDataset,
    rows: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<LairStats> {
    let k = store.n_chains;
    let l = amortizer.latent_dim();
    let (logits, means, stds) = encode_completions(amortizer, store, rows)?;
    let z = draw_ancestral_batch(&logits, &means, &stds, 1, rng);
    let eta = model.decoder_forward(&z)?;

    // Densities for f_hat come from the latents that generated the current
    // imputations when available, otherwise from the fresh draws.
    let prev_z = match &store.chain_state {
        Some(cs) => {
            let mut cur = Array2::zeros((rows.len() * k, l));
            for (bi, &row) in rows.iter().enumerate() {
                for kk in 0..k {
                    cur.row_mut(bi * k + kk).assign(&cs.row(store.chain_index(row, kk)));
                }
            }
            cur
        }
        None => z.clone(),
    };
    let eta_prev = model.decoder_forward(&prev_z)?;

    if store.chain_state.is_none() {
        store.chain_state = Some(Array2::zeros((store.n_rows * k, l)));
    }

    let mut ess_acc = 0.0;
    for (bi, &row) in rows.iter().enumerate() {
        let values = data.row_values(row);
        let mask = data.row_mask(row);
        let (weights, _) = lair_row_weights(
            store, &logits, &means, &stds, &z, &eta, &eta_prev, bi, row, &mask, l,
        )?;
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        ess_acc += ess / k as f64;

        // Systematic resampling; skipped at K = 1 so the stream matches
        // pseudo-Gibbs exactly.
        let ancestors = if k == 1 {
            vec![0usize]
        } else {
            let u: f64 = rng.random_range(0.0..1.0);
            systematic_resample(&weights, u)
        };

        // Refresh imputations and chain state from the surviving latents.
        for (kk, &a) in ancestors.iter().enumerate() {
            let bidx = bi * k + a;
            let eta_row = slice_eta(&eta, bidx);
            let draw = decoder_conditional_sample(&eta_row, &values, &mask, rng)
                .map_err(|e| Error::numeric(format!("LAIR chain ({row},{kk}): {e}")))?;
            let sidx = store.chain_index(row, kk);
            store.imputations.row_mut(sidx).assign(&draw.rows.row(0));
            store.chain_state.as_mut().unwrap().row_mut(sidx).assign(&z.row(bidx));
        }
    }
    Ok(LairStats { mean_ess: ess_acc / rows.len() as f64 })
}

/// Normalized LAIR weights of one row's chains, and the freshly drawn
/// latents they refer to. Exposed for diagnostics and tests; `lair_step`
/// uses the same computation.
#[allow(clippy::too_many_arguments)]
fn lair_row_weights(
    store: &ImputationStore,
    logits: &Array2<f64>,
    means: &Array2<f64>,
    stds: &Array2<f64>,
    z: &Array2<f64>,
    eta: &DecoderOutput,
    eta_prev: &DecoderOutput,
    bi: usize,
    row: usize,
    mask: &[u8],
    latent_dim: usize,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let k = store.n_chains;
    let d = store.imputations.ncols();
    let ones_mask = Array2::ones((1, d));
    let mis_mask =
        Array2::from_shape_fn((1, d), |(_, j)| if mask[j] == 0 { 1.0 } else { 0.0 });
    let any_missing = mask.iter().any(|&m| m == 0);

    let mut log_w = vec![0.0; k];
    for kk in 0..k {
        let bidx = bi * k + kk;
        let completion = store.imputations.row(store.chain_index(row, kk)).to_owned();
        let x = completion.clone().insert_axis(ndarray::Axis(0));
        let e_row = slice_eta(eta, bidx);
        let ll_full = marginal_decoder_loglik(&e_row, &x, &ones_mask)?[0];
        let zrow = z.row(bidx).to_owned();
        let prior = prior_logpdf(&zrow.clone().insert_axis(ndarray::Axis(0)))[0];
        let psi = psi_of_flat(logits, means, stds, bidx, latent_dim);
        let logq = crate::mixture::mixture_logpdf(&psi, &zrow);

        // f_hat(x_mis^k): equal-weight mixture of per-chain decoder
        // conditionals over the missing dimensions.
        let log_fhat = if any_missing {
            let mut terms = Vec::with_capacity(k);
            for jj in 0..k {
                let e_prev = slice_eta(eta_prev, bi * k + jj);
                let lp = marginal_decoder_loglik(&e_prev, &x, &mis_mask)?[0];
                terms.push(lp - (k as f64).ln());
            }
            logsumexp(&terms)
        } else {
            0.0
        };
        log_w[kk] = ll_full + prior - logq - log_fhat;
    }
    let weights = softmax(&log_w);
    let sum: f64 = weights.iter().sum();
    if !(sum.is_finite() && (sum - 1.0).abs() < 1e-9) {
        return Err(Error::numeric(format!("LAIR row {row}: degenerate weights (sum {sum})")));
    }
    let mut zs = Array2::zeros((k, latent_dim));
    for kk in 0..k {
        zs.row_mut(kk).assign(&z.row(bi * k + kk));
    }
    Ok((weights, zs))
}

/// Self-normalized LAIR estimate of E[g(x_mis)] under the model
/// conditional, from one weighting pass over a single row. Diagnostic /
/// test surface for the importance weights.
pub fn lair_snis_estimate(
    model: &VAEModel,
    amortizer: &dyn Amortizer,
    store: &ImputationStore,
    data: &IncompleteDataset,
    row: usize,
    g: impl Fn(&Array1<f64>) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let k = store.n_chains;
    let l = amortizer.latent_dim();
    let rows = [row];
    let (logits, means, stds) = encode_completions(amortizer, store, &rows)?;
    let z = draw_ancestral_batch(&logits, &means, &stds, 1, rng);
    let eta = model.decoder_forward(&z)?;
    let prev_z = match &store.chain_state {
        Some(cs) => {
            let mut cur = Array2::zeros((k, l));
            for kk in 0..k {
                cur.row_mut(kk).assign(&cs.row(store.chain_index(row, kk)));
            }
            cur
        }
        None => z.clone(),
    };
    let eta_prev = model.decoder_forward(&prev_z)?;
    let mask = data.row_mask(row);
    let (weights, _) = lair_row_weights(
        store, &logits, &means, &stds, &z, &eta, &eta_prev, 0, row, &mask, l,
    )?;
    let mut acc = 0.0;
    for kk in 0..k {
        let completion = store.imputations.row(store.chain_index(row, kk)).to_owned();
        acc += weights[kk] * g(&completion);
    }
    Ok(acc)
}

/// Systematic resampling with a single uniform; deterministic given u.
fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let k = weights.len();
    let mut out = Vec::with_capacity(k);
    let mut cum = 0.0;
    let mut idx = 0usize;
    let mut cumsum: Vec<f64> = Vec::with_capacity(k);
    for w in weights {
        cum += w;
        cumsum.push(cum);
    }
    for m in 0..k {
        let point = (m as f64 + u) / k as f64;
        while idx < k - 1 && cumsum[idx] < point {
            idx += 1;
        }
        out.push(idx);
    }
    out
}

fn slice_eta(eta: &DecoderOutput, row: usize) -> DecoderOutput {
    match eta {
        DecoderOutput::Gaussian { mean, std } => DecoderOutput::Gaussian {
            mean: mean.row(row).to_owned().insert_axis(ndarray::Axis(0)),
            std: std.row(row).to_owned().insert_axis(ndarray::Axis(0)),
        },
        DecoderOutput::Bernoulli { raw, probs } => DecoderOutput::Bernoulli {
            raw: raw.row(row).to_owned().insert_axis(ndarray::Axis(0)),
            probs: probs.row(row).to_owned().insert_axis(ndarray::Axis(0)),
        },
    }
}

fn psi_of_flat(
    logits: &Array2<f64>,
    means: &Array2<f64>,
    stds: &Array2<f64>,
    row: usize,
    latent_dim: usize,
) -> crate::mixture::MixtureVariationalParams {
    let km = logits.ncols();
    let mut cm = Array2::zeros((km, latent_dim));
    let mut cs = Array2::zeros((km, latent_dim));
    for c in 0..km {
        for d in 0..latent_dim {
            cm[[c, d]] = means[[row, c * latent_dim + d]];
            cs[[c, d]] = stds[[row, c * latent_dim + d]];
        }
    }
    crate::mixture::MixtureVariationalParams {
        logits: logits.row(row).to_owned(),
        comp_means: cm,
        comp_stds: cs,
    }
}

/// Exact draws from p(x_mis | x_obs) by rejection: z ~ p(z) accepted with
/// probability p(x_obs | z) / M, then x_mis ~ p(x_mis | z). M is estimated
/// as the grid maximum of p(x_obs | z) times a 1.1 safety factor.
pub struct RejectionResult {
    pub imputations: Array2<f64>,
    pub acceptance_rate: f64,
    pub bound: f64,
}

pub fn rejection_sample_conditional(
    model: &VAEModel,
    values: &Array1<f64>,
    mask: &[u8],
    n: usize,
    rng: &mut ChaCha8Rng,
    proposal_budget: usize,
) -> Result<RejectionResult> {
    rejection_sample_conditional_scaled(model, values, mask, n, rng, proposal_budget, 1.0)
}

/// Rejection sampling with an extra inflation factor on M (the accepted
/// law is invariant to it; only the rate changes).
pub fn rejection_sample_conditional_scaled(
    model: &VAEModel,
    values: &Array1<f64>,
    mask: &[u8],
    n: usize,
    rng: &mut ChaCha8Rng,
    proposal_budget: usize,
    m_inflation: f64,
) -> Result<RejectionResult> {
    if model.latent_dim > 2 {
        return Err(Error::unsupported(
            "rejection sampling needs a latent dimension of at most 2 to bound p(x_obs|z)",
        ));
    }
    if mask.iter().all(|&m| m == 1) {
        return Err(Error::parameter("rejection sampling: fully observed row has no missing dims"));
    }
    let d = values.len();
    let x = values.clone().insert_axis(ndarray::Axis(0));
    let mask01 = Array2::from_shape_fn((1, d), |(_, j)| f64::from(mask[j]));

    // Bound M >= sup_z p(x_obs | z) from a latent grid with a safety factor.
    let grid_pts = latent_grid(model.latent_dim, 6.0, 64);
    let eta_grid = model.decoder_forward(&grid_pts)?;
    let ll_grid = marginal_decoder_loglik(&eta_grid, &x, &mask01)?;
    let log_m = ll_grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        + (1.1f64).ln()
        + m_inflation.ln();

    let chunk = 512;
    let mut accepted_z: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut proposals = 0usize;
    while accepted_z.len() < n {
        if proposals >= proposal_budget {
            let rate = accepted_z.len() as f64 / proposals as f64;
            if rate < 1e-6 || accepted_z.is_empty() {
                return Err(Error::numeric(format!(
                    "rejection sampling acceptance rate {rate:.2e} too low; increase the \
                     proposal budget, refine the M grid, or use an iterative sampler"
                )));
            }
            return Err(Error::numeric(format!(
                "rejection sampling exhausted its proposal budget with {} of {n} draws",
                accepted_z.len()
            )));
        }
        let m = chunk.min(proposal_budget - proposals);
        let z = crate::vae::prior_sample(m, model.latent_dim, rng);
        let eta = model.decoder_forward(&z)?;
        let ll = marginal_decoder_loglik(&eta, &x, &mask01)?;
        for s in 0..m {
            proposals += 1;
            let u: f64 = rng.random_range(0.0..1.0);
            if u.ln() < ll[s] - log_m && accepted_z.len() < n {
                accepted_z.push(z.row(s).to_owned());
            }
        }
    }
    let rate = accepted_z.len() as f64 / proposals as f64;

    // Draw x_mis from the decoder at the accepted latents.
    let mut zmat = Array2::zeros((n, model.latent_dim));
    for (i, z) in accepted_z.iter().enumerate() {
        zmat.row_mut(i).assign(z);
    }
    let eta = model.decoder_forward(&zmat)?;
    let draws = decoder_conditional_sample(&eta, values, mask, rng)?;
    Ok(RejectionResult { imputations: draws.rows, acceptance_rate: rate, bound: log_m })
}

fn latent_grid(latent_dim: usize, half_width: f64, res: usize) -> Array2<f64> {
    let axis = crate::math::linspace(-half_width, half_width, res);
    match latent_dim {
        1 => Array2::from_shape_fn((res, 1), |(i, _)| axis[i]),
        2 => {
            let mut out = Array2::zeros((res * res, 2));
            for (i, &a) in axis.iter().enumerate() {
                for (j, &b) in axis.iter().enumerate() {
                    out[[i * res + j, 0]] = a;
                    out[[i * res + j, 1]] = b;
                }
            }
            out
        }
        _ => unreachable!("guarded by caller"),
    }
}

/// Tape graph of the two decomposed objectives, sharing one encoder pass,
/// one latent draw, and one decoder pass per completion.
pub struct DemissGraph {
    /// Objective for the generative parameters: mean over completions and
    /// latent samples of log p(x_obs, z) (observed dims + prior).
    pub theta: Var,
    /// Objective for the variational parameters: mean of the completed-data
    /// ELBO log p(x_obs, x_mis, z) - log q(z | x).
    pub phi: Var,
    pub per_row_theta: Var,
    pub per_row_phi: Var,
}

/// Build both objectives for a row block with completions from the store.
/// `latent_samples` is L in the shared-computation procedure.
pub fn build_demiss_objectives(
    tape: &mut Tape,
    model: &VAEModel,
    model_binding: &mut ParamBinding,
    encoder: &MixtureEncoder,
    enc_binding: &mut ParamBinding,
    batch: &BatchData,
    completions: &Array2<f64>,
    latent_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DemissGraph> {
    let b = batch.n_rows();
    let k = completions.nrows() / b;
    let d = completions.ncols();
    if completions.nrows() != b * k {
        return Err(Error::parameter("completions must hold K rows per data row"));
    }

    // Encoder input: completed rows, all-observed mask channel.
    let ones = Array2::<u8>::ones((b * k, d));
    let enc_in = crate::data::zero_mask_encode_batch(completions, &ones);
    let psi = encoder.encode_tape(tape, enc_binding, enc_in);
    let logits_v = tape.value(psi.logits).clone();
    let means_v = tape.value(psi.means).clone();
    let stds_v = tape.value(psi.stds).clone();

    let zv = draw_ancestral_batch(&logits_v, &means_v, &stds_v, latent_samples, rng);
    let z = tape.ancestral_sample(psi.logits, psi.means, psi.stds, zv, latent_samples);
    let logq = tape.mixture_logpdf(psi.logits, psi.means, psi.stds, z, latent_samples);
    let prior = tape.std_normal_loglik(z);

    let dec = model.decoder_forward_tape(tape, model_binding, z);

    // Observed-dims likelihood against the row's actual data and mask.
    let spr = k * latent_samples;
    let x_obs_rep = repeat_rows(&batch.values, spr);
    let m_obs_rep = repeat_rows(&batch.masks01, spr);
    let ll_obs = model.loglik_tape(tape, &dec, x_obs_rep, m_obs_rep);

    // Completed-data likelihood against the completions, all dims.
    let x_full_rep = repeat_rows_grouped(completions, latent_samples);
    let ones_rep = Array2::ones((b * spr, d));
    let ll_full = model.loglik_tape(tape, &dec, x_full_rep, ones_rep);

    let theta_terms = tape.add(ll_obs, prior);
    let per_row_theta = tape.chunk_mean(theta_terms, spr);
    let theta = tape.mean_all(per_row_theta);

    let s = tape.add(ll_full, prior);
    let phi_terms = tape.sub(s, logq);
    let per_row_phi = tape.chunk_mean(phi_terms, spr);
    let phi = tape.mean_all(per_row_phi);

    for (name, v) in [("theta", theta), ("phi", phi)] {
        if !tape.scalar(v).is_finite() {
            return Err(Error::numeric(format!("non-finite {name} objective")));
        }
    }
    Ok(DemissGraph { theta, phi, per_row_theta, per_row_phi })
}

fn repeat_rows(a: &Array2<f64>, times: usize) -> Array2<f64> {
    let (n, d) = (a.nrows(), a.ncols());
    let mut out = Array2::zeros((n * times, d));
    for i in 0..n {
        for t in 0..times {
            out.row_mut(i * times + t).assign(&a.row(i));
        }
    }
    out
}

/// Repeat each row `times` times, preserving the existing (row, chain)
/// grouping: completions are already (B*K) x D.
fn repeat_rows_grouped(a: &Array2<f64>, times: usize) -> Array2<f64> {
    repeat_rows(a, times)
}
