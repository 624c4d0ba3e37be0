//! Training bounds for incomplete data: the mixture ELBO under ancestral
//! sampling, its stratified variant, the importance-weighted versions, and
//! the looser stratified importance-weighted bound that can counter mixture
//! collapse. All of them are Monte Carlo estimates of lower bounds on
//! log p(x_obs) built from the same importance weight
//! w(z) = p(x_obs, z) / q(z | x_obs).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::IncompleteDataset;
use crate::error::{Error, Result};
use crate::math::{logmeanexp, logsumexp};
use crate::mixture::{
    mixture_logpdf_many, LatentSampleBatch, MixtureEncoder, MixtureVariationalParams, SampleKind,
};
use crate::nn::ParamBinding;
use crate::tape::{Tape, Var};
use crate::vae::{marginal_decoder_loglik, prior_logpdf, VAEModel};

/// Sample-budget record attached to every estimate: Z latent samples,
/// K mixture components, I importance samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBudget {
    pub z: usize,
    pub k: usize,
    pub i: usize,
}

impl SampleBudget {
    /// Decoder evaluations per data row per estimate, the quantity held
    /// fixed when comparing methods.
    pub fn decoder_evals(&self, stratified: bool) -> usize {
        if stratified {
            self.k * self.z * self.i
        } else {
            self.z * self.i
        }
    }
}

/// A lower-bound estimate over a set of rows.
#[derive(Debug, Clone)]
pub struct BoundEstimate {
    pub value: f64,
    pub per_datapoint: Vec<f64>,
    pub budget: SampleBudget,
}

impl BoundEstimate {
    pub fn from_rows(per_datapoint: Vec<f64>, budget: SampleBudget) -> Self {
        let value = per_datapoint.iter().sum::<f64>() / per_datapoint.len() as f64;
        BoundEstimate { value, per_datapoint, budget }
    }
}

/// One row's observed data.
#[derive(Debug, Clone)]
pub struct Row {
    pub values: Array1<f64>,
    pub mask: Vec<u8>,
}

impl Row {
    pub fn from_dataset(data: &IncompleteDataset, i: usize) -> Self {
        Row { values: data.row_values(i), mask: data.row_mask(i) }
    }

    fn x_matrix(&self) -> Array2<f64> {
        let d = self.values.len();
        let mut x = Array2::zeros((1, d));
        x.row_mut(0).assign(&self.values);
        x
    }

    fn mask_matrix(&self) -> Array2<f64> {
        let d = self.mask.len();
        Array2::from_shape_fn((1, d), |(_, j)| f64::from(self.mask[j]))
    }
}

/// log w(z) = log p(x_obs | z) + log p(z) - log q(z | x_obs), per sample.
pub fn log_weights(
    model: &VAEModel,
    psi: &MixtureVariationalParams,
    row: &Row,
    z: &Array2<f64>,
) -> Result<Array1<f64>> {
    let eta = model.decoder_forward(z)?;
    let ll = marginal_decoder_loglik(&eta, &row.x_matrix(), &row.mask_matrix())?;
    let prior = prior_logpdf(z);
    let logq = mixture_logpdf_many(psi, z);
    let mut out = Array1::zeros(z.nrows());
    for s in 0..z.nrows() {
        let v = ll[s] + prior[s] - logq[s];
        if !v.is_finite() {
            return Err(Error::numeric(format!("non-finite log weight at sample {s}")));
        }
        out[s] = v;
    }
    Ok(out)
}

/// Standard ELBO estimate: mean of log w over ancestrally drawn samples.
pub fn elbo(
    model: &VAEModel,
    psi: &MixtureVariationalParams,
    row: &Row,
    batch: &LatentSampleBatch,
) -> Result<f64> {
    let lw = log_weights(model, psi, row, &batch.z)?;
    Ok(lw.mean().unwrap())
}

/// Stratified ELBO: component-probability-weighted average of the
/// per-component sample means of log w. The full mixture density stays in
/// the denominator of w.
pub fn selbo(
    model: &VAEModel,
    psi: &MixtureVariationalParams,
    row: &Row,
    batch: &LatentSampleBatch,
) -> Result<f64> {
    let SampleKind::Stratified { per_comp } = batch.kind else {
        return Err(Error::parameter("selbo requires a stratified batch"));
    };
    let k = psi.n_components();
    let lw = log_weights(model, psi, row, &batch.z)?;
    let w = psi.weights();
    let mut acc = 0.0;
    for kk in 0..k {
        let mut m = 0.0;
        for i in 0..per_comp {
            m += lw[kk * per_comp + i];
        }
        acc += w[kk] * (m / per_comp as f64);
    }
    Ok(acc)
}

/// Importance-weighted ELBO: log-mean-exp of log w over groups of I
/// samples, averaged over groups.
pub fn iwelbo(
    model: &VAEModel,
    psi: &MixtureVariationalParams,
    row: &Row,
    batch: &LatentSampleBatch,
    i_samples: usize,
) -> Result<f64> {
    if i_samples < 1 || batch.len() % i_samples != 0 {
        return Err(Error::parameter("iwelbo: batch size must be a multiple of I"));
    }
    let lw = log_weights(model, psi, row, &batch.z)?;
    let groups = batch.len() / i_samples;
    let mut acc = 0.0;
    for g in 0..groups {
        let vals: Vec<f64> = (0..i_samples).map(|j| lw[g * i_samples + j]).collect();
        acc += logmeanexp(&vals);
    }
    Ok(acc / groups as f64)
}

/// Stratified importance-weighted ELBO: a single log of the
/// stratum-weighted average importance weight,
/// log sum_k q(k|x) (1/I) sum_j w(z_j^k).
pub fn siwelbo(
    model: &VAEModel,
    psi: &MixtureVariationalParams,
    row: &Row,
    batch: &LatentSampleBatch,
    i_samples: usize,
) -> Result<f64> {
    let SampleKind::Stratified { per_comp } = batch.kind else {
        return Err(Error::parameter("siwelbo requires a stratified batch"));
    };
    if per_comp != i_samples {
        return Err(Error::parameter("siwelbo: batch must hold I samples per component"));
    }
    let k = psi.n_components();
    let lw = log_weights(model, psi, row, &batch.z)?;
    let logw_comp: Vec<f64> = psi.weights().iter().map(|w| w.ln()).collect();
    let mut terms = Vec::with_capacity(k * i_samples);
    for kk in 0..k {
        for j in 0..i_samples {
            terms.push(logw_comp[kk] - (i_samples as f64).ln() + lw[kk * i_samples + j]);
        }
    }
    Ok(logsumexp(&terms))
}

/// Looser stratified importance-weighted bound: per-component
/// log-mean-exp first, then the stratum-weighted sum. Equals selbo at
/// I = 1 and never exceeds siwelbo on the same samples.
pub fn siwelbo_loose(
    model: &VAEModel,
    psi: &MixtureVariationalParams,
    row: &Row,
    batch: &LatentSampleBatch,
    i_samples: usize,
) -> Result<f64> {
    let SampleKind::Stratified { per_comp } = batch.kind else {
        return Err(Error::parameter("siwelbo_loose requires a stratified batch"));
    };
    if per_comp != i_samples {
        return Err(Error::parameter("siwelbo_loose: batch must hold I samples per component"));
    }
    let k = psi.n_components();
    let lw = log_weights(model, psi, row, &batch.z)?;
    let w = psi.weights();
    let mut acc = 0.0;
    for kk in 0..k {
        let vals: Vec<f64> = (0..i_samples).map(|j| lw[kk * i_samples + j]).collect();
        acc += w[kk] * logmeanexp(&vals);
    }
    Ok(acc)
}

/// Which bound a training step maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Elbo,
    Selbo,
    Iwelbo,
    Siwelbo,
    SiwelboLoose,
}

impl ObjectiveKind {
    pub fn stratified(&self) -> bool {
        matches!(self, ObjectiveKind::Selbo | ObjectiveKind::Siwelbo | ObjectiveKind::SiwelboLoose)
    }
}

/// Monte Carlo configuration of one training objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Latent samples: ancestral draw count for elbo/iwelbo (per group),
    /// per-component draw count for selbo.
    pub z: usize,
    /// Importance samples per estimate (iwelbo) or per component (siwelbo).
    pub i: usize,
    /// Sticking-the-landing gradients: the variational density inside w is
    /// evaluated with its parameters treated as constants.
    pub stl: bool,
}

impl ObjectiveSpec {
    pub fn budget(&self, k: usize) -> SampleBudget {
        SampleBudget { z: self.z, k, i: self.i }
    }

    /// Latent samples drawn per row.
    pub fn samples_per_row(&self, k: usize) -> usize {
        match self.kind {
            ObjectiveKind::Elbo => self.z,
            ObjectiveKind::Iwelbo => self.z * self.i,
            ObjectiveKind::Selbo => k * self.z,
            ObjectiveKind::Siwelbo | ObjectiveKind::SiwelboLoose => k * self.i,
        }
    }
}

/// Mini-batch constants shared by objective graphs.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub values: Array2<f64>,
    pub masks01: Array2<f64>,
    pub enc_in: Array2<f64>,
}

impl BatchData {
    pub fn from_dataset(data: &IncompleteDataset) -> Self {
        BatchData {
            values: data.values.clone(),
            masks01: data.masks_f64(),
            enc_in: crate::data::zero_mask_encode_batch(&data.values, &data.masks),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
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
}

/// Tape graph of a bound over a batch of rows.
pub struct BoundGraph {
    /// Scalar mean bound (the training objective).
    pub bound: Var,
    /// Per-row bound values, B x 1.
    pub per_row: Var,
    /// The latent sample node.
    pub z: Var,
}

/// Batched ancestral draws from per-row mixtures given plain parameter
/// values. Consumption order is row-major and skips the categorical
/// uniform at K = 1.
pub fn draw_ancestral_batch(
    logits: &Array2<f64>,
    means: &Array2<f64>,
    stds: &Array2<f64>,
    spr: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let b = logits.nrows();
    let k = logits.ncols();
    let l = means.ncols() / k;
    let mut z = Array2::zeros((b * spr, l));
    for row in 0..b {
        let w = crate::math::softmax(logits.row(row).as_slice().unwrap());
        let mut cum = Vec::with_capacity(k);
        let mut acc = 0.0;
        for wi in &w {
            acc += wi;
            cum.push(acc);
        }
        for s in 0..spr {
            let kk = if k == 1 {
                0
            } else {
                let u: f64 = rng.random_range(0.0..1.0);
                cum.iter().position(|&t| u <= t).unwrap_or(k - 1)
            };
            for d in 0..l {
                let e: f64 = StandardNormal.sample(rng);
                z[[row * spr + s, d]] = means[[row, kk * l + d]] + stds[[row, kk * l + d]] * e;
            }
        }
    }
    z
}

/// Batched stratified draws: per row, `per_comp` samples from each
/// component in component-major order.
pub fn draw_stratified_batch(
    means: &Array2<f64>,
    stds: &Array2<f64>,
    k: usize,
    per_comp: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let b = means.nrows();
    let l = means.ncols() / k;
    let spr = k * per_comp;
    let mut z = Array2::zeros((b * spr, l));
    for row in 0..b {
        for kk in 0..k {
            for i in 0..per_comp {
                for d in 0..l {
                    let e: f64 = StandardNormal.sample(rng);
                    z[[row * spr + kk * per_comp + i, d]] =
                        means[[row, kk * l + d]] + stds[[row, kk * l + d]] * e;
                }
            }
        }
    }
    z
}

/// Build the tape graph of a bound for a batch of rows. Sampling consumes
/// `rng`; gradients flow to both parameter stores through their bindings.
pub fn build_bound(
    tape: &mut Tape,
    model: &VAEModel,
    model_binding: &mut ParamBinding,
    encoder: &MixtureEncoder,
    enc_binding: &mut ParamBinding,
    batch: &BatchData,
    spec: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<BoundGraph> {
    let k = encoder.n_components;
    let psi = encoder.encode_tape(tape, enc_binding, batch.enc_in.clone());
    let logits_v = tape.value(psi.logits).clone();
    let means_v = tape.value(psi.means).clone();
    let stds_v = tape.value(psi.stds).clone();
    if logits_v.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("encoder produced non-finite logits"));
    }

    let spr = spec.samples_per_row(k);
    let z = match spec.kind {
        ObjectiveKind::Elbo | ObjectiveKind::Iwelbo => {
            let zv = draw_ancestral_batch(&logits_v, &means_v, &stds_v, spr, rng);
            tape.ancestral_sample(psi.logits, psi.means, psi.stds, zv, spr)
        }
        ObjectiveKind::Selbo => {
            let zv = draw_stratified_batch(&means_v, &stds_v, k, spec.z, rng);
            tape.stratified_sample(psi.means, psi.stds, zv, spec.z)
        }
        ObjectiveKind::Siwelbo | ObjectiveKind::SiwelboLoose => {
            let zv = draw_stratified_batch(&means_v, &stds_v, k, spec.i, rng);
            tape.stratified_sample(psi.means, psi.stds, zv, spec.i)
        }
    };

    // STL: the mixture density inside w sees detached variational
    // parameters; the sample path keeps its gradients.
    let (lq_logits, lq_means, lq_stds) = if spec.stl {
        (tape.detach(psi.logits), tape.detach(psi.means), tape.detach(psi.stds))
    } else {
        (psi.logits, psi.means, psi.stds)
    };
    let logq = tape.mixture_logpdf(lq_logits, lq_means, lq_stds, z, spr);

    let dec = model.decoder_forward_tape(tape, model_binding, z);
    let x_rep = BatchData::repeat_rows(&batch.values, spr);
    let m_rep = BatchData::repeat_rows(&batch.masks01, spr);
    let ll = model.loglik_tape(tape, &dec, x_rep, m_rep);
    let prior = tape.std_normal_loglik(z);
    let s = tape.add(ll, prior);
    let logw = tape.sub(s, logq);

    let per_row = match spec.kind {
        ObjectiveKind::Elbo => tape.chunk_mean(logw, spec.z),
        ObjectiveKind::Iwelbo => {
            let lme = tape.chunk_logmeanexp(logw, spec.i);
            tape.chunk_mean(lme, spec.z)
        }
        ObjectiveKind::Selbo => {
            let per_comp_mean = tape.chunk_mean(logw, spec.z); // (B*K) x 1
            let as_mat = tape.reshape(per_comp_mean, batch.n_rows(), k);
            let lsm = tape.log_softmax(psi.logits);
            let w = tape.exp(lsm);
            let prod = tape.mul(w, as_mat);
            tape.row_sum(prod)
        }
        ObjectiveKind::Siwelbo => {
            let lsm = tape.log_softmax(psi.logits);
            let lsm_col = tape.reshape(lsm, batch.n_rows() * k, 1);
            let lsm_rep = tape.repeat_rows(lsm_col, spec.i);
            let t = tape.add(logw, lsm_rep);
            let t = tape.add_scalar(t, -(spec.i as f64).ln());
            tape.chunk_logsumexp(t, k * spec.i)
        }
        ObjectiveKind::SiwelboLoose => {
            let lme = tape.chunk_logmeanexp(logw, spec.i); // (B*K) x 1
            let as_mat = tape.reshape(lme, batch.n_rows(), k);
            let lsm = tape.log_softmax(psi.logits);
            let w = tape.exp(lsm);
            let prod = tape.mul(w, as_mat);
            tape.row_sum(prod)
        }
    };
    let bound = tape.mean_all(per_row);
    if !tape.scalar(bound).is_finite() {
        return Err(Error::numeric("non-finite bound estimate"));
    }
    Ok(BoundGraph { bound, per_row, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{sample_ancestral, sample_stratified};
    use crate::nn::ArchConfig;
    use crate::rng::{stream_rng, Stream};
    use crate::stats::{mean, stderr, variance};
    use crate::vae::DecoderFamily;
    use ndarray::{arr1, arr2};

    fn test_model(seed: u64, latent: usize, data_dim: usize) -> VAEModel {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        VAEModel::new(
            latent,
            data_dim,
            ArchConfig { blocks: 1, hidden: 10 },
            DecoderFamily::Gaussian,
            &mut rng,
        )
    }

    fn test_row() -> Row {
        Row { values: arr1(&[0.4, -0.2, 0.9]), mask: vec![1, 0, 1] }
    }

    fn test_psi(seed: u64, k: usize, l: usize) -> MixtureVariationalParams {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        let logits = Array1::from_shape_fn(k, |_| rng.random_range(-0.7..0.7));
        let means = Array2::from_shape_fn((k, l), |_| rng.random_range(-1.5..1.5));
        let stds = Array2::from_shape_fn((k, l), |_| rng.random_range(0.4..1.2));
        MixtureVariationalParams::new(logits, means, stds).unwrap()
    }

    #[test]
    fn iwelbo_i1_equals_elbo() {
        let model = test_model(0, 2, 3);
        let psi = test_psi(1, 3, 2);
        let row = test_row();
        let mut rng = stream_rng(2, Stream::LatentSampling);
        let batch = sample_ancestral(&psi, 6, &mut rng).unwrap();
        let a = elbo(&model, &psi, &row, &batch).unwrap();
        let b = iwelbo(&model, &psi, &row, &batch, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selbo_k1_equals_elbo() {
        let model = test_model(0, 2, 3);
        let psi = test_psi(3, 1, 2);
        let row = test_row();
        let mut rng = stream_rng(4, Stream::LatentSampling);
        let strat = sample_stratified(&psi, 5, &mut rng).unwrap();
        let s = selbo(&model, &psi, &row, &strat).unwrap();
        // Same z values through the elbo path.
        let anc = LatentSampleBatch {
            z: strat.z.clone(),
            kind: SampleKind::Ancestral { component_ids: vec![0; 5] },
            log_q: strat.log_q.clone(),
        };
        let e = elbo(&model, &psi, &row, &anc).unwrap();
        assert_eq!(s, e);
    }

    #[test]
    fn siwelbo_k1_equals_iwelbo() {
        let model = test_model(0, 2, 3);
        let psi = test_psi(5, 1, 2);
        let row = test_row();
        let mut rng = stream_rng(6, Stream::LatentSampling);
        let strat = sample_stratified(&psi, 4, &mut rng).unwrap();
        let s = siwelbo(&model, &psi, &row, &strat, 4).unwrap();
        let anc = LatentSampleBatch {
            z: strat.z.clone(),
            kind: SampleKind::Ancestral { component_ids: vec![0; 4] },
            log_q: strat.log_q.clone(),
        };
        let i = iwelbo(&model, &psi, &row, &anc, 4).unwrap();
        assert!((s - i).abs() < 1e-13, "{s} vs {i}");
    }

    #[test]
    fn siwelbo_loose_i1_equals_selbo_exactly() {
        let model = test_model(0, 2, 3);
        let psi = test_psi(7, 4, 2);
        let row = test_row();
        let mut rng = stream_rng(8, Stream::LatentSampling);
        let strat = sample_stratified(&psi, 1, &mut rng).unwrap();
        let a = siwelbo_loose(&model, &psi, &row, &strat, 1).unwrap();
        let b = selbo(&model, &psi, &row, &strat).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn siwelbo_dominates_loose_on_shared_samples() {
        let model = test_model(0, 2, 3);
        let row = test_row();
        for seed in 0..20 {
            let psi = test_psi(100 + seed, 3, 2);
            let mut rng = stream_rng(200 + seed, Stream::LatentSampling);
            let strat = sample_stratified(&psi, 4, &mut rng).unwrap();
            let tight = siwelbo(&model, &psi, &row, &strat, 4).unwrap();
            let loose = siwelbo_loose(&model, &psi, &row, &strat, 4).unwrap();
            assert!(tight >= loose - 1e-12, "seed {seed}: {tight} < {loose}");
        }
    }

    #[test]
    fn loose_k1_equals_iwelbo() {
        let model = test_model(0, 2, 3);
        let psi = test_psi(9, 1, 2);
        let row = test_row();
        let mut rng = stream_rng(10, Stream::LatentSampling);
        let strat = sample_stratified(&psi, 6, &mut rng).unwrap();
        let a = siwelbo_loose(&model, &psi, &row, &strat, 6).unwrap();
        let anc = LatentSampleBatch {
            z: strat.z.clone(),
            kind: SampleKind::Ancestral { component_ids: vec![0; 6] },
            log_q: strat.log_q.clone(),
        };
        let b = iwelbo(&model, &psi, &row, &anc, 6).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    /// Exact-posterior setup: affine decoder with orthogonal latent
    /// directions so the posterior is a diagonal Gaussian.
    fn exact_posterior_setup() -> (VAEModel, Row, MixtureVariationalParams, f64) {
        // W rows orthogonal: W W^T diagonal.
        let w = arr2(&[[0.6, 0.0, 0.8], [0.0, 1.0, 0.0]]);
        let b = arr1(&[0.1, -0.3, 0.2]);
        let sigma = 0.7;
        let model = VAEModel::affine_gaussian(&w, &b, sigma);
        let x = arr1(&[0.9, 0.4, -0.5]);
        let row = Row { values: x.clone(), mask: vec![1, 1, 1] };

        // Posterior precision: I + W W^T / sigma^2 (diagonal here).
        let s2 = sigma * sigma;
        let mut prec = [0.0; 2];
        for l in 0..2 {
            let mut acc = 1.0;
            for j in 0..3 {
                acc += w[[l, j]] * w[[l, j]] / s2;
            }
            prec[l] = acc;
        }
        let mut mean = arr1(&[0.0, 0.0]);
        for l in 0..2 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += w[[l, j]] * (x[j] - b[j]) / s2;
            }
            mean[l] = acc / prec[l];
        }
        let stds = arr1(&[prec[0].powf(-0.5), prec[1].powf(-0.5)]);
        let psi = MixtureVariationalParams::single(mean, stds);

        // Analytic log p(x) from the affine marginal.
        let (mm, cov) = model.affine_marginal(&[0, 1, 2]);
        let chol = crate::math::cholesky(&cov).unwrap();
        let logp = crate::math::mvn_logpdf(&x, &mm, &chol);
        (model, row, psi, logp)
    }

    #[test]
    fn elbo_tight_at_exact_posterior() {
        let (model, row, psi, logp) = exact_posterior_setup();
        let mut rng = stream_rng(11, Stream::LatentSampling);
        let batch = sample_ancestral(&psi, 16, &mut rng).unwrap();
        let e = elbo(&model, &psi, &row, &batch).unwrap();
        // KL(q || posterior) = 0, so every sample's log w equals log p(x).
        assert!((e - logp).abs() < 1e-9, "elbo {e} vs log p {logp}");
    }

    fn tiny_encoder(seed: u64, k: usize) -> MixtureEncoder {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        MixtureEncoder::new(3, 2, k, ArchConfig { blocks: 1, hidden: 6 }, 0.2, &mut rng)
    }

    fn tiny_batch() -> BatchData {
        let values = arr2(&[[0.4, -0.2, 0.9], [-0.6, 0.3, 0.0]]);
        let masks = arr2(&[[1u8, 0, 1], [1, 1, 0]]);
        let ds = IncompleteDataset::new(values, masks, vec![crate::data::FeatureKind::Continuous; 3])
            .unwrap();
        BatchData::from_dataset(&ds)
    }

    /// Finite-difference check of build_bound gradients. For ancestral
    /// kinds the perturbed objective re-inverts the samples through the
    /// distributional transform of the perturbed encoder output; for
    /// stratified kinds common noise appears through re-running the draw
    /// with a cloned rng.
    fn check_bound_gradients(kind: ObjectiveKind, stl: bool) {
        let model = test_model(20, 2, 3);
        let encoder = tiny_encoder(21, 2);
        let batch = tiny_batch();
        let spec = ObjectiveSpec { kind, z: 2, i: 2, stl };
        let seed = 22;

        let mut tape = Tape::new();
        let mut mb = ParamBinding::new(&model.params);
        let mut eb = ParamBinding::new(&encoder.params);
        let mut rng = stream_rng(seed, Stream::LatentSampling);
        let g = build_bound(&mut tape, &model, &mut mb, &encoder, &mut eb, &batch, &spec, &mut rng)
            .unwrap();
        let grads = tape.backward(g.bound).unwrap();
        let theta_grads = mb.grads(&tape, &grads);
        let phi_grads = eb.grads(&tape, &grads);
        let z_base = tape.value(g.z).clone();

        // Theta: z is unchanged under theta perturbations; rebuild the
        // bound value at fixed z.
        let value_at_theta = |params: &crate::nn::ParamStore| -> f64 {
            let mut m2 = model.clone();
            m2.params = params.clone();
            let mut t2 = Tape::new();
            let mut mb2 = ParamBinding::new(&m2.params);
            let mut eb2 = ParamBinding::new(&encoder.params);
            let mut r2 = stream_rng(seed, Stream::LatentSampling);
            let g2 = build_bound(&mut t2, &m2, &mut mb2, &encoder, &mut eb2, &batch, &spec, &mut r2)
                .unwrap();
            t2.scalar(g2.bound)
        };
        let h = 1e-5;
        for (id, gr) in theta_grads.iter().take(3) {
            let base = model.params.get(*id).clone();
            let r = base.nrows() - 1;
            let c = base.ncols() - 1;
            let mut sp = model.params.clone();
            let mut v = base.clone();
            v[[r, c]] += h;
            sp.set(*id, v);
            let mut sm = model.params.clone();
            let mut v = base.clone();
            v[[r, c]] -= h;
            sm.set(*id, v);
            let fd = (value_at_theta(&sp) - value_at_theta(&sm)) / (2.0 * h);
            let rel = (fd - gr[[r, c]]).abs() / (1.0 + gr[[r, c]].abs());
            assert!(rel < 1e-3, "theta {}: fd {fd} vs {}", model.params.name(*id), gr[[r, c]]);
        }

        // Phi: for ancestral kinds re-invert the fixed noise through the
        // perturbed mixture; for stratified kinds rerun with a cloned rng
        // (the draw is a smooth function of psi under common noise).
        let k = encoder.n_components;
        let l = encoder.latent_dim;
        let spr = spec.samples_per_row(k);
        // Noise records for ancestral re-inversion.
        let (base_logits, base_means, base_stds) = encoder.encode_batch(&batch.enc_in).unwrap();
        let noise: Vec<Vec<f64>> = (0..z_base.nrows())
            .map(|s| {
                let rowi = s / spr;
                let psi = psi_of_row(&base_logits, &base_means, &base_stds, rowi, k, l);
                kernels_transform(&psi, &z_base.row(s).to_vec())
            })
            .collect();
        let value_at_phi = |params: &crate::nn::ParamStore| -> f64 {
            let mut e2 = encoder.clone();
            e2.params = params.clone();
            match spec.kind {
                ObjectiveKind::Elbo | ObjectiveKind::Iwelbo => {
                    // Rebuild z by re-inversion, then evaluate the bound value.
                    let (lg, me, st) = e2.encode_batch(&batch.enc_in).unwrap();
                    let mut z = Array2::zeros(z_base.raw_dim());
                    for s in 0..z.nrows() {
                        let rowi = s / spr;
                        let psi = psi_of_row(&lg, &me, &st, rowi, k, l);
                        let zz = crate::kernels::transform_inverse(
                            psi.logits.as_slice().unwrap(),
                            &psi.comp_means,
                            &psi.comp_stds,
                            &noise[s],
                        );
                        for d in 0..l {
                            z[[s, d]] = zz[d];
                        }
                    }
                    bound_value_at_z(&model, &e2, &batch, &spec, &z, stl, &base_logits, &base_means, &base_stds)
                }
                _ => {
                    let mut t2 = Tape::new();
                    let mut mb2 = ParamBinding::new(&model.params);
                    let mut eb2 = ParamBinding::new(&e2.params);
                    let mut r2 = stream_rng(seed, Stream::LatentSampling);
                    let g2 = build_bound(
                        &mut t2, &model, &mut mb2, &e2, &mut eb2, &batch, &spec, &mut r2,
                    )
                    .unwrap();
                    // Under STL the value path still uses live psi; the
                    // STL hybrid below handles the frozen density.
                    if stl {
                        bound_value_at_z(
                            &model, &e2, &batch, &spec, t2.value(g2.z), stl, &base_logits,
                            &base_means, &base_stds,
                        )
                    } else {
                        t2.scalar(g2.bound)
                    }
                }
            }
        };
        let mut checked = 0;
        for (id, gr) in phi_grads.iter() {
            if checked >= 4 {
                break;
            }
            let base = encoder.params.get(*id).clone();
            let r = base.nrows() - 1;
            let c = base.ncols() - 1;
            if gr[[r, c]] == 0.0 {
                continue;
            }
            checked += 1;
            let mut sp = encoder.params.clone();
            let mut v = base.clone();
            v[[r, c]] += h;
            sp.set(*id, v);
            let mut sm = encoder.params.clone();
            let mut v = base.clone();
            v[[r, c]] -= h;
            sm.set(*id, v);
            let fd = (value_at_phi(&sp) - value_at_phi(&sm)) / (2.0 * h);
            let rel = (fd - gr[[r, c]]).abs() / (1.0 + gr[[r, c]].abs());
            assert!(
                rel < 1e-3,
                "phi {} ({kind:?}, stl {stl}): fd {fd} vs {}",
                encoder.params.name(*id),
                gr[[r, c]]
            );
        }
        assert!(checked > 0, "no nonzero phi gradients checked");
    }

    fn psi_of_row(
        logits: &Array2<f64>,
        means: &Array2<f64>,
        stds: &Array2<f64>,
        row: usize,
        k: usize,
        l: usize,
    ) -> MixtureVariationalParams {
        let mut cm = Array2::zeros((k, l));
        let mut cs = Array2::zeros((k, l));
        for kk in 0..k {
            for d in 0..l {
                cm[[kk, d]] = means[[row, kk * l + d]];
                cs[[kk, d]] = stds[[row, kk * l + d]];
            }
        }
        MixtureVariationalParams::new(logits.row(row).to_owned(), cm, cs).unwrap()
    }

    fn kernels_transform(psi: &MixtureVariationalParams, z: &[f64]) -> Vec<f64> {
        crate::kernels::distributional_transform(
            psi.logits.as_slice().unwrap(),
            &psi.comp_means,
            &psi.comp_stds,
            z,
        )
        .cdf
    }

    /// Bound value at fixed z. Under STL the mixture density in w uses the
    /// frozen base parameters; stratum weights are also frozen.
    #[allow(clippy::too_many_arguments)]
    fn bound_value_at_z(
        model: &VAEModel,
        encoder: &MixtureEncoder,
        batch: &BatchData,
        spec: &ObjectiveSpec,
        z: &Array2<f64>,
        stl: bool,
        base_logits: &Array2<f64>,
        base_means: &Array2<f64>,
        base_stds: &Array2<f64>,
    ) -> f64 {
        let k = encoder.n_components;
        let l = encoder.latent_dim;
        let spr = spec.samples_per_row(k);
        let b = batch.n_rows();
        let (lg, me, st) = encoder.encode_batch(&batch.enc_in).unwrap();
        let (dl, dm, ds) =
            if stl { (base_logits, base_means, base_stds) } else { (&lg, &me, &st) };
        let eta = model.decoder_forward(z).unwrap();
        let mut per_row = vec![0.0; b];
        for rowi in 0..b {
            let psi_den = psi_of_row(dl, dm, ds, rowi, k, l);
            let row = Row {
                values: batch.values.row(rowi).to_owned(),
                mask: batch.masks01.row(rowi).iter().map(|m| *m as u8).collect(),
            };
            let x = row.x_matrix();
            let m = row.mask_matrix();
            let mut lw = vec![0.0; spr];
            for s in 0..spr {
                let zi = rowi * spr + s;
                let zrow = z.row(zi).to_owned();
                let zmat = zrow.clone().insert_axis(ndarray::Axis(0));
                let eta_s = match &eta {
                    crate::vae::DecoderOutput::Gaussian { mean, std } => {
                        crate::vae::DecoderOutput::Gaussian {
                            mean: mean.row(zi).to_owned().insert_axis(ndarray::Axis(0)),
                            std: std.row(zi).to_owned().insert_axis(ndarray::Axis(0)),
                        }
                    }
                    crate::vae::DecoderOutput::Bernoulli { raw, probs } => {
                        crate::vae::DecoderOutput::Bernoulli {
                            raw: raw.row(zi).to_owned().insert_axis(ndarray::Axis(0)),
                            probs: probs.row(zi).to_owned().insert_axis(ndarray::Axis(0)),
                        }
                    }
                };
                let ll = marginal_decoder_loglik(&eta_s, &x, &m).unwrap()[0];
                let prior = prior_logpdf(&zmat)[0];
                let logq = crate::mixture::mixture_logpdf(&psi_den, &zrow);
                lw[s] = ll + prior - logq;
            }
            let wts = crate::math::softmax(
                psi_of_row(&lg, &me, &st, rowi, k, l).logits.as_slice().unwrap(),
            );
            per_row[rowi] = match spec.kind {
                ObjectiveKind::Elbo => mean(&lw),
                ObjectiveKind::Iwelbo => {
                    let groups = spr / spec.i;
                    (0..groups)
                        .map(|g| {
                            let vals: Vec<f64> =
                                (0..spec.i).map(|j| lw[g * spec.i + j]).collect();
                            logmeanexp(&vals)
                        })
                        .sum::<f64>()
                        / groups as f64
                }
                ObjectiveKind::Selbo => (0..k)
                    .map(|kk| {
                        let vals: Vec<f64> = (0..spec.z).map(|i| lw[kk * spec.z + i]).collect();
                        wts[kk] * mean(&vals)
                    })
                    .sum(),
                ObjectiveKind::Siwelbo => {
                    let mut terms = Vec::new();
                    for kk in 0..k {
                        for j in 0..spec.i {
                            terms.push(wts[kk].ln() - (spec.i as f64).ln() + lw[kk * spec.i + j]);
                        }
                    }
                    logsumexp(&terms)
                }
                ObjectiveKind::SiwelboLoose => (0..k)
                    .map(|kk| {
                        let vals: Vec<f64> = (0..spec.i).map(|j| lw[kk * spec.i + j]).collect();
                        wts[kk] * logmeanexp(&vals)
                    })
                    .sum(),
            };
        }
        mean(&per_row)
    }

    #[test]
    fn bound_gradients_match_fd_elbo() {
        check_bound_gradients(ObjectiveKind::Elbo, false);
    }

    #[test]
    fn bound_gradients_match_fd_selbo() {
        check_bound_gradients(ObjectiveKind::Selbo, false);
    }

    #[test]
    fn bound_gradients_match_fd_iwelbo() {
        check_bound_gradients(ObjectiveKind::Iwelbo, false);
    }

    #[test]
    fn bound_gradients_match_fd_siwelbo() {
        check_bound_gradients(ObjectiveKind::Siwelbo, false);
    }

    #[test]
    fn bound_gradients_match_fd_siwelbo_loose() {
        check_bound_gradients(ObjectiveKind::SiwelboLoose, false);
    }

    #[test]
    fn bound_gradients_match_fd_stl_variants() {
        check_bound_gradients(ObjectiveKind::Selbo, true);
        check_bound_gradients(ObjectiveKind::Elbo, true);
    }

    #[test]
    fn stl_value_path_unchanged() {
        let model = test_model(30, 2, 3);
        let encoder = tiny_encoder(31, 3);
        let batch = tiny_batch();
        for kind in [
            ObjectiveKind::Elbo,
            ObjectiveKind::Selbo,
            ObjectiveKind::Iwelbo,
            ObjectiveKind::Siwelbo,
            ObjectiveKind::SiwelboLoose,
        ] {
            let spec_plain = ObjectiveSpec { kind, z: 2, i: 2, stl: false };
            let spec_stl = ObjectiveSpec { kind, z: 2, i: 2, stl: true };
            let run = |spec: &ObjectiveSpec| -> f64 {
                let mut tape = Tape::new();
                let mut mb = ParamBinding::new(&model.params);
                let mut eb = ParamBinding::new(&encoder.params);
                let mut rng = stream_rng(32, Stream::LatentSampling);
                let g = build_bound(
                    &mut tape, &model, &mut mb, &encoder, &mut eb, &batch, spec, &mut rng,
                )
                .unwrap();
                tape.scalar(g.bound)
            };
            assert_eq!(run(&spec_plain), run(&spec_stl), "{kind:?}");
        }
    }

    #[test]
    fn stl_zero_variance_at_exact_posterior() {
        let (model, row, psi, _) = exact_posterior_setup();
        // psi as tape leaves; gradient of the per-sample elbo w.r.t. the
        // variational parameters, with and without STL.
        let grad_for = |stl: bool, seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let logits = tape.leaf(psi.logits_row());
            let means = tape.leaf(psi.flat_means());
            let stds = tape.leaf(psi.flat_stds());
            let mut rng = stream_rng(seed, Stream::LatentSampling);
            let zv = draw_stratified_batch(&psi.flat_means(), &psi.flat_stds(), 1, 1, &mut rng);
            let z = tape.stratified_sample(means, stds, zv, 1);
            let (dl, dm, ds) = if stl {
                (tape.detach(logits), tape.detach(means), tape.detach(stds))
            } else {
                (logits, means, stds)
            };
            let logq = tape.mixture_logpdf(dl, dm, ds, z, 1);
            let mut mb = ParamBinding::new(&model.params);
            let dec = model.decoder_forward_tape(&mut tape, &mut mb, z);
            let ll = model.loglik_tape(&mut tape, &dec, row.x_matrix(), row.mask_matrix());
            let prior = tape.std_normal_loglik(z);
            let s = tape.add(ll, prior);
            let logw = tape.sub(s, logq);
            let o = tape.mean_all(logw);
            let grads = tape.backward(o).unwrap();
            let gm = grads.of(&tape, means);
            let gs = grads.of(&tape, stds);
            gm.iter().chain(gs.iter()).cloned().collect()
        };
        let n = 400;
        let mut stl_sq = 0.0;
        let mut plain_sq = 0.0;
        for seed in 0..n {
            let gs = grad_for(true, 1000 + seed);
            stl_sq += gs.iter().map(|g| g * g).sum::<f64>();
            let gp = grad_for(false, 1000 + seed);
            plain_sq += gp.iter().map(|g| g * g).sum::<f64>();
        }
        // At q = exact posterior the STL per-sample gradient vanishes.
        assert!(stl_sq / (n as f64) < 1e-16, "stl mean square {stl_sq}");
        assert!(plain_sq / (n as f64) > 1e-4, "plain mean square {plain_sq}");
    }

    #[test]
    fn stl_and_plain_elbo_gradients_agree_in_expectation() {
        let model = test_model(40, 2, 3);
        let encoder = tiny_encoder(41, 2);
        let batch = tiny_batch();
        // Pick one phi coordinate and compare estimator means over seeds.
        let probe = |stl: bool, seed: u64| -> f64 {
            let spec = ObjectiveSpec { kind: ObjectiveKind::Selbo, z: 2, i: 1, stl };
            let mut tape = Tape::new();
            let mut mb = ParamBinding::new(&model.params);
            let mut eb = ParamBinding::new(&encoder.params);
            let mut rng = stream_rng(seed, Stream::LatentSampling);
            let g = build_bound(&mut tape, &model, &mut mb, &encoder, &mut eb, &batch, &spec, &mut rng)
                .unwrap();
            let grads = tape.backward(g.bound).unwrap();
            let pg = eb.grads(&tape, &grads);
            pg.iter().map(|(_, g)| g.sum()).sum()
        };
        let n = 600;
        let a: Vec<f64> = (0..n).map(|s| probe(true, 5000 + s)).collect();
        let b: Vec<f64> = (0..n).map(|s| probe(false, 5000 + s)).collect();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let m = mean(&diff);
        let se = stderr(&diff);
        assert!(m.abs() < 4.0 * se.max(1e-12), "mean diff {m}, se {se}");
        // And the plain estimator really is noisier here.
        assert!(variance(&a) <= variance(&b) * 5.0);
    }

    #[test]
    fn bound_estimate_mean_invariant() {
        let est = BoundEstimate::from_rows(vec![1.0, 2.0, 3.0], SampleBudget { z: 5, k: 1, i: 1 });
        assert!((est.value - 2.0).abs() < 1e-15);
    }
}
