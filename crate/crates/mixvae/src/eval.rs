//! Evaluation: quadrature-exact log-likelihood for models with at most two
//! latent dimensions, importance-weighted test bounds with chunked
//! accumulation, encoder fine-tuning on complete test data, gradient
//! signal-to-noise diagnostics, the posterior-complexity gap, and density
//! fields for figures.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::IncompleteDataset;
use crate::error::{Error, Result};
use crate::math::{linspace, logsumexp, trapezoid_weights};
use crate::mixture::{mixture_logpdf, MixtureEncoder, MixtureVariationalParams};
use crate::mog::MoGParams;
use crate::nn::{AmsGrad, ParamBinding};
use crate::objectives::{build_bound, BatchData, ObjectiveSpec, SampleBudget};
use crate::tape::Tape;
use crate::vae::{marginal_decoder_loglik, prior_logpdf, DecoderOutput, VAEModel};

/// Trapezoidal quadrature grid over the latent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureGrid {
    /// Per-latent-dimension interval.
    pub bounds: Vec<(f64, f64)>,
    /// Points per dimension.
    pub resolution: usize,
}

impl QuadratureGrid {
    /// Default grid: [-6, 6] per dim at resolution 256; prior mass outside
    /// is below 1e-8.
    pub fn standard(latent_dim: usize) -> Self {
        QuadratureGrid { bounds: vec![(-6.0, 6.0); latent_dim], resolution: 256 }
    }

    pub fn with_resolution(latent_dim: usize, resolution: usize) -> Self {
        QuadratureGrid { bounds: vec![(-6.0, 6.0); latent_dim], resolution }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 64 {
            return Err(Error::parameter("quadrature resolution must be >= 64"));
        }
        for &(lo, hi) in &self.bounds {
            if lo > -6.0 || hi < 6.0 {
                return Err(Error::parameter(
                    "quadrature bounds must cover at least 6 prior standard deviations",
                ));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.bounds.len()
    }

    fn axes(&self) -> Vec<Vec<f64>> {
        self.bounds.iter().map(|&(lo, hi)| linspace(lo, hi, self.resolution)).collect()
    }

    /// All grid points, row-major over the axes.
    pub fn points(&self) -> Array2<f64> {
        let axes = self.axes();
        match self.latent_dim() {
            1 => Array2::from_shape_fn((self.resolution, 1), |(i, _)| axes[0][i]),
            2 => {
                let r = self.resolution;
                let mut out = Array2::zeros((r * r, 2));
                for i in 0..r {
                    for j in 0..r {
                        out[[i * r + j, 0]] = axes[0][i];
                        out[[i * r + j, 1]] = axes[1][j];
                    }
                }
                out
            }
            d => panic!("unsupported latent dim {d} for quadrature"),
        }
    }

    /// Log trapezoid weight of each grid point.
    pub fn log_weights(&self) -> Vec<f64> {
        let axes = self.axes();
        let per_axis: Vec<Vec<f64>> = axes
            .iter()
            .map(|ax| trapezoid_weights(ax.len(), ax[1] - ax[0]))
            .collect();
        match self.latent_dim() {
            1 => per_axis[0].iter().map(|w| w.ln()).collect(),
            2 => {
                let r = self.resolution;
                let mut out = Vec::with_capacity(r * r);
                for i in 0..r {
                    for j in 0..r {
                        out.push((per_axis[0][i] * per_axis[1][j]).ln());
                    }
                }
                out
            }
            d => panic!("unsupported latent dim {d} for quadrature"),
        }
    }

    fn halved(&self) -> QuadratureGrid {
        QuadratureGrid { bounds: self.bounds.clone(), resolution: (self.resolution / 2).max(64) }
    }
}

/// Decoder outputs precomputed on a latent grid, reused across rows.
pub struct LatentGridCache {
    pub eta: DecoderOutput,
    /// log p(z_i) + log trapezoid weight per grid point.
    pub log_prior_weight: Vec<f64>,
    pub grid: QuadratureGrid,
    coarse: Option<Box<LatentGridCache>>,
}

impl LatentGridCache {
    pub fn new(model: &VAEModel, grid: &QuadratureGrid) -> Result<Self> {
        Self::build(model, grid, true)
    }

    fn build(model: &VAEModel, grid: &QuadratureGrid, with_coarse: bool) -> Result<Self> {
        if model.latent_dim > 2 {
            return Err(Error::unsupported(
                "quadrature evaluation supports latent dimension <= 2",
            ));
        }
        grid.validate()?;
        let points = grid.points();
        let eta = model.decoder_forward(&points)?;
        let prior = prior_logpdf(&points);
        let logw = grid.log_weights();
        let log_prior_weight: Vec<f64> =
            prior.iter().zip(logw.iter()).map(|(p, w)| p + w).collect();
        let coarse = if with_coarse && grid.resolution >= 128 {
            Some(Box::new(Self::build(model, &grid.halved(), false)?))
        } else {
            None
        };
        Ok(LatentGridCache { eta, log_prior_weight, grid: grid.clone(), coarse })
    }

    /// log integral of p(x_obs | z) p(z) dz over the grid.
    fn integrate_row(&self, x: &Array2<f64>, mask: &Array2<f64>) -> Result<f64> {
        let ll = marginal_decoder_loglik(&self.eta, x, mask)?;
        let terms: Vec<f64> = ll
            .iter()
            .zip(self.log_prior_weight.iter())
            .map(|(l, pw)| l + pw)
            .collect();
        Ok(logsumexp(&terms))
    }
}

/// Quadrature log-likelihood of one row, with a stability probe against
/// the half-resolution grid.
#[derive(Debug, Clone, Copy)]
pub struct GridLoglik {
    pub value: f64,
    /// |value - half-resolution value|; refinement instability indicator.
    pub stability_gap: f64,
    pub unstable: bool,
}

/// Tolerance on the refinement gap above which the result is flagged.
pub const GRID_STABILITY_TOL: f64 = 1e-3;

pub fn grid_loglik(model: &VAEModel, row_values: &Array1<f64>, row_mask: &[u8], grid: &QuadratureGrid) -> Result<GridLoglik> {
    let cache = LatentGridCache::new(model, grid)?;
    grid_loglik_cached(&cache, row_values, row_mask)
}

pub fn grid_loglik_cached(
    cache: &LatentGridCache,
    row_values: &Array1<f64>,
    row_mask: &[u8],
) -> Result<GridLoglik> {
    let d = row_values.len();
    let x = row_values.clone().insert_axis(ndarray::Axis(0));
    let mask = Array2::from_shape_fn((1, d), |(_, j)| f64::from(row_mask[j]));
    if row_mask.iter().all(|&m| m == 0) {
        // Total mass of the likelihood over all dims is 1.
        return Ok(GridLoglik { value: 0.0, stability_gap: 0.0, unstable: false });
    }
    let value = cache.integrate_row(&x, &mask)?;
    let (stability_gap, unstable) = match &cache.coarse {
        Some(coarse) => {
            let v2 = coarse.integrate_row(&x, &mask)?;
            let gap = (value - v2).abs();
            (gap, gap > GRID_STABILITY_TOL)
        }
        None => (0.0, false),
    };
    Ok(GridLoglik { value, stability_gap, unstable })
}

/// Mean and per-row quadrature log-likelihood over a dataset.
pub fn grid_loglik_dataset(
    model: &VAEModel,
    data: &IncompleteDataset,
    grid: &QuadratureGrid,
) -> Result<(f64, Vec<GridLoglik>)> {
    let cache = LatentGridCache::new(model, grid)?;
    let mut rows = Vec::with_capacity(data.n_rows());
    for i in 0..data.n_rows() {
        rows.push(grid_loglik_cached(&cache, &data.row_values(i), &data.row_mask(i))?);
    }
    let mean = rows.iter().map(|g| g.value).sum::<f64>() / rows.len() as f64;
    Ok((mean, rows))
}

/// IWELBO test evaluation with chunked log-sum-exp accumulation: memory is
/// O(chunk) and the result does not depend on the chunking.
pub fn iwelbo_eval(
    model: &VAEModel,
    encoder: &MixtureEncoder,
    data: &IncompleteDataset,
    i_samples: usize,
    chunk: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BoundEstimate> {
    if i_samples < 1 || chunk < 1 {
        return Err(Error::parameter("iwelbo_eval: I and chunk must be >= 1"));
    }
    let mut per_row = Vec::with_capacity(data.n_rows());
    for i in 0..data.n_rows() {
        let row = crate::objectives::Row::from_dataset(data, i);
        let psi = encoder.encode(&row.values, &row.mask)?;
        let mut acc = LseAccumulator::new();
        let mut remaining = i_samples;
        while remaining > 0 {
            let m = chunk.min(remaining);
            let batch = crate::mixture::sample_ancestral(&psi, m, rng)?;
            let lw = crate::objectives::log_weights(model, &psi, &row, &batch.z)?;
            for v in lw.iter() {
                acc.push(*v);
            }
            remaining -= m;
        }
        per_row.push(acc.logsumexp() - (i_samples as f64).ln());
    }
    Ok(BoundEstimate::from_rows(per_row, SampleBudget { z: 1, k: encoder.n_components, i: i_samples }))
}

/// Streaming log-sum-exp: tracks the running maximum and rescaled sum.
struct LseAccumulator {
    max: f64,
    sum: f64,
}

impl LseAccumulator {
    fn new() -> Self {
        LseAccumulator { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn push(&mut self, v: f64) {
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    fn logsumexp(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

pub use crate::objectives::BoundEstimate;

/// Fine-tune only the encoder on complete test data; the decoder is
/// untouched. Returns the tuned encoder.
pub fn encoder_finetune(
    model: &VAEModel,
    encoder: &MixtureEncoder,
    complete_data: &IncompleteDataset,
    spec: &ObjectiveSpec,
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixtureEncoder> {
    let mut tuned = encoder.clone();
    if steps == 0 {
        return Ok(tuned);
    }
    let mut opt = AmsGrad::new(&tuned.params, lr);
    let n = complete_data.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    'outer: loop {
        shuffle(&mut order, rng);
        for block in order.chunks(batch_size) {
            if step >= steps {
                break 'outer;
            }
            let batch = BatchData::from_dataset(&complete_data.subset(block));
            let mut tape = Tape::new();
            let mut mb = ParamBinding::new(&model.params);
            let mut eb = ParamBinding::new(&tuned.params);
            let g = build_bound(&mut tape, model, &mut mb, &tuned, &mut eb, &batch, spec, rng)?;
            let grads = tape.backward(g.bound)?;
            let phi_grads = eb.grads(&tape, &grads);
            opt.ascend(&mut tuned.params, &phi_grads, 1.0);
            step += 1;
        }
    }
    Ok(tuned)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Per-parameter-group signal-to-noise of stochastic gradients:
/// |mean / std| per coordinate over the batches of one epoch, aggregated
/// by the median; zero-variance coordinates are excluded and counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnrReport {
    pub phi_median: f64,
    pub theta_median: f64,
    pub phi_excluded: usize,
    pub theta_excluded: usize,
    pub batches: usize,
}

pub struct SnrOptions {
    pub batch_size: usize,
    /// Reset the sampling stream before every batch; with full-batch data
    /// this makes the objective deterministic and every coordinate is
    /// excluded.
    pub common_seed: bool,
    /// Passes over the epoch's batches; extra passes draw fresh latent
    /// noise at the same (fixed) parameters.
    pub passes: usize,
}

pub fn gradient_snr(
    model: &VAEModel,
    encoder: &MixtureEncoder,
    data: &IncompleteDataset,
    spec: &ObjectiveSpec,
    opts: &SnrOptions,
    rng: &mut ChaCha8Rng,
) -> Result<SnrReport> {
    let n = data.n_rows();
    let order: Vec<usize> = (0..n).collect();
    let mut phi_stats = RunningMoments::new(encoder.params.n_scalars());
    let mut theta_stats = RunningMoments::new(model.params.n_scalars());
    let base_state = crate::rng::RngState::capture(rng);
    let mut batches = 0usize;
    let passes = opts.passes.max(1);
    for block in (0..passes).flat_map(|_| order.chunks(opts.batch_size)) {
        let mut sample_rng = if opts.common_seed { base_state.restore() } else { rng.clone() };
        if !opts.common_seed {
            // Advance the outer stream so batches see fresh noise.
            use rand::Rng;
            let _: u64 = rng.random();
        }
        let batch = BatchData::from_dataset(&data.subset(block));
        let mut tape = Tape::new();
        let mut mb = ParamBinding::new(&model.params);
        let mut eb = ParamBinding::new(&encoder.params);
        let g = build_bound(&mut tape, model, &mut mb, encoder, &mut eb, &batch, spec, &mut sample_rng)?;
        let grads = tape.backward(g.bound)?;
        phi_stats.push(&flatten_grads(&eb.grads(&tape, &grads), encoder.params.n_scalars()));
        theta_stats.push(&flatten_grads(&mb.grads(&tape, &grads), model.params.n_scalars()));
        batches += 1;
    }
    let (phi_median, phi_excluded) = phi_stats.median_snr(batches);
    let (theta_median, theta_excluded) = theta_stats.median_snr(batches);
    Ok(SnrReport { phi_median, theta_median, phi_excluded, theta_excluded, batches })
}

pub fn flatten_grads(grads: &[(crate::nn::ParamId, Array2<f64>)], total: usize) -> Vec<f64> {
    // ParamBinding returns grads in id order; flatten in that order.
    let mut out = Vec::with_capacity(total);
    for (_, g) in grads {
        out.extend(g.iter().cloned());
    }
    out
}

/// Per-coordinate running first/second moments of gradient samples.
pub struct RunningMoments {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl RunningMoments {
    pub fn new(n: usize) -> Self {
        RunningMoments { sum: vec![0.0; n], sumsq: vec![0.0; n] }
    }

    pub fn push(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.sum.len());
        for (i, v) in g.iter().enumerate() {
            self.sum[i] += v;
            self.sumsq[i] += v * v;
        }
    }

    /// Median signal-to-noise over coordinates after `t` samples, plus the
    /// count of zero-variance coordinates excluded from the median.
    pub fn median_snr(&self, t: usize) -> (f64, usize) {
        let tf = t as f64;
        let mut snrs = Vec::new();
        let mut excluded = 0usize;
        for i in 0..self.sum.len() {
            let mean = self.sum[i] / tf;
            let var = (self.sumsq[i] / tf - mean * mean).max(0.0) * tf / (tf - 1.0).max(1.0);
            let sd = var.sqrt();
            if sd == 0.0 {
                excluded += 1;
            } else {
                snrs.push((mean / sd).abs());
            }
        }
        if snrs.is_empty() {
            (0.0, excluded)
        } else {
            (crate::stats::median(&snrs), excluded)
        }
    }
}

/// Posterior-complexity gap E[KL(p(z|x) || p(z|x_obs))] over rows of
/// complete data with their masks, by quadrature on the latent grid. This
/// equals the conditional mutual information between z and the missing
/// variables given the observed ones.
pub fn mi_posterior_gap(
    model: &VAEModel,
    data: &IncompleteDataset,
    complete_values: &Array2<f64>,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let cache = LatentGridCache::new(model, grid)?;
    let d = data.dim();
    let mut acc = 0.0;
    for i in 0..data.n_rows() {
        let x = complete_values.row(i).to_owned().insert_axis(ndarray::Axis(0));
        let full_mask = Array2::ones((1, d));
        let row_mask = Array2::from_shape_fn((1, d), |(_, j)| f64::from(data.masks[[i, j]]));
        let log_pc = posterior_log_field(&cache, &x, &full_mask)?;
        let log_pi = posterior_log_field(&cache, &x, &row_mask)?;
        let mut kl = 0.0;
        for (idx, lw) in cache.grid.log_weights().iter().enumerate() {
            let pc = (log_pc[idx] + lw).exp();
            if pc > 0.0 {
                kl += pc * (log_pc[idx] - log_pi[idx]);
            }
        }
        acc += kl.max(0.0);
    }
    Ok(acc / data.n_rows() as f64)
}

/// Grid-normalized log posterior density ln p(z | x over masked dims).
fn posterior_log_field(
    cache: &LatentGridCache,
    x: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<Vec<f64>> {
    let ll = marginal_decoder_loglik(&cache.eta, x, mask)?;
    let logw = cache.grid.log_weights();
    // Unnormalized log density at the nodes: ll + log prior (weight removed).
    let log_un: Vec<f64> = ll
        .iter()
        .zip(cache.log_prior_weight.iter())
        .zip(logw.iter())
        .map(|((l, pw), w)| l + pw - w)
        .collect();
    let mass_terms: Vec<f64> =
        log_un.iter().zip(logw.iter()).map(|(l, w)| l + w).collect();
    let log_mass = logsumexp(&mass_terms);
    Ok(log_un.iter().map(|l| l - log_mass).collect())
}

/// Distribution input for the JS diagnostic: analytic mixture or samples.
pub enum JsInput<'a> {
    Mog(&'a MoGParams),
    Samples(&'a Array2<f64>),
}

/// Jensen-Shannon divergence over at most 2 dimensions, estimated on a
/// shared evaluation grid; analytic densities are used where available,
/// histogram densities otherwise. Result lies in [0, ln 2].
pub fn js_divergence(p: &JsInput, q: &JsInput, resolution: usize) -> Result<f64> {
    let dim = js_dim(p)?;
    if js_dim(q)? != dim {
        return Err(Error::parameter("js_divergence: dimension mismatch"));
    }
    if dim > 2 {
        return Err(Error::unsupported("js_divergence supports at most 2 missing dims"));
    }
    // Shared bounds covering both distributions.
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for input in [p, q] {
        match input {
            JsInput::Mog(m) => {
                for c in 0..m.n_components() {
                    for d in 0..dim {
                        let sd = m.covariances[c][[d, d]].sqrt();
                        lo[d] = lo[d].min(m.means[[c, d]] - 8.0 * sd);
                        hi[d] = hi[d].max(m.means[[c, d]] + 8.0 * sd);
                    }
                }
            }
            JsInput::Samples(s) => {
                for row in s.rows() {
                    for d in 0..dim {
                        lo[d] = lo[d].min(row[d] - 0.5);
                        hi[d] = hi[d].max(row[d] + 0.5);
                    }
                }
            }
        }
    }
    let axes: Vec<Vec<f64>> = (0..dim).map(|d| linspace(lo[d], hi[d], resolution)).collect();
    let cell: f64 = (0..dim).map(|d| axes[d][1] - axes[d][0]).product();
    let n_cells = if dim == 1 { resolution } else { resolution * resolution };
    let density = |input: &JsInput| -> Result<Vec<f64>> {
        match input {
            JsInput::Mog(m) => {
                let mut out = Vec::with_capacity(n_cells);
                for idx in 0..n_cells {
                    let pt = grid_point(&axes, idx, dim);
                    out.push(crate::mog::mog_logpdf(m, &pt)?.exp());
                }
                // Normalize on the grid so both sides are comparable.
                let mass: f64 = out.iter().sum::<f64>() * cell;
                Ok(out.into_iter().map(|v| v / mass).collect())
            }
            JsInput::Samples(s) => {
                let mut counts = vec![0.0f64; n_cells];
                for row in s.rows() {
                    let mut idx = 0usize;
                    for d in 0..dim {
                        let step = axes[d][1] - axes[d][0];
                        let b = (((row[d] - lo[d]) / step).floor() as usize).min(resolution - 1);
                        idx = idx * resolution + b;
                    }
                    counts[idx] += 1.0;
                }
                let total = s.nrows() as f64;
                Ok(counts.into_iter().map(|c| c / (total * cell)).collect())
            }
        }
    };
    let pd = density(p)?;
    let qd = density(q)?;
    let mut js = 0.0;
    for i in 0..n_cells {
        let m = 0.5 * (pd[i] + qd[i]);
        if pd[i] > 0.0 && m > 0.0 {
            js += 0.5 * cell * pd[i] * (pd[i] / m).ln();
        }
        if qd[i] > 0.0 && m > 0.0 {
            js += 0.5 * cell * qd[i] * (qd[i] / m).ln();
        }
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

fn js_dim(input: &JsInput) -> Result<usize> {
    Ok(match input {
        JsInput::Mog(m) => m.dim(),
        JsInput::Samples(s) => s.ncols(),
    })
}

fn grid_point(axes: &[Vec<f64>], idx: usize, dim: usize) -> Array1<f64> {
    match dim {
        1 => ndarray::arr1(&[axes[0][idx]]),
        2 => {
            let r = axes[1].len();
            ndarray::arr1(&[axes[0][idx / r], axes[1][idx % r]])
        }
        _ => unreachable!(),
    }
}

/// Which posterior-like density field to compute on the latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    ModelComplete,
    ModelIncomplete,
    Variational,
    ImputationMixture,
}

/// A normalized density field on a 2D (or 1D) latent grid: the field times
/// the cell area sums to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityField {
    pub resolution: usize,
    pub latent_dim: usize,
    pub bounds: Vec<(f64, f64)>,
    /// Row-major density values at the grid nodes.
    pub values: Vec<f64>,
}

impl DensityField {
    /// Discrete mass: sum of node values times trapezoid weights.
    pub fn mass(&self) -> f64 {
        let grid = QuadratureGrid { bounds: self.bounds.clone(), resolution: self.resolution };
        self.values
            .iter()
            .zip(grid.log_weights().iter())
            .map(|(v, lw)| v * lw.exp())
            .sum()
    }
}

/// Normalized posterior / variational density fields for figures.
pub fn posterior_grid(
    model: &VAEModel,
    encoder: &MixtureEncoder,
    complete_values: &Array1<f64>,
    mask: &[u8],
    completions: Option<&Array2<f64>>,
    grid: &QuadratureGrid,
    which: FieldKind,
) -> Result<DensityField> {
    let cache = LatentGridCache::new(model, grid)?;
    let d = complete_values.len();
    let x = complete_values.clone().insert_axis(ndarray::Axis(0));
    let log_field: Vec<f64> = match which {
        FieldKind::ModelComplete => {
            let full = Array2::ones((1, d));
            posterior_log_field(&cache, &x, &full)?
        }
        FieldKind::ModelIncomplete => {
            let m = Array2::from_shape_fn((1, d), |(_, j)| f64::from(mask[j]));
            posterior_log_field(&cache, &x, &m)?
        }
        FieldKind::Variational => {
            let psi = encoder.encode(complete_values, mask)?;
            variational_log_field(&cache, &psi)
        }
        FieldKind::ImputationMixture => {
            let comps = completions.ok_or_else(|| {
                Error::parameter("imputation-mixture field needs store completions")
            })?;
            let k = comps.nrows();
            let ones = vec![1u8; d];
            let mut fields = Vec::with_capacity(k);
            for c in 0..k {
                let psi = encoder.encode(&comps.row(c).to_owned(), &ones)?;
                fields.push(variational_log_field(&cache, &psi));
            }
            // Average the per-completion densities.
            let n_pts = fields[0].len();
            (0..n_pts)
                .map(|i| {
                    let terms: Vec<f64> = fields.iter().map(|f| f[i]).collect();
                    logsumexp(&terms) - (k as f64).ln()
                })
                .collect()
        }
    };
    // Renormalize on the grid and materialize densities.
    let logw = cache.grid.log_weights();
    let mass_terms: Vec<f64> = log_field.iter().zip(logw.iter()).map(|(l, w)| l + w).collect();
    let log_mass = logsumexp(&mass_terms);
    Ok(DensityField {
        resolution: grid.resolution,
        latent_dim: grid.latent_dim(),
        bounds: grid.bounds.clone(),
        values: log_field.iter().map(|l| (l - log_mass).exp()).collect(),
    })
}

fn variational_log_field(cache: &LatentGridCache, psi: &MixtureVariationalParams) -> Vec<f64> {
    let points = cache.grid.points();
    (0..points.nrows())
        .map(|i| mixture_logpdf(psi, &points.row(i).to_owned()))
        .collect()
}
