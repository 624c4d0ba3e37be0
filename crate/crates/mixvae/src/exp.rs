//! Experiment harness: configuration and its validation against the
//! method/budget matrix, the training loop with checkpointing and
//! bit-exact resume, evaluation of stored runs, the objective-separation
//! control study, and figure rendering from stored metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::data::{apply_uniform_mcar, IncompleteDataset};
use crate::demiss::{
    build_demiss_objectives, init_imputations, lair_step, mwg_step, pseudo_gibbs_step,
    rejection_sample_conditional, ImputationStore,
};
use crate::error::{Error, Result};
use crate::eval::{
    grid_loglik_dataset, iwelbo_eval, js_divergence, mi_posterior_gap, JsInput, QuadratureGrid,
};
use crate::mixture::MixtureEncoder;
use crate::mog::{generate_mog, mog_conditional, mog_marginal, mog_sample, oracle_oversample, oracle_widen, MoGParams};
use crate::nn::{clip_grad_norm, AmsGrad, ArchConfig, ParamBinding};
use crate::objectives::{build_bound, BatchData, ObjectiveKind, ObjectiveSpec, SampleBudget};
use crate::report::{BoxSeries, Curve, MetricRecord, MetricsWriter};
use crate::rng::{stream_rng, RngState, Stream};
use crate::tape::Tape;
use crate::vae::{DecoderFamily, VAEModel};

/// The method matrix: objectives, mixture use, and sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mvae,
    Missvae,
    Misssvae,
    Miwae,
    Missiwae,
    Misssiwae,
    Demissvae,
}

impl Method {
    pub fn all() -> [Method; 7] {
        [
            Method::Mvae,
            Method::Missvae,
            Method::Misssvae,
            Method::Miwae,
            Method::Missiwae,
            Method::Misssiwae,
            Method::Demissvae,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Mvae => "mvae",
            Method::Missvae => "missvae",
            Method::Misssvae => "misssvae",
            Method::Miwae => "miwae",
            Method::Missiwae => "missiwae",
            Method::Misssiwae => "misssiwae",
            Method::Demissvae => "demissvae",
        }
    }

    fn objective(&self) -> Option<ObjectiveKind> {
        match self {
            Method::Mvae | Method::Missvae => Some(ObjectiveKind::Elbo),
            Method::Misssvae => Some(ObjectiveKind::Selbo),
            Method::Miwae | Method::Missiwae => Some(ObjectiveKind::Iwelbo),
            Method::Misssiwae => Some(ObjectiveKind::Siwelbo),
            Method::Demissvae => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    PseudoGibbs,
    Mwg,
    Lair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Sampler sweeps per imputation step.
    pub iterations: usize,
    /// LAIR inner refinement repetitions.
    pub r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub cosine_schedule: bool,
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 1e-3, cosine_schedule: false, clip_norm: None }
    }
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    /// Synthetic mixture-of-Gaussians ground truth; data and masks derive
    /// from `mog_seed`, so every method sees identical data.
    MogSynthetic {
        mog_seed: u64,
        dim: usize,
        components: usize,
        n_train: usize,
        n_test: usize,
        missing_rate: f64,
    },
    /// Dataset bundle directories written by the data tools.
    Bundle { train_dir: PathBuf, test_dir: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub grid_resolution: usize,
    /// Held-out rows used for quadrature evaluation (caps cost).
    pub eval_rows: usize,
    pub metrics: Vec<MetricSpec>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            grid_resolution: 256,
            eval_rows: 1000,
            metrics: vec![MetricSpec::GridLoglik { fallback_iwelbo: None }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum MetricSpec {
    /// Quadrature log-likelihood; optionally falls back to IWELBO when the
    /// latent dimension exceeds 2.
    GridLoglik { fallback_iwelbo: Option<usize> },
    Iwelbo { i: usize },
    MiGap,
    PosteriorGrids { row: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Latent samples (ancestral count, per-component count for selbo, or
    /// L for demissvae).
    pub z: usize,
    /// Mixture components, or imputation count for demissvae.
    pub k: usize,
    /// Importance samples.
    pub i: usize,
    pub sampler: Option<SamplerConfig>,
    pub stl: bool,
    pub latent_dim: usize,
    pub enc_arch: ArchConfig,
    pub dec_arch: ArchConfig,
    pub component_init_jitter: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetRef,
    pub eval: EvalSpec,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults for the synthetic benchmark.
    pub fn mog_default(method: Method, seed: u64) -> Self {
        let demiss = method == Method::Demissvae;
        ExperimentConfig {
            method,
            z: if demiss { 1 } else { 5 },
            k: match method {
                Method::Mvae | Method::Miwae => 1,
                _ => 5,
            },
            i: match method {
                Method::Miwae | Method::Missiwae => 5,
                _ => 1,
            },
            sampler: demiss
                .then_some(SamplerConfig { kind: SamplerKind::Lair, iterations: 1, r: 0 }),
            stl: true,
            latent_dim: 2,
            enc_arch: ArchConfig { blocks: 2, hidden: 48 },
            dec_arch: ArchConfig { blocks: 2, hidden: 48 },
            component_init_jitter: 0.5,
            optimizer: OptimizerConfig { lr: 1e-3, cosine_schedule: false, clip_norm: demiss.then_some(1.0) },
            epochs: 60,
            batch_size: 512,
            seed,
            dataset: DatasetRef::MogSynthetic {
                mog_seed: 0,
                dim: 5,
                components: 15,
                n_train: 20_000,
                n_test: 5_000,
                missing_rate: 0.5,
            },
            eval: EvalSpec::default(),
            checkpoint_every: 0,
        }
    }

    /// Validate against the method/budget matrix.
    pub fn validate(&self) -> Result<()> {
        if self.z < 1 || self.k < 1 || self.i < 1 {
            return Err(Error::config("z, k, i must all be >= 1"));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        match self.method {
            Method::Mvae => {
                if self.k != 1 {
                    return Err(Error::config("mvae requires K = 1"));
                }
                if self.i != 1 {
                    return Err(Error::config("mvae uses the plain ELBO; I must be 1"));
                }
            }
            Method::Missvae | Method::Misssvae => {
                if self.k < 2 {
                    return Err(Error::config(format!(
                        "{} is a mixture method; K must be > 1",
                        self.method.name()
                    )));
                }
                if self.i != 1 {
                    return Err(Error::config("ELBO methods use I = 1"));
                }
            }
            Method::Miwae => {
                if self.k != 1 {
                    return Err(Error::config("miwae requires K = 1"));
                }
                if self.i < 2 {
                    return Err(Error::config("miwae needs I > 1 importance samples"));
                }
                if self.z != 1 {
                    return Err(Error::config("miwae draws I samples with Z = 1"));
                }
            }
            Method::Missiwae => {
                if self.k < 2 {
                    return Err(Error::config("missiwae is a mixture method; K must be > 1"));
                }
                if self.i < 2 {
                    return Err(Error::config("missiwae needs I > 1 importance samples"));
                }
                if self.z != 1 {
                    return Err(Error::config("missiwae draws I samples with Z = 1"));
                }
            }
            Method::Misssiwae => {
                if self.k < 2 {
                    return Err(Error::config("misssiwae is a mixture method; K must be > 1"));
                }
                if self.z != 1 {
                    return Err(Error::config("misssiwae draws I samples per component; Z must be 1"));
                }
            }
            Method::Demissvae => {
                if self.k < 2 {
                    return Err(Error::config("demissvae needs K > 1 imputations"));
                }
                if self.sampler.is_none() {
                    return Err(Error::config("demissvae requires a sampler kind"));
                }
                if self.i != 1 {
                    return Err(Error::config("demissvae uses the plain ELBO; I must be 1"));
                }
            }
        }
        if self.method != Method::Demissvae && self.sampler.is_some() {
            return Err(Error::config("only demissvae takes a sampler"));
        }
        if let DatasetRef::MogSynthetic { dim, components, n_train, missing_rate, .. } =
            &self.dataset
        {
            if *dim < 1 || *components < 1 || *n_train < 1 {
                return Err(Error::config("synthetic dataset needs dim, components, n_train >= 1"));
            }
            if !(0.0..1.0).contains(missing_rate) {
                return Err(Error::config("missing rate must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Per-datapoint sample budget: decoder evaluations per gradient step.
    pub fn sample_budget(&self) -> usize {
        match self.method {
            Method::Mvae | Method::Missvae => self.z,
            Method::Miwae | Method::Missiwae => self.z * self.i,
            Method::Misssvae => self.k * self.z,
            Method::Misssiwae => self.k * self.i,
            Method::Demissvae => self.k * self.z,
        }
    }

    pub fn budget_record(&self) -> SampleBudget {
        SampleBudget { z: self.z, k: self.k, i: self.i }
    }

    fn objective_spec(&self) -> Option<ObjectiveSpec> {
        self.method
            .objective()
            .map(|kind| ObjectiveSpec { kind, z: self.z, i: self.i, stl: self.stl })
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-s{}", self.method.name(), self.config_hash(), self.seed)
    }
}

/// Refuse comparisons whose per-datapoint budgets differ, unless overridden.
pub fn check_budget_parity(configs: &[ExperimentConfig], allow_uneven: bool) -> Result<()> {
    if allow_uneven || configs.len() < 2 {
        return Ok(());
    }
    let budgets: Vec<usize> = configs.iter().map(|c| c.sample_budget()).collect();
    if budgets.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config(format!(
            "sample budgets differ across compared methods: {budgets:?}; pass \
             allow_uneven_budget to override"
        )));
    }
    Ok(())
}

/// Training and test data resolved from a dataset reference.
pub struct ResolvedData {
    pub train: IncompleteDataset,
    /// Complete held-out rows (for quadrature eval and fine-tuning).
    pub test: IncompleteDataset,
    /// Ground-truth mixture when the data is synthetic.
    pub mog: Option<MoGParams>,
}

pub fn resolve_dataset(dataset: &DatasetRef) -> Result<ResolvedData> {
    match dataset {
        DatasetRef::MogSynthetic { mog_seed, dim, components, n_train, n_test, missing_rate } => {
            let mog = generate_mog(*mog_seed, *dim, *components)?;
            let mut data_rng = stream_rng(*mog_seed, Stream::DataGen);
            let train_values = mog_sample(&mog, *n_train, &mut data_rng)?;
            let test_values = mog_sample(&mog, *n_test, &mut data_rng)?;
            let mut mask_rng = stream_rng(*mog_seed, Stream::Mask);
            let train = apply_uniform_mcar(&train_values, *missing_rate, &mut mask_rng)?;
            let test = IncompleteDataset::complete(test_values)?;
            Ok(ResolvedData { train, test, mog: Some(mog) })
        }
        DatasetRef::Bundle { train_dir, test_dir } => {
            let (train, _) = crate::data::load_bundle(train_dir)?;
            let test = match test_dir {
                Some(dir) => crate::data::load_bundle(dir)?.0,
                None => train.clone(),
            };
            Ok(ResolvedData { train, test, mog: None })
        }
    }
}

/// Counters of network-level passes, weighted 1 per forward and 2 per
/// backward when comparing costs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub enc_fwd: u64,
    pub dec_fwd: u64,
    pub enc_bwd: u64,
    pub dec_bwd: u64,
}

impl PassCounts {
    pub fn weighted(&self) -> u64 {
        self.enc_fwd + self.dec_fwd + 2 * (self.enc_bwd + self.dec_bwd)
    }
}

/// Which gradients a decomposed training step applies where. The control
/// study fits both parameter groups with a single objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemissVariant {
    TwoObjective,
    CviOnly,
    MvbOnly,
}

/// How the imputation step fills the store.
enum Imputer<'a> {
    Sampler(SamplerConfig),
    Oracle(&'a OracleImputer),
}

/// Per-row oracle imputation distributions for the control study.
pub struct OracleImputer {
    /// Per train row: a mixture over that row's missing dims, or None for
    /// fully observed rows.
    pub per_row: Vec<Option<MoGParams>>,
    /// Rejection sampling from the current model conditional instead.
    pub model_rejection_budget: Option<usize>,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Pass counts of the last epoch.
    pub last_epoch_passes: PassCounts,
}

pub fn train(config: &ExperimentConfig, run_root: &Path) -> Result<TrainOutcome> {
    train_full(config, run_root, false, DemissVariant::TwoObjective, None, None)
}

pub fn train_resumable(config: &ExperimentConfig, run_root: &Path) -> Result<TrainOutcome> {
    train_full(config, run_root, true, DemissVariant::TwoObjective, None, None)
}

/// Full trainer. `resume` continues from an existing checkpoint in the run
/// directory; `variant` and `oracle` support the control study;
/// `stop_after` ends the loop early after that many epochs (emulating an
/// interrupted process) without touching the config.
pub fn train_full(
    config: &ExperimentConfig,
    run_root: &Path,
    resume: bool,
    variant: DemissVariant,
    oracle: Option<&OracleImputer>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let run_dir = run_root.join(config.run_id());
    std::fs::create_dir_all(&run_dir)?;
    let config_path = run_dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(config)?)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let ckpt_path = run_dir.join("checkpoint.json");

    let data = resolve_dataset(&config.dataset)?;
    let d = data.train.dim();

    // Fresh state or checkpoint state.
    let (mut model, mut encoder, mut opt_theta, mut opt_phi, mut store, mut rngs, start_epoch) =
        if resume && ckpt_path.exists() {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            if ckpt.config_hash != config.config_hash() {
                return Err(Error::config("checkpoint belongs to a different config"));
            }
            let rngs: BTreeMap<String, ChaCha8Rng> =
                ckpt.rng_states.iter().map(|(k, v)| (k.clone(), v.restore())).collect();
            (ckpt.model, ckpt.encoder, ckpt.optimizer_theta, ckpt.optimizer_phi, ckpt.store, rngs, ckpt.epoch + 1)
        } else {
            let mut init_rng = stream_rng(config.seed, Stream::ParamInit);
            let model = VAEModel::new(
                config.latent_dim,
                d,
                config.dec_arch,
                decoder_family(&data.train),
                &mut init_rng,
            );
            let enc_k = if config.method == Method::Demissvae { 1 } else { config.k };
            let encoder = MixtureEncoder::new(
                d,
                config.latent_dim,
                enc_k,
                config.enc_arch,
                config.component_init_jitter,
                &mut init_rng,
            );
            let opt_theta = AmsGrad::new(&model.params, config.optimizer.lr);
            let opt_phi = AmsGrad::new(&encoder.params, config.optimizer.lr);
            let mut rngs = BTreeMap::new();
            rngs.insert("shuffle".to_string(), stream_rng(config.seed, Stream::Shuffle));
            rngs.insert("sampling".to_string(), stream_rng(config.seed, Stream::LatentSampling));
            rngs.insert("imputation".to_string(), stream_rng(config.seed, Stream::Imputation));
            let store = if config.method == Method::Demissvae {
                let mut irng = rngs.get_mut("imputation").unwrap();
                Some(init_imputations(&data.train, config.k, &mut irng)?)
            } else {
                None
            };
            (model, encoder, opt_theta, opt_phi, store, rngs, 0)
        };

    if start_epoch >= config.epochs {
        return Ok(TrainOutcome {
            run_dir,
            metrics_path,
            checkpoint_path: ckpt_path,
            last_epoch_passes: PassCounts::default(),
        });
    }

    let mut writer = MetricsWriter::create(&metrics_path, &config.run_id(), config.budget_record())?;
    let n = data.train.n_rows();
    let mut last_passes = PassCounts::default();

    let end_epoch = stop_after.map(|s| s.min(config.epochs)).unwrap_or(config.epochs);
    for epoch in start_epoch..end_epoch {
        let mut passes = PassCounts::default();
        let lr_scale = if config.optimizer.cosine_schedule {
            0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos())
        } else {
            1.0
        };
        let mut order: Vec<usize> = (0..n).collect();
        {
            let shuffle_rng = rngs.get_mut("shuffle").unwrap();
            fisher_yates(&mut order, shuffle_rng);
        }
        let mut epoch_bound = 0.0;
        let mut batches = 0usize;
        let mut phi_moments = crate::eval::RunningMoments::new(encoder.params.n_scalars());
        let mut theta_moments = crate::eval::RunningMoments::new(model.params.n_scalars());
        for block in order.chunks(config.batch_size) {
            let batch_data = data.train.subset(block);
            let bound = if config.method == Method::Demissvae {
                let imputer = match oracle {
                    Some(o) => Imputer::Oracle(o),
                    None => Imputer::Sampler(config.sampler.unwrap()),
                };
                demiss_step(
                    config,
                    variant,
                    &mut model,
                    &mut encoder,
                    store.as_mut().unwrap(),
                    &data,
                    block,
                    &batch_data,
                    &imputer,
                    epoch,
                    lr_scale,
                    &mut opt_theta,
                    &mut opt_phi,
                    &mut rngs,
                    &mut passes,
                    (&mut phi_moments, &mut theta_moments),
                )?
            } else {
                standard_step(
                    config,
                    &mut model,
                    &mut encoder,
                    &batch_data,
                    lr_scale,
                    &mut opt_theta,
                    &mut opt_phi,
                    &mut rngs,
                    &mut passes,
                    (&mut phi_moments, &mut theta_moments),
                )?
            };
            if !bound.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: "non-finite training bound; last good checkpoint retained".to_string(),
                });
            }
            epoch_bound += bound;
            batches += 1;
        }
        if let Some(st) = &store {
            st.check_observed_invariant(&data.train)?;
        }
        writer.emit(epoch, "train_bound", epoch_bound / batches as f64)?;
        // Signal-to-noise of this epoch's training gradients.
        let (phi_snr, _) = phi_moments.median_snr(batches);
        let (theta_snr, _) = theta_moments.median_snr(batches);
        writer.emit(epoch, "phi_snr_median", phi_snr)?;
        writer.emit(epoch, "theta_snr_median", theta_snr)?;
        last_passes = passes;

        let should_checkpoint =
            config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
        if should_checkpoint || epoch + 1 == config.epochs {
            let ckpt = Checkpoint {
                version: CHECKPOINT_VERSION,
                epoch,
                config_hash: config.config_hash(),
                model: model.clone(),
                encoder: encoder.clone(),
                optimizer_theta: opt_theta.clone(),
                optimizer_phi: opt_phi.clone(),
                rng_states: rngs.iter().map(|(k, v)| (k.clone(), RngState::capture(v))).collect(),
                store: store.clone(),
            };
            ckpt.save(&ckpt_path)?;
        }
    }
    Ok(TrainOutcome { run_dir, metrics_path, checkpoint_path: ckpt_path, last_epoch_passes: last_passes })
}

fn decoder_family(data: &IncompleteDataset) -> DecoderFamily {
    if data.feature_kinds.iter().all(|k| *k == crate::data::FeatureKind::Binary) {
        DecoderFamily::Bernoulli
    } else {
        DecoderFamily::Gaussian
    }
}

fn fisher_yates(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[allow(clippy::too_many_arguments)]
fn standard_step(
    config: &ExperimentConfig,
    model: &mut VAEModel,
    encoder: &mut MixtureEncoder,
    batch_data: &IncompleteDataset,
    lr_scale: f64,
    opt_theta: &mut AmsGrad,
    opt_phi: &mut AmsGrad,
    rngs: &mut BTreeMap<String, ChaCha8Rng>,
    passes: &mut PassCounts,
    moments: (&mut crate::eval::RunningMoments, &mut crate::eval::RunningMoments),
) -> Result<f64> {
    let spec = config.objective_spec().expect("standard method has an objective");
    let batch = BatchData::from_dataset(batch_data);
    let mut tape = Tape::new();
    let mut mb = ParamBinding::new(&model.params);
    let mut eb = ParamBinding::new(&encoder.params);
    let srng = rngs.get_mut("sampling").unwrap();
    let graph = build_bound(&mut tape, model, &mut mb, encoder, &mut eb, &batch, &spec, srng)?;
    passes.enc_fwd += 1;
    passes.dec_fwd += 1;
    let value = tape.scalar(graph.bound);
    let grads = tape.backward(graph.bound)?;
    passes.enc_bwd += 1;
    passes.dec_bwd += 1;
    let mut theta_grads = mb.grads(&tape, &grads);
    let mut phi_grads = eb.grads(&tape, &grads);
    moments.0.push(&crate::eval::flatten_grads(&phi_grads, encoder.params.n_scalars()));
    moments.1.push(&crate::eval::flatten_grads(&theta_grads, model.params.n_scalars()));
    if let Some(max_norm) = config.optimizer.clip_norm {
        clip_grad_norm(&mut theta_grads, max_norm);
        clip_grad_norm(&mut phi_grads, max_norm);
    }
    opt_theta.ascend(&mut model.params, &theta_grads, lr_scale);
    opt_phi.ascend(&mut encoder.params, &phi_grads, lr_scale);
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
fn demiss_step(
    config: &ExperimentConfig,
    variant: DemissVariant,
    model: &mut VAEModel,
    encoder: &mut MixtureEncoder,
    store: &mut ImputationStore,
    data: &ResolvedData,
    block: &[usize],
    batch_data: &IncompleteDataset,
    imputer: &Imputer,
    epoch: usize,
    lr_scale: f64,
    opt_theta: &mut AmsGrad,
    opt_phi: &mut AmsGrad,
    rngs: &mut BTreeMap<String, ChaCha8Rng>,
    passes: &mut PassCounts,
    moments: (&mut crate::eval::RunningMoments, &mut crate::eval::RunningMoments),
) -> Result<f64> {
    // Imputation step; skipped during the first epoch, when the randomly
    // initialized model would only corrupt the store.
    if epoch > 0 {
        match imputer {
            Imputer::Sampler(sampler) => {
                let irng = rngs.get_mut("imputation").unwrap();
                for _ in 0..sampler.iterations {
                    match sampler.kind {
                        SamplerKind::PseudoGibbs => {
                            pseudo_gibbs_step(model, encoder, store, &data.train, block, irng)?;
                        }
                        SamplerKind::Mwg => {
                            mwg_step(model, encoder, store, &data.train, block, irng)?;
                        }
                        SamplerKind::Lair => {
                            lair_step(model, encoder, store, &data.train, block, sampler.r, irng)?;
                        }
                    }
                }
            }
            Imputer::Oracle(oracle) => {
                let irng = rngs.get_mut("imputation").unwrap();
                oracle_refresh(oracle, model, store, &data.train, block, irng)?;
            }
        }
        store.epoch_initialized = true;
    }

    // Parameter update with the shared computation of both objectives.
    let k = store.n_chains;
    let mut completions = Array2::zeros((block.len() * k, data.train.dim()));
    for (bi, &row) in block.iter().enumerate() {
        for kk in 0..k {
            completions
                .row_mut(bi * k + kk)
                .assign(&store.imputations.row(store.chain_index(row, kk)));
        }
    }
    let batch = BatchData::from_dataset(batch_data);
    let mut tape = Tape::new();
    let mut mb = ParamBinding::new(&model.params);
    let mut eb = ParamBinding::new(&encoder.params);
    let srng = rngs.get_mut("sampling").unwrap();
    let graph = build_demiss_objectives(
        &mut tape, model, &mut mb, encoder, &mut eb, &batch, &completions, config.z, srng,
    )?;
    passes.enc_fwd += 1;
    passes.dec_fwd += 1;
    let theta_value = tape.scalar(graph.theta);

    let (theta_root, phi_root) = match variant {
        DemissVariant::TwoObjective => (graph.theta, graph.phi),
        DemissVariant::CviOnly => (graph.theta, graph.theta),
        DemissVariant::MvbOnly => (graph.phi, graph.phi),
    };
    let theta_grads_full = tape.backward(theta_root)?;
    passes.enc_bwd += 1;
    passes.dec_bwd += 1;
    let mut theta_grads = mb.grads(&tape, &theta_grads_full);
    let phi_grads_full =
        if phi_root == theta_root { theta_grads_full } else { tape.backward(phi_root)? };
    if phi_root != theta_root {
        passes.enc_bwd += 1;
        passes.dec_bwd += 1;
    }
    let mut phi_grads = eb.grads(&tape, &phi_grads_full);
    moments.0.push(&crate::eval::flatten_grads(&phi_grads, encoder.params.n_scalars()));
    moments.1.push(&crate::eval::flatten_grads(&theta_grads, model.params.n_scalars()));
    if let Some(max_norm) = config.optimizer.clip_norm {
        clip_grad_norm(&mut theta_grads, max_norm);
        clip_grad_norm(&mut phi_grads, max_norm);
    }
    opt_theta.ascend(&mut model.params, &theta_grads, lr_scale);
    opt_phi.ascend(&mut encoder.params, &phi_grads, lr_scale);
    Ok(theta_value)
}

/// Refresh the store for a row block with fresh draws from the oracle
/// imputation distribution (control study).
fn oracle_refresh(
    oracle: &OracleImputer,
    model: &VAEModel,
    store: &mut ImputationStore,
    train: &IncompleteDataset,
    block: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let k = store.n_chains;
    for &row in block {
        let mask = train.row_mask(row);
        let mis: Vec<usize> =
            mask.iter().enumerate().filter(|(_, &m)| m == 0).map(|(j, _)| j).collect();
        if mis.is_empty() {
            continue;
        }
        if let Some(budget) = oracle.model_rejection_budget {
            let values = train.row_values(row);
            let res = rejection_sample_conditional(model, &values, &mask, k, rng, budget)?;
            for kk in 0..k {
                let idx = store.chain_index(row, kk);
                store.imputations.row_mut(idx).assign(&res.imputations.row(kk));
            }
        } else if let Some(dist) = &oracle.per_row[row] {
            let draws = mog_sample(dist, k, rng)?;
            for kk in 0..k {
                let idx = store.chain_index(row, kk);
                for (a, &j) in mis.iter().enumerate() {
                    store.imputations[[idx, j]] = draws[[kk, a]];
                }
            }
        }
    }
    Ok(())
}

/// Metrics produced by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Load a stored run and compute the requested metrics; writes JSON lines
/// next to the checkpoint plus a summary table.
pub fn evaluate(run_dir: &Path, spec: &EvalSpec, seed: u64) -> Result<EvalReport> {
    let config: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).map_err(
            |e| Error::Config(format!("missing config.json in {}: {e}", run_dir.display())),
        )?)?;
    let ckpt = Checkpoint::load(&run_dir.join("checkpoint.json"))?;
    let data = resolve_dataset(&config.dataset)?;
    let eval_rows = spec.eval_rows.min(data.test.n_rows());
    let rows: Vec<usize> = (0..eval_rows).collect();
    let test = data.test.subset(&rows);

    let mut metrics = BTreeMap::new();
    let mut writer = MetricsWriter::create(
        &run_dir.join("eval.jsonl"),
        &config.run_id(),
        config.budget_record(),
    )?;
    for m in &spec.metrics {
        match m {
            MetricSpec::GridLoglik { fallback_iwelbo } => {
                if config.latent_dim <= 2 {
                    let grid = QuadratureGrid::with_resolution(config.latent_dim, spec.grid_resolution);
                    let (mean, _) = grid_loglik_dataset(&ckpt.model, &test, &grid)?;
                    metrics.insert("grid_loglik".to_string(), mean);
                } else if let Some(i) = fallback_iwelbo {
                    let mut rng = stream_rng(seed, Stream::Eval);
                    let est = iwelbo_eval(&ckpt.model, &ckpt.encoder, &test, *i, 256, &mut rng)?;
                    metrics.insert("grid_loglik_fallback_iwelbo".to_string(), est.value);
                } else {
                    return Err(Error::unsupported(
                        "grid_loglik needs latent dim <= 2; configure fallback_iwelbo to substitute",
                    ));
                }
            }
            MetricSpec::Iwelbo { i } => {
                let mut rng = stream_rng(seed, Stream::Eval);
                let est = iwelbo_eval(&ckpt.model, &ckpt.encoder, &test, *i, 256, &mut rng)?;
                metrics.insert(format!("iwelbo_{i}"), est.value);
            }
            MetricSpec::MiGap => {
                if config.latent_dim > 2 {
                    return Err(Error::unsupported("mi_gap needs latent dim <= 2"));
                }
                // Complete test rows with the training missingness pattern
                // of the first rows.
                let masked = mask_like(&data.train, &test);
                let grid = QuadratureGrid::with_resolution(config.latent_dim, spec.grid_resolution);
                let gap = mi_posterior_gap(&ckpt.model, &masked, &test.values, &grid)?;
                metrics.insert("mi_posterior_gap".to_string(), gap);
            }
            MetricSpec::PosteriorGrids { row } => {
                let grid = QuadratureGrid::with_resolution(config.latent_dim, spec.grid_resolution);
                let masked = mask_like(&data.train, &test);
                let complete = test.row_values(*row);
                let mask = masked.row_mask(*row);
                for kind in [
                    crate::eval::FieldKind::ModelComplete,
                    crate::eval::FieldKind::ModelIncomplete,
                    crate::eval::FieldKind::Variational,
                ] {
                    let field = crate::eval::posterior_grid(
                        &ckpt.model,
                        &ckpt.encoder,
                        &complete,
                        &mask,
                        None,
                        &grid,
                        kind,
                    )?;
                    let tag = format!("{kind:?}").to_lowercase();
                    crate::report::save_density_field(
                        &field,
                        &run_dir.join(format!("field_row{row}_{tag}.csv")),
                        &run_dir.join(format!("field_row{row}_{tag}.png")),
                    )?;
                }
                metrics.insert(format!("posterior_grids_row{row}"), 1.0);
            }
        }
    }
    for (name, value) in &metrics {
        writer.emit(config.epochs.saturating_sub(1), name, *value)?;
    }
    // Human-readable summary.
    let mut table = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(table, "run {}", config.run_id());
    for (name, value) in &metrics {
        let _ = writeln!(table, "{name:>28}  {value:.6}");
    }
    std::fs::write(run_dir.join("summary.txt"), table)?;
    Ok(EvalReport { run_id: config.run_id(), metrics })
}

/// Apply the training masks onto held-out complete rows so posterior
/// diagnostics see realistic missingness.
fn mask_like(train: &IncompleteDataset, test: &IncompleteDataset) -> IncompleteDataset {
    let n = test.n_rows();
    let mut masks = Array2::ones((n, test.dim()));
    for i in 0..n {
        let src = i % train.n_rows();
        for j in 0..test.dim() {
            masks[[i, j]] = train.masks[[src, j]];
        }
    }
    IncompleteDataset::with_options(
        test.values.clone(),
        masks,
        test.feature_kinds.clone(),
        true,
    )
    .expect("masked test set")
}

/// One control-study result row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlResult {
    pub variant: DemissVariant,
    pub oracle: String,
    pub setting: f64,
    pub js: f64,
    pub seed: u64,
    pub test_grid_loglik: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlStudyConfig {
    pub base: ExperimentConfig,
    pub variants: Vec<DemissVariant>,
    pub seeds: Vec<u64>,
    /// Widening sweep settings (alpha values).
    pub widen_alphas: Vec<f64>,
    /// Oversampling sweep settings (beta values).
    pub oversample_betas: Vec<f64>,
    /// Include the model-conditional rejection setting with this budget.
    pub rejection_budget: Option<usize>,
    /// Rows used for the JS x-coordinate (restricted to <= 2 missing dims).
    pub js_rows: usize,
}

/// Runs every (variant, oracle setting, seed) combination of the control
/// study and returns the result rows. The 2D-latent restriction comes from
/// the quadrature evaluation.
pub fn control_study(cfg: &ControlStudyConfig, run_root: &Path) -> Result<Vec<ControlResult>> {
    if cfg.base.latent_dim > 2 {
        return Err(Error::config("control study needs a 2D-latent configuration"));
    }
    if cfg.base.method != Method::Demissvae {
        return Err(Error::config("control study runs demissvae variants"));
    }
    let data = resolve_dataset(&cfg.base.dataset)?;
    let mog = data
        .mog
        .as_ref()
        .ok_or_else(|| Error::config("control study oracles need the synthetic ground truth"))?;

    // Per-row ground-truth conditionals, shared across settings.
    let conditionals = row_conditionals(mog, &data.train)?;

    let mut results = Vec::new();
    let mut settings: Vec<(String, f64)> = Vec::new();
    if cfg.rejection_budget.is_some() {
        settings.push(("rejection".to_string(), 0.0));
    }
    for a in &cfg.widen_alphas {
        settings.push(("widen".to_string(), *a));
    }
    for b in &cfg.oversample_betas {
        settings.push(("oversample".to_string(), *b));
    }

    for (oracle_name, setting) in &settings {
        let (imputer, js) = match oracle_name.as_str() {
            "rejection" => (
                OracleImputer {
                    per_row: vec![None; data.train.n_rows()],
                    model_rejection_budget: cfg.rejection_budget,
                },
                f64::NAN,
            ),
            "widen" | "oversample" => {
                let mut per_row: Vec<Option<MoGParams>> = Vec::with_capacity(data.train.n_rows());
                for (row, cond) in conditionals.iter().enumerate() {
                    let dist = match cond {
                        Some(c) => {
                            let mask = data.train.row_mask(row);
                            let mis: Vec<usize> = mask
                                .iter()
                                .enumerate()
                                .filter(|(_, &m)| m == 0)
                                .map(|(j, _)| j)
                                .collect();
                            let d = if oracle_name == "widen" {
                                let marg = mog_marginal(mog, &mis)?;
                                oracle_widen(c, &marg, *setting)?
                            } else {
                                oracle_oversample(c, *setting)?
                            };
                            Some(d)
                        }
                        None => None,
                    };
                    per_row.push(dist);
                }
                let js = mean_js_to_conditional(&per_row, &conditionals, cfg.js_rows)?;
                (OracleImputer { per_row, model_rejection_budget: None }, js)
            }
            _ => unreachable!(),
        };
        for &variant in &cfg.variants {
            for &seed in &cfg.seeds {
                let mut config = cfg.base.clone();
                config.seed = seed;
                let label = format!(
                    "control-{:?}-{oracle_name}-{setting:.2}",
                    variant
                )
                .to_lowercase();
                let sub_root = run_root.join(label);
                let outcome =
                    train_full(&config, &sub_root, false, variant, Some(&imputer), None)?;
                let report = evaluate(
                    &outcome.run_dir,
                    &EvalSpec {
                        grid_resolution: cfg.base.eval.grid_resolution,
                        eval_rows: cfg.base.eval.eval_rows,
                        metrics: vec![MetricSpec::GridLoglik { fallback_iwelbo: None }],
                    },
                    seed,
                )?;
                results.push(ControlResult {
                    variant,
                    oracle: oracle_name.clone(),
                    setting: *setting,
                    js,
                    seed,
                    test_grid_loglik: report.metrics["grid_loglik"],
                });
            }
        }
    }
    // Persist the table.
    let mut text = String::new();
    for r in &results {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(run_root.join("control_study.jsonl"), text)?;
    Ok(results)
}

fn row_conditionals(mog: &MoGParams, train: &IncompleteDataset) -> Result<Vec<Option<MoGParams>>> {
    let mut out = Vec::with_capacity(train.n_rows());
    for i in 0..train.n_rows() {
        let mask = train.row_mask(i);
        if mask.iter().all(|&m| m == 1) {
            out.push(None);
        } else if mask.iter().all(|&m| m == 0) {
            out.push(Some(mog.clone()));
        } else {
            out.push(Some(mog_conditional(mog, &train.row_values(i), &mask)?));
        }
    }
    Ok(out)
}

/// Mean JS between oracle and ground-truth conditional over the first rows
/// with at most 2 missing dims.
fn mean_js_to_conditional(
    oracle: &[Option<MoGParams>],
    conditionals: &[Option<MoGParams>],
    max_rows: usize,
) -> Result<f64> {
    let mut vals = Vec::new();
    for (o, c) in oracle.iter().zip(conditionals.iter()) {
        if vals.len() >= max_rows {
            break;
        }
        if let (Some(o), Some(c)) = (o, c) {
            if c.dim() <= 2 {
                vals.push(js_divergence(&JsInput::Mog(o), &JsInput::Mog(c), 256)?);
            }
        }
    }
    if vals.is_empty() {
        return Err(Error::config("no rows with <= 2 missing dims for the JS coordinate"));
    }
    Ok(crate::stats::mean(&vals))
}

/// Figure kinds rendered from stored outputs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FigureKind {
    /// Box plot of a final metric per method across seeds.
    MethodBoxes,
    /// Metric trajectories over epochs.
    TrainingCurves,
    /// Control-study log-likelihood against the JS coordinate.
    ControlStudy,
}

/// Render a figure from run directories; consumes only serialized outputs.
pub fn plot(
    run_dirs: &[PathBuf],
    kind: FigureKind,
    metric: &str,
    out_path: &Path,
    allow_uneven_budget: bool,
) -> Result<()> {
    match kind {
        FigureKind::MethodBoxes => {
            let mut configs = Vec::new();
            let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for dir in run_dirs {
                let config: ExperimentConfig = serde_json::from_str(
                    &std::fs::read_to_string(dir.join("config.json")).map_err(|e| {
                        Error::Config(format!("missing config.json in {}: {e}", dir.display()))
                    })?,
                )?;
                let eval_path = dir.join("eval.jsonl");
                let records = crate::report::read_metrics(&eval_path)?;
                let value = records
                    .iter()
                    .filter(|r| r.metric == metric)
                    .map(|r| r.value)
                    .next_back()
                    .ok_or_else(|| {
                        Error::Config(format!("{} has no metric {metric}", eval_path.display()))
                    })?;
                by_method.entry(config.method.name().to_string()).or_default().push(value);
                configs.push(config);
            }
            check_budget_parity(&configs, allow_uneven_budget)?;
            let series: Vec<BoxSeries> = by_method
                .into_iter()
                .map(|(label, values)| BoxSeries { label, values })
                .collect();
            crate::report::render_box_plot(&series, metric, out_path)
        }
        FigureKind::TrainingCurves => {
            let mut curves = Vec::new();
            for dir in run_dirs {
                let records = crate::report::read_metrics(&dir.join("metrics.jsonl"))?;
                let pts: Vec<&MetricRecord> =
                    records.iter().filter(|r| r.metric == metric).collect();
                if pts.is_empty() {
                    return Err(Error::Config(format!(
                        "{} has no metric {metric}",
                        dir.join("metrics.jsonl").display()
                    )));
                }
                curves.push(Curve {
                    label: pts[0].run_id.clone(),
                    x: pts.iter().map(|r| r.epoch as f64).collect(),
                    y: pts.iter().map(|r| r.value).collect(),
                    spread: None,
                });
            }
            crate::report::render_curves(&curves, metric, "epoch", out_path)
        }
        FigureKind::ControlStudy => {
            // One results file expected at the first path.
            let path = run_dirs
                .first()
                .ok_or_else(|| Error::config("control-study figure needs the results file"))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("missing {}: {e}", path.display())))?;
            let mut rows = Vec::new();
            for line in text.lines() {
                if !line.trim().is_empty() {
                    rows.push(serde_json::from_str::<ControlResult>(line)?);
                }
            }
            let mut curves = Vec::new();
            for variant in [DemissVariant::TwoObjective, DemissVariant::CviOnly, DemissVariant::MvbOnly]
            {
                let mut pts: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
                for r in rows.iter().filter(|r| r.variant == variant && r.js.is_finite()) {
                    let key = format!("{}-{:.3}", r.oracle, r.setting);
                    let e = pts.entry(key).or_default();
                    e.0.push(r.js);
                    e.1.push(r.test_grid_loglik);
                }
                if pts.is_empty() {
                    continue;
                }
                let mut xy: Vec<(f64, f64)> = pts
                    .values()
                    .map(|(js, ll)| (crate::stats::mean(js), crate::stats::median(ll)))
                    .collect();
                xy.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                curves.push(Curve {
                    label: format!("{variant:?}").to_lowercase(),
                    x: xy.iter().map(|p| p.0).collect(),
                    y: xy.iter().map(|p| p.1).collect(),
                    spread: None,
                });
            }
            crate::report::render_curves(&curves, metric, "JS to conditional", out_path)
        }
    }
}

/// Generate a dataset bundle (and its ground-truth document) on disk.
pub fn generate_data_command(
    out_dir: &Path,
    mog_seed: u64,
    dim: usize,
    components: usize,
    n: usize,
    missing_rate: f64,
) -> Result<()> {
    let mog = generate_mog(mog_seed, dim, components)?;
    let mut data_rng = stream_rng(mog_seed, Stream::DataGen);
    let values = mog_sample(&mog, n, &mut data_rng)?;
    let mut mask_rng = stream_rng(mog_seed, Stream::Mask);
    let data = apply_uniform_mcar(&values, missing_rate, &mut mask_rng)?;
    crate::data::save_bundle(
        out_dir,
        &data,
        None,
        serde_json::json!({
            "generator": "mog",
            "mog_seed": mog_seed,
            "dim": dim,
            "components": components,
            "missing_rate": missing_rate,
        }),
    )?;
    std::fs::write(
        out_dir.join("mog.json"),
        serde_json::to_string_pretty(&mog.to_document(mog_seed))?,
    )?;
    Ok(())
}

/// Convenience wrapper for comparisons: the per-seed final metric of a
/// trained-and-evaluated config.
pub fn train_and_eval(
    config: &ExperimentConfig,
    run_root: &Path,
    metric: &MetricSpec,
) -> Result<f64> {
    let outcome = train(config, run_root)?;
    let spec = EvalSpec {
        grid_resolution: config.eval.grid_resolution,
        eval_rows: config.eval.eval_rows,
        metrics: vec![metric.clone()],
    };
    let report = evaluate(&outcome.run_dir, &spec, config.seed)?;
    let key = match metric {
        MetricSpec::GridLoglik { .. } => "grid_loglik",
        MetricSpec::Iwelbo { i } => return Ok(report.metrics[&format!("iwelbo_{i}")]),
        MetricSpec::MiGap => "mi_posterior_gap",
        MetricSpec::PosteriorGrids { .. } => return Err(Error::config("not a scalar metric")),
    };
    Ok(report.metrics[key])
}
