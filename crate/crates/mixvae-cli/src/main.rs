//! Experiment CLI: dataset generation, training, evaluation, the
//! objective-separation control study, and figure rendering.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixvae::error::Error;
use mixvae::exp::{
    self, control_study, evaluate, generate_data_command, plot, train_full, ControlStudyConfig,
    DemissVariant, EvalSpec, ExperimentConfig, FigureKind, MetricSpec,
};

#[derive(Parser)]
#[command(name = "mixvae", about = "Train and evaluate VAEs on incomplete data", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle (values.csv, masks.csv, meta.json, mog.json).
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        mog_seed: u64,
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value_t = 15)]
        components: usize,
        #[arg(long, default_value_t = 20000)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        missing_rate: f64,
    },
    /// Train a single configuration (JSON file of ExperimentConfig).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory root; defaults to $MIXVAE_RUN_ROOT or ./runs.
        #[arg(long)]
        run_root: Option<PathBuf>,
        /// Continue from the run's checkpoint if present.
        #[arg(long)]
        resume: bool,
        /// Write a default config for the given method instead of training.
        #[arg(long)]
        write_default: Option<String>,
    },
    /// Compute metrics for a stored run.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
        /// Metrics: grid_loglik, iwelbo:<I>, mi_gap, posterior_grids:<row>.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 256)]
        grid_resolution: usize,
        #[arg(long, default_value_t = 1000)]
        eval_rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the objective-separation control study (JSON ControlStudyConfig).
    ControlStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_root: Option<PathBuf>,
    },
    /// Render a figure from stored runs.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long, default_value = "grid_loglik")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        /// Allow differing per-datapoint sample budgets across runs.
        #[arg(long)]
        allow_uneven_budget: bool,
        /// Run directories (or the control-study results file).
        inputs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PlotKind {
    MethodBoxes,
    TrainingCurves,
    ControlStudy,
}

fn run_root_or_default(run_root: Option<PathBuf>) -> PathBuf {
    run_root
        .or_else(|| std::env::var_os("MIXVAE_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_metrics(metrics: &[String]) -> Result<Vec<MetricSpec>, Error> {
    if metrics.is_empty() {
        return Ok(Vec::new());
    }
    metrics
        .iter()
        .map(|m| {
            let m = m.trim();
            if m == "grid_loglik" {
                Ok(MetricSpec::GridLoglik { fallback_iwelbo: None })
            } else if let Some(rest) = m.strip_prefix("grid_loglik_or_iwelbo:") {
                let i = rest.parse().map_err(|_| Error::config(format!("bad metric {m}")))?;
                Ok(MetricSpec::GridLoglik { fallback_iwelbo: Some(i) })
            } else if let Some(rest) = m.strip_prefix("iwelbo:") {
                let i = rest.parse().map_err(|_| Error::config(format!("bad metric {m}")))?;
                Ok(MetricSpec::Iwelbo { i })
            } else if m == "mi_gap" {
                Ok(MetricSpec::MiGap)
            } else if let Some(rest) = m.strip_prefix("posterior_grids:") {
                let row = rest.parse().map_err(|_| Error::config(format!("bad metric {m}")))?;
                Ok(MetricSpec::PosteriorGrids { row })
            } else {
                Err(Error::config(format!("unknown metric {m}")))
            }
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Parameter(_) => ExitCode::from(2),
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenerateData { out, mog_seed, dim, components, n, missing_rate } => {
            generate_data_command(&out, mog_seed, dim, components, n, missing_rate)?;
            println!("wrote dataset bundle to {}", out.display());
            Ok(())
        }
        Command::Train { config, run_root, resume, write_default } => {
            if let Some(method) = write_default {
                let method = parse_method(&method)?;
                let default = ExperimentConfig::mog_default(method, 0);
                std::fs::write(&config, serde_json::to_string_pretty(&default)?)?;
                println!("wrote default {} config to {}", method.name(), config.display());
                return Ok(());
            }
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", config.display())))?;
            let parsed: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("invalid config: {e}")))?;
            parsed.validate()?;
            let root = run_root_or_default(run_root);
            let outcome =
                train_full(&parsed, &root, resume, DemissVariant::TwoObjective, None, None)?;
            println!("run directory: {}", outcome.run_dir.display());
            println!("metrics: {}", outcome.metrics_path.display());
            Ok(())
        }
        Command::Evaluate { run_dir, metrics, grid_resolution, eval_rows, seed } => {
            let parsed = parse_metrics(&metrics)?;
            let spec = EvalSpec {
                grid_resolution,
                eval_rows,
                metrics: parsed,
            };
            let report = evaluate(&run_dir, &spec, seed)?;
            if report.metrics.is_empty() {
                println!("no metrics requested; report is empty");
            }
            for (name, value) in &report.metrics {
                println!("{name:>28}  {value:.6}");
            }
            Ok(())
        }
        Command::ControlStudy { config, run_root } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", config.display())))?;
            let parsed: ControlStudyConfig = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("invalid control-study config: {e}")))?;
            let root = run_root_or_default(run_root);
            let results = control_study(&parsed, &root)?;
            println!("{} result rows in {}", results.len(), root.join("control_study.jsonl").display());
            Ok(())
        }
        Command::Plot { kind, metric, out, allow_uneven_budget, inputs } => {
            if inputs.is_empty() {
                return Err(Error::config("plot needs at least one input path"));
            }
            let kind = match kind {
                PlotKind::MethodBoxes => FigureKind::MethodBoxes,
                PlotKind::TrainingCurves => FigureKind::TrainingCurves,
                PlotKind::ControlStudy => FigureKind::ControlStudy,
            };
            plot(&inputs, kind, &metric, &out, allow_uneven_budget)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn parse_method(name: &str) -> Result<exp::Method, Error> {
    exp::Method::all()
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| Error::config(format!("unknown method {name}")))
}
