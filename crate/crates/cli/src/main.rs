use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use multireg::dataset::{Dataset, DatasetParams};
use multireg::error::Error;
use multireg::eval::{
    emit_reports, obtain_dataset, parse_results_csv, run_benchmark, trial_setup, BenchmarkResults,
    ExperimentConfig,
};
use multireg::nn::load_checkpoint;
use multireg::registration::{
    calibrate_threshold, confidence_map_image, confidence_samples, register, AgentPolicy,
    NetworkPolicy, OraclePolicy, RegistrationMode, RegistrationProblem, RegistrationRunConfig,
};
use multireg::training::{train, EvalSet, TrainConfig, TrainOutputs};

#[derive(Parser)]
#[command(name = "multireg", version, about = "Multi-agent 2D/3D rigid registration experiments")]
struct Cli {
    /// JSON configuration; absent fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and benchmark seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the training and benchmark worker counts.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output root.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and save the training, validation and benchmark phantoms.
    GenData,
    /// Train the reward network and calibrate the confidence threshold.
    Train,
    /// Register one benchmark trial and write its trajectory.
    Register {
        #[arg(long)]
        dataset_id: Option<u64>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::AgtM)]
        mode: ModeArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use true rewards instead of the network.
        #[arg(long)]
        oracle: bool,
    },
    /// Run every benchmark trial and method and write the reports.
    Benchmark {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the summary table of an existing benchmark.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AgtS,
    AgtM,
    AgtMOpt,
}

impl From<ModeArg> for RegistrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AgtS => RegistrationMode::AgtS,
            ModeArg::AgtM => RegistrationMode::AgtM,
            ModeArg::AgtMOpt => RegistrationMode::AgtMOpt,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct IdRange {
    first: u64,
    count: u64,
}

impl IdRange {
    fn ids(&self) -> impl Iterator<Item = u64> {
        self.first..self.first + self.count
    }
}

/// The single configuration document. `dataset` also replaces
/// `benchmark.dataset`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct Config {
    dataset: DatasetParams,
    train_datasets: IdRange,
    validation_datasets: IdRange,
    validation_pairs: usize,
    training: TrainConfig,
    /// Precision the calibrated confidence threshold is chosen for.
    calibration_precision: f64,
    benchmark: ExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetParams::default(),
            train_datasets: IdRange { first: 0, count: 8 },
            validation_datasets: IdRange { first: 500, count: 3 },
            validation_pairs: 6,
            training: TrainConfig::default(),
            calibration_precision: 0.95,
            benchmark: ExperimentConfig::default(),
        }
    }
}

enum Failure {
    Config(String),
    MissingCheckpoint(PathBuf),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg: Config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.training.seed = s;
        cfg.benchmark.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.training.workers = w;
        cfg.benchmark.workers = w;
    }
    cfg.benchmark.dataset = cfg.dataset.clone();
    if cfg.benchmark.data_dir.is_none() {
        cfg.benchmark.data_dir = Some(cli.out.join("data"));
    }
    cfg.training.validate().map_err(|e| Failure::Config(e.to_string()))?;
    cfg.benchmark.validate().map_err(|e| Failure::Config(e.to_string()))?;
    if !(cfg.calibration_precision > 0.0 && cfg.calibration_precision <= 1.0) {
        return Err(Failure::Config("calibration_precision must be in (0, 1]".into()));
    }
    Ok(cfg)
}

fn datasets(cfg: &Config, ids: impl Iterator<Item = u64>) -> CliResult<Vec<Dataset>> {
    Ok(ids.map(|id| obtain_dataset(&cfg.benchmark, id)).collect::<Result<_, _>>()?)
}

fn default_checkpoint(out: &Path) -> PathBuf {
    out.join("train").join("checkpoints").join("final.bin")
}

fn gen_data(cfg: &Config, out: &Path) -> CliResult<()> {
    let bench = cfg.benchmark.first_dataset_id..cfg.benchmark.first_dataset_id + cfg.benchmark.datasets as u64;
    for id in cfg.train_datasets.ids().chain(cfg.validation_datasets.ids()).chain(bench) {
        let dir = out.join("data").join(format!("dataset_{id}"));
        Dataset::generate(&cfg.dataset, id)?.save(&dir)?;
        log::info!("wrote {}", dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct ThresholdFile {
    default_threshold: f64,
    calibrated_threshold: Option<f64>,
    precision_target: f64,
    samples: usize,
}

fn run_train(cfg: &Config, out: &Path) -> CliResult<()> {
    let dir = out.join("train");
    let train_sets = datasets(cfg, cfg.train_datasets.ids())?;
    let val_sets = datasets(cfg, cfg.validation_datasets.ids())?;
    let eval = EvalSet::build(&val_sets, &cfg.training, cfg.validation_pairs, cfg.training.seed ^ 0x7661)?;
    let outputs = TrainOutputs { log_path: Some(dir.join("log.ndjson")), checkpoint_dir: Some(dir.join("checkpoints")) };
    let outcome = train(&train_sets, &eval, &cfg.training, &outputs)?;
    println!(
        "trained {} updates, {} supervised samples, {:.0} CPU-s, correct-action rate {}",
        outcome.updates,
        outcome.samples_seen,
        outcome.train_cpu_s,
        outcome.final_rate.map_or("n/a".into(), |r| format!("{r:.3}"))
    );
    let samples = confidence_samples(&outcome.network, &eval)?;
    let calibrated = calibrate_threshold(&samples, cfg.calibration_precision);
    let file = ThresholdFile {
        default_threshold: cfg.benchmark.registration.confidence_threshold,
        calibrated_threshold: calibrated,
        precision_target: cfg.calibration_precision,
        samples: samples.len(),
    };
    fs::write(dir.join("threshold.json"), serde_json::to_string_pretty(&file).map_err(Error::from)?)
        .map_err(Error::from)?;
    println!("calibrated confidence threshold: {calibrated:?}");
    Ok(())
}

fn run_register(
    cfg: &Config,
    out: &Path,
    dataset_id: Option<u64>,
    trial: usize,
    mode: RegistrationMode,
    checkpoint: Option<PathBuf>,
    oracle: bool,
) -> CliResult<()> {
    let net = if oracle {
        None
    } else {
        let path = checkpoint.unwrap_or_else(|| default_checkpoint(out));
        if !path.exists() {
            return Err(Failure::MissingCheckpoint(path));
        }
        Some(load_checkpoint(&path)?.0)
    };
    let d = obtain_dataset(&cfg.benchmark, dataset_id.unwrap_or(cfg.benchmark.first_dataset_id))?;
    let setup = trial_setup(&cfg.benchmark, &d, trial)?;
    let roi = net.as_ref().map_or(61, |n| n.config().roi_size);
    let problem = RegistrationProblem::from_dataset(&d, setup.fixed.clone(), roi)?;
    let mut policy: Box<dyn AgentPolicy> = match &net {
        Some(n) => Box::new(NetworkPolicy::new(&problem, n)?),
        None => Box::new(OraclePolicy::new(&problem, setup.t_g)),
    };
    let rc = RegistrationRunConfig { mode, ..cfg.benchmark.registration.clone() };
    let traj = register(&problem, policy.as_mut(), &setup.t_init, Some(&setup.t_g), &rc);
    let dir = out.join("register");
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join("trajectory.json"), traj.to_json()?).map_err(Error::from)?;
    for view in 0..problem.views.len() {
        let decisions = policy.dense(view, &setup.t_init)?;
        let img = confidence_map_image(&decisions, problem.grid(view)?, problem.views[view].geometry.pixel_spacing)?;
        img.save_pgm(&dir.join(format!("confidence_v{view}.pgm")))?;
    }
    let tre = |t| multireg::eval::compute_tre(&d.landmarks, t, &setup.t_g);
    println!(
        "dataset {} trial {trial} {}: TRE {:.2} mm -> {:.2} mm",
        d.id,
        mode.name(),
        tre(&setup.t_init),
        tre(&traj.final_pose())
    );
    if let Some(e) = traj.aborted {
        return Err(Failure::Run(Error::Degenerate(format!("registration aborted: {e}"))));
    }
    Ok(())
}

fn run_bench(cfg: &Config, out: &Path, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let mut bench = cfg.benchmark.clone();
    if let Some(p) = checkpoint {
        bench.checkpoint = Some(p);
    } else if bench.checkpoint.is_none() {
        bench.checkpoint = Some(default_checkpoint(out));
    }
    let results = run_benchmark(&bench)?;
    for n in &results.notices {
        eprintln!("notice: {n}");
    }
    emit_reports(&results, &out.join("benchmark"))?;
    print!("{}", results.table());
    Ok(())
}

fn run_report(cfg: &Config, out: &Path) -> CliResult<()> {
    let csv = out.join("benchmark").join("results.csv");
    let text = fs::read_to_string(&csv).map_err(|e| Failure::Config(format!("{}: {e}", csv.display())))?;
    let results = BenchmarkResults {
        records: parse_results_csv(&text)?,
        notices: Vec::new(),
        confidence_maps: Vec::new(),
        confidence_threshold: cfg.benchmark.registration.confidence_threshold,
    };
    print!("{}", results.table());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, &cli.out),
        Command::Train => run_train(&cfg, &cli.out),
        Command::Register { dataset_id, trial, mode, checkpoint, oracle } => {
            run_register(&cfg, &cli.out, *dataset_id, *trial, (*mode).into(), checkpoint.clone(), *oracle)
        }
        Command::Benchmark { checkpoint } => run_bench(&cfg, &cli.out, checkpoint.clone()),
        Command::Report => run_report(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::MissingCheckpoint(p)) => {
            eprintln!("checkpoint not found: {}", p.display());
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
