//! Benchmark orchestration: trial generation, registration by every method,
//! TRE/GFR statistics and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{optimize_registration, GcObjective, SearchConfig};
use crate::dataset::{Dataset, DatasetParams, RodSpec};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, PolicyNetwork};
use crate::phantom::LandmarkSet;
use crate::projection::Image2D;
use crate::registration::{
    confidence_map_image, refine_local, register, AgentPolicy, NetworkPolicy, OraclePolicy,
    RegistrationMode, RegistrationProblem, RegistrationRunConfig,
};
use crate::se3::RigidTransform;
use crate::training::random_pose;

/// TRE above which a trial counts as a gross failure.
pub const GROSS_FAILURE_MM: f64 = 10.0;

/// Root mean square landmark displacement between two poses, in mm.
pub fn compute_tre(landmarks: &LandmarkSet, t_est: &RigidTransform, t_gt: &RigidTransform) -> f64 {
    let pts = landmarks.points();
    let sum: f64 = pts
        .iter()
        .map(|p| (t_est.transform_point(p) - t_gt.transform_point(p)).norm_squared())
        .sum();
    (sum / pts.len() as f64).sqrt()
}

/// Percentile `q` in [0, 100] by linear interpolation between order
/// statistics at rank `q/100 * (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// `t_g` moved by a translation up to `translation_max_mm` (uniform
/// direction and magnitude) and rotated up to `rotation_max_deg` (uniform
/// axis and angle) about `center`.
pub fn perturb_pose(
    t_g: &RigidTransform,
    center: nalgebra::Vector3<f64>,
    rng: &mut impl rand::Rng,
    translation_max_mm: f64,
    rotation_max_deg: f64,
) -> RigidTransform {
    let p = random_pose(rng, translation_max_mm, rotation_max_deg);
    RigidTransform::translation(center)
        .compose(&p)
        .compose(&RigidTransform::translation(-center))
        .compose(t_g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The initial pose, before any registration.
    Start,
    AgtS,
    AgtM,
    AgtMOpt,
    Baseline,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Start, Method::AgtS, Method::AgtM, Method::AgtMOpt, Method::Baseline];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Start => "start",
            Method::AgtS => "agt_s",
            Method::AgtM => "agt_m",
            Method::AgtMOpt => "agt_m_opt",
            Method::Baseline => "baseline",
        }
    }

    pub fn is_agent(&self) -> bool {
        matches!(self, Method::AgtS | Method::AgtM | Method::AgtMOpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetParams,
    pub first_dataset_id: u64,
    pub datasets: usize,
    pub trials_per_dataset: usize,
    pub translation_max_mm: f64,
    pub rotation_max_deg: f64,
    /// Range of the random ground-truth pose of each trial.
    pub gt_translation_max_mm: f64,
    pub gt_rotation_max_deg: f64,
    /// Adds a rod to the X-ray images of every trial.
    pub rod_occlusion: bool,
    /// Methods to run besides the start row, reported in `Method` order.
    pub methods: Vec<Method>,
    pub registration: RegistrationRunConfig,
    pub search: SearchConfig,
    /// Trained network for the agent methods.
    pub checkpoint: Option<PathBuf>,
    /// Agent methods use true rewards instead of a network.
    pub oracle: bool,
    /// Directory with `dataset_{id}` folders; missing ones are generated.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
    pub record_timing: bool,
    /// Number of trials whose initial agt_m confidence maps are kept.
    pub confidence_maps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetParams::default(),
            first_dataset_id: 1000,
            datasets: 10,
            trials_per_dataset: 5,
            translation_max_mm: 20.0,
            rotation_max_deg: 10.0,
            gt_translation_max_mm: 5.0,
            gt_rotation_max_deg: 5.0,
            rod_occlusion: true,
            methods: vec![Method::AgtS, Method::AgtM, Method::AgtMOpt, Method::Baseline],
            registration: RegistrationRunConfig::default(),
            search: SearchConfig::default(),
            checkpoint: None,
            oracle: false,
            data_dir: None,
            seed: 0,
            workers: 1,
            record_timing: true,
            confidence_maps: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let views = self.dataset.geometry.view_angles_deg.len();
        if views == 2 && self.dataset.geometry.angular_separation().is_some_and(|a| a < 60.0) {
            return Err(Error::InvalidParameter("views must be at least 60 degrees apart".into()));
        }
        self.dataset.geometry.geometries()?;
        let ranges = [
            self.translation_max_mm,
            self.rotation_max_deg,
            self.gt_translation_max_mm,
            self.gt_rotation_max_deg,
        ];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidParameter("pose ranges must be finite and non-negative".into()));
        }
        if self.datasets == 0 || self.trials_per_dataset == 0 {
            return Err(Error::InvalidParameter("need at least one dataset and one trial".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidParameter("workers must be at least 1".into()));
        }
        self.registration.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn wants(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset_id: u64,
    pub trial_id: usize,
    pub method: Method,
    pub tre_mm: f64,
    /// TRE above the gross-failure limit.
    pub gfr_flag: bool,
    pub steps: usize,
    pub wall_clock_s: f64,
    pub pose: [f64; 16],
}

impl ResultRecord {
    pub const CSV_HEADER: &'static str =
        "dataset_id,trial_id,method,tre_mm,gfr_flag,steps,wall_clock_s,pose_16_floats";

    /// One CSV row; the pose is row-major, space separated.
    pub fn csv_row(&self) -> String {
        let pose: Vec<String> = self.pose.iter().map(|v| v.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dataset_id,
            self.trial_id,
            self.method.name(),
            self.tre_mm,
            u8::from(self.gfr_flag),
            self.steps,
            self.wall_clock_s,
            pose.join(" ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub trials: usize,
    pub gfr: f64,
    pub median_tre_mm: Option<f64>,
    pub p75_tre_mm: Option<f64>,
    pub p95_tre_mm: Option<f64>,
    pub mean_wall_clock_s: Option<f64>,
}

/// Per-method aggregates in `Method` order; methods without records are
/// omitted.
pub fn summarize(records: &[ResultRecord]) -> Vec<MethodSummary> {
    Method::ALL
        .iter()
        .filter_map(|m| {
            let rs: Vec<&ResultRecord> = records.iter().filter(|r| r.method == *m).collect();
            if rs.is_empty() {
                return None;
            }
            let tre: Vec<f64> = rs.iter().map(|r| r.tre_mm).collect();
            let n = rs.len();
            Some(MethodSummary {
                method: *m,
                trials: n,
                gfr: rs.iter().filter(|r| r.gfr_flag).count() as f64 / n as f64,
                median_tre_mm: percentile(&tre, 50.0),
                p75_tre_mm: percentile(&tre, 75.0),
                p95_tre_mm: percentile(&tre, 95.0),
                mean_wall_clock_s: (*m != Method::Start)
                    .then(|| rs.iter().map(|r| r.wall_clock_s).sum::<f64>() / n as f64),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    pub name: String,
    pub image: Image2D,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResults {
    /// Ordered by dataset, trial, then method.
    pub records: Vec<ResultRecord>,
    pub notices: Vec<String>,
    pub confidence_maps: Vec<ConfidenceMap>,
    pub confidence_threshold: f64,
}

impl BenchmarkResults {
    pub fn summaries(&self) -> Vec<MethodSummary> {
        summarize(&self.records)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(ResultRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Plain-text table: one row per method with GFR, TRE percentiles and
    /// mean runtime.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>7} {:>8} {:>10} {:>8} {:>8} {:>10}\n",
            "method", "trials", "GFR(%)", "median", "75th", "95th", "time(s)"
        );
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        for m in self.summaries() {
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>8.1} {:>10} {:>8} {:>8} {:>10}",
                m.method.name(),
                m.trials,
                100.0 * m.gfr,
                opt(m.median_tre_mm, 2),
                opt(m.p75_tre_mm, 2),
                opt(m.p95_tre_mm, 2),
                opt(m.mean_wall_clock_s, 2)
            );
        }
        s
    }
}

/// `dataset_{id}` under `data_dir` if present, otherwise generated.
pub fn obtain_dataset(cfg: &ExperimentConfig, id: u64) -> Result<Dataset> {
    if let Some(dir) = &cfg.data_dir {
        let d = dir.join(format!("dataset_{id}"));
        if d.join("dataset.json").exists() {
            return Dataset::load(&d);
        }
    }
    Dataset::generate(&cfg.dataset, id)
}

/// Ground truth, start pose and X-ray images of one trial.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub trial_id: usize,
    pub t_g: RigidTransform,
    pub t_init: RigidTransform,
    pub rod: Option<RodSpec>,
    pub fixed: Vec<Image2D>,
    pub search_seed: u64,
}

const BENCH_DOMAIN: u64 = 0x6265_6e63;

pub fn trial_setup(cfg: &ExperimentConfig, d: &Dataset, trial_id: usize) -> Result<TrialSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BENCH_DOMAIN);
    rng.set_stream((d.id << 24) | trial_id as u64);
    let t_g = random_pose(&mut rng, cfg.gt_translation_max_mm, cfg.gt_rotation_max_deg);
    let center = t_g.transform_point(&d.volume.center());
    let t_init = perturb_pose(&t_g, center, &mut rng, cfg.translation_max_mm, cfg.rotation_max_deg);
    let rod = cfg.rod_occlusion.then(|| RodSpec::sample(&mut rng, &d.volume));
    let with_rod;
    let volume = match &rod {
        Some(r) => {
            with_rod = r.insert(&d.volume)?;
            &with_rod
        }
        None => &d.volume,
    };
    let fixed = (0..d.views.len()).map(|v| d.render(volume, v, &t_g)).collect::<Result<_>>()?;
    let search_seed = rand::Rng::random(&mut rng);
    Ok(TrialSetup { trial_id, t_g, t_init, rod, fixed, search_seed })
}

struct TrialOutput {
    records: Vec<ResultRecord>,
    notices: Vec<String>,
    maps: Vec<ConfidenceMap>,
}

fn make_policy<'p, 'a>(
    problem: &'p RegistrationProblem<'a>,
    net: Option<&PolicyNetwork>,
    t_g: &RigidTransform,
) -> Result<Box<dyn AgentPolicy + 'p>> {
    Ok(match net {
        Some(n) => Box::new(NetworkPolicy::new(problem, n)?),
        None => Box::new(OraclePolicy::new(problem, *t_g)),
    })
}

fn run_trial(
    cfg: &ExperimentConfig,
    d: &Dataset,
    trial_id: usize,
    net: Option<&PolicyNetwork>,
    agents: bool,
    keep_maps: bool,
) -> Result<TrialOutput> {
    let setup = trial_setup(cfg, d, trial_id)?;
    let mut out = TrialOutput { records: Vec::new(), notices: Vec::new(), maps: Vec::new() };
    let timing = |t0: Instant| if cfg.record_timing { t0.elapsed().as_secs_f64() } else { 0.0 };
    let mut push = |method: Method, pose: RigidTransform, steps: usize, wall: f64| {
        let tre = compute_tre(&d.landmarks, &pose, &setup.t_g);
        out.records.push(ResultRecord {
            dataset_id: d.id,
            trial_id,
            method,
            tre_mm: tre,
            gfr_flag: tre > GROSS_FAILURE_MM,
            steps,
            wall_clock_s: wall,
            pose: pose.to_row_major(),
        });
    };
    push(Method::Start, setup.t_init, 0, 0.0);

    let roi = net.map_or(61, |n| n.config().roi_size);
    let problem = RegistrationProblem::from_dataset(d, setup.fixed.clone(), roi)?;
    let mut notices = Vec::new();
    let mut run_agent = |mode: RegistrationMode| -> Result<(RigidTransform, f64)> {
        let t0 = Instant::now();
        let mut policy = make_policy(&problem, net, &setup.t_g)?;
        let rc = RegistrationRunConfig { mode, ..cfg.registration.clone() };
        let traj = register(&problem, policy.as_mut(), &setup.t_init, None, &rc);
        if let Some(e) = &traj.aborted {
            notices.push(format!("dataset {} trial {trial_id} {}: aborted: {e}", d.id, mode.name()));
        }
        Ok((traj.final_pose(), timing(t0)))
    };

    if agents && cfg.wants(Method::AgtS) {
        let (pose, wall) = run_agent(RegistrationMode::AgtS)?;
        push(Method::AgtS, pose, cfg.registration.steps, wall);
    }
    if agents && (cfg.wants(Method::AgtM) || cfg.wants(Method::AgtMOpt)) {
        let (pose, wall) = run_agent(RegistrationMode::AgtM)?;
        if cfg.wants(Method::AgtM) {
            push(Method::AgtM, pose, cfg.registration.steps, wall);
        }
        if cfg.wants(Method::AgtMOpt) {
            let t0 = Instant::now();
            let geometries: Vec<_> = d.views.iter().map(|v| v.geometry.clone()).collect();
            let refined = refine_local(&d.volume, &setup.fixed, &pose, &geometries, &cfg.registration)?;
            push(Method::AgtMOpt, refined, cfg.registration.steps, wall + timing(t0));
        }
    }
    if cfg.wants(Method::Baseline) {
        let t0 = Instant::now();
        let geometries: Vec<_> = d.views.iter().map(|v| v.geometry.clone()).collect();
        let objective = GcObjective::new(&d.volume, &setup.fixed, &geometries, &cfg.registration.similarity)?;
        let frame = problem.center_frame(0, &setup.t_init)?;
        let search = SearchConfig { seed: setup.search_seed, ..cfg.search.clone() };
        let (pose, _) = optimize_registration(&objective, &setup.t_init, &frame, &search, None)?;
        push(Method::Baseline, pose, cfg.search.evaluations, timing(t0));
    }
    if agents && keep_maps {
        let mut policy = make_policy(&problem, net, &setup.t_g)?;
        for view in 0..problem.views.len() {
            let decisions = policy.dense(view, &setup.t_init)?;
            let g = &problem.views[view].geometry;
            out.maps.push(ConfidenceMap {
                name: format!("confidence_d{}_t{trial_id}_v{view}", d.id),
                image: confidence_map_image(&decisions, problem.grid(view)?, g.pixel_spacing)?,
            });
        }
    }
    out.notices = notices;
    Ok(out)
}

/// Runs every trial and method. Agent methods are skipped with a notice if
/// the checkpoint is missing. Results are ordered by dataset, trial and
/// method whatever the worker count.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkResults> {
    cfg.validate()?;
    let mut notices = Vec::new();
    let wants_agents = cfg.methods.iter().any(Method::is_agent);
    let net = match (&cfg.checkpoint, cfg.oracle) {
        (_, true) => None,
        (Some(p), false) if p.exists() => Some(load_checkpoint(p)?.0),
        (p, false) => {
            if wants_agents {
                let what = p.as_ref().map_or("none given".to_string(), |p| p.display().to_string());
                let msg = format!("checkpoint not found ({what}); skipping agent methods");
                log::warn!("{msg}");
                notices.push(msg);
            }
            None
        }
    };
    let agents = wants_agents && (cfg.oracle || net.is_some());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let datasets: Vec<Dataset> = pool.install(|| {
        (0..cfg.datasets as u64)
            .into_par_iter()
            .map(|k| obtain_dataset(cfg, cfg.first_dataset_id + k))
            .collect::<Result<_>>()
    })?;
    let jobs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|d| (0..cfg.trials_per_dataset).map(move |t| (d, t)))
        .collect();
    let outputs: Vec<TrialOutput> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(k, (d, t))| {
                let out = run_trial(cfg, &datasets[*d], *t, net.as_ref(), agents, k < cfg.confidence_maps);
                log::info!("dataset {} trial {t} done", datasets[*d].id);
                out
            })
            .collect::<Result<_>>()
    })?;

    let mut results = BenchmarkResults {
        records: Vec::new(),
        notices,
        confidence_maps: Vec::new(),
        confidence_threshold: cfg.registration.confidence_threshold,
    };
    for o in outputs {
        results.records.extend(o.records);
        results.notices.extend(o.notices);
        results.confidence_maps.extend(o.maps);
    }
    Ok(results)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    confidence_threshold: f64,
    gross_failure_mm: f64,
    methods: Vec<MethodSummary>,
    notices: &'a [String],
}

/// Writes `results.csv`, `summary.json`, `table.txt` and one PGM (with
/// scale sidecar) per confidence map into `dir`.
pub fn emit_reports(results: &BenchmarkResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results.csv())?;
    let summary = SummaryFile {
        confidence_threshold: results.confidence_threshold,
        gross_failure_mm: GROSS_FAILURE_MM,
        methods: results.summaries(),
        notices: &results.notices,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(dir.join("table.txt"), results.table())?;
    for m in &results.confidence_maps {
        m.image.save_pgm(&dir.join(format!("{}.pgm", m.name)))?;
    }
    Ok(())
}

/// Records parsed back from `results.csv` text.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRecord>> {
    let bad = |line: &str| Error::InvalidParameter(format!("malformed results row: {line}"));
    let mut lines = text.lines();
    if lines.next() != Some(ResultRecord::CSV_HEADER) {
        return Err(Error::InvalidParameter("results.csv header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(line));
            }
            let method = Method::ALL.into_iter().find(|m| m.name() == f[2]).ok_or_else(|| bad(line))?;
            let pose_vals: Vec<f64> =
                f[7].split(' ').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(line))?;
            let pose: [f64; 16] = pose_vals.try_into().map_err(|_| bad(line))?;
            Ok(ResultRecord {
                dataset_id: f[0].parse().map_err(|_| bad(line))?,
                trial_id: f[1].parse().map_err(|_| bad(line))?,
                method,
                tre_mm: f[3].parse().map_err(|_| bad(line))?,
                gfr_flag: f[4] == "1",
                steps: f[5].parse().map_err(|_| bad(line))?,
                wall_clock_s: f[6].parse().map_err(|_| bad(line))?,
                pose,
            })
        })
        .collect()
}
