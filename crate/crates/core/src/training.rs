//! Training data generation and the two training regimes: dense training of
//! the dilated FCN on whole image pairs, and per-ROI training of the CNN.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, RodSpec};
use crate::error::{Error, Result};
use crate::mdp::{argmax_action, AgentGrid, RewardMap, RewardPrecompute};
use crate::nn::{
    expand_rewards, save_checkpoint, shift_feature_map, train_step, DenseSample,
    NetworkConfig, Optimizer, OptimizerConfig, PolicyNetwork, RoiSample, Sample, ShiftTarget,
    Stream, Tensor,
};
use crate::nn::tensor::shifted_pixel_valid;
use crate::phantom::Volume3D;
use crate::projection::{CameraGeometry, Image2D, PixelRegion};
use crate::se3::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fcn,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    /// Rotation of the moving pose about the volume centre (degrees).
    pub rotation_offset_max_deg: f64,
    /// Translation of the moving pose along the view axis (mm).
    pub depth_offset_max_mm: f64,
    /// Range of the random ground-truth pose.
    pub gt_translation_max_mm: f64,
    pub gt_rotation_max_deg: f64,
    /// In-plane shift range per axis, realised as integer pixel shifts.
    pub shift_max_mm: f64,
    pub shifts_per_pair: usize,
    /// Image pairs per update in fcn mode.
    pub batch_pairs: usize,
    /// ROI samples per update in cnn mode.
    pub batch_rois: usize,
    /// Chance that the fixed image of a pair carries a rod occluder.
    pub rod_probability: f64,
    pub max_cpu_hours: Option<f64>,
    /// Budget on supervised (state, ROI) samples.
    pub max_samples: Option<u64>,
    pub max_updates: Option<u64>,
    pub eval_every_updates: Option<u64>,
    pub eval_every_cpu_s: Option<f64>,
    /// Extra evaluations once training CPU time passes these marks.
    pub eval_at_cpu_s: Vec<f64>,
    /// Stop after an evaluation reaching this correct-action rate.
    pub stop_at_rate: Option<f64>,
    pub log_every_updates: u64,
    pub checkpoint_every_updates: Option<u64>,
    pub seed: u64,
    /// Data-generation threads; 0 generates inline.
    pub workers: usize,
    pub queue_depth: usize,
    /// When false, timing fields in the log are written as 0.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Fcn,
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            rotation_offset_max_deg: 10.0,
            depth_offset_max_mm: 10.0,
            gt_translation_max_mm: 5.0,
            gt_rotation_max_deg: 5.0,
            shift_max_mm: 20.0,
            shifts_per_pair: 4,
            batch_pairs: 1,
            batch_rois: 16,
            rod_probability: 0.5,
            max_cpu_hours: Some(4.0),
            max_samples: None,
            max_updates: None,
            eval_every_updates: None,
            eval_every_cpu_s: Some(300.0),
            eval_at_cpu_s: Vec::new(),
            stop_at_rate: None,
            log_every_updates: 10,
            checkpoint_every_updates: None,
            seed: 0,
            workers: 1,
            queue_depth: 4,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let ranges = [
            self.rotation_offset_max_deg,
            self.depth_offset_max_mm,
            self.gt_translation_max_mm,
            self.gt_rotation_max_deg,
            self.shift_max_mm,
        ];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidParameter("sampling ranges must be non-negative".into()));
        }
        if self.rotation_offset_max_deg >= 180.0 || self.gt_rotation_max_deg >= 180.0 {
            return Err(Error::InvalidParameter("rotation ranges must be below 180 degrees".into()));
        }
        if self.shifts_per_pair == 0 || self.batch_pairs == 0 || self.batch_rois == 0 {
            return Err(Error::InvalidParameter("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rod_probability) {
            return Err(Error::InvalidParameter("rod_probability must be in [0, 1]".into()));
        }
        if self.queue_depth == 0 || self.log_every_updates == 0 {
            return Err(Error::InvalidParameter("queue depth and log interval must be positive".into()));
        }
        let lr = self.optimizer.learning_rate();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidParameter("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// CPU time consumed by the whole process (all threads), in seconds.
pub fn process_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn uniform_direction(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::from(UnitSphere.sample(rng))
}

/// Pose with a uniformly random translation direction and rotation axis,
/// magnitudes uniform in `[0, max]`.
pub fn random_pose(rng: &mut impl Rng, translation_max_mm: f64, rotation_max_deg: f64) -> RigidTransform {
    let t = uniform_direction(rng) * rng.random_range(0.0..=translation_max_mm);
    let axis = uniform_direction(rng);
    let angle = rng.random_range(0.0..=rotation_max_deg).to_radians();
    RigidTransform::translation(t).compose(&RigidTransform::rotation(axis, angle))
}

/// Ground truth `t_g` and moving pose `t` for one training pair. `t` is
/// `t_g` rotated about the posed volume centre and moved along the view
/// axis; in-plane translation comes from feature-map shifts instead.
pub fn sample_poses(
    volume: &Volume3D,
    g: &CameraGeometry,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> (RigidTransform, RigidTransform) {
    let t_g = random_pose(rng, cfg.gt_translation_max_mm, cfg.gt_rotation_max_deg);
    let center = t_g.transform_point(&volume.center());
    let axis = uniform_direction(rng);
    let angle = rng.random_range(0.0..=cfg.rotation_offset_max_deg).to_radians();
    let depth = rng.random_range(-cfg.depth_offset_max_mm..=cfg.depth_offset_max_mm);
    let t = RigidTransform::translation(g.normal() * depth)
        .compose(&RigidTransform::rotation_about(center, axis, angle))
        .compose(&t_g);
    (t, t_g)
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub fixed_image: Image2D,
    pub moving_image: Image2D,
    pub t: RigidTransform,
    pub t_g: RigidTransform,
    pub view: usize,
    pub rod: Option<RodSpec>,
}

fn sample_rod(dataset: &Dataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Option<RodSpec> {
    (rng.random::<f64>() < cfg.rod_probability).then(|| RodSpec::sample(rng, &dataset.volume))
}

fn fixed_volume<'a>(dataset: &'a Dataset, rod: Option<&RodSpec>) -> Result<std::borrow::Cow<'a, Volume3D>> {
    Ok(match rod {
        Some(r) => std::borrow::Cow::Owned(r.insert(&dataset.volume)?),
        None => std::borrow::Cow::Borrowed(&dataset.volume),
    })
}

/// Renders one fixed/moving pair of `view`. The fixed image is the DRR at
/// `t_g`, with a rod if one is drawn.
pub fn sample_pair(
    dataset: &Dataset,
    view: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainingPair> {
    let (t, t_g) = sample_poses(&dataset.volume, &dataset.views[view].geometry, cfg, rng);
    let rod = sample_rod(dataset, cfg, rng);
    let fixed_image = dataset.render(&*fixed_volume(dataset, rod.as_ref())?, view, &t_g)?;
    let moving_image = dataset.render(&dataset.volume, view, &t)?;
    Ok(TrainingPair { fixed_image, moving_image, t, t_g, view, rod })
}

/// Largest pixel shift for `shift_max_mm` at the magnification of the world
/// origin, where volumes are centred.
pub fn shift_max_px(cfg: &TrainConfig, g: &CameraGeometry) -> i64 {
    let mag = g.magnification_at(&Vector3::zeros());
    (cfg.shift_max_mm * mag / g.pixel_spacing[0]).round() as i64
}

fn item_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

const TRAIN_DOMAIN: u64 = 0x7261_696e;
const EVAL_DOMAIN: u64 = 0x6576_616c;

fn pick_source<'a>(datasets: &'a [Dataset], rng: &mut impl Rng) -> (&'a Dataset, usize) {
    let d = &datasets[rng.random_range(0..datasets.len())];
    (d, rng.random_range(0..d.views.len()))
}

/// One pair with `shifts_per_pair` dense targets.
pub fn make_dense_sample(
    datasets: &[Dataset],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<DenseSample> {
    let (d, view) = pick_source(datasets, rng);
    let pair = sample_pair(d, view, cfg, rng)?;
    let view_setup = &d.views[view];
    let g = &view_setup.geometry;
    let grid = AgentGrid::for_image(g.image_dims, cfg.network.roi_size)?;
    let pre = RewardPrecompute::new(g, &d.volume, &pair.t, &pair.t_g, grid)?;
    let s = shift_max_px(cfg, g).min(grid.dims[0].min(grid.dims[1]) as i64 - 1);
    let shifts = (0..cfg.shifts_per_pair)
        .map(|_| {
            let shift = [rng.random_range(-s..=s), rng.random_range(-s..=s)];
            let map = pre.map_for_shift_px(shift);
            ShiftTarget { shift, target: map.to_tensor(), mask: map.mask().to_vec() }
        })
        .collect();
    Ok(DenseSample {
        fixed: view_setup.scale.apply(&pair.fixed_image),
        moving: view_setup.scale.apply(&pair.moving_image),
        shifts,
    })
}

/// One ROI pair with an explicit in-plane translation of the moving pose.
/// Its target equals the ground-truth map pixel of the same agent and
/// pixel shift.
pub fn make_roi_sample(
    datasets: &[Dataset],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<RoiSample> {
    let (d, view) = pick_source(datasets, rng);
    let view_setup = &d.views[view];
    let g = &view_setup.geometry;
    let (t, t_g) = sample_poses(&d.volume, g, cfg, rng);
    let rod = sample_rod(d, cfg, rng);
    let grid = AgentGrid::for_image(g.image_dims, cfg.network.roi_size)?;
    let s = shift_max_px(cfg, g).min(grid.dims[0].min(grid.dims[1]) as i64 - 1);
    let (agent, shift, target, mm) = loop {
        let agent = [rng.random_range(0..grid.dims[0]), rng.random_range(0..grid.dims[1])];
        let shift = [rng.random_range(-s..=s), rng.random_range(-s..=s)];
        let pre = RewardPrecompute::for_agents(g, &d.volume, &t, &t_g, grid, &[agent])?;
        if let (Some(target), Some(mm)) =
            (pre.rewards_at_px(agent[0], agent[1], shift), pre.mm_per_px(agent[0], agent[1]))
        {
            break (agent, shift, target, mm);
        }
    };
    let offset = Vector3::new(shift[0] as f64 * mm[0], shift[1] as f64 * mm[1], 0.0);
    let world = g.image_frame().rotation_block().transpose() * offset;
    let t_shifted = RigidTransform::translation(world).compose(&t);
    let [px, py] = grid.pixel_of(agent[0], agent[1]);
    let half = cfg.network.roi_size / 2;
    let region = PixelRegion {
        x0: px - half,
        y0: py - half,
        width: cfg.network.roi_size,
        height: cfg.network.roi_size,
    };
    let fixed = d.render_region(&*fixed_volume(d, rod.as_ref())?, view, &t_g, region)?;
    let moving = d.render_region(&d.volume, view, &t_shifted, region)?;
    Ok(RoiSample {
        fixed: view_setup.scale.apply(&fixed),
        moving: view_setup.scale.apply(&moving),
        target,
    })
}

/// Background producers of indexed items. Item `k` is generated from its own
/// RNG stream and items are handed out in index order, so the sequence does
/// not depend on the number of workers.
struct DataPool<T: Send + 'static> {
    make: Arc<dyn Fn(u64) -> Result<T> + Send + Sync>,
    rx: Option<Receiver<(u64, Result<T>)>>,
    pending: BTreeMap<u64, Result<T>>,
    next: u64,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl<T: Send + 'static> DataPool<T> {
    fn spawn(workers: usize, depth: usize, make: Arc<dyn Fn(u64) -> Result<T> + Send + Sync>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let mut pool =
            Self { make: make.clone(), rx: None, pending: BTreeMap::new(), next: 0, stop, handles: Vec::new() };
        if workers == 0 {
            return pool;
        }
        let (tx, rx) = sync_channel(depth);
        let counter = Arc::new(AtomicU64::new(0));
        for _ in 0..workers {
            let (tx, counter, stop, make) = (tx.clone(), counter.clone(), pool.stop.clone(), make.clone());
            pool.handles.push(std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let k = counter.fetch_add(1, Ordering::Relaxed);
                    if tx.send((k, make(k))).is_err() {
                        break;
                    }
                }
            }));
        }
        pool.rx = Some(rx);
        pool
    }

    fn next(&mut self) -> Result<T> {
        let k = self.next;
        self.next += 1;
        let Some(rx) = &self.rx else {
            return (self.make)(k);
        };
        loop {
            if let Some(item) = self.pending.remove(&k) {
                return item;
            }
            let (i, item) = rx
                .recv()
                .map_err(|_| Error::InvalidParameter("data workers stopped".into()))?;
            self.pending.insert(i, item);
        }
    }
}

impl<T: Send + 'static> Drop for DataPool<T> {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.rx = None;
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Held-out image pairs with ground-truth maps for several shifts.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub fixed: Tensor,
    pub moving: Tensor,
    pub maps: Vec<([i64; 2], RewardMap)>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub pairs: Vec<EvalPair>,
}

impl EvalSet {
    /// `pairs` pairs drawn from `datasets` with the training sampler, on a
    /// stream disjoint from any training run's.
    pub fn build(datasets: &[Dataset], cfg: &TrainConfig, pairs: usize, seed: u64) -> Result<Self> {
        let pairs = (0..pairs as u64)
            .map(|k| {
                let mut rng = item_rng(seed, EVAL_DOMAIN, k);
                let s = make_dense_sample(datasets, cfg, &mut rng)?;
                let grid = AgentGrid::for_image(
                    [s.fixed.width(), s.fixed.height()],
                    cfg.network.roi_size,
                )?;
                let maps = s
                    .shifts
                    .into_iter()
                    .map(|st| {
                        let rewards = st.target.into_data();
                        Ok((st.shift, RewardMap::new(grid, rewards, st.mask)?))
                    })
                    .collect::<Result<_>>()?;
                Ok(EvalPair { fixed: s.fixed, moving: s.moving, maps })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Counts `(correct, counted)` over the agents of `map` that see data under
/// `shift` and have at least one action with positive true reward; an agent
/// is correct if the argmax of its predicted rewards has positive true
/// reward. `pred` holds raw network outputs, `output_dim x h x w`.
pub fn score_predictions(map: &RewardMap, shift: [i64; 2], pred: &Tensor) -> (usize, usize) {
    let [w, h] = map.dims();
    let (mut correct, mut counted) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if !shifted_pixel_valid(h, w, shift, y, x) {
                continue;
            }
            let Some(truth) = map.get(x, y) else { continue };
            if truth.iter().all(|r| *r <= 0.0) {
                continue;
            }
            counted += 1;
            let a = argmax_action(&expand_rewards(&pred.pixel(y, x)));
            if truth[a] > 0.0 {
                correct += 1;
            }
        }
    }
    (correct, counted)
}

/// Fraction of held-out (state, agent) samples whose predicted best action
/// has positive true reward.
pub fn correct_action_rate(net: &PolicyNetwork, eval: &EvalSet) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let fcn = net.to_dilated_fcn();
    let (mut correct, mut counted) = (0, 0);
    for p in &eval.pairs {
        let ff = fcn.fcn_forward(Stream::Fixed, &p.fixed)?;
        let fm = fcn.fcn_forward(Stream::Moving, &p.moving)?;
        for (shift, map) in &p.maps {
            let pred = fcn.decode_dense(&ff, &shift_feature_map(&fm, *shift)?)?;
            let (c, n) = score_predictions(map, *shift, &pred);
            correct += c;
            counted += n;
        }
    }
    Ok(if counted == 0 { 0.0 } else { correct as f64 / counted as f64 })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub wall_clock_s: f64,
    pub cpu_s: f64,
    pub updates: u64,
    pub samples_seen: u64,
    /// Mean loss over the updates since the previous record.
    pub loss: f64,
    pub correct_action_rate: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final weights, CNN form.
    pub network: PolicyNetwork,
    pub log: Vec<LogRecord>,
    pub updates: u64,
    pub samples_seen: u64,
    pub train_cpu_s: f64,
    pub final_rate: Option<f64>,
}

impl TrainOutcome {
    /// Latest evaluated rate at or before `cpu_s` of training time.
    pub fn rate_at_cpu(&self, cpu_s: f64) -> Option<f64> {
        self.log
            .iter()
            .filter(|r| r.cpu_s <= cpu_s)
            .filter_map(|r| r.correct_action_rate)
            .next_back()
    }
}

fn supervised_count(batch: &[Sample], h: usize, w: usize) -> u64 {
    batch
        .iter()
        .map(|s| match s {
            Sample::Roi(_) => 1,
            Sample::Dense(d) => d
                .shifts
                .iter()
                .map(|st| {
                    (0..h * w)
                        .filter(|p| st.mask[*p] && shifted_pixel_valid(h, w, st.shift, p / w, p % w))
                        .count() as u64
                })
                .sum(),
        })
        .sum()
}

struct Clock {
    wall: Instant,
    cpu0: f64,
    eval_cpu: f64,
}

impl Clock {
    fn train_cpu(&self) -> f64 {
        process_cpu_seconds() - self.cpu0 - self.eval_cpu
    }
}

/// Trains a freshly initialised network (seeded by `cfg.seed`) until the
/// first budget runs out.
pub fn train(
    datasets: &[Dataset],
    eval: &EvalSet,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("training datasets"));
    }
    let mut net = PolicyNetwork::new(cfg.network.clone(), cfg.seed)?;
    if cfg.mode == TrainMode::Fcn {
        net = net.to_dilated_fcn();
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let shared: Arc<Vec<Dataset>> = Arc::new(datasets.to_vec());
    let make: Arc<dyn Fn(u64) -> Result<Sample> + Send + Sync> = {
        let (data, cfg) = (shared.clone(), cfg.clone());
        Arc::new(move |k| {
            let mut rng = item_rng(cfg.seed, TRAIN_DOMAIN, k);
            Ok(match cfg.mode {
                TrainMode::Fcn => Sample::Dense(make_dense_sample(&data, &cfg, &mut rng)?),
                TrainMode::Cnn => Sample::Roi(make_roi_sample(&data, &cfg, &mut rng)?),
            })
        })
    };
    let mut pool = DataPool::spawn(cfg.workers, cfg.queue_depth, make);
    let mut log_file = match &outputs.log_path {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let g = &datasets[0].views[0].geometry;
    let grid = AgentGrid::for_image(g.image_dims, cfg.network.roi_size)?;
    let per_update = match cfg.mode {
        TrainMode::Fcn => cfg.batch_pairs,
        TrainMode::Cnn => cfg.batch_rois,
    };

    let mut clock = Clock { wall: Instant::now(), cpu0: process_cpu_seconds(), eval_cpu: 0.0 };
    let mut log = Vec::new();
    let (mut updates, mut samples_seen) = (0u64, 0u64);
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let mut next_eval_cpu = cfg.eval_every_cpu_s.unwrap_or(f64::INFINITY);
    let mut milestones: Vec<f64> = cfg.eval_at_cpu_s.clone();
    milestones.sort_by(|a, b| b.total_cmp(a));
    let mut final_rate = None;

    let mut record = |clock: &mut Clock,
                      log: &mut Vec<LogRecord>,
                      updates: u64,
                      samples_seen: u64,
                      loss: f64,
                      rate: Option<f64>|
     -> Result<()> {
        let (wall, cpu) = if cfg.record_timing {
            (clock.wall.elapsed().as_secs_f64(), clock.train_cpu())
        } else {
            (0.0, 0.0)
        };
        let r = LogRecord { wall_clock_s: wall, cpu_s: cpu, updates, samples_seen, loss, correct_action_rate: rate };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&r)?)?;
            f.flush()?;
        }
        log.push(r);
        Ok(())
    };
    let evaluate = |clock: &mut Clock, net: &PolicyNetwork| -> Result<Option<f64>> {
        if eval.is_empty() {
            return Ok(None);
        }
        let c0 = process_cpu_seconds();
        let rate = correct_action_rate(net, eval)?;
        clock.eval_cpu += process_cpu_seconds() - c0;
        Ok(Some(rate))
    };

    loop {
        let cpu = clock.train_cpu();
        let out_of_budget = cfg.max_cpu_hours.is_some_and(|h| cpu >= h * 3600.0)
            || cfg.max_samples.is_some_and(|m| samples_seen >= m)
            || cfg.max_updates.is_some_and(|m| updates >= m);
        if out_of_budget {
            break;
        }
        let batch = (0..per_update).map(|_| pool.next()).collect::<Result<Vec<_>>>()?;
        let loss = match train_step(&mut net, &mut opt, &batch) {
            Ok(l) => l,
            Err(Error::NonFiniteLoss { loss, .. }) => {
                dump_state(outputs, &net, cfg, updates, samples_seen, loss);
                return Err(Error::NonFiniteLoss { samples_seen, loss });
            }
            Err(e) => {
                dump_state(outputs, &net, cfg, updates, samples_seen, f64::NAN);
                return Err(e);
            }
        };
        updates += 1;
        samples_seen += supervised_count(&batch, grid.dims[1], grid.dims[0]);
        loss_sum += loss;
        loss_n += 1;

        let cpu = clock.train_cpu();
        let mut due = cfg.eval_every_updates.is_some_and(|k| updates % k == 0);
        if cfg.record_timing || cfg.eval_every_updates.is_none() {
            if cpu >= next_eval_cpu {
                due = true;
                next_eval_cpu = cpu + cfg.eval_every_cpu_s.unwrap_or(f64::INFINITY);
            }
            while milestones.last().is_some_and(|m| cpu >= *m) {
                milestones.pop();
                due = true;
            }
        }
        let rate = if due { evaluate(&mut clock, &net)? } else { None };
        if due || updates % cfg.log_every_updates == 0 {
            record(&mut clock, &mut log, updates, samples_seen, loss_sum / loss_n as f64, rate)?;
            loss_sum = 0.0;
            loss_n = 0;
        }
        if rate.is_some() {
            final_rate = rate;
        }
        if let (Some(k), Some(dir)) = (cfg.checkpoint_every_updates, &outputs.checkpoint_dir) {
            if updates % k == 0 {
                let meta = serde_json::json!({"updates": updates, "samples_seen": samples_seen, "config": cfg});
                save_checkpoint(&net, &dir.join(format!("checkpoint_{updates:08}.bin")), meta)?;
            }
        }
        if let (Some(target), Some(r)) = (cfg.stop_at_rate, rate) {
            if r >= target {
                break;
            }
        }
    }
    drop(pool);
    let last_evaluated = log.last().is_some_and(|r| r.correct_action_rate.is_some());
    if !last_evaluated {
        let rate = evaluate(&mut clock, &net)?;
        let loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN };
        record(&mut clock, &mut log, updates, samples_seen, if loss.is_finite() { loss } else { 0.0 }, rate)?;
        if rate.is_some() {
            final_rate = rate;
        }
    }
    let train_cpu_s = clock.train_cpu();
    let network = net.to_cnn()?;
    if let Some(dir) = &outputs.checkpoint_dir {
        let meta = serde_json::json!({
            "updates": updates,
            "samples_seen": samples_seen,
            "final_rate": final_rate,
            "config": cfg,
        });
        save_checkpoint(&network, &dir.join("final.bin"), meta)?;
    }
    Ok(TrainOutcome { network, log, updates, samples_seen, train_cpu_s, final_rate })
}

fn dump_state(
    outputs: &TrainOutputs,
    net: &PolicyNetwork,
    cfg: &TrainConfig,
    updates: u64,
    samples_seen: u64,
    loss: f64,
) {
    log::error!("training aborted after {updates} updates ({samples_seen} samples): loss {loss}");
    let Some(dir) = &outputs.checkpoint_dir else { return };
    let state = serde_json::json!({
        "updates": updates,
        "samples_seen": samples_seen,
        "loss": if loss.is_finite() { serde_json::json!(loss) } else { serde_json::json!(loss.to_string()) },
        "network_finite": net.is_finite(),
        "config": cfg,
    });
    if let Ok(text) = serde_json::to_string_pretty(&state) {
        let _ = fs::write(dir.join("abort_state.json"), text);
    }
}

pub fn train_fcn(
    datasets: &[Dataset],
    eval: &EvalSet,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    train(datasets, eval, &TrainConfig { mode: TrainMode::Fcn, ..cfg.clone() }, outputs)
}

pub fn train_cnn(
    datasets: &[Dataset],
    eval: &EvalSet,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    train(datasets, eval, &TrainConfig { mode: TrainMode::Cnn, ..cfg.clone() }, outputs)
}
