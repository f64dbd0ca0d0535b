//! Inference: the single centre agent, the confidence-gated multi-agent
//! system with chordal-mean aggregation, and local refinement.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::baseline::{coordinate_descent, DescentConfig, GcObjective, SimilarityConfig};
use crate::dataset::{Dataset, IntensityScale};
use crate::error::{Error, Result};
use crate::mdp::{
    action_rewards, apply_motion, argmax_action, ActionSpec, AgentGrid, RewardPrecompute,
};
use crate::nn::{expand_rewards, PolicyNetwork, Stream, Tensor, ACTION_COUNT};
use crate::phantom::Volume3D;
use crate::projection::{
    agent_frame_for_pixel, ray_volume_interval, render_drr, render_drr_region, AgentFrame,
    CameraGeometry, Image2D, PixelRegion,
};
use crate::se3::{chordal_mean, geodesic_distance, RigidTransform};
use crate::training::EvalSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    AgtS,
    AgtM,
    AgtMOpt,
}

impl RegistrationMode {
    pub fn name(&self) -> &'static str {
        match self {
            RegistrationMode::AgtS => "agt_s",
            RegistrationMode::AgtM => "agt_m",
            RegistrationMode::AgtMOpt => "agt_m_opt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationRunConfig {
    pub mode: RegistrationMode,
    pub steps: usize,
    pub confidence_threshold: f64,
    pub fallback_fraction: f64,
    /// The pose is re-orthonormalised after this many applied motions.
    pub renormalize_every: usize,
    pub refine: DescentConfig,
    pub similarity: SimilarityConfig,
}

impl Default for RegistrationRunConfig {
    fn default() -> Self {
        Self {
            mode: RegistrationMode::AgtM,
            steps: crate::mdp::EPISODE_STEPS,
            confidence_threshold: 0.67,
            fallback_fraction: 0.10,
            renormalize_every: 10,
            refine: DescentConfig::default(),
            similarity: SimilarityConfig::default(),
        }
    }
}

impl RegistrationRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.confidence_threshold.is_finite() && self.confidence_threshold != f64::NEG_INFINITY {
            return Err(Error::InvalidParameter("confidence threshold must be finite".into()));
        }
        if !(self.fallback_fraction > 0.0 && self.fallback_fraction <= 1.0) {
            return Err(Error::InvalidParameter("fallback_fraction must be in (0, 1]".into()));
        }
        if self.renormalize_every == 0 {
            return Err(Error::InvalidParameter("renormalize_every must be positive".into()));
        }
        Ok(())
    }
}

/// One agent's proposal: its best action and the estimated reward of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    /// Image pixel the agent's ROI is centred on.
    pub pixel: [usize; 2],
    pub confidence: f64,
    pub action: ActionSpec,
}

impl AgentDecision {
    pub fn from_rewards(pixel: [usize; 2], rewards: &[f64; ACTION_COUNT]) -> Self {
        let a = argmax_action(rewards);
        Self { pixel, confidence: rewards[a], action: ActionSpec::from_index(a) }
    }
}

/// Decisions for every unmasked agent of a dense map of raw network outputs
/// (or 12-channel rewards), in row-major pixel order.
pub fn decisions_from_dense(grid: AgentGrid, pred: &Tensor, mask: Option<&[bool]>) -> Vec<AgentDecision> {
    let [w, h] = grid.dims;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m[y * w + x]) {
                continue;
            }
            out.push(AgentDecision::from_rewards(grid.pixel_of(x, y), &expand_rewards(&pred.pixel(y, x))));
        }
    }
    out
}

/// Dense decisions of the network on a fixed/moving pair of normalised
/// images.
pub fn agent_decisions(net: &PolicyNetwork, fixed: &Tensor, moving: &Tensor) -> Result<Vec<AgentDecision>> {
    if fixed.shape() != moving.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", fixed.shape()),
            actual: format!("{:?}", moving.shape()),
        });
    }
    let grid = AgentGrid::for_image([fixed.width(), fixed.height()], net.config().roi_size)?;
    let fcn = net.to_dilated_fcn();
    let pred = fcn.decode_dense(
        &fcn.fcn_forward(Stream::Fixed, fixed)?,
        &fcn.fcn_forward(Stream::Moving, moving)?,
    )?;
    Ok(decisions_from_dense(grid, &pred, None))
}

fn by_confidence(a: &AgentDecision, b: &AgentDecision) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| (a.pixel[1], a.pixel[0]).cmp(&(b.pixel[1], b.pixel[0])))
}

/// Agents with confidence above `threshold`; if fewer than
/// `ceil(fallback_fraction * n)` qualify, the top that many by confidence
/// (ties by row-major pixel order). Output is in row-major pixel order.
pub fn select_agents(
    decisions: &[AgentDecision],
    threshold: f64,
    fallback_fraction: f64,
) -> Vec<AgentDecision> {
    let n = decisions.len();
    let k = ((fallback_fraction * n as f64).ceil() as usize).min(n);
    let mut selected: Vec<AgentDecision> =
        decisions.iter().filter(|d| d.confidence > threshold).copied().collect();
    if selected.len() < k {
        selected = decisions.to_vec();
        selected.sort_by(by_confidence);
        selected.truncate(k);
    }
    selected.sort_by_key(|d| (d.pixel[1], d.pixel[0]));
    selected
}

/// Chordal mean of the selected agents' action matrices.
pub fn aggregate_actions(selected: &[AgentDecision]) -> Result<RigidTransform> {
    if selected.is_empty() {
        return Err(Error::Empty("agent selection"));
    }
    let ts: Vec<RigidTransform> = selected.iter().map(|d| d.action.transform()).collect();
    chordal_mean(&ts)
}

/// One view of a registration problem: geometry, input scaling and the
/// X-ray (fixed) image.
#[derive(Debug, Clone)]
pub struct ProblemView {
    pub geometry: CameraGeometry,
    pub scale: IntensityScale,
    pub fixed: Image2D,
}

#[derive(Debug, Clone)]
pub struct RegistrationProblem<'a> {
    pub volume: &'a Volume3D,
    pub views: Vec<ProblemView>,
    pub step_mm: f64,
    pub roi_size: usize,
}

impl<'a> RegistrationProblem<'a> {
    /// Uses the first `fixed.len()` views of `d`.
    pub fn from_dataset(d: &'a Dataset, fixed: Vec<Image2D>, roi_size: usize) -> Result<Self> {
        if fixed.is_empty() || fixed.len() > d.views.len() {
            return Err(Error::InvalidParameter(format!(
                "{} fixed images for {} views",
                fixed.len(),
                d.views.len()
            )));
        }
        let views = fixed
            .into_iter()
            .zip(&d.views)
            .map(|(img, v)| ProblemView { geometry: v.geometry.clone(), scale: v.scale, fixed: img })
            .collect();
        Ok(Self { volume: &d.volume, views, step_mm: d.step_mm, roi_size })
    }

    pub fn grid(&self, view: usize) -> Result<AgentGrid> {
        AgentGrid::for_image(self.views[view].geometry.image_dims, self.roi_size)
    }

    /// Image pixel of the agent nearest the image centre.
    pub fn center_agent(&self, view: usize) -> Result<[usize; 2]> {
        let grid = self.grid(view)?;
        let c = grid.center();
        Ok(grid.pixel_of(c[0], c[1]))
    }

    /// Frame of the centre agent at pose `t`; if its ray misses the volume,
    /// the frame is anchored at the posed volume centre instead.
    pub fn center_frame(&self, view: usize, t: &RigidTransform) -> Result<RigidTransform> {
        let g = &self.views[view].geometry;
        let [px, py] = self.center_agent(view)?;
        let frame = match agent_frame_for_pixel(g, self.volume, t, [px as f64, py as f64]) {
            Ok(f) => f,
            Err(Error::AgentOriginUndefined { .. }) => {
                AgentFrame::at_point(g, t.transform_point(&self.volume.center()))
            }
            Err(e) => return Err(e),
        };
        Ok(frame.world_to_agent())
    }

    fn fixed_images(&self) -> Vec<Image2D> {
        self.views.iter().map(|v| v.fixed.clone()).collect()
    }

    fn geometries(&self) -> Vec<CameraGeometry> {
        self.views.iter().map(|v| v.geometry.clone()).collect()
    }
}

/// Source of agent proposals for a view at the current pose.
pub trait AgentPolicy {
    /// Decisions of all agents whose ray meets the volume.
    fn dense(&mut self, view: usize, t: &RigidTransform) -> Result<Vec<AgentDecision>>;
    /// Decision of the agent centred on image pixel `pixel`.
    fn single(&mut self, view: usize, t: &RigidTransform, pixel: [usize; 2]) -> Result<AgentDecision>;
}

fn ray_mask(problem: &RegistrationProblem, view: usize, t: &RigidTransform) -> Result<Vec<bool>> {
    let grid = problem.grid(view)?;
    let g = &problem.views[view].geometry;
    Ok((0..grid.len())
        .map(|p| {
            let [x, y] = grid.pixel_of(p % grid.dims[0], p / grid.dims[0]);
            ray_volume_interval(g, problem.volume, t, [x as f64, y as f64]).is_some()
        })
        .collect())
}

/// Decisions from the trained network: dense via the dilated FCN (the
/// fixed-image features are computed once per view), single via the CNN on
/// one ROI rendered on its own.
pub struct NetworkPolicy<'p, 'a> {
    problem: &'p RegistrationProblem<'a>,
    cnn: PolicyNetwork,
    fcn: PolicyNetwork,
    fixed: Vec<Tensor>,
    fixed_features: Vec<Option<Tensor>>,
}

impl<'p, 'a> NetworkPolicy<'p, 'a> {
    pub fn new(problem: &'p RegistrationProblem<'a>, net: &PolicyNetwork) -> Result<Self> {
        if net.config().roi_size != problem.roi_size {
            return Err(Error::InvalidParameter("network ROI size differs from the problem's".into()));
        }
        let fixed = problem.views.iter().map(|v| v.scale.apply(&v.fixed)).collect();
        Ok(Self {
            problem,
            cnn: net.to_cnn()?,
            fcn: net.to_dilated_fcn(),
            fixed,
            fixed_features: vec![None; problem.views.len()],
        })
    }

    /// Dense raw outputs for `view` at pose `t`.
    pub fn dense_outputs(&mut self, view: usize, t: &RigidTransform) -> Result<Tensor> {
        let v = &self.problem.views[view];
        if self.fixed_features[view].is_none() {
            self.fixed_features[view] = Some(self.fcn.fcn_forward(Stream::Fixed, &self.fixed[view])?);
        }
        let moving = v.scale.apply(&render_drr(self.problem.volume, t, &v.geometry, self.problem.step_mm)?);
        let fm = self.fcn.fcn_forward(Stream::Moving, &moving)?;
        let ff = self.fixed_features[view].as_ref().expect("computed above");
        self.fcn.decode_dense(ff, &fm)
    }
}

impl AgentPolicy for NetworkPolicy<'_, '_> {
    fn dense(&mut self, view: usize, t: &RigidTransform) -> Result<Vec<AgentDecision>> {
        let pred = self.dense_outputs(view, t)?;
        let mask = ray_mask(self.problem, view, t)?;
        Ok(decisions_from_dense(self.problem.grid(view)?, &pred, Some(&mask)))
    }

    fn single(&mut self, view: usize, t: &RigidTransform, pixel: [usize; 2]) -> Result<AgentDecision> {
        let v = &self.problem.views[view];
        let r = self.problem.roi_size;
        let (x0, y0) = (pixel[0] - r / 2, pixel[1] - r / 2);
        let region = PixelRegion { x0, y0, width: r, height: r };
        let moving = render_drr_region(self.problem.volume, t, &v.geometry, self.problem.step_mm, region)?;
        let fixed = self.fixed[view].crop(y0, x0, r, r)?;
        let out = self.cnn.roi_forward(&fixed, &v.scale.apply(&moving))?;
        Ok(AgentDecision::from_rewards(pixel, &expand_rewards(&out)))
    }
}

/// Decisions from the true rewards, given the ground-truth pose.
pub struct OraclePolicy<'p, 'a> {
    problem: &'p RegistrationProblem<'a>,
    t_g: RigidTransform,
}

impl<'p, 'a> OraclePolicy<'p, 'a> {
    pub fn new(problem: &'p RegistrationProblem<'a>, t_g: RigidTransform) -> Self {
        Self { problem, t_g }
    }
}

impl AgentPolicy for OraclePolicy<'_, '_> {
    fn dense(&mut self, view: usize, t: &RigidTransform) -> Result<Vec<AgentDecision>> {
        let grid = self.problem.grid(view)?;
        let g = &self.problem.views[view].geometry;
        let map = RewardPrecompute::new(g, self.problem.volume, t, &self.t_g, grid)?.map_for_shift_mm([0.0, 0.0]);
        Ok(decisions_from_dense(grid, &map.to_tensor(), Some(map.mask())))
    }

    fn single(&mut self, view: usize, t: &RigidTransform, pixel: [usize; 2]) -> Result<AgentDecision> {
        let g = &self.problem.views[view].geometry;
        let e = agent_frame_for_pixel(g, self.problem.volume, t, [pixel[0] as f64, pixel[1] as f64])?
            .world_to_agent();
        Ok(AgentDecision::from_rewards(pixel, &action_rewards(t, &e, &self.t_g)?))
    }
}

/// One entry of a registration trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    /// View whose decision produced this pose; `None` for the initial pose
    /// and the refined pose.
    pub view: Option<usize>,
    pub pose: [f64; 16],
    pub distance_to_gt: Option<f64>,
    pub n_selected_agents: usize,
    pub mean_confidence: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub poses: Vec<RigidTransform>,
    /// Error that stopped the run early, if any.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn final_pose(&self) -> RigidTransform {
        *self.poses.last().expect("trajectory holds the initial pose")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.steps)?)
    }
}

/// Distance to the ground truth measured in the centre-agent frame of view 0
/// traced at the ground truth.
pub fn distance_to_truth(problem: &RegistrationProblem, t: &RigidTransform, t_g: &RigidTransform) -> Result<f64> {
    let e = problem.center_frame(0, t_g)?;
    geodesic_distance(&e.compose(t), &e.compose(t_g))
}

/// Runs `cfg.steps` iterations; each iteration visits the views in order and
/// applies one motion per view in that view's centre-agent frame.
pub fn register(
    problem: &RegistrationProblem,
    policy: &mut dyn AgentPolicy,
    t_init: &RigidTransform,
    t_g: Option<&RigidTransform>,
    cfg: &RegistrationRunConfig,
) -> Trajectory {
    let mut traj = Trajectory::default();
    if let Err(e) = run_steps(problem, policy, t_init, t_g, cfg, &mut traj) {
        traj.aborted = Some(e.to_string());
    }
    traj
}

fn push_step(
    traj: &mut Trajectory,
    problem: &RegistrationProblem,
    t_g: Option<&RigidTransform>,
    t: RigidTransform,
    step: usize,
    view: Option<usize>,
    selected: &[AgentDecision],
) -> Result<()> {
    let distance_to_gt = t_g.map(|g| distance_to_truth(problem, &t, g)).transpose()?;
    let mean_confidence = (!selected.is_empty())
        .then(|| selected.iter().map(|d| d.confidence).sum::<f64>() / selected.len() as f64);
    traj.steps.push(TrajectoryStep {
        step,
        view,
        pose: t.to_row_major(),
        distance_to_gt,
        n_selected_agents: selected.len(),
        mean_confidence,
    });
    traj.poses.push(t);
    Ok(())
}

fn run_steps(
    problem: &RegistrationProblem,
    policy: &mut dyn AgentPolicy,
    t_init: &RigidTransform,
    t_g: Option<&RigidTransform>,
    cfg: &RegistrationRunConfig,
    traj: &mut Trajectory,
) -> Result<()> {
    cfg.validate()?;
    if problem.views.is_empty() || problem.views.len() > 2 {
        return Err(Error::InvalidParameter("one or two views are supported".into()));
    }
    let mut t = *t_init;
    push_step(traj, problem, t_g, t, 0, None, &[])?;
    let mut applied = 0;
    for step in 1..=cfg.steps {
        for view in 0..problem.views.len() {
            let frame = problem.center_frame(view, &t)?;
            let (motion, selected) = match cfg.mode {
                RegistrationMode::AgtS => {
                    let d = policy.single(view, &t, problem.center_agent(view)?)?;
                    (d.action.transform(), vec![d])
                }
                RegistrationMode::AgtM | RegistrationMode::AgtMOpt => {
                    let all = policy.dense(view, &t)?;
                    let sel = select_agents(&all, cfg.confidence_threshold, cfg.fallback_fraction);
                    (aggregate_actions(&sel)?, sel)
                }
            };
            t = apply_motion(&t, &motion, &frame);
            applied += 1;
            if applied % cfg.renormalize_every == 0 {
                t = t.renormalized();
            }
            push_step(traj, problem, t_g, t, step, Some(view), &selected)?;
        }
    }
    if cfg.mode == RegistrationMode::AgtMOpt {
        let refined = refine_local(problem.volume, &problem.fixed_images(), &t, &problem.geometries(), cfg)?;
        push_step(traj, problem, t_g, refined, cfg.steps + 1, None, &[])?;
    }
    Ok(())
}

/// Local maximisation of summed gradient correlation around `t`, over the
/// six pose parameters in the centre-agent frame of the first view. Never
/// returns a pose scoring below `t`.
pub fn refine_local(
    volume: &Volume3D,
    fixed: &[Image2D],
    t: &RigidTransform,
    geometries: &[CameraGeometry],
    cfg: &RegistrationRunConfig,
) -> Result<RigidTransform> {
    let objective = GcObjective::new(volume, fixed, geometries, &cfg.similarity)?;
    let g = &geometries[0];
    let frame = match agent_frame_for_pixel(g, volume, t, g.center_pixel()) {
        Ok(f) => f,
        Err(Error::AgentOriginUndefined { .. }) => AgentFrame::at_point(g, t.transform_point(&volume.center())),
        Err(e) => return Err(e),
    };
    Ok(coordinate_descent(&objective, t, &frame.world_to_agent(), &cfg.refine)?.0)
}

/// Confidence of each decision placed at its agent's grid position. Agents
/// without a decision take the lowest confidence present.
pub fn confidence_map_image(decisions: &[AgentDecision], grid: AgentGrid, pixel_spacing: [f64; 2]) -> Result<Image2D> {
    if decisions.is_empty() {
        return Err(Error::Empty("decisions"));
    }
    let floor = decisions.iter().map(|d| d.confidence).fold(f64::INFINITY, f64::min);
    let [w, h] = grid.dims;
    let mut img = Image2D::new([w, h], pixel_spacing, vec![floor; w * h])?;
    for d in decisions {
        let x = d.pixel[0].checked_sub(grid.origin_px[0]);
        let y = d.pixel[1].checked_sub(grid.origin_px[1]);
        if let (Some(x), Some(y)) = (x, y) {
            if x < w && y < h {
                img.set(x, y, d.confidence);
            }
        }
    }
    Ok(img)
}

/// `(confidence, correct)` for every scored agent of the evaluation set:
/// agents that see data and have some positive true reward.
pub fn confidence_samples(net: &PolicyNetwork, eval: &EvalSet) -> Result<Vec<(f64, bool)>> {
    let fcn = net.to_dilated_fcn();
    let mut out = Vec::new();
    for p in &eval.pairs {
        let ff = fcn.fcn_forward(Stream::Fixed, &p.fixed)?;
        let fm = fcn.fcn_forward(Stream::Moving, &p.moving)?;
        for (shift, map) in &p.maps {
            let pred = fcn.decode_dense(&ff, &crate::nn::shift_feature_map(&fm, *shift)?)?;
            let [w, h] = map.dims();
            for y in 0..h {
                for x in 0..w {
                    if !crate::nn::tensor::shifted_pixel_valid(h, w, *shift, y, x) {
                        continue;
                    }
                    let Some(truth) = map.get(x, y) else { continue };
                    if truth.iter().all(|r| *r <= 0.0) {
                        continue;
                    }
                    let d = AgentDecision::from_rewards([x, y], &expand_rewards(&pred.pixel(y, x)));
                    out.push((d.confidence, truth[d.action.index()] > 0.0));
                }
            }
        }
    }
    Ok(out)
}

/// Lowest threshold whose selected agents (confidence strictly above it)
/// are correct at rate `target` or better; `None` if no threshold is.
pub fn calibrate_threshold(samples: &[(f64, bool)], target: f64) -> Option<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut correct = 0usize;
    let mut best = None;
    for (k, (c, ok)) in sorted.iter().enumerate() {
        correct += usize::from(*ok);
        let next = sorted.get(k + 1).map(|s| s.0);
        // Only cut between distinct confidences.
        if next.is_some_and(|n| n == *c) {
            continue;
        }
        if correct as f64 / (k + 1) as f64 >= target {
            best = Some(next.map_or(f64::NEG_INFINITY, |n| 0.5 * (n + c)));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{chordal_objective, se3_exp, Se3Vector};
    use nalgebra::Vector3;

    fn decision(x: usize, y: usize, c: f64, a: usize) -> AgentDecision {
        AgentDecision { pixel: [x, y], confidence: c, action: ActionSpec::from_index(a) }
    }

    #[test]
    fn selection_rules() {
        let ds: Vec<_> = (0..20).map(|i| decision(i, 0, 1.0 + i as f64, 0)).collect();
        assert_eq!(select_agents(&ds, 0.67, 0.1).len(), 20);
        let low: Vec<_> = (0..20).map(|i| decision(i, 0, -1.0 - i as f64, 0)).collect();
        let sel = select_agents(&low, 0.67, 0.1);
        assert_eq!(sel.len(), 2);
        assert_eq!(sel.iter().map(|d| d.pixel[0]).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(select_agents(&low, f64::NEG_INFINITY, 0.1).len(), 20);
        let mut rev = low.clone();
        rev.reverse();
        assert_eq!(select_agents(&rev, 0.67, 0.1), sel);
    }

    #[test]
    fn selection_ties_break_by_pixel_order() {
        let ds = vec![decision(3, 1, 0.5, 0), decision(1, 1, 0.5, 0), decision(2, 0, 0.5, 0)];
        let sel = select_agents(&ds, 1.0, 0.5);
        assert_eq!(sel.iter().map(|d| d.pixel).collect::<Vec<_>>(), vec![[2, 0], [1, 1]]);
    }

    #[test]
    fn aggregation_examples() {
        let agree: Vec<_> = (0..5).map(|i| decision(i, 0, 1.0, 0)).collect();
        let a = aggregate_actions(&agree).unwrap();
        assert!((a.matrix() - ActionSpec::from_index(0).transform().matrix()).abs().max() < 1e-12);
        let split: Vec<_> = (0..6).map(|i| decision(i, 0, 1.0, 10 + i % 2)).collect();
        let b = aggregate_actions(&split).unwrap();
        assert!((b.matrix() - RigidTransform::identity().matrix()).abs().max() < 1e-9);
        let mixed = vec![decision(0, 0, 1.0, 0), decision(1, 0, 1.0, 0), decision(2, 0, 1.0, 0), decision(3, 0, 1.0, 2)];
        let m = aggregate_actions(&mixed).unwrap();
        assert!((m.translation_part() - Vector3::new(0.75, 0.25, 0.0)).norm() < 1e-12);
        let ts: Vec<_> = mixed.iter().map(|d| d.action.transform()).collect();
        let f = chordal_objective(&ts, &m);
        for i in 0..6 {
            for s in [-1e-3, 1e-3] {
                let mut v = [0.0; 6];
                v[i] = s;
                let p = se3_exp(&Se3Vector::from_array(v)).unwrap().compose(&m);
                assert!(chordal_objective(&ts, &p) >= f - 1e-12);
            }
        }
        assert!(aggregate_actions(&[]).is_err());
    }

    #[test]
    fn confidence_map_shape_and_constant() {
        let grid = AgentGrid { origin_px: [30, 30], dims: [4, 3] };
        let ds: Vec<_> = (0..12).map(|p| decision(30 + p % 4, 30 + p / 4, 0.25, 0)).collect();
        let img = confidence_map_image(&ds, grid, [1.5, 1.5]).unwrap();
        assert_eq!(img.dims(), [4, 3]);
        assert!(img.data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn calibration_finds_precise_cut() {
        let mut s: Vec<(f64, bool)> = (0..100).map(|i| (i as f64, i >= 50)).collect();
        s.push((-1.0, false));
        let t = calibrate_threshold(&s, 0.95).unwrap();
        let sel: Vec<_> = s.iter().filter(|x| x.0 > t).collect();
        let prec = sel.iter().filter(|x| x.1).count() as f64 / sel.len() as f64;
        assert!(prec >= 0.95);
        assert!(sel.len() >= 50);
        assert!(calibrate_threshold(&[(1.0, false)], 0.95).is_none());
    }
}
