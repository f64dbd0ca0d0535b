//! The registration decision process: twelve unit moves along the se(3)
//! generators, the distance-reduction reward and dense ground-truth reward
//! maps.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tensor, ACTION_COUNT};
use crate::phantom::Volume3D;
use crate::projection::{agent_frame_for_pixel, AgentFrame, CameraGeometry};
use crate::se3::{left_jacobian_inverse, se3_exp, se3_log, RigidTransform, Se3Vector, DEG_PER_RAD};

pub const TRANSLATION_STEP_MM: f64 = 1.0;
pub const ROTATION_STEP_RAD: f64 = PI / 180.0;
/// Steps per registration episode.
pub const EPISODE_STEPS: usize = 50;

/// A signed unit move along one generator (1..=6; 1..3 translate, 4..6
/// rotate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    pub generator_index: u8,
    pub sign: i8,
}

impl ActionSpec {
    /// Canonical ordering `+G1, -G1, +G2, -G2, ..., +G6, -G6`.
    pub fn from_index(i: usize) -> Self {
        assert!(i < ACTION_COUNT, "action index {i} out of range");
        Self { generator_index: (i / 2 + 1) as u8, sign: if i.is_multiple_of(2) { 1 } else { -1 } }
    }

    pub fn index(&self) -> usize {
        2 * (self.generator_index as usize - 1) + usize::from(self.sign < 0)
    }

    pub fn step(&self) -> f64 {
        if self.generator_index <= 3 {
            TRANSLATION_STEP_MM
        } else {
            ROTATION_STEP_RAD
        }
    }

    pub fn tangent(&self) -> Se3Vector {
        Se3Vector::basis(self.generator_index as usize - 1).scale(self.sign as f64 * self.step())
    }

    /// `exp(sign * step * G_i)`.
    pub fn transform(&self) -> RigidTransform {
        se3_exp(&self.tangent()).expect("unit actions are finite")
    }

    pub fn opposite(&self) -> Self {
        Self { sign: -self.sign, ..*self }
    }

    pub fn label(&self) -> String {
        format!("{}G{}", if self.sign > 0 { '+' } else { '-' }, self.generator_index)
    }
}

pub fn action_space() -> [ActionSpec; ACTION_COUNT] {
    std::array::from_fn(ActionSpec::from_index)
}

/// Index of the largest reward; ties go to the lowest index.
pub fn argmax_action(rewards: &[f64; ACTION_COUNT]) -> usize {
    let mut best = 0;
    for i in 1..ACTION_COUNT {
        if rewards[i] > rewards[best] {
            best = i;
        }
    }
    best
}

/// State of one registration episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationState {
    pub t_current: RigidTransform,
    pub t_ground_truth: Option<RigidTransform>,
    pub frame: AgentFrame,
    pub step_index: usize,
}

/// `e^-1 exp(A) e t`: the move `a` expressed in the frame `e`.
pub fn apply_action(t: &RigidTransform, a: &ActionSpec, e: &RigidTransform) -> RigidTransform {
    apply_motion(t, &a.transform(), e)
}

/// `e^-1 m e t` for an arbitrary rigid motion `m`.
pub fn apply_motion(t: &RigidTransform, m: &RigidTransform, e: &RigidTransform) -> RigidTransform {
    e.inverse().compose(m).compose(e).compose(t)
}

/// Reduction of the geodesic distance to `t_g`, measured in frame `e`,
/// achieved by taking action `a` at `t`.
pub fn reward(
    t: &RigidTransform,
    a: &ActionSpec,
    e: &RigidTransform,
    t_g: &RigidTransform,
) -> Result<f64> {
    let target = e.compose(t_g);
    let before = crate::se3::geodesic_distance(&e.compose(t), &target)?;
    let after = crate::se3::geodesic_distance(&e.compose(&apply_action(t, a, e)), &target)?;
    Ok(before - after)
}

/// Rewards of all twelve actions through the relative motion
/// `M = e t t_g^-1 e^-1`: `R_A = |log M| - |log(exp(A) M)|`.
pub fn action_rewards(
    t: &RigidTransform,
    e: &RigidTransform,
    t_g: &RigidTransform,
) -> Result<[f64; ACTION_COUNT]> {
    let m = e.compose(t).compose(&t_g.inverse()).compose(&e.inverse());
    let before = se3_log(&m)?.distance_norm();
    let mut out = [0.0; ACTION_COUNT];
    for (i, a) in action_space().iter().enumerate() {
        out[i] = before - se3_log(&a.transform().compose(&m))?.distance_norm();
    }
    Ok(out)
}

/// The action with the largest true reward.
pub fn greedy_oracle_policy(
    t: &RigidTransform,
    e: &RigidTransform,
    t_g: &RigidTransform,
) -> Result<ActionSpec> {
    Ok(ActionSpec::from_index(argmax_action(&action_rewards(t, e, t_g)?)))
}

/// Agent pixels covered by a dense map: map pixel `(x, y)` is the agent
/// whose ROI is centred on image pixel `origin_px + (x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentGrid {
    pub origin_px: [usize; 2],
    pub dims: [usize; 2],
}

impl AgentGrid {
    /// Centres of all `roi_size` windows that fit inside the image.
    pub fn for_image(image_dims: [usize; 2], roi_size: usize) -> Result<Self> {
        if image_dims[0] < roi_size || image_dims[1] < roi_size || roi_size.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "image {image_dims:?} cannot hold odd ROI {roi_size}"
            )));
        }
        let half = roi_size / 2;
        Ok(Self {
            origin_px: [half, half],
            dims: [image_dims[0] - roi_size + 1, image_dims[1] - roi_size + 1],
        })
    }

    /// Grid index of the agent nearest the image centre.
    pub fn center(&self) -> [usize; 2] {
        [self.dims[0] / 2, self.dims[1] / 2]
    }

    pub fn pixel_of(&self, ix: usize, iy: usize) -> [usize; 2] {
        [self.origin_px[0] + ix, self.origin_px[1] + iy]
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense per-agent action rewards, stored as twelve `h x w` planes in
/// canonical action order, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMap {
    grid: AgentGrid,
    rewards: Vec<f64>,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RewardMapHeader {
    dims: [usize; 2],
    origin_px: [usize; 2],
    action_order: Vec<String>,
    mask_bits: String,
}

impl RewardMap {
    pub fn new(grid: AgentGrid, rewards: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = grid.len();
        if rewards.len() != ACTION_COUNT * n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rewards and {n} mask entries", ACTION_COUNT * n),
                actual: format!("{} and {}", rewards.len(), mask.len()),
            });
        }
        if rewards.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward map"));
        }
        Ok(Self { grid, rewards, mask })
    }

    pub fn grid(&self) -> AgentGrid {
        self.grid
    }

    pub fn dims(&self) -> [usize; 2] {
        self.grid.dims
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_valid(&self, ix: usize, iy: usize) -> bool {
        self.mask[iy * self.grid.dims[0] + ix]
    }

    pub fn valid_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }

    /// Rewards at grid pixel `(ix, iy)`, or `None` where masked.
    pub fn get(&self, ix: usize, iy: usize) -> Option<[f64; ACTION_COUNT]> {
        let p = iy * self.grid.dims[0] + ix;
        if !self.mask[p] {
            return None;
        }
        let plane = self.grid.len();
        Some(std::array::from_fn(|a| self.rewards[a * plane + p]))
    }

    /// `12 x h x w` tensor (masked pixels hold zero).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([ACTION_COUNT, self.grid.dims[1], self.grid.dims[0]], self.rewards.clone())
            .expect("reward map is finite")
    }

    /// Little-endian f32 planes plus a JSON sidecar holding dims, action
    /// order and the mask as a hex bitset (bit `i` of the stream is pixel
    /// `i`, least significant bit first).
    pub fn save(&self, raw_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(raw_path)?);
        for v in &self.rewards {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        let mut bytes = vec![0u8; self.mask.len().div_ceil(8)];
        for (i, m) in self.mask.iter().enumerate() {
            if *m {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        let header = RewardMapHeader {
            dims: self.grid.dims,
            origin_px: self.grid.origin_px,
            action_order: action_space().iter().map(ActionSpec::label).collect(),
            mask_bits: bytes.iter().map(|b| format!("{b:02x}")).collect(),
        };
        fs::write(raw_path.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(raw_path: &Path) -> Result<Self> {
        let header: RewardMapHeader =
            serde_json::from_str(&fs::read_to_string(raw_path.with_extension("json"))?)?;
        let grid = AgentGrid { origin_px: header.origin_px, dims: header.dims };
        let bytes = fs::read(raw_path)?;
        let rewards = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let hex = header.mask_bits.as_bytes();
        let mask = (0..grid.len())
            .map(|i| {
                let byte = hex
                    .get(2 * (i / 8)..2 * (i / 8) + 2)
                    .and_then(|h| std::str::from_utf8(h).ok())
                    .and_then(|h| u8::from_str_radix(h, 16).ok())
                    .ok_or_else(|| Error::InvalidParameter("malformed mask bitset".into()))?;
                Ok(byte & (1 << (i % 8)) != 0)
            })
            .collect::<Result<_>>()?;
        Self::new(grid, rewards, mask)
    }
}

/// `|log(Tr(d) X)|` for a fixed `X`, as a function of the translation `d`:
/// the rotation part of the log is unaffected and the translation part is
/// `u + V^-1(w) R_pre d`.
#[derive(Debug, Clone, Copy)]
struct LogTerm {
    u: Vector3<f64>,
    rot_energy: f64,
    k: Matrix3<f64>,
}

impl LogTerm {
    fn new(x: &RigidTransform, r_pre: &Matrix3<f64>) -> Result<Self> {
        let l = se3_log(x)?;
        let w_deg = l.w * DEG_PER_RAD;
        Ok(Self {
            u: l.t,
            rot_energy: 2.0 * w_deg.norm_squared(),
            k: left_jacobian_inverse(&l.w) * r_pre,
        })
    }

    fn distance(&self, d: &Vector3<f64>) -> f64 {
        (self.rot_energy + (self.u + self.k * d).norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone)]
struct PixelTerms {
    mm_per_px: [f64; 2],
    before: LogTerm,
    after: [LogTerm; ACTION_COUNT],
}

impl PixelTerms {
    fn rewards(&self, d: &Vector3<f64>) -> [f64; ACTION_COUNT] {
        let before = self.before.distance(d);
        std::array::from_fn(|a| before - self.after[a].distance(d))
    }
}

/// Per-agent logarithms of `M_i = F_i t t_g^-1 F_i^-1` and of `exp(A) M_i`
/// for one `(t, t_g)` pair. An in-plane translation `d` of the volume (in
/// agent axes) turns `M_i` into `Tr(d) M_i` and `exp(A) M_i` into
/// `Tr(R_A d) exp(A) M_i`, so shifted maps reuse these logs exactly.
#[derive(Debug, Clone)]
pub struct RewardPrecompute {
    grid: AgentGrid,
    pixels: Vec<Option<PixelTerms>>,
}

impl RewardPrecompute {
    /// Agent frames are traced at pose `t`.
    pub fn new(
        g: &CameraGeometry,
        v: &Volume3D,
        t: &RigidTransform,
        t_g: &RigidTransform,
        grid: AgentGrid,
    ) -> Result<Self> {
        Self::build_terms(g, v, t, t_g, grid, |_| true)
    }

    /// Like [`RewardPrecompute::new`] but only for the listed grid pixels;
    /// all others are left masked.
    pub fn for_agents(
        g: &CameraGeometry,
        v: &Volume3D,
        t: &RigidTransform,
        t_g: &RigidTransform,
        grid: AgentGrid,
        agents: &[[usize; 2]],
    ) -> Result<Self> {
        let w = grid.dims[0];
        Self::build_terms(g, v, t, t_g, grid, |p| agents.contains(&[p % w, p / w]))
    }

    fn build_terms(
        g: &CameraGeometry,
        v: &Volume3D,
        t: &RigidTransform,
        t_g: &RigidTransform,
        grid: AgentGrid,
        include: impl Fn(usize) -> bool + Sync,
    ) -> Result<Self> {
        let rel = t.compose(&t_g.inverse());
        let actions: Vec<(RigidTransform, Matrix3<f64>)> =
            action_space().iter().map(|a| (a.transform(), a.transform().rotation_block())).collect();
        let pixels = (0..grid.len())
            .into_par_iter()
            .map(|p| {
                if !include(p) {
                    return Ok(None);
                }
                let [px, py] = grid.pixel_of(p % grid.dims[0], p / grid.dims[0]);
                let frame = match agent_frame_for_pixel(g, v, t, [px as f64, py as f64]) {
                    Ok(f) => f,
                    Err(Error::AgentOriginUndefined { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let f = frame.world_to_agent();
                let m = f.compose(&rel).compose(&f.inverse());
                let mag = g.magnification_at(&frame.origin_3d);
                let before = LogTerm::new(&m, &Matrix3::identity())?;
                let mut after = [before; ACTION_COUNT];
                for (slot, (ta, ra)) in after.iter_mut().zip(&actions) {
                    *slot = LogTerm::new(&ta.compose(&m), ra)?;
                }
                Ok(Some(PixelTerms {
                    mm_per_px: [g.pixel_spacing[0] / mag, g.pixel_spacing[1] / mag],
                    before,
                    after,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, pixels })
    }

    pub fn grid(&self) -> AgentGrid {
        self.grid
    }

    /// In-plane millimetres per image pixel at each agent's depth.
    pub fn mm_per_px(&self, ix: usize, iy: usize) -> Option<[f64; 2]> {
        self.pixels[iy * self.grid.dims[0] + ix].as_ref().map(|p| p.mm_per_px)
    }

    /// Rewards at one agent for an in-plane volume translation `shift_mm`
    /// (agent x and y axes).
    pub fn rewards_at(&self, ix: usize, iy: usize, shift_mm: [f64; 2]) -> Option<[f64; ACTION_COUNT]> {
        self.pixels[iy * self.grid.dims[0] + ix]
            .as_ref()
            .map(|p| p.rewards(&Vector3::new(shift_mm[0], shift_mm[1], 0.0)))
    }

    /// Rewards at one agent when the moving image content is shifted by
    /// `shift_px` pixels; converted to millimetres at the agent's depth.
    pub fn rewards_at_px(&self, ix: usize, iy: usize, shift_px: [i64; 2]) -> Option<[f64; ACTION_COUNT]> {
        let p = self.pixels[iy * self.grid.dims[0] + ix].as_ref()?;
        let d = Vector3::new(
            shift_px[0] as f64 * p.mm_per_px[0],
            shift_px[1] as f64 * p.mm_per_px[1],
            0.0,
        );
        Some(p.rewards(&d))
    }

    fn build(&self, f: impl Fn(usize, usize) -> Option<[f64; ACTION_COUNT]> + Sync) -> RewardMap {
        let n = self.grid.len();
        let w = self.grid.dims[0];
        let per_pixel: Vec<Option<[f64; ACTION_COUNT]>> =
            (0..n).into_par_iter().map(|p| f(p % w, p / w)).collect();
        let mut rewards = vec![0.0; ACTION_COUNT * n];
        let mut mask = vec![false; n];
        for (p, r) in per_pixel.iter().enumerate() {
            if let Some(r) = r {
                mask[p] = true;
                for a in 0..ACTION_COUNT {
                    rewards[a * n + p] = r[a];
                }
            }
        }
        RewardMap { grid: self.grid, rewards, mask }
    }

    /// Map for a uniform in-plane volume translation of `shift_mm`.
    pub fn map_for_shift_mm(&self, shift_mm: [f64; 2]) -> RewardMap {
        self.build(|x, y| self.rewards_at(x, y, shift_mm))
    }

    /// Map for a moving-image shift of `shift_px` pixels.
    pub fn map_for_shift_px(&self, shift_px: [i64; 2]) -> RewardMap {
        self.build(|x, y| self.rewards_at_px(x, y, shift_px))
    }
}

/// Dense ground-truth rewards for all agents whose `roi_size` ROI fits in
/// the image, for the volume at `t` translated in-plane by `shift_mm`.
pub fn ground_truth_reward_map(
    g: &CameraGeometry,
    v: &Volume3D,
    t: &RigidTransform,
    t_g: &RigidTransform,
    shift_mm: [f64; 2],
    roi_size: usize,
) -> Result<RewardMap> {
    let grid = AgentGrid::for_image(g.image_dims, roi_size)?;
    Ok(RewardPrecompute::new(g, v, t, t_g, grid)?.map_for_shift_mm(shift_mm))
}
