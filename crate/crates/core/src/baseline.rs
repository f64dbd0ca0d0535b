//! Intensity-based registration: gradient correlation between the X-ray and
//! the DRR, an annealed random search and a bounded coordinate descent.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Volume3D;
use crate::projection::{render_drr, CameraGeometry, Image2D};
use crate::se3::{se3_exp, RigidTransform, Se3Vector};

/// Gradient correlation with a flag for the degenerate case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityValue {
    pub value: f64,
    /// Set when an axis had zero gradient variance in either image and was
    /// scored 0.
    pub degenerate: bool,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let floor = 1e-12 * n;
    (saa > floor && sbb > floor).then(|| (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Central differences over interior pixels: `(d/dx, d/dy)`.
fn gradients(img: &Image2D) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = Vec::new();
    let mut gy = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            gx.push(0.5 * (img.get(x + 1, y) - img.get(x - 1, y)));
            gy.push(0.5 * (img.get(x, y + 1) - img.get(x, y - 1)));
        }
    }
    (gx, gy)
}

/// Mean of the Pearson correlations of the x-gradients and of the
/// y-gradients. An axis whose gradients are constant in either image
/// contributes 0.
pub fn gradient_correlation(a: &Image2D, b: &Image2D) -> Result<SimilarityValue> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dims()),
            actual: format!("{:?}", b.dims()),
        });
    }
    if a.width() < 3 || a.height() < 3 {
        return Err(Error::InvalidParameter("images need at least 3x3 pixels".into()));
    }
    let (ax, ay) = gradients(a);
    let (bx, by) = gradients(b);
    let cx = pearson(&ax, &bx);
    let cy = pearson(&ay, &by);
    Ok(SimilarityValue {
        value: 0.5 * (cx.unwrap_or(0.0) + cy.unwrap_or(0.0)),
        degenerate: cx.is_none() || cy.is_none(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityConfig {
    /// Images are compared on every `downsample`-th pixel.
    pub downsample: usize,
    pub step_mm: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { downsample: 2, step_mm: 2.0 }
    }
}

/// Summed gradient correlation over views between the fixed images and
/// DRRs of the volume at a candidate pose.
pub struct GcObjective<'a> {
    volume: &'a Volume3D,
    views: Vec<(CameraGeometry, Image2D)>,
    step_mm: f64,
}

impl<'a> GcObjective<'a> {
    pub fn new(
        volume: &'a Volume3D,
        fixed: &[Image2D],
        geometries: &[CameraGeometry],
        cfg: &SimilarityConfig,
    ) -> Result<Self> {
        if fixed.len() != geometries.len() || fixed.is_empty() {
            return Err(Error::InvalidParameter("need one fixed image per view".into()));
        }
        let k = cfg.downsample.max(1);
        let views = fixed
            .iter()
            .zip(geometries)
            .map(|(img, g)| {
                let spacing = [g.pixel_spacing[0] * k as f64, g.pixel_spacing[1] * k as f64];
                let coarse = g.resampled(spacing)?;
                let [w, h] = coarse.image_dims;
                let data = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (x, y)))
                    .map(|(x, y)| img.get(x * k, y * k))
                    .collect();
                Ok((coarse, Image2D::new([w, h], spacing, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { volume, views, step_mm: cfg.step_mm })
    }

    pub fn value(&self, t: &RigidTransform) -> Result<f64> {
        let mut sum = 0.0;
        for (g, fixed) in &self.views {
            let drr = render_drr(self.volume, t, g, self.step_mm)?;
            sum += gradient_correlation(fixed, &drr)?.value;
        }
        Ok(sum)
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }
}

/// One line of the optimizer trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub eval_index: usize,
    pub pose: [f64; 16],
    pub gc_value: f64,
}

fn perturbed(t: &RigidTransform, frame: &RigidTransform, delta: &Se3Vector) -> Result<RigidTransform> {
    Ok(frame.inverse().compose(&se3_exp(delta)?).compose(frame).compose(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Candidate poses evaluated, excluding the start pose.
    pub evaluations: usize,
    /// Candidates drawn around the incumbent per iteration.
    pub population: usize,
    /// Annealing rounds; each restarts the step size at its maximum.
    pub restarts: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { evaluations: 400, population: 8, restarts: 2, sigma_start: 5.0, sigma_end: 0.5, seed: 0 }
    }
}

/// Elitist random search: Gaussian perturbations in the frame `frame`,
/// with standard deviation (mm and degrees alike) decaying geometrically
/// from `sigma_start` to `sigma_end` within each round. Returns the best
/// pose and its objective value.
pub fn optimize_registration(
    objective: &GcObjective,
    t_init: &RigidTransform,
    frame: &RigidTransform,
    cfg: &SearchConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<(RigidTransform, f64)> {
    if cfg.evaluations == 0 || cfg.population == 0 || cfg.restarts == 0 {
        return Err(Error::InvalidParameter("search budget must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = *t_init;
    let mut best_value = objective.value(&best)?;
    let mut emit = |i: usize, t: &RigidTransform, v: f64| -> Result<()> {
        if let Some(w) = trace.as_mut() {
            let r = TraceRecord { eval_index: i, pose: t.to_row_major(), gc_value: v };
            writeln!(w, "{}", serde_json::to_string(&r)?)?;
        }
        Ok(())
    };
    emit(0, &best, best_value)?;
    let per_round = cfg.evaluations.div_ceil(cfg.restarts);
    let mut used = 0;
    while used < cfg.evaluations {
        let in_round = used % per_round;
        let frac = if per_round > 1 { in_round as f64 / (per_round - 1) as f64 } else { 0.0 };
        let sigma = cfg.sigma_start * (cfg.sigma_end / cfg.sigma_start).powf(frac);
        let mut round_best: Option<(RigidTransform, f64)> = None;
        for _ in 0..cfg.population.min(cfg.evaluations - used) {
            let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
            let t = nalgebra::Vector3::new(draw(), draw(), draw()) * sigma;
            let w = nalgebra::Vector3::new(draw(), draw(), draw()) * sigma.to_radians();
            let candidate = perturbed(&best, frame, &Se3Vector::new(t, w))?;
            let v = objective.value(&candidate)?;
            used += 1;
            emit(used, &candidate, v)?;
            if round_best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                round_best = Some((candidate, v));
            }
        }
        if let Some((t, v)) = round_best {
            if v > best_value {
                best = t;
                best_value = v;
            }
        }
    }
    Ok((best, best_value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentConfig {
    pub initial_step_mm: f64,
    pub initial_step_deg: f64,
    pub shrink: f64,
    pub shrinks: usize,
    pub bound_mm: f64,
    pub bound_deg: f64,
    /// Sweeps allowed at one step size before shrinking anyway.
    pub max_sweeps_per_level: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            initial_step_mm: 2.0,
            initial_step_deg: 2.0,
            shrink: 0.5,
            shrinks: 4,
            bound_mm: 5.0,
            bound_deg: 5.0,
            max_sweeps_per_level: 10,
        }
    }
}

/// Maximises the objective over the six pose parameters
/// `t = frame^-1 exp(delta) frame t0`, one coordinate at a time, keeping
/// `delta` within the bounds. Moves are accepted only if they strictly
/// improve the objective. Returns the pose and the objective history
/// (one value per accepted move, starting with `t0`'s).
pub fn coordinate_descent(
    objective: &GcObjective,
    t0: &RigidTransform,
    frame: &RigidTransform,
    cfg: &DescentConfig,
) -> Result<(RigidTransform, Vec<f64>)> {
    let mut delta = [0.0f64; 6];
    let pose = |d: &[f64; 6]| {
        perturbed(t0, frame, &Se3Vector::from_array([d[0], d[1], d[2], d[3], d[4], d[5]]))
    };
    let mut value = objective.value(t0)?;
    let mut history = vec![value];
    let mut step = [cfg.initial_step_mm, cfg.initial_step_deg.to_radians()];
    let bound = [cfg.bound_mm, cfg.bound_deg.to_radians()];
    for _level in 0..=cfg.shrinks {
        for _ in 0..cfg.max_sweeps_per_level {
            let mut improved = false;
            for i in 0..6 {
                let class = usize::from(i >= 3);
                for sign in [1.0, -1.0] {
                    let mut trial = delta;
                    trial[i] = (trial[i] + sign * step[class]).clamp(-bound[class], bound[class]);
                    if trial[i] == delta[i] {
                        continue;
                    }
                    let v = objective.value(&pose(&trial)?)?;
                    if v > value {
                        delta = trial;
                        value = v;
                        history.push(v);
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        step = step.map(|s| s * cfg.shrink);
    }
    Ok((pose(&delta)?, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, DatasetParams};
    use crate::projection::agent_frame_for_pixel;
    use nalgebra::Vector3;
    use rand::Rng;

    fn random_image(seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::new([20, 15], [1.0, 1.0], (0..300).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn gc_examples() {
        let a = random_image(1);
        assert!((gradient_correlation(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
        let b = a.map(|v| 2.0 * v + 5.0);
        assert!((gradient_correlation(&a, &b).unwrap().value - 1.0).abs() < 1e-12);
        let c = a.map(|_| 3.0);
        let s = gradient_correlation(&a, &c).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.degenerate);
        let d = random_image(2);
        let ab = gradient_correlation(&a, &d).unwrap().value;
        let ba = gradient_correlation(&d, &a).unwrap().value;
        assert!((ab - ba).abs() < 1e-12);
        assert!(gradient_correlation(&a, &Image2D::zeros([3, 3], [1.0, 1.0])).is_err());
    }

    fn problem() -> (Dataset, Vec<Image2D>, RigidTransform) {
        let mut p = DatasetParams::default();
        p.phantom.noise_sigma = 0.0;
        p.geometry.image_dims = [64, 64];
        p.geometry.pixel_spacing = [3.0, 3.0];
        let d = Dataset::generate(&p, 1).unwrap();
        let t_g = RigidTransform::identity();
        let fixed = (0..2).map(|v| d.render(&d.volume, v, &t_g).unwrap()).collect();
        (d, fixed, t_g)
    }

    fn center_frame(d: &Dataset, t: &RigidTransform) -> RigidTransform {
        let g = &d.views[0].geometry;
        agent_frame_for_pixel(g, &d.volume, t, g.center_pixel()).unwrap().world_to_agent()
    }

    #[test]
    fn search_is_elitist_and_budget_one_picks_better() {
        let (d, fixed, t_g) = problem();
        let geoms: Vec<_> = d.views.iter().map(|v| v.geometry.clone()).collect();
        let obj = GcObjective::new(&d.volume, &fixed, &geoms, &SimilarityConfig::default()).unwrap();
        let start = RigidTransform::translation(Vector3::new(6.0, -4.0, 0.0)).compose(&t_g);
        let e = center_frame(&d, &start);
        let f0 = obj.value(&start).unwrap();
        let cfg = SearchConfig { evaluations: 1, population: 1, restarts: 1, seed: 3, ..Default::default() };
        let mut trace = Vec::new();
        let (t1, v1) = optimize_registration(&obj, &start, &e, &cfg, Some(&mut trace)).unwrap();
        let lines: Vec<TraceRecord> = String::from_utf8(trace)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        let best = lines.iter().map(|r| r.gc_value).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(v1, best);
        assert!(v1 >= f0);
        assert_eq!(t1 == start, lines[1].gc_value <= f0);
    }

    #[test]
    fn search_from_truth_stays_close() {
        let (d, fixed, t_g) = problem();
        let geoms: Vec<_> = d.views.iter().map(|v| v.geometry.clone()).collect();
        let obj = GcObjective::new(&d.volume, &fixed, &geoms, &SimilarityConfig::default()).unwrap();
        let e = center_frame(&d, &t_g);
        let cfg = SearchConfig { evaluations: 40, ..Default::default() };
        let (t, v) = optimize_registration(&obj, &t_g, &e, &cfg, None).unwrap();
        assert!(v >= obj.value(&t_g).unwrap());
        for p in d.landmarks.points() {
            assert!((t.transform_point(p) - t_g.transform_point(p)).norm() < 1.0);
        }
    }

    #[test]
    fn descent_is_monotone_and_improves_offset() {
        let (d, fixed, t_g) = problem();
        let geoms: Vec<_> = d.views.iter().map(|v| v.geometry.clone()).collect();
        let obj = GcObjective::new(&d.volume, &fixed, &geoms, &SimilarityConfig::default()).unwrap();
        let start = RigidTransform::translation(Vector3::new(2.0, 0.0, 0.0)).compose(&t_g);
        let e = center_frame(&d, &start);
        let (t, history) = coordinate_descent(&obj, &start, &e, &DescentConfig::default()).unwrap();
        assert!(history.windows(2).all(|w| w[1] > w[0]));
        let err = |x: &RigidTransform| {
            d.landmarks.points().iter().map(|p| (x.transform_point(p) - t_g.transform_point(p)).norm()).sum::<f64>()
        };
        assert!(err(&t) < err(&start));
    }
}
