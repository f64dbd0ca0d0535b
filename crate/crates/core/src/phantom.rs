//! Procedural spine-like phantoms.
//!
//! A phantom is a stack of rounded-box vertebral bodies along the volume's
//! y axis, each with an ellipsoidal posterior process, embedded in a uniform
//! background with optional Gaussian texture noise. Adjacent vertebrae look
//! alike, which is what makes the registration problem locally ambiguous.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense scalar volume. Voxel `(i, j, k)` is centred at
/// `origin + (i, j, k) * spacing` in volume coordinates (mm) and stored at
/// `i + dims[0] * (j + dims[1] * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
    data: Vec<f64>,
}

/// JSON sidecar written next to a raw volume file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Vector3<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidParameter("volume dims must be positive".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("volume spacing must be positive".into()));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume origin"));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} voxels"),
                actual: format!("{} voxels", data.len()),
            });
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "volume intensities must be finite and non-negative".into(),
            ));
        }
        Ok(Self { dims, spacing, origin, data })
    }

    /// Volume of zeros centred on the volume-coordinate origin.
    pub fn zeros_centered(dims: [usize; 3], spacing: Vector3<f64>) -> Result<Self> {
        let origin = -Vector3::new(
            (dims[0] as f64 - 1.0) * 0.5 * spacing[0],
            (dims[1] as f64 - 1.0) * 0.5 * spacing[1],
            (dims[2] as f64 - 1.0) * 0.5 * spacing[2],
        );
        Self::new(dims, spacing, origin, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vector3<f64> {
        self.spacing
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64).component_mul(&self.spacing)
    }

    /// Centre of the voxel grid.
    pub fn center(&self) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (self.dims[0] as f64 - 1.0) * 0.5,
                (self.dims[1] as f64 - 1.0) * 0.5,
                (self.dims[2] as f64 - 1.0) * 0.5,
            )
            .component_mul(&self.spacing)
    }

    /// Support of [`Volume3D::sample_trilinear`]: the voxel-centre extent
    /// grown by one voxel on every side. Outside it the volume reads as zero.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let lo = self.origin - self.spacing;
        let hi = self.origin
            + Vector3::new(
                self.dims[0] as f64,
                self.dims[1] as f64,
                self.dims[2] as f64,
            )
            .component_mul(&self.spacing);
        (lo, hi)
    }

    /// Trilinear interpolation between voxel centres. Neighbours outside the
    /// grid count as zero, so the result is continuous and vanishes more
    /// than one voxel outside the grid.
    pub fn sample_trilinear(&self, p: &Vector3<f64>) -> f64 {
        let fx = (p[0] - self.origin[0]) / self.spacing[0];
        let fy = (p[1] - self.origin[1]) / self.spacing[1];
        let fz = (p[2] - self.origin[2]) / self.spacing[2];
        self.sample_index(fx, fy, fz)
    }

    /// Trilinear sample at continuous voxel index `(fx, fy, fz)`.
    #[inline]
    pub fn sample_index(&self, fx: f64, fy: f64, fz: f64) -> f64 {
        let [nx, ny, nz] = self.dims;
        if !(fx > -1.0 && fy > -1.0 && fz > -1.0)
            || fx >= nx as f64
            || fy >= ny as f64
            || fz >= nz as f64
        {
            return 0.0;
        }
        let x0 = fx.floor();
        let y0 = fy.floor();
        let z0 = fz.floor();
        let (ax, ay, az) = (fx - x0, fy - y0, fz - z0);
        let (x0, y0, z0) = (x0 as isize, y0 as isize, z0 as isize);
        let interior = x0 >= 0
            && y0 >= 0
            && z0 >= 0
            && (x0 as usize) + 1 < nx
            && (y0 as usize) + 1 < ny
            && (z0 as usize) + 1 < nz;
        let d = &self.data;
        if interior {
            let base = x0 as usize + nx * (y0 as usize + ny * z0 as usize);
            let sy = nx;
            let sz = nx * ny;
            let c000 = d[base];
            let c100 = d[base + 1];
            let c010 = d[base + sy];
            let c110 = d[base + sy + 1];
            let c001 = d[base + sz];
            let c101 = d[base + sz + 1];
            let c011 = d[base + sz + sy];
            let c111 = d[base + sz + sy + 1];
            let c00 = c000 + (c100 - c000) * ax;
            let c10 = c010 + (c110 - c010) * ax;
            let c01 = c001 + (c101 - c001) * ax;
            let c11 = c011 + (c111 - c011) * ax;
            let c0 = c00 + (c10 - c00) * ay;
            let c1 = c01 + (c11 - c01) * ay;
            return c0 + (c1 - c0) * az;
        }
        let fetch = |x: isize, y: isize, z: isize| -> f64 {
            if x < 0 || y < 0 || z < 0 {
                return 0.0;
            }
            let (x, y, z) = (x as usize, y as usize, z as usize);
            if x >= nx || y >= ny || z >= nz {
                return 0.0;
            }
            d[x + nx * (y + ny * z)]
        };
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - az), (1, az)] {
            for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                    acc += wx * wy * wz * fetch(x0 + dx, y0 + dy, z0 + dz);
                }
            }
        }
        acc
    }

    /// Returns a copy with every voxel centre within `radius` of the segment
    /// `start..end` raised to at least `intensity`.
    pub fn insert_rod(
        &self,
        start: &Vector3<f64>,
        end: &Vector3<f64>,
        radius: f64,
        intensity: f64,
    ) -> Result<Volume3D> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter("rod radius must be positive".into()));
        }
        if !(intensity.is_finite() && intensity >= 0.0) {
            return Err(Error::InvalidParameter("rod intensity must be non-negative".into()));
        }
        let axis = end - start;
        let len2 = axis.norm_squared();
        if len2 == 0.0 {
            return Err(Error::Degenerate("rod start and end coincide".into()));
        }
        let mut out = self.clone();
        let r2 = radius * radius;
        // Restrict the scan to the segment's bounding box.
        let lo = start.inf(end).add_scalar(-radius);
        let hi = start.sup(end).add_scalar(radius);
        let range = |axis_idx: usize| -> Option<(usize, usize)> {
            let n = self.dims[axis_idx] as f64;
            let a = ((lo[axis_idx] - self.origin[axis_idx]) / self.spacing[axis_idx]).ceil();
            let b = ((hi[axis_idx] - self.origin[axis_idx]) / self.spacing[axis_idx]).floor();
            let a = a.max(0.0);
            let b = b.min(n - 1.0);
            (a <= b).then_some((a as usize, b as usize))
        };
        let (Some((i0, i1)), Some((j0, j1)), Some((k0, k1))) = (range(0), range(1), range(2))
        else {
            return Ok(out);
        };
        for k in k0..=k1 {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let p = self.voxel_center(i, j, k);
                    let s = ((p - start).dot(&axis) / len2).clamp(0.0, 1.0);
                    let q = start + axis * s;
                    if (p - q).norm_squared() <= r2 {
                        let idx = self.index(i, j, k);
                        out.data[idx] = out.data[idx].max(intensity);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns `self` with every voxel multiplied by `factor` (≥ 0).
    pub fn scaled(&self, factor: f64) -> Result<Volume3D> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::InvalidParameter("scale factor must be non-negative".into()));
        }
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        Ok(out)
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims,
            spacing: self.spacing.into(),
            origin: self.origin.into(),
        }
    }

    /// Writes little-endian f32 voxels to `raw_path` and the JSON sidecar to
    /// `raw_path` with a `.json` extension.
    pub fn save(&self, raw_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(raw_path)?);
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        fs::write(
            raw_path.with_extension("json"),
            serde_json::to_string_pretty(&self.header())?,
        )?;
        Ok(())
    }

    pub fn load(raw_path: &Path) -> Result<Volume3D> {
        let header: VolumeHeader =
            serde_json::from_str(&fs::read_to_string(raw_path.with_extension("json"))?)?;
        let bytes = fs::read(raw_path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::InvalidParameter("raw volume length is not a multiple of 4".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Volume3D::new(header.dims, header.spacing.into(), header.origin.into(), data)
    }
}

/// Seven landmark points in volume coordinates (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: [Vector3<f64>; 7],
}

impl LandmarkSet {
    pub fn new(points: [Vector3<f64>; 7]) -> Result<Self> {
        for (i, a) in points.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("landmark"));
            }
            if points[..i].iter().any(|b| (a - b).norm() == 0.0) {
                return Err(Error::InvalidParameter("landmarks must be distinct".into()));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>; 7] {
        &self.points
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / 7.0
    }

    pub fn within(&self, volume: &Volume3D) -> bool {
        let lo = volume.origin();
        let hi = volume.voxel_center(volume.dims[0] - 1, volume.dims[1] - 1, volume.dims[2] - 1);
        self.points
            .iter()
            .all(|p| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let triples: Vec<[f64; 3]> = self.points.iter().map(|p| [p[0], p[1], p[2]]).collect();
        fs::write(path, serde_json::to_string_pretty(&triples)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LandmarkSet> {
        let triples: Vec<[f64; 3]> = serde_json::from_str(&fs::read_to_string(path)?)?;
        if triples.len() != 7 {
            return Err(Error::InvalidParameter(format!(
                "expected 7 landmarks, found {}",
                triples.len()
            )));
        }
        LandmarkSet::new(std::array::from_fn(|i| Vector3::from(triples[i])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub vertebra_count: usize,
    /// Full extents of a vertebral body (x, y, z) in mm.
    pub vertebra_size: [f64; 3],
    /// Gap between consecutive bodies along y (mm).
    pub gap: f64,
    pub body_intensity: f64,
    pub process_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [64, 120, 64],
            spacing: [2.0, 2.0, 2.0],
            vertebra_count: 7,
            vertebra_size: [40.0, 22.0, 30.0],
            gap: 10.0,
            body_intensity: 1.0,
            process_intensity: 0.8,
            background_intensity: 0.15,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomParams {
    fn validate(&self) -> Result<()> {
        if self.vertebra_count < 3 {
            return Err(Error::InvalidParameter("vertebra_count must be at least 3".into()));
        }
        let intensities = [self.body_intensity, self.process_intensity, self.background_intensity];
        if intensities.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("intensities must be non-negative".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise_sigma must be non-negative".into()));
        }
        if self.vertebra_size.iter().any(|s| !(*s > 0.0)) || !(self.gap >= 0.0) {
            return Err(Error::InvalidParameter("vertebra geometry must be positive".into()));
        }
        Ok(())
    }

    fn period(&self) -> f64 {
        self.vertebra_size[1] + self.gap
    }

    /// Body centres along y, centred on the volume origin.
    fn body_centers(&self) -> Vec<Vector3<f64>> {
        let n = self.vertebra_count;
        let first = -(n as f64 - 1.0) * 0.5 * self.period();
        (0..n)
            .map(|i| Vector3::new(0.0, first + i as f64 * self.period(), 0.0))
            .collect()
    }
}

/// Superellipsoid rounded box of half extents `half`.
fn in_rounded_box(p: &Vector3<f64>, half: &Vector3<f64>) -> bool {
    let q = p.component_div(half);
    q[0].powi(4) + q[1].powi(4) + q[2].powi(4) <= 1.0
}

fn in_ellipsoid(p: &Vector3<f64>, half: &Vector3<f64>) -> bool {
    p.component_div(half).norm_squared() <= 1.0
}

/// Builds a phantom volume (centred on the volume-coordinate origin) and its
/// seven landmarks.
pub fn generate_phantom(p: &PhantomParams) -> Result<(Volume3D, LandmarkSet)> {
    p.validate()?;
    let spacing = Vector3::from(p.spacing);
    let mut vol = Volume3D::zeros_centered(p.dims, spacing)?;
    let half_extent = -vol.origin();

    let body_half = Vector3::from(p.vertebra_size) * 0.5;
    // Posterior process: behind the body along +z, narrower and shorter.
    let proc_half = Vector3::new(body_half[0] * 0.3, body_half[1] * 0.6, body_half[2] * 0.55);
    let proc_offset = Vector3::new(0.0, 0.0, body_half[2] + proc_half[2] * 0.8);
    // Transverse processes: lateral ellipsoids either side of the body.
    let trans_half = Vector3::new(body_half[0] * 0.35, body_half[1] * 0.3, body_half[2] * 0.25);
    let trans_right = Vector3::new(body_half[0] + trans_half[0] * 0.7, 0.0, body_half[2] * 0.4);
    let trans_left = Vector3::new(-trans_right[0], 0.0, trans_right[2]);

    let centers = p.body_centers();
    let reach = Vector3::new(
        trans_right[0] + trans_half[0],
        p.vertebra_count as f64 * 0.5 * p.period(),
        proc_offset[2] + proc_half[2],
    );
    if (0..3).any(|a| reach[a] > half_extent[a]) {
        return Err(Error::InvalidParameter(format!(
            "vertebra stack extent {:?} mm exceeds the volume half extent {:?} mm",
            reach.as_slice(),
            half_extent.as_slice()
        )));
    }

    let [nx, ny, nz] = p.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let x = vol.voxel_center(i, j, k);
                let mut v = p.background_intensity;
                for c in &centers {
                    let d = x - c;
                    if d[1].abs() > p.period() {
                        continue;
                    }
                    if in_rounded_box(&d, &body_half) {
                        v = v.max(p.body_intensity);
                    } else if in_ellipsoid(&(d - proc_offset), &proc_half)
                        || in_ellipsoid(&(d - trans_right), &trans_half)
                        || in_ellipsoid(&(d - trans_left), &trans_half)
                    {
                        v = v.max(p.process_intensity);
                    }
                }
                let idx = vol.index(i, j, k);
                vol.data[idx] = v;
            }
        }
    }

    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let normal = Normal::new(0.0f64, p.noise_sigma)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in vol.data.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }

    let landmarks = landmarks_from_centers(&centers)?;
    Ok((vol, landmarks))
}

/// Seven evenly spaced positions along the body-centre sequence, linearly
/// interpolated by index when the count is not seven.
fn landmarks_from_centers(centers: &[Vector3<f64>]) -> Result<LandmarkSet> {
    let n = centers.len();
    let pts = std::array::from_fn(|k| {
        let f = k as f64 * (n as f64 - 1.0) / 6.0;
        let i = (f.floor() as usize).min(n - 2);
        let a = f - i as f64;
        centers[i] * (1.0 - a) + centers[i + 1] * a
    });
    LandmarkSet::new(pts)
}
