//! Cone-beam projection: camera model, DRR ray casting, agent frames and ROIs.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Volume3D;
use crate::se3::RigidTransform;

/// Point X-ray source and a flat detector. Pixel `(x, y)` is centred at
/// `detector_origin + x * pixel_spacing[0] * axis_u + y * pixel_spacing[1] * axis_v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraGeometry {
    pub source: Vector3<f64>,
    pub detector_origin: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub pixel_spacing: [f64; 2],
    /// `[width, height]` in pixels.
    pub image_dims: [usize; 2],
}

impl CameraGeometry {
    pub fn new(
        source: Vector3<f64>,
        detector_origin: Vector3<f64>,
        axis_u: Vector3<f64>,
        axis_v: Vector3<f64>,
        pixel_spacing: [f64; 2],
        image_dims: [usize; 2],
    ) -> Result<Self> {
        let g = Self { source, detector_origin, axis_u, axis_v, pixel_spacing, image_dims };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .source
            .iter()
            .chain(self.detector_origin.iter())
            .chain(self.axis_u.iter())
            .chain(self.axis_v.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("camera geometry"));
        }
        if (self.axis_u.norm() - 1.0).abs() > 1e-9 || (self.axis_v.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter("detector axes must be unit vectors".into()));
        }
        if self.axis_u.dot(&self.axis_v).abs() > 1e-9 {
            return Err(Error::InvalidParameter("detector axes must be orthogonal".into()));
        }
        if self.pixel_spacing.iter().any(|s| !(*s > 0.0)) || self.image_dims.contains(&0) {
            return Err(Error::InvalidParameter("detector spacing and dims must be positive".into()));
        }
        if self.source_to_detector().abs() < 1e-9 {
            return Err(Error::InvalidParameter("source lies on the detector plane".into()));
        }
        Ok(())
    }

    /// A source/detector pair rotated by `angle_deg` about the world y axis,
    /// looking through the world origin (the isocentre).
    pub fn standard(
        source_to_iso: f64,
        source_to_detector: f64,
        image_dims: [usize; 2],
        pixel_spacing: [f64; 2],
        angle_deg: f64,
    ) -> Result<Self> {
        let a = angle_deg.to_radians();
        let dir = Vector3::new(a.sin(), 0.0, a.cos());
        let axis_u = Vector3::new(a.cos(), 0.0, -a.sin());
        let axis_v = Vector3::y();
        let source = -dir * source_to_iso;
        let center = source + dir * source_to_detector;
        let detector_origin = center
            - axis_u * ((image_dims[0] as f64 - 1.0) * 0.5 * pixel_spacing[0])
            - axis_v * ((image_dims[1] as f64 - 1.0) * 0.5 * pixel_spacing[1]);
        Self::new(source, detector_origin, axis_u, axis_v, pixel_spacing, image_dims)
    }

    /// Default desk-scale view: 1000 mm source-to-detector, isocentre at
    /// 600 mm, 128x128 pixels of 1.5 mm.
    pub fn desk_default(angle_deg: f64) -> Self {
        Self::standard(600.0, 1000.0, [128, 128], [1.5, 1.5], angle_deg)
            .expect("default geometry is valid")
    }

    /// Detector normal `u x v`.
    pub fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }

    /// Signed distance from the source to the detector plane along the normal.
    pub fn source_to_detector(&self) -> f64 {
        (self.detector_origin - self.source).dot(&self.normal())
    }

    pub fn detector_point(&self, px: [f64; 2]) -> Vector3<f64> {
        self.detector_origin
            + self.axis_u * (px[0] * self.pixel_spacing[0])
            + self.axis_v * (px[1] * self.pixel_spacing[1])
    }

    /// Source point and unit direction of the ray through pixel `px`.
    pub fn ray_for_pixel(&self, px: [f64; 2]) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.detector_point(px) - self.source;
        (self.source, d.normalize())
    }

    /// Perspective projection of a world point to continuous pixel
    /// coordinates. `None` for points not in front of the source.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let n = self.normal();
        let depth = (p - self.source).dot(&n) / self.source_to_detector();
        if !(depth > 0.0) {
            return None;
        }
        let q = self.source + (p - self.source) / depth;
        let r = q - self.detector_origin;
        Some([
            r.dot(&self.axis_u) / self.pixel_spacing[0],
            r.dot(&self.axis_v) / self.pixel_spacing[1],
        ])
    }

    /// Ratio of source-to-detector distance to the depth of `p`.
    pub fn magnification_at(&self, p: &Vector3<f64>) -> f64 {
        let sdd = self.source_to_detector();
        sdd / (p - self.source).dot(&self.normal()) * sdd.signum()
    }

    /// Rigid map from world coordinates to the image coordinate system:
    /// origin at pixel (0, 0), x and y along the detector axes, z along the
    /// detector normal.
    pub fn image_frame(&self) -> RigidTransform {
        let n = self.normal();
        let r = Matrix3::from_rows(&[
            self.axis_u.transpose(),
            self.axis_v.transpose(),
            n.transpose(),
        ]);
        RigidTransform::from_parts(r, -(r * self.detector_origin))
    }

    /// Same detector plane and pixel (0, 0) centre, resampled to `spacing`.
    pub fn resampled(&self, spacing: [f64; 2]) -> Result<CameraGeometry> {
        let dims = [
            (((self.image_dims[0] - 1) as f64 * self.pixel_spacing[0] / spacing[0]).floor()
                as usize)
                + 1,
            (((self.image_dims[1] - 1) as f64 * self.pixel_spacing[1] / spacing[1]).floor()
                as usize)
                + 1,
        ];
        Self::new(self.source, self.detector_origin, self.axis_u, self.axis_v, spacing, dims)
    }

    /// Continuous pixel coordinates of the image centre.
    pub fn center_pixel(&self) -> [f64; 2] {
        [
            (self.image_dims[0] as f64 - 1.0) * 0.5,
            (self.image_dims[1] as f64 - 1.0) * 0.5,
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CameraGeometry> {
        let g: CameraGeometry = serde_json::from_str(&fs::read_to_string(path)?)?;
        g.validate()?;
        Ok(g)
    }
}

/// Row-major 2D image; pixel `(x, y)` is stored at `y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    dims: [usize; 2],
    pixel_spacing: [f64; 2],
    data: Vec<f64>,
}

/// Affine mapping from stored 16-bit values to intensities:
/// `intensity = offset + scale * stored`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageHeader {
    dims: [usize; 2],
    pixel_spacing: [f64; 2],
}

impl Image2D {
    pub fn new(dims: [usize; 2], pixel_spacing: [f64; 2], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) || pixel_spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter("image dims and spacing must be positive".into()));
        }
        if data.len() != dims[0] * dims[1] {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", dims[0] * dims[1]),
                actual: format!("{} pixels", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { dims, pixel_spacing, data })
    }

    pub fn zeros(dims: [usize; 2], pixel_spacing: [f64; 2]) -> Self {
        Self { dims, pixel_spacing, data: vec![0.0; dims[0] * dims[1]] }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn pixel_spacing(&self) -> [f64; 2] {
        self.pixel_spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.dims[0] + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.dims[0] + x] = v;
    }

    /// Location of the maximum value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best % self.dims[0], best / self.dims[0])
    }

    /// Bilinear sample at continuous pixel coordinates; zero outside the
    /// pixel-centre extent.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (w, h) = (self.dims[0], self.dims[1]);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return 0.0;
        }
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - ax) + self.get(x1, y0) * ax;
        let bottom = self.get(x0, y1) * (1.0 - ax) + self.get(x1, y1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    pub fn mean_and_variance(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }

    /// Zero mean, unit variance. Images with variance below 1e-6 map to zeros.
    pub fn normalized(&self) -> Image2D {
        let (mean, var) = self.mean_and_variance();
        let data = if var < VARIANCE_FLOOR {
            vec![0.0; self.data.len()]
        } else {
            let inv = 1.0 / var.sqrt();
            self.data.iter().map(|v| (v - mean) * inv).collect()
        };
        Image2D { dims: self.dims, pixel_spacing: self.pixel_spacing, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        Image2D {
            dims: self.dims,
            pixel_spacing: self.pixel_spacing,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Writes a binary 16-bit PGM (big-endian, maxval 65535) with the value
    /// range mapped linearly onto `0..=65535`, plus a JSON sidecar holding
    /// the inverse mapping.
    pub fn save_pgm(&self, path: &Path) -> Result<PgmScale> {
        let lo = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { (hi - lo) / 65535.0 } else { 1.0 };
        let mut bytes = format!("P5\n{} {}\n65535\n", self.dims[0], self.dims[1]).into_bytes();
        for v in &self.data {
            let q = ((v - lo) / scale).round().clamp(0.0, 65535.0) as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        fs::write(path, bytes)?;
        let s = PgmScale { offset: lo, scale };
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&s)?)?;
        Ok(s)
    }

    /// Reads a 16-bit PGM written by [`Image2D::save_pgm`], applying the
    /// sidecar mapping when present.
    pub fn load_pgm(path: &Path, pixel_spacing: [f64; 2]) -> Result<Image2D> {
        let bytes = fs::read(path)?;
        let bad = || Error::InvalidParameter(format!("{} is not a 16-bit PGM", path.display()));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "65535" {
            return Err(bad());
        }
        let w: usize = fields[1].parse().map_err(|_| bad())?;
        let h: usize = fields[2].parse().map_err(|_| bad())?;
        let body = bytes.get(pos..pos + 2 * w * h).ok_or_else(bad)?;
        let scale = match fs::read_to_string(path.with_extension("json")) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => PgmScale { offset: 0.0, scale: 1.0 },
        };
        let data = body
            .chunks_exact(2)
            .map(|c| scale.offset + scale.scale * u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect();
        Image2D::new([w, h], pixel_spacing, data)
    }

    /// Little-endian f32 pixels plus a JSON sidecar with dims and spacing.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
        let header = ImageHeader { dims: self.dims, pixel_spacing: self.pixel_spacing };
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Image2D> {
        let header: ImageHeader =
            serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
        let data = fs::read(path)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Image2D::new(header.dims, header.pixel_spacing, data)
    }
}

const VARIANCE_FLOOR: f64 = 1e-6;

/// Parametric interval `[t0, t1]` where `origin + t * dir` is inside the box.
fn clip_ray(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

/// Segment of the pixel ray inside the transformed volume's bounding box,
/// as `(source, unit direction, t_enter, t_exit)` in world coordinates.
pub fn ray_volume_interval(
    g: &CameraGeometry,
    v: &Volume3D,
    t: &RigidTransform,
    px: [f64; 2],
) -> Option<(Vector3<f64>, Vector3<f64>, f64, f64)> {
    let (s, d) = g.ray_for_pixel(px);
    let inv = t.inverse();
    let sv = inv.transform_point(&s);
    let dv = inv.transform_vector(&d);
    let (lo, hi) = v.bounding_box();
    clip_ray(&sv, &dv, &lo, &hi).map(|(a, b)| (s, d, a, b))
}

/// Default integration step: half the smallest voxel spacing.
pub fn default_step(v: &Volume3D) -> f64 {
    v.spacing().min() * 0.5
}

/// Axis-aligned pixel window `[x0, x0 + width) x [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRegion {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRegion {
    pub fn full(g: &CameraGeometry) -> Self {
        Self { x0: 0, y0: 0, width: g.image_dims[0], height: g.image_dims[1] }
    }
}

/// Ray-cast DRR: per pixel, the line integral of the volume posed by `t`,
/// approximated by the midpoint rule at a step no larger than `step_mm`
/// over the ray's intersection with the volume's bounding box.
pub fn render_drr(
    v: &Volume3D,
    t: &RigidTransform,
    g: &CameraGeometry,
    step_mm: f64,
) -> Result<Image2D> {
    render_drr_region(v, t, g, step_mm, PixelRegion::full(g))
}

/// [`render_drr`] restricted to a pixel window; the result has the window's
/// dimensions.
pub fn render_drr_region(
    v: &Volume3D,
    t: &RigidTransform,
    g: &CameraGeometry,
    step_mm: f64,
    region: PixelRegion,
) -> Result<Image2D> {
    if !(step_mm > 0.0 && step_mm.is_finite()) {
        return Err(Error::InvalidParameter("DRR step must be positive".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("volume pose"));
    }
    let inv = t.inverse();
    let (lo, hi) = v.bounding_box();
    let origin = v.origin();
    let inv_spacing = Vector3::new(1.0, 1.0, 1.0).component_div(&v.spacing());
    let sv = inv.transform_point(&g.source);
    let s_idx = (sv - origin).component_mul(&inv_spacing);
    let mut data = vec![0.0; region.width * region.height];
    data.par_chunks_mut(region.width).enumerate().for_each(|(row, out)| {
        let y = (region.y0 + row) as f64;
        for (col, o) in out.iter_mut().enumerate() {
            let x = (region.x0 + col) as f64;
            let (_, d) = g.ray_for_pixel([x, y]);
            let dv = inv.transform_vector(&d);
            let Some((r0, r1)) = clip_ray(&sv, &dv, &lo, &hi) else {
                continue;
            };
            let n = ((r1 - r0) / step_mm).ceil().max(1.0);
            let h = (r1 - r0) / n;
            let d_idx = dv.component_mul(&inv_spacing);
            let start = s_idx + d_idx * (r0 + 0.5 * h);
            let inc = d_idx * h;
            let mut acc = 0.0;
            let mut p = start;
            for _ in 0..n as usize {
                acc += v.sample_index(p[0], p[1], p[2]);
                p += inc;
            }
            *o = acc * h;
        }
    });
    Image2D::new([region.width, region.height], g.pixel_spacing, data)
}

/// Image-axis-aligned agent coordinate system.
///
/// `e` maps image coordinates to agent coordinates and is a pure
/// translation; `origin_3d` is the agent origin in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentFrame {
    pub e: RigidTransform,
    pub origin_3d: Vector3<f64>,
    image_from_world: RigidTransform,
}

impl AgentFrame {
    /// Agent frame with origin `origin_3d` for camera `g`.
    pub fn at_point(g: &CameraGeometry, origin_3d: Vector3<f64>) -> Self {
        let image_from_world = g.image_frame();
        let o = image_from_world.transform_point(&origin_3d);
        Self { e: RigidTransform::translation(-o), origin_3d, image_from_world }
    }

    /// World-to-agent map `e ∘ C`, where `C` maps world to image coordinates.
    pub fn world_to_agent(&self) -> RigidTransform {
        self.e.compose(&self.image_from_world)
    }
}

/// Agent frame whose origin is the mid-point of the pixel ray's traversal of
/// the posed volume's bounding box.
pub fn agent_frame_for_pixel(
    g: &CameraGeometry,
    v: &Volume3D,
    t: &RigidTransform,
    px: [f64; 2],
) -> Result<AgentFrame> {
    let (s, d, r0, r1) =
        ray_volume_interval(g, v, t, px).ok_or(Error::AgentOriginUndefined { x: px[0], y: px[1] })?;
    Ok(AgentFrame::at_point(g, s + d * (0.5 * (r0 + r1))))
}

/// How [`extract_roi`] rescales intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiNormalization {
    /// Zero mean, unit variance over the ROI (constant ROIs become zeros).
    PerRoi,
    /// Raw resampled intensities.
    None,
}

/// Bilinear resampling of `img` onto a `roi_dims` grid with `roi_spacing`
/// (mm) centred on `center_px`. Samples outside the image are zero.
pub fn resample_roi(
    img: &Image2D,
    center_px: [f64; 2],
    roi_dims: [usize; 2],
    roi_spacing: [f64; 2],
) -> Result<Image2D> {
    if roi_dims.iter().any(|d| d % 2 == 0) {
        return Err(Error::InvalidParameter(format!(
            "ROI dims must be odd, got {roi_dims:?}"
        )));
    }
    let sx = roi_spacing[0] / img.pixel_spacing[0];
    let sy = roi_spacing[1] / img.pixel_spacing[1];
    let hx = (roi_dims[0] / 2) as f64;
    let hy = (roi_dims[1] / 2) as f64;
    let mut data = Vec::with_capacity(roi_dims[0] * roi_dims[1]);
    for j in 0..roi_dims[1] {
        let y = center_px[1] + (j as f64 - hy) * sy;
        for i in 0..roi_dims[0] {
            let x = center_px[0] + (i as f64 - hx) * sx;
            data.push(img.sample_bilinear(x, y));
        }
    }
    Image2D::new(roi_dims, roi_spacing, data)
}

pub fn extract_roi(
    img: &Image2D,
    center_px: [f64; 2],
    roi_dims: [usize; 2],
    roi_spacing: [f64; 2],
    normalization: RoiNormalization,
) -> Result<Image2D> {
    let roi = resample_roi(img, center_px, roi_dims, roi_spacing)?;
    Ok(match normalization {
        RoiNormalization::PerRoi => roi.normalized(),
        RoiNormalization::None => roi,
    })
}
