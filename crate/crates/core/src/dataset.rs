//! Phantom datasets: a volume with landmarks plus the views it is imaged
//! from, intensity scaling for network input and 2D-only rod occluders.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::phantom::{generate_phantom, LandmarkSet, PhantomParams, Volume3D};
use crate::projection::{render_drr, render_drr_region, CameraGeometry, Image2D, PixelRegion};
use crate::se3::RigidTransform;

/// Affine map `(x - offset) / scale` applied to every network input image of
/// one view, fitted to the clean DRR at the identity pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityScale {
    pub offset: f64,
    pub scale: f64,
}

impl IntensityScale {
    pub fn fit(reference: &Image2D) -> Self {
        let (mean, var) = reference.mean_and_variance();
        Self { offset: mean, scale: var.sqrt().max(1e-6) }
    }

    pub fn apply(&self, img: &Image2D) -> Tensor {
        let inv = 1.0 / self.scale;
        Tensor::new(
            [1, img.height(), img.width()],
            img.data().iter().map(|v| (v - self.offset) * inv).collect(),
        )
        .expect("image data is finite")
    }
}

/// Source geometry of the views (one per angle about the volume's y axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryParams {
    pub source_to_iso: f64,
    pub source_to_detector: f64,
    pub image_dims: [usize; 2],
    pub pixel_spacing: [f64; 2],
    pub view_angles_deg: Vec<f64>,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            source_to_iso: 600.0,
            source_to_detector: 1000.0,
            image_dims: [128, 128],
            pixel_spacing: [1.5, 1.5],
            view_angles_deg: vec![0.0, 90.0],
        }
    }
}

impl GeometryParams {
    pub fn geometries(&self) -> Result<Vec<CameraGeometry>> {
        if self.view_angles_deg.is_empty() || self.view_angles_deg.len() > 2 {
            return Err(Error::InvalidParameter("one or two views are supported".into()));
        }
        self.view_angles_deg
            .iter()
            .map(|a| {
                CameraGeometry::standard(
                    self.source_to_iso,
                    self.source_to_detector,
                    self.image_dims,
                    self.pixel_spacing,
                    *a,
                )
            })
            .collect()
    }

    /// Smallest angle between the two view directions, in degrees.
    pub fn angular_separation(&self) -> Option<f64> {
        match self.view_angles_deg.as_slice() {
            [a, b] => {
                let d = (a - b).rem_euclid(360.0);
                Some(d.min(360.0 - d))
            }
            _ => None,
        }
    }
}

/// Per-dataset phantom variation: body size is scaled by a factor in
/// `1 ± size_jitter` and the gap moved by up to `gap_jitter_mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub phantom: PhantomParams,
    pub size_jitter: f64,
    pub gap_jitter_mm: f64,
    pub geometry: GeometryParams,
    /// DRR integration step; `None` uses half the voxel spacing.
    pub drr_step_mm: Option<f64>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            phantom: PhantomParams::default(),
            size_jitter: 0.05,
            gap_jitter_mm: 1.0,
            geometry: GeometryParams::default(),
            drr_step_mm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSetup {
    pub geometry: CameraGeometry,
    pub scale: IntensityScale,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: u64,
    pub volume: Volume3D,
    pub landmarks: LandmarkSet,
    pub views: Vec<ViewSetup>,
    pub step_mm: f64,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    id: u64,
    step_mm: f64,
    scales: Vec<IntensityScale>,
}

impl Dataset {
    /// Phantom `id` of the family described by `p`.
    pub fn generate(p: &DatasetParams, id: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(id ^ 0x5eed_da7a);
        let mut phantom = p.phantom.clone();
        let s = 1.0 + p.size_jitter * rng.random_range(-1.0..=1.0);
        phantom.vertebra_size = phantom.vertebra_size.map(|v| v * s);
        phantom.gap += p.gap_jitter_mm * rng.random_range(-1.0..=1.0);
        phantom.seed = id;
        let (volume, landmarks) = generate_phantom(&phantom)?;
        let step_mm = p.drr_step_mm.unwrap_or_else(|| crate::projection::default_step(&volume));
        let views = p
            .geometry
            .geometries()?
            .into_iter()
            .map(|geometry| {
                let reference = render_drr(&volume, &RigidTransform::identity(), &geometry, step_mm)?;
                Ok(ViewSetup { scale: IntensityScale::fit(&reference), geometry })
            })
            .collect::<Result<_>>()?;
        Ok(Self { id, volume, landmarks, views, step_mm })
    }

    pub fn render(&self, volume: &Volume3D, view: usize, t: &RigidTransform) -> Result<Image2D> {
        render_drr(volume, t, &self.views[view].geometry, self.step_mm)
    }

    pub fn render_region(
        &self,
        volume: &Volume3D,
        view: usize,
        t: &RigidTransform,
        region: PixelRegion,
    ) -> Result<Image2D> {
        render_drr_region(volume, t, &self.views[view].geometry, self.step_mm, region)
    }

    /// Writes `volume.raw` (+ sidecar), `landmarks.json`, `view{k}.json` and
    /// `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.volume.save(&dir.join("volume.raw"))?;
        self.landmarks.save(&dir.join("landmarks.json"))?;
        for (k, v) in self.views.iter().enumerate() {
            v.geometry.save(&dir.join(format!("view{k}.json")))?;
        }
        let header = DatasetHeader {
            id: self.id,
            step_mm: self.step_mm,
            scales: self.views.iter().map(|v| v.scale).collect(),
        };
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: DatasetHeader =
            serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        let views = header
            .scales
            .iter()
            .enumerate()
            .map(|(k, scale)| {
                Ok(ViewSetup {
                    geometry: CameraGeometry::load(&dir.join(format!("view{k}.json")))?,
                    scale: *scale,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            id: header.id,
            volume: Volume3D::load(&dir.join("volume.raw"))?,
            landmarks: LandmarkSet::load(&dir.join("landmarks.json"))?,
            views,
            step_mm: header.step_mm,
        })
    }
}

/// A straight high-density rod present in the X-ray but not in the volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RodSpec {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub intensity: f64,
}

impl RodSpec {
    /// A rod crossing the volume roughly perpendicular to the spine axis at
    /// a random height, so it occludes a band in views about that axis.
    pub fn sample(rng: &mut impl Rng, volume: &Volume3D) -> Self {
        let (lo, hi) = volume.bounding_box();
        let half_y = 0.2 * (hi[1] - lo[1]);
        let c = Vector3::new(
            0.0,
            rng.random_range(-half_y..=half_y),
            rng.random_range(-20.0..=20.0),
        );
        let phi = rng.random_range(0.0..std::f64::consts::PI);
        let dir = Vector3::new(phi.cos(), rng.random_range(-0.3..=0.3), phi.sin()).normalize();
        let reach = (hi - lo).norm();
        let (a, b) = (c - dir * reach, c + dir * reach);
        Self { start: [a[0], a[1], a[2]], end: [b[0], b[1], b[2]], radius: 3.0, intensity: 3.0 }
    }

    pub fn insert(&self, volume: &Volume3D) -> Result<Volume3D> {
        volume.insert_rod(&self.start.into(), &self.end.into(), self.radius, self.intensity)
    }
}
