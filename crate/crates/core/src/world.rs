//! Synthetic terrain with per-cell semantics, a nadir camera model, and noise
//! emulators for GPS and for feed-forward batch reconstruction.
//!
//! Rendering is a 2.5D ray cast against a piecewise-constant heightfield. The
//! reconstruction emulator returns frame poses and point clouds in a local frame
//! whose translation scale is unknown, which is what the pose-graph backend has to
//! recover from GPS.

use std::collections::BTreeMap;

use nalgebra::{Isometry3, Point2, Point3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, Pose, Rect};
use crate::grid::{Cell, GridSpec};

pub type ClassId = u32;

/// Default feature dimension for class embeddings.
pub const DEFAULT_FEATURE_DIM: usize = 16;

/// Pixel stride used when back-projecting frames into submap clouds.
pub const DEFAULT_CLOUD_STRIDE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("invalid terrain: {0}")]
    InvalidTerrain(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("camera at z = {camera_z:.3} m is not above terrain elevation {terrain_z:.3} m")]
    PoseBelowTerrain { camera_z: f64, terrain_z: f64 },
    #[error("reconstruction needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("unknown class id {0}")]
    UnknownClass(ClassId),
}

/// Piecewise-constant elevation over a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heightfield {
    spec: GridSpec,
    elevation: Vec<f64>,
    min_elevation: f64,
    max_elevation: f64,
}

impl Heightfield {
    /// `elevation` is row-major with `iy` as the slow index.
    pub fn new(spec: GridSpec, elevation: Vec<f64>) -> Result<Self, WorldError> {
        if !spec.is_valid() {
            return Err(WorldError::InvalidTerrain(format!("bad grid {spec:?}")));
        }
        if elevation.len() != spec.len() {
            return Err(WorldError::InvalidTerrain(format!(
                "expected {} elevations, got {}",
                spec.len(),
                elevation.len()
            )));
        }
        if let Some(bad) = elevation.iter().position(|z| !z.is_finite()) {
            return Err(WorldError::InvalidTerrain(format!("non-finite elevation at {:?}", spec.cell_at(bad))));
        }
        let min_elevation = elevation.iter().copied().fold(f64::INFINITY, f64::min);
        let max_elevation = elevation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { spec, elevation, min_elevation, max_elevation })
    }

    pub fn flat(spec: GridSpec, z: f64) -> Result<Self, WorldError> {
        Self::new(spec, vec![z; spec.len()])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn width_cells(&self) -> usize {
        self.spec.nx
    }

    pub fn height_cells(&self) -> usize {
        self.spec.ny
    }

    pub fn resolution(&self) -> f64 {
        self.spec.resolution
    }

    pub fn bounds(&self) -> Rect {
        self.spec.bounds()
    }

    pub fn elevation(&self, c: Cell) -> f64 {
        self.elevation[self.spec.index(c)]
    }

    pub fn elevations(&self) -> &[f64] {
        &self.elevation
    }

    pub fn set_elevation(&mut self, c: Cell, z: f64) {
        assert!(z.is_finite());
        let i = self.spec.index(c);
        self.elevation[i] = z;
        self.min_elevation = self.elevation.iter().copied().fold(f64::INFINITY, f64::min);
        self.max_elevation = self.elevation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }

    pub fn elevation_at(&self, x: f64, y: f64) -> Option<f64> {
        self.spec.cell_of(x, y).map(|c| self.elevation(c))
    }

    pub fn min_elevation(&self) -> f64 {
        self.min_elevation
    }

    pub fn max_elevation(&self) -> f64 {
        self.max_elevation
    }

    pub fn mean_elevation(&self) -> f64 {
        self.elevation.iter().sum::<f64>() / self.elevation.len() as f64
    }
}

/// Class embeddings: every vector has unit norm and the same dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    dim: usize,
    vectors: BTreeMap<ClassId, Vec<f64>>,
}

impl FeatureDictionary {
    pub fn new(dim: usize) -> Result<Self, WorldError> {
        if dim < 2 {
            return Err(WorldError::InvalidWorld(format!("feature dimension {dim} < 2")));
        }
        Ok(Self { dim, vectors: BTreeMap::new() })
    }

    /// Orthonormal random vectors for the first `dim` classes (Gram-Schmidt on Gaussian
    /// draws); any further classes get plain random unit vectors.
    pub fn random_orthonormal<R: Rng + ?Sized>(ids: &[ClassId], dim: usize, rng: &mut R) -> Result<Self, WorldError> {
        let mut dict = Self::new(dim)?;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for &id in ids {
            let v = loop {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                if basis.len() < dim {
                    for b in &basis {
                        let d = dot(&v, b);
                        v.iter_mut().zip(b).for_each(|(x, bi)| *x -= d * bi);
                    }
                }
                if norm(&v) > 1e-6 {
                    break v;
                }
            };
            let v = normalized(&v).expect("nonzero");
            if basis.len() < dim {
                basis.push(v.clone());
            }
            dict.vectors.insert(id, v);
        }
        Ok(dict)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Inserts `v` after normalizing it.
    pub fn insert(&mut self, id: ClassId, v: &[f64]) -> Result<(), WorldError> {
        if v.len() != self.dim {
            return Err(WorldError::InvalidWorld(format!(
                "class {id}: vector has dimension {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        let v = normalized(v).ok_or_else(|| WorldError::InvalidWorld(format!("class {id}: zero vector")))?;
        self.vectors.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: ClassId) -> Option<&[f64]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.vectors.keys().copied()
    }

    /// Normalized weighted blend of class vectors, used for partially relevant classes
    /// and for task embeddings.
    pub fn mix(&self, weights: &[(ClassId, f64)]) -> Result<Vec<f64>, WorldError> {
        let mut out = vec![0.0; self.dim];
        for &(id, w) in weights {
            let v = self.get(id).ok_or(WorldError::UnknownClass(id))?;
            out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
        }
        normalized(&out).ok_or_else(|| WorldError::InvalidWorld("mixture is the zero vector".into()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    (n > 1e-12 && n.is_finite()).then(|| a.iter().map(|x| x / n).collect())
}

/// Scalar stand-in for RGB, used to weight ICP correspondences.
pub fn class_color(id: ClassId) -> f64 {
    ((id as f64 + 1.0) * 0.618_033_988_749_895).fract()
}

/// Ground truth: terrain, per-cell class labels, class embeddings, and goal cells per task.
#[derive(Clone, Debug)]
pub struct SemanticWorld {
    pub terrain: Heightfield,
    labels: Vec<ClassId>,
    pub dictionary: FeatureDictionary,
    goals: BTreeMap<String, Vec<Cell>>,
}

impl SemanticWorld {
    pub fn new(
        terrain: Heightfield,
        labels: Vec<ClassId>,
        dictionary: FeatureDictionary,
        goals: BTreeMap<String, Vec<Cell>>,
    ) -> Result<Self, WorldError> {
        let spec = *terrain.spec();
        if labels.len() != spec.len() {
            return Err(WorldError::InvalidWorld(format!(
                "labels have {} cells, terrain has {}",
                labels.len(),
                spec.len()
            )));
        }
        if let Some(&id) = labels.iter().find(|&&id| dictionary.get(id).is_none()) {
            return Err(WorldError::UnknownClass(id));
        }
        for (task, cells) in &goals {
            if let Some(c) = cells.iter().find(|c| c.0 >= spec.nx || c.1 >= spec.ny) {
                return Err(WorldError::InvalidWorld(format!("goal {c:?} of task '{task}' lies outside the terrain")));
            }
        }
        Ok(Self { terrain, labels, dictionary, goals })
    }

    pub fn spec(&self) -> &GridSpec {
        self.terrain.spec()
    }

    pub fn label(&self, c: Cell) -> ClassId {
        self.labels[self.spec().index(c)]
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn feature_dim(&self) -> usize {
        self.dictionary.dim()
    }

    pub fn goals(&self) -> &BTreeMap<String, Vec<Cell>> {
        &self.goals
    }

    pub fn goal_cells(&self, task: &str) -> Option<&[Cell]> {
        self.goals.get(task).map(Vec::as_slice)
    }

    /// Ground-truth surface samples, `samples_per_cell²` per cell on a regular sub-grid.
    pub fn surface_cloud(&self, samples_per_cell: usize) -> PointCloud {
        let spec = *self.spec();
        let k = samples_per_cell.max(1);
        let step = spec.resolution / k as f64;
        let mut cloud = PointCloud::with_capacity(spec.len() * k * k);
        for iy in 0..spec.ny {
            for ix in 0..spec.nx {
                let z = self.terrain.elevation((ix, iy));
                let color = class_color(self.label((ix, iy)));
                for sy in 0..k {
                    for sx in 0..k {
                        let x = spec.origin.x + ix as f64 * spec.resolution + (sx as f64 + 0.5) * step;
                        let y = spec.origin.y + iy as f64 * spec.resolution + (sy as f64 + 0.5) * step;
                        cloud.push(Point3::new(x, y, z), color);
                    }
                }
            }
        }
        cloud
    }
}

/// Pinhole intrinsics of the nadir camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, WorldError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Square image with the principal point at the center and a footprint whose
    /// half-width equals `half_width_per_meter` times the range.
    pub fn square(pixels: usize, half_width_per_meter: f64) -> Self {
        let c = pixels as f64 / 2.0;
        let f = c / half_width_per_meter;
        Self { fx: f, fy: f, cx: c, cy: c, width: pixels, height: pixels }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(WorldError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(WorldError::InvalidCamera("empty image".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(WorldError::InvalidCamera("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame ray through the center of pixel `(u, v)`, scaled so that z = 1.
    #[inline]
    pub fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new((u as f64 + 0.5 - self.cx) / self.fx, (v as f64 + 0.5 - self.cy) / self.fy, 1.0)
    }

    /// Half-width of the ground footprint along image x at the given range.
    pub fn footprint_half_width(&self, range: f64) -> f64 {
        range * self.cx.min(self.width as f64 - self.cx) / self.fx
    }
}

impl Default for CameraModel {
    /// 96×96 pixels, footprint half-width equal to half the altitude.
    fn default() -> Self {
        Self::square(96, 0.5)
    }
}

/// Knobs for every noise source of the emulators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub gps_sigma: f64,
    pub depth_sigma_rel: f64,
    pub submap_scale_sigma: f64,
    pub rel_rot_sigma: f64,
    pub rel_trans_sigma_rel: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            gps_sigma: 0.0,
            depth_sigma_rel: 0.0,
            submap_scale_sigma: 0.0,
            rel_rot_sigma: 0.0,
            rel_trans_sigma_rel: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let sigmas = [
            self.gps_sigma,
            self.depth_sigma_rel,
            self.submap_scale_sigma,
            self.rel_rot_sigma,
            self.rel_trans_sigma_rel,
        ];
        if sigmas.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(WorldError::InvalidWorld(format!("noise sigmas must be finite and non-negative: {self:?}")))
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gps_sigma: 1.0,
            depth_sigma_rel: 0.01,
            submap_scale_sigma: 0.1,
            rel_rot_sigma: 0.002,
            rel_trans_sigma_rel: 0.01,
            seed: 0,
        }
    }
}

/// One rendered nadir image: range along the optical axis and a feature per pixel.
#[derive(Clone, Debug)]
pub struct SensorFrame {
    pub id: u64,
    pub time: f64,
    /// world ← camera
    pub true_pose: Pose,
    pub camera: CameraModel,
    pub feature_dim: usize,
    /// Row-major, `None` where the ray left the terrain.
    pub depth: Vec<Option<f64>>,
    pub labels: Vec<Option<ClassId>>,
    /// Row-major `pixel_count × feature_dim`; zero rows where there is no return.
    pub features: Vec<f64>,
}

impl SensorFrame {
    pub fn with_stamp(mut self, id: u64, time: f64) -> Self {
        self.id = id;
        self.time = time;
        self
    }

    #[inline]
    pub fn pixel_index(&self, u: usize, v: usize) -> usize {
        v * self.camera.width + u
    }

    pub fn depth_at(&self, u: usize, v: usize) -> Option<f64> {
        self.depth[self.pixel_index(u, v)]
    }

    pub fn feature(&self, pixel: usize) -> Option<&[f64]> {
        self.depth[pixel]?;
        Some(&self.features[pixel * self.feature_dim..(pixel + 1) * self.feature_dim])
    }

    /// Camera-frame point of pixel `(u, v)` from its (possibly noisy) depth.
    pub fn camera_point(&self, u: usize, v: usize) -> Option<Point3<f64>> {
        self.depth_at(u, v).map(|d| Point3::from(self.camera.ray(u, v) * d))
    }

    /// Back-projects valid pixels (every `stride`-th row and column) into the
    /// camera frame, colored by class.
    pub fn camera_cloud(&self, stride: usize) -> PointCloud {
        let stride = stride.max(1);
        let mut cloud = PointCloud::new();
        for v in (0..self.camera.height).step_by(stride) {
            for u in (0..self.camera.width).step_by(stride) {
                let i = self.pixel_index(u, v);
                if let (Some(d), Some(label)) = (self.depth[i], self.labels[i]) {
                    cloud.push(Point3::from(self.camera.ray(u, v) * d), class_color(label));
                }
            }
        }
        cloud
    }
}

/// Renders a nadir frame by ray casting each pixel against the heightfield.
pub fn render_frame<R: Rng + ?Sized>(
    world: &SemanticWorld,
    pose: &Pose,
    camera: &CameraModel,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<SensorFrame, WorldError> {
    camera.validate()?;
    let terrain = &world.terrain;
    let origin = pose.translation.vector;
    if let Some(z) = terrain.elevation_at(origin.x, origin.y) {
        if origin.z <= z {
            return Err(WorldError::PoseBelowTerrain { camera_z: origin.z, terrain_z: z });
        }
    }
    let dim = world.feature_dim();
    let n = camera.pixel_count();
    let mut depth = vec![None; n];
    let mut labels = vec![None; n];
    let mut features = vec![0.0; n * dim];
    let depth_noise = (noise.depth_sigma_rel > 0.0).then(|| Normal::new(0.0, noise.depth_sigma_rel).expect("sigma"));

    for v in 0..camera.height {
        for u in 0..camera.width {
            let i = v * camera.width + u;
            let dir = pose.rotation * camera.ray(u, v);
            let Some((s, cell)) = cast_ray(terrain, &origin, &dir) else {
                continue;
            };
            if s <= 0.0 {
                return Err(WorldError::PoseBelowTerrain { camera_z: origin.z, terrain_z: terrain.elevation(cell) });
            }
            let factor = depth_noise.as_ref().map_or(1.0, |d| 1.0 + d.sample(rng));
            let label = world.label(cell);
            depth[i] = Some(s * factor.max(1e-3));
            labels[i] = Some(label);
            let f = world.dictionary.get(label).ok_or(WorldError::UnknownClass(label))?;
            features[i * dim..(i + 1) * dim].copy_from_slice(f);
        }
    }
    Ok(SensorFrame {
        id: 0,
        time: 0.0,
        true_pose: *pose,
        camera: *camera,
        feature_dim: dim,
        depth,
        labels,
        features,
    })
}

/// Marches along `origin + s·dir` in half-cell horizontal steps; returns the
/// optical-axis range `s` of the first terrain hit and the hit cell.
fn cast_ray(terrain: &Heightfield, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Cell)> {
    if dir.z >= 0.0 {
        return None;
    }
    let spec = terrain.spec();
    let s_floor = (terrain.min_elevation() - origin.z) / dir.z;
    if s_floor <= 0.0 {
        // Camera at or below the lowest terrain; let the caller decide.
        let c = spec.cell_of(origin.x, origin.y)?;
        return Some((0.0, c));
    }
    let horizontal = dir.x.hypot(dir.y);
    let ds = if horizontal > 1e-12 { 0.5 * spec.resolution / horizontal } else { s_floor };
    let mut s0 = 0.0;
    loop {
        let s1 = (s0 + ds).min(s_floor);
        let p = origin + dir * s1;
        let cell = spec.cell_of(p.x, p.y)?;
        let h = terrain.elevation(cell);
        if p.z <= h {
            let s_hit = ((h - origin.z) / dir.z).max(s0);
            return Some((s_hit, cell));
        }
        if s1 >= s_floor {
            // Numerically below the floor without registering a hit.
            return Some((s1, cell));
        }
        s0 = s1;
    }
}

/// Position-only GPS fix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsFix {
    pub position: Vector3<f64>,
}

pub fn sample_gps<R: Rng + ?Sized>(true_position: &Vector3<f64>, noise: &NoiseSpec, rng: &mut R) -> GpsFix {
    if noise.gps_sigma <= 0.0 {
        return GpsFix { position: *true_position };
    }
    let n = Normal::new(0.0, noise.gps_sigma).expect("sigma");
    GpsFix {
        position: true_position + Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)),
    }
}

/// Output of the batch reconstruction emulator. Poses and clouds live in the
/// frame of the first batch frame, with translations divided by an unknown scale.
#[derive(Clone, Debug)]
pub struct SubmapPrediction {
    pub frame_ids: Vec<u64>,
    /// local ← camera for each frame; the first is the identity.
    pub frame_poses_local: Vec<Pose>,
    /// Per-frame clouds expressed in the local frame.
    pub clouds_local: Vec<PointCloud>,
    /// Leading frames shared with the previous batch.
    pub overlap_ids: Vec<u64>,
    /// Scale divisor the emulator applied. Emulator ground truth, for evaluation only.
    pub true_scale: f64,
}

impl SubmapPrediction {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn position_of(&self, frame_id: u64) -> Option<usize> {
        self.frame_ids.iter().position(|&id| id == frame_id)
    }
}

/// Emulates a batch reconstruction of `overlap ++ frames`, drawing a lognormal scale.
pub fn emulate_f3dr<R: Rng + ?Sized>(
    frames: &[SensorFrame],
    overlap: &[SensorFrame],
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<SubmapPrediction, WorldError> {
    let count = frames.len() + overlap.len();
    if count < 2 {
        return Err(WorldError::TooFewFrames(count));
    }
    let scale = if noise.submap_scale_sigma > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        (z * noise.submap_scale_sigma).exp()
    } else {
        1.0
    };
    emulate_f3dr_with_scale(frames, overlap, noise, scale, DEFAULT_CLOUD_STRIDE, rng)
}

/// Same as [`emulate_f3dr`] with a caller-chosen scale divisor and cloud stride.
pub fn emulate_f3dr_with_scale<R: Rng + ?Sized>(
    frames: &[SensorFrame],
    overlap: &[SensorFrame],
    noise: &NoiseSpec,
    scale: f64,
    cloud_stride: usize,
    rng: &mut R,
) -> Result<SubmapPrediction, WorldError> {
    let all: Vec<&SensorFrame> = overlap.iter().chain(frames.iter()).collect();
    if all.len() < 2 {
        return Err(WorldError::TooFewFrames(all.len()));
    }
    assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
    let anchor = all[0].true_pose;
    let mut frame_poses_local = Vec::with_capacity(all.len());
    let mut clouds_local = Vec::with_capacity(all.len());
    for (k, frame) in all.iter().enumerate() {
        let local = if k == 0 {
            Pose::identity()
        } else {
            perturb_relative(&anchor, &frame.true_pose, noise, scale, rng)
        };
        let cloud = frame.camera_cloud(cloud_stride).scaled(1.0 / scale).transformed(&local);
        frame_poses_local.push(local);
        clouds_local.push(cloud);
    }
    Ok(SubmapPrediction {
        frame_ids: all.iter().map(|f| f.id).collect(),
        frame_poses_local,
        clouds_local,
        overlap_ids: overlap.iter().map(|f| f.id).collect(),
        true_scale: scale,
    })
}

/// Relative pose `from⁻¹·to` as the emulator would predict it: translation divided
/// by `scale`, rotation and translation perturbed per `noise`.
pub fn perturb_relative<R: Rng + ?Sized>(
    from: &Pose,
    to: &Pose,
    noise: &NoiseSpec,
    scale: f64,
    rng: &mut R,
) -> Pose {
    let truth = from.inverse() * to;
    let mut rotation = truth.rotation;
    if noise.rel_rot_sigma > 0.0 {
        let n = Normal::new(0.0, noise.rel_rot_sigma).expect("sigma");
        let w = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        rotation *= UnitQuaternion::from_scaled_axis(w);
    }
    let mut t = truth.translation.vector / scale;
    if noise.rel_trans_sigma_rel > 0.0 {
        let sigma = noise.rel_trans_sigma_rel * t.norm();
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("sigma");
            t += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        }
    }
    Isometry3::from_parts(Translation3::from(t), rotation)
}

/// Rotates a 2D point about the origin; handy for scenario layouts.
pub fn rotate2(p: Point2<f64>, angle: f64) -> Point2<f64> {
    let (s, c) = angle.sin_cos();
    Point2::new(c * p.x - s * p.y, s * p.x + c * p.y)
}
