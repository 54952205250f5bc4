//! Submap pose graph: GPS position priors, reconstruction and ICP relative-pose
//! factors, running scale estimation, proximity loop closures and a
//! Levenberg–Marquardt solver over rigid transforms.

use std::fmt;
use std::str::FromStr;

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix6, Point3, Quaternion, SMatrix, Translation3, UnitQuaternion, Vector3,
    Vector6,
};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mean_pose, nadir_rotation, rigid_fit, scale_translation, PointCloud, Pose};
use crate::spatial::KdTree;
use crate::world::SubmapPrediction;

#[derive(Debug, Error, PartialEq)]
pub enum PoseGraphError {
    #[error("predicted motion too small to estimate scale")]
    DegenerateMotion,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud has {0} points; at least 10 are required")]
    CloudTooSmall(usize),
    #[error("no correspondences within the distance gate")]
    NoCorrespondences,
    #[error("submap shares no frames with the previous submap")]
    NoOverlap,
    #[error("graph has no factors to optimize")]
    NoFactors,
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

type Result<T> = std::result::Result<T, PoseGraphError>;

/// Least-squares fit of `‖Δg‖ ≈ s·‖Δp‖` over paired displacements.
pub fn estimate_scale(pred_deltas: &[Vector3<f64>], gps_deltas: &[Vector3<f64>], floor: f64) -> Result<f64> {
    if pred_deltas.is_empty() || pred_deltas.len() != gps_deltas.len() {
        return Err(PoseGraphError::BadInput(format!(
            "need equal, non-empty delta sequences, got {} and {}",
            pred_deltas.len(),
            gps_deltas.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, g) in pred_deltas.iter().zip(gps_deltas) {
        let np = p.norm();
        num += g.norm() * np;
        den += np * np;
    }
    if !(den > floor) || !(num > 0.0) {
        return Err(PoseGraphError::DegenerateMotion);
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iter: usize,
    pub max_corr_dist: f64,
    /// Meters of correspondence distance per unit of color difference.
    pub color_weight: f64,
    /// Stop once an iteration moves the estimate by less than this, meters and radians.
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iter: 50, max_corr_dist: 2.0, color_weight: 0.5, tolerance: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpResult {
    /// target ← source
    pub transform: Pose,
    pub rmse: f64,
    pub fitness: f64,
    pub iterations: usize,
}

const MIN_ICP_POINTS: usize = 10;

/// Colored point-to-point ICP aligning `source` onto `target`.
pub fn icp_align(source: &PointCloud, target: &PointCloud, init: &Pose, config: &IcpConfig) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(PoseGraphError::EmptyCloud);
    }
    let smallest = source.len().min(target.len());
    if smallest < MIN_ICP_POINTS {
        return Err(PoseGraphError::CloudTooSmall(smallest));
    }
    let cw = config.color_weight;
    let tree = KdTree::<4>::build(
        target.points.iter().zip(&target.colors).map(|(p, c)| [p.x, p.y, p.z, cw * c]).collect(),
    );
    let gate2 = config.max_corr_dist * config.max_corr_dist;
    let correspond = |t: &Pose| {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut sq = 0.0;
        for (p, c) in source.points.iter().zip(&source.colors) {
            let q = t * p;
            let Some((j, _)) = tree.nearest(&[q.x, q.y, q.z, cw * c]) else { continue };
            let d2 = (target.points[j] - q).norm_squared();
            if d2 <= gate2 {
                src.push(q);
                dst.push(target.points[j]);
                sq += d2;
            }
        }
        (src, dst, sq)
    };

    let mut transform = *init;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        let (src, dst, _) = correspond(&transform);
        if src.is_empty() && it == 0 {
            return Err(PoseGraphError::NoCorrespondences);
        }
        if src.len() < 3 {
            break;
        }
        let Some(delta) = rigid_fit(&src, &dst, None) else { break };
        transform = delta * transform;
        transform.rotation.renormalize();
        iterations = it + 1;
        if delta.translation.vector.norm() < config.tolerance && delta.rotation.angle() < config.tolerance {
            break;
        }
    }
    let (src, _, sq) = correspond(&transform);
    if src.is_empty() {
        return Err(PoseGraphError::NoCorrespondences);
    }
    Ok(IcpResult {
        transform,
        rmse: (sq / src.len() as f64).sqrt(),
        fitness: src.len() as f64 / source.len() as f64,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseNode {
    pub id: usize,
    /// world ← submap anchor
    pub pose: Pose,
    pub frame_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorKind {
    GpsPrior,
    F3drRel,
    IcpRel,
    LoopRel,
}

impl FactorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FactorKind::GpsPrior => "GPS_PRIOR",
            FactorKind::F3drRel => "F3DR_REL",
            FactorKind::IcpRel => "ICP_REL",
            FactorKind::LoopRel => "LOOP_REL",
        }
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FactorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "GPS_PRIOR" => FactorKind::GpsPrior,
            "F3DR_REL" => FactorKind::F3drRel,
            "ICP_REL" => FactorKind::IcpRel,
            "LOOP_REL" => FactorKind::LoopRel,
            other => return Err(format!("unknown factor kind {other:?}")),
        })
    }
}

/// A measurement with a diagonal information matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Factor {
    Prior { node: usize, position: Vector3<f64>, information: Vector3<f64> },
    /// Measures `T_from⁻¹·T_to`. Information orders translation then rotation.
    Relative { kind: FactorKind, from: usize, to: usize, measurement: Pose, information: Vector6<f64> },
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Prior { .. } => FactorKind::GpsPrior,
            Factor::Relative { kind, .. } => *kind,
        }
    }

    fn information(&self) -> &[f64] {
        match self {
            Factor::Prior { information, .. } => information.as_slice(),
            Factor::Relative { information, .. } => information.as_slice(),
        }
    }

    fn nodes(&self) -> (usize, Option<usize>) {
        match *self {
            Factor::Prior { node, .. } => (node, None),
            Factor::Relative { from, to, .. } => (from, Some(to)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseGraphConfig {
    pub loop_radius: f64,
    pub min_loop_gap: usize,
    /// Weight of a new per-submap estimate in the running scale.
    pub scale_blend: f64,
    /// Minimum `Σ‖Δp‖²` for a scale estimate, in predicted units squared.
    pub motion_floor: f64,
    pub use_gps_priors: bool,
    pub gps_sigma: f64,
    pub f3dr_trans_weight: f64,
    pub f3dr_rot_weight: f64,
    pub icp_trans_weight: f64,
    pub icp_rot_weight: f64,
    pub loop_trans_weight: f64,
    pub loop_rot_weight: f64,
    /// Huber width on whitened loop residual norms.
    pub huber_width: f64,
    pub icp_fitness_floor: f64,
    /// ICP results farther than this from the reconstruction estimate are dropped, meters.
    pub icp_gate_trans: f64,
    /// Same gate on rotation, radians.
    pub icp_gate_rot: f64,
    pub icp: IcpConfig,
}

impl Default for PoseGraphConfig {
    fn default() -> Self {
        Self {
            loop_radius: 20.0,
            min_loop_gap: 5,
            scale_blend: 0.3,
            motion_floor: 1.0,
            use_gps_priors: true,
            gps_sigma: 1.0,
            f3dr_trans_weight: 1.0,
            f3dr_rot_weight: 1.0e4,
            icp_trans_weight: 4.0,
            icp_rot_weight: 1.0e4,
            loop_trans_weight: 1.0,
            loop_rot_weight: 1.0e4,
            huber_width: 3.0,
            icp_fitness_floor: 0.3,
            icp_gate_trans: 3.0,
            icp_gate_rot: 0.1,
            icp: IcpConfig::default(),
        }
    }
}

impl PoseGraphConfig {
    fn gps_information(&self) -> Vector3<f64> {
        let sigma = self.gps_sigma.max(1e-3);
        Vector3::repeat(1.0 / (sigma * sigma))
    }

    fn rel_information(&self, kind: FactorKind) -> Vector6<f64> {
        let (t, r) = match kind {
            FactorKind::IcpRel => (self.icp_trans_weight, self.icp_rot_weight),
            FactorKind::LoopRel => (self.loop_trans_weight, self.loop_rot_weight),
            _ => (self.f3dr_trans_weight, self.f3dr_rot_weight),
        };
        Vector6::new(t, t, t, r, r, r)
    }
}

/// Metric-scaled contents of one submap.
#[derive(Clone, Debug, Default)]
struct SubmapData {
    frame_ids: Vec<u64>,
    /// anchor ← camera, metric
    frame_poses: Vec<Pose>,
    clouds: Vec<PointCloud>,
    overlap_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct PoseGraph {
    pub config: PoseGraphConfig,
    nodes: Vec<PoseNode>,
    factors: Vec<Factor>,
    submaps: Vec<SubmapData>,
    scale: f64,
    scale_initialized: bool,
    initial_rotation: UnitQuaternion<f64>,
}

impl Default for PoseGraph {
    fn default() -> Self {
        Self::new(PoseGraphConfig::default())
    }
}

impl PoseGraph {
    pub fn new(config: PoseGraphConfig) -> Self {
        Self {
            config,
            nodes: Vec::new(),
            factors: Vec::new(),
            submaps: Vec::new(),
            scale: 1.0,
            scale_initialized: false,
            initial_rotation: nadir_rotation(0.0),
        }
    }

    /// Attitude of the first anchor, which GPS cannot observe.
    pub fn set_initial_rotation(&mut self, rotation: UnitQuaternion<f64>) {
        self.initial_rotation = rotation;
    }

    pub fn nodes(&self) -> &[PoseNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&PoseNode> {
        self.nodes.get(id)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_node(&mut self, pose: Pose) -> usize {
        let id = self.nodes.len();
        self.nodes.push(PoseNode { id, pose, frame_count: 0 });
        self.submaps.push(SubmapData::default());
        id
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<()> {
        let (a, b) = factor.nodes();
        for n in std::iter::once(a).chain(b) {
            if n >= self.nodes.len() {
                return Err(PoseGraphError::UnknownNode(n));
            }
        }
        if b == Some(a) {
            return Err(PoseGraphError::BadInput(format!("relative factor on a single node {a}")));
        }
        if matches!(factor, Factor::Prior { .. }) != (factor.kind() == FactorKind::GpsPrior) {
            return Err(PoseGraphError::BadInput("factor kind does not match its measurement".into()));
        }
        if !factor.information().iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(PoseGraphError::BadInput("information must be positive definite".into()));
        }
        self.factors.push(factor);
        Ok(())
    }

    /// Adds one reconstructed batch; `gps` holds one fix per prediction frame.
    pub fn add_submap(&mut self, pred: &SubmapPrediction, gps: &[Vector3<f64>]) -> Result<usize> {
        let n = pred.len();
        if n == 0 || gps.len() != n || pred.frame_poses_local.len() != n || pred.clouds_local.len() != n {
            return Err(PoseGraphError::BadInput(format!("prediction of {n} frames with {} GPS fixes", gps.len())));
        }
        let prev = self.nodes.len().checked_sub(1);
        let shared: Vec<(usize, usize)> = match prev {
            None => Vec::new(),
            Some(p) => {
                let prev_map = &self.submaps[p];
                let pairs: Vec<(usize, usize)> = pred
                    .overlap_ids
                    .iter()
                    .filter_map(|id| Some((prev_map.frame_ids.iter().position(|f| f == id)?, pred.position_of(*id)?)))
                    .collect();
                if pairs.is_empty() {
                    return Err(PoseGraphError::NoOverlap);
                }
                pairs
            }
        };

        // Displacements from the first frame keep GPS noise small relative to the baseline.
        let pred_deltas: Vec<Vector3<f64>> = pred.frame_poses_local[1..]
            .iter()
            .map(|p| p.translation.vector - pred.frame_poses_local[0].translation.vector)
            .collect();
        let gps_deltas: Vec<Vector3<f64>> = gps[1..].iter().map(|g| g - gps[0]).collect();
        match estimate_scale(&pred_deltas, &gps_deltas, self.config.motion_floor) {
            Ok(s) if self.scale_initialized => {
                let a = self.config.scale_blend;
                self.scale = (1.0 - a) * self.scale + a * s;
            }
            Ok(s) => {
                self.scale = s;
                self.scale_initialized = true;
            }
            Err(PoseGraphError::DegenerateMotion) | Err(PoseGraphError::BadInput(_)) => {
                log::debug!("scale kept at {} for a submap without usable motion", self.scale);
            }
            Err(e) => return Err(e),
        }
        let s = self.scale;
        let data = SubmapData {
            frame_ids: pred.frame_ids.clone(),
            frame_poses: pred.frame_poses_local.iter().map(|p| scale_translation(p, s)).collect(),
            clouds: pred.clouds_local.iter().map(|c| c.scaled(s)).collect(),
            overlap_len: pred.overlap_ids.len(),
        };

        let id = self.nodes.len();
        let pose = match prev {
            None => Isometry3::from_parts(Translation3::from(gps[0]), self.initial_rotation),
            Some(p) => {
                let prev_map = &self.submaps[p];
                let estimates: Vec<Pose> = shared
                    .iter()
                    .map(|&(i, j)| prev_map.frame_poses[i] * data.frame_poses[j].inverse())
                    .collect();
                let rel = mean_pose(&estimates).expect("overlap is non-empty");
                let mut source = PointCloud::new();
                let mut target = PointCloud::new();
                for &(i, j) in &shared {
                    source.extend_from(&data.clouds[j]);
                    target.extend_from(&prev_map.clouds[i]);
                }
                let icp = icp_align(&source, &target, &rel, &self.config.icp);
                let prev_pose = self.nodes[p].pose;
                self.factors.push(Factor::Relative {
                    kind: FactorKind::F3drRel,
                    from: p,
                    to: id,
                    measurement: rel,
                    information: self.config.rel_information(FactorKind::F3drRel),
                });
                match icp {
                    Ok(r) if r.fitness >= self.config.icp_fitness_floor && !icp_agrees(&rel, &r.transform, &self.config) => {
                        log::info!("submap {id}: ICP disagrees with the reconstruction, factor skipped")
                    }
                    Ok(r) if r.fitness >= self.config.icp_fitness_floor => self.factors.push(Factor::Relative {
                        kind: FactorKind::IcpRel,
                        from: p,
                        to: id,
                        measurement: r.transform,
                        information: self.config.rel_information(FactorKind::IcpRel),
                    }),
                    Ok(r) => log::info!("submap {id}: ICP fitness {:.3} below floor, factor skipped", r.fitness),
                    Err(e) => log::info!("submap {id}: ICP failed ({e}), factor skipped"),
                }
                prev_pose * rel
            }
        };
        if self.config.use_gps_priors {
            self.factors.push(Factor::Prior {
                node: id,
                position: gps[0],
                information: self.config.gps_information(),
            });
        }
        self.nodes.push(PoseNode { id, pose, frame_count: n });
        self.submaps.push(data);
        Ok(id)
    }

    /// Nodes within `loop_radius` of `position` and at least `min_loop_gap` older
    /// than the newest node, nearest first.
    pub fn detect_loop_candidates(&self, position: &Vector3<f64>) -> Vec<usize> {
        let Some(newest) = self.nodes.len().checked_sub(1) else { return Vec::new() };
        let mut found: Vec<(f64, usize)> = self
            .nodes
            .iter()
            .filter(|n| newest - n.id >= self.config.min_loop_gap)
            .map(|n| ((n.pose.translation.vector - position).norm(), n.id))
            .filter(|(d, _)| *d <= self.config.loop_radius)
            .collect();
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.into_iter().map(|(_, id)| id).collect()
    }

    /// Adds a robust loop factor measuring `T_from⁻¹·T_to`.
    pub fn add_loop(&mut self, from: usize, to: usize, measurement: Pose) -> Result<()> {
        self.add_factor(Factor::Relative {
            kind: FactorKind::LoopRel,
            from,
            to,
            measurement,
            information: self.config.rel_information(FactorKind::LoopRel),
        })
    }

    /// World poses of every frame in a submap, in batch order.
    pub fn frame_world_poses(&self, node: usize) -> Vec<(u64, Pose)> {
        let (Some(n), Some(data)) = (self.nodes.get(node), self.submaps.get(node)) else { return Vec::new() };
        data.frame_ids.iter().zip(&data.frame_poses).map(|(id, p)| (*id, n.pose * p)).collect()
    }

    /// Frames a submap introduced, i.e. excluding the overlap with its predecessor.
    pub fn owned_frame_ids(&self, node: usize) -> &[u64] {
        self.submaps.get(node).map_or(&[], |d| &d.frame_ids[d.overlap_len..])
    }

    /// Owned-frame clouds of every submap, transformed into the world frame.
    pub fn export_world_cloud(&self) -> PointCloud {
        let mut out = PointCloud::new();
        for (node, data) in self.nodes.iter().zip(&self.submaps) {
            for cloud in &data.clouds[data.overlap_len.min(data.clouds.len())..] {
                out.extend_from(&cloud.transformed(&node.pose));
            }
        }
        out
    }

    /// Total robust cost at the current poses.
    pub fn cost(&self) -> f64 {
        let poses: Vec<Pose> = self.nodes.iter().map(|n| n.pose).collect();
        self.cost_at(&poses)
    }

    fn cost_at(&self, poses: &[Pose]) -> f64 {
        self.factors.iter().map(|f| self.rho(f, whitened_residual(f, poses).norm_squared())).sum()
    }

    fn rho(&self, f: &Factor, s: f64) -> f64 {
        let d = self.config.huber_width;
        if f.kind() == FactorKind::LoopRel && s > d * d {
            2.0 * d * s.sqrt() - d * d
        } else {
            s
        }
    }

    fn robust_weight(&self, f: &Factor, s: f64) -> f64 {
        let d = self.config.huber_width;
        if f.kind() == FactorKind::LoopRel && s > d * d {
            d / s.sqrt()
        } else {
            1.0
        }
    }

    /// Damped Gauss–Newton (Levenberg–Marquardt). Only cost-reducing steps are
    /// taken, so `final_cost ≤ initial_cost`.
    pub fn optimize(&mut self, max_iter: usize) -> Result<OptimizeReport> {
        if self.factors.is_empty() {
            return Err(PoseGraphError::NoFactors);
        }
        const REL_TOL: f64 = 1e-10;
        const ABS_TOL: f64 = 1e-20;
        let has_prior = self.factors.iter().any(|f| matches!(f, Factor::Prior { .. }));
        let var_of: Vec<Option<usize>> = {
            let mut next = 0;
            (0..self.nodes.len())
                .map(|i| {
                    if i == 0 && !has_prior {
                        None
                    } else {
                        next += 1;
                        Some((next - 1) * 6)
                    }
                })
                .collect()
        };
        // Position priors leave the global orientation free, so the first
        // node keeps its initial rotation.
        let pinned = if has_prior { var_of[0] } else { None };
        let dim = var_of.iter().flatten().count() * 6;
        let mut poses: Vec<Pose> = self.nodes.iter().map(|n| n.pose).collect();
        let initial_cost = self.cost_at(&poses);
        let mut cost = initial_cost;
        let mut lambda = 1e-4;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < max_iter.max(1) {
            iterations += 1;
            if cost <= ABS_TOL || dim == 0 {
                converged = true;
                break;
            }
            let (mut triplets, diag, grad) = self.linearize(&poses, &var_of, pinned, dim);
            if let Some(o) = pinned {
                triplets.extend((0..3).map(|k| (o + k, o + k, 1.0)));
            }
            let mut accepted = None;
            while lambda < 1e12 {
                let mut coo = CooMatrix::new(dim, dim);
                for &(r, c, v) in &triplets {
                    coo.push(r, c, v);
                }
                for (i, d) in diag.iter().enumerate() {
                    coo.push(i, i, lambda * d.max(1e-9));
                }
                let h = CscMatrix::from(&coo);
                if let Ok(chol) = CscCholesky::factor(&h) {
                    let step = chol.solve(&DMatrix::from_column_slice(dim, 1, (-&grad).as_slice()));
                    let candidate: Vec<Pose> = poses
                        .iter()
                        .zip(&var_of)
                        .map(|(p, v)| match v {
                            Some(o) => retract(p, &step.as_slice()[*o..*o + 6]),
                            None => *p,
                        })
                        .collect();
                    let c = self.cost_at(&candidate);
                    if c < cost {
                        accepted = Some((candidate, c));
                        lambda = (lambda * 0.1).max(1e-12);
                        break;
                    }
                }
                lambda *= 10.0;
            }
            let Some((candidate, c)) = accepted else {
                converged = true;
                break;
            };
            let decrease = cost - c;
            poses = candidate;
            cost = c;
            if decrease <= REL_TOL * cost.max(ABS_TOL) {
                converged = true;
                break;
            }
        }
        for (node, pose) in self.nodes.iter_mut().zip(poses) {
            node.pose = pose;
        }
        Ok(OptimizeReport { initial_cost, final_cost: cost, iterations, converged })
    }

    /// Normal equations from numerically differentiated whitened residuals.
    fn linearize(
        &self,
        poses: &[Pose],
        var_of: &[Option<usize>],
        pinned: Option<usize>,
        dim: usize,
    ) -> (Vec<(usize, usize, f64)>, Vec<f64>, DVector<f64>) {
        const H: f64 = 1e-6;
        let mut triplets = Vec::new();
        let mut diag = vec![0.0; dim];
        let mut grad = DVector::zeros(dim);
        let mut work = poses.to_vec();
        for f in &self.factors {
            let r0 = whitened_residual(f, poses);
            let m = r0.len();
            let sw = self.robust_weight(f, r0.norm_squared()).sqrt();
            let (a, b) = f.nodes();
            let mut blocks: Vec<(usize, SMatrix<f64, 6, 6>)> = Vec::new();
            for node in std::iter::once(a).chain(b) {
                let Some(offset) = var_of[node] else { continue };
                let mut j = SMatrix::<f64, 6, 6>::zeros();
                let first = if pinned == Some(offset) { 3 } else { 0 };
                for k in first..6 {
                    let mut d = [0.0; 6];
                    d[k] = H;
                    work[node] = retract(&poses[node], &d);
                    let rp = whitened_residual(f, &work);
                    d[k] = -H;
                    work[node] = retract(&poses[node], &d);
                    let rm = whitened_residual(f, &work);
                    work[node] = poses[node];
                    for row in 0..m {
                        j[(row, k)] = sw * (rp[row] - rm[row]) / (2.0 * H);
                    }
                }
                blocks.push((offset, j));
            }
            let mut r = Vector6::zeros();
            for i in 0..m {
                r[i] = sw * r0[i];
            }
            for (oa, ja) in &blocks {
                let g = ja.transpose() * &r;
                for i in 0..6 {
                    grad[oa + i] += g[i];
                }
                for (ob, jb) in &blocks {
                    let h: Matrix6<f64> = ja.transpose() * jb;
                    for i in 0..6 {
                        for k in 0..6 {
                            if h[(i, k)] != 0.0 {
                                triplets.push((oa + i, ob + k, h[(i, k)]));
                            }
                        }
                        if oa == ob {
                            diag[oa + i] += h[(i, i)];
                        }
                    }
                }
            }
        }
        (triplets, diag, grad)
    }

    /// Line-oriented text dump: `SCALE`, then `NODE` lines, then one line per factor.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "SCALE {}", self.scale).unwrap();
        for n in &self.nodes {
            let (t, q) = (n.pose.translation.vector, n.pose.rotation.quaternion());
            writeln!(out, "NODE {} {} {} {} {} {} {} {} {}", n.id, t.x, t.y, t.z, q.w, q.i, q.j, q.k, n.frame_count)
                .unwrap();
        }
        for f in &self.factors {
            match f {
                Factor::Prior { node, position: p, information: i } => {
                    writeln!(out, "GPS_PRIOR {node} {} {} {} {} {} {}", p.x, p.y, p.z, i[0], i[1], i[2]).unwrap()
                }
                Factor::Relative { kind, from, to, measurement, information: i } => {
                    let (t, q) = (measurement.translation.vector, measurement.rotation.quaternion());
                    writeln!(
                        out,
                        "{kind} {from} {to} {} {} {} {} {} {} {} {} {} {} {} {} {}",
                        t.x, t.y, t.z, q.w, q.i, q.j, q.k, i[0], i[1], i[2], i[3], i[4], i[5]
                    )
                    .unwrap()
                }
            }
        }
        out
    }

    /// Parses [`PoseGraph::to_text`] output. Submap clouds are not part of the format.
    pub fn from_text(text: &str, config: PoseGraphConfig) -> Result<PoseGraph> {
        let mut g = PoseGraph::new(config);
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let perr = |msg: String| PoseGraphError::Parse { line, msg };
            let mut parts = raw.split_whitespace();
            let Some(tag) = parts.next() else { continue };
            if tag.starts_with('#') {
                continue;
            }
            let nums: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|e| perr(format!("{p:?}: {e}"))))
                .collect::<Result<_>>()?;
            let want = |n: usize| if nums.len() == n { Ok(()) } else { Err(perr(format!("{tag} expects {n} values, got {}", nums.len()))) };
            let index = |x: f64| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(perr(format!("{x} is not an index")))
                }
            };
            let pose_at = |v: &[f64]| {
                let q = Quaternion::new(v[3], v[4], v[5], v[6]);
                let q = if (q.norm() - 1.0).abs() < 1e-12 {
                    UnitQuaternion::new_unchecked(q)
                } else {
                    UnitQuaternion::from_quaternion(q)
                };
                Isometry3::from_parts(Translation3::new(v[0], v[1], v[2]), q)
            };
            match tag {
                "SCALE" => {
                    want(1)?;
                    if !(nums[0] > 0.0) {
                        return Err(perr("scale must be positive".into()));
                    }
                    g.scale = nums[0];
                    g.scale_initialized = true;
                }
                "NODE" => {
                    want(9)?;
                    let id = index(nums[0])?;
                    if id != g.nodes.len() {
                        return Err(perr(format!("node ids must be dense, expected {}", g.nodes.len())));
                    }
                    let id = g.add_node(pose_at(&nums[1..8]));
                    g.nodes[id].frame_count = index(nums[8])?;
                }
                "GPS_PRIOR" => {
                    want(7)?;
                    g.add_factor(Factor::Prior {
                        node: index(nums[0])?,
                        position: Vector3::new(nums[1], nums[2], nums[3]),
                        information: Vector3::new(nums[4], nums[5], nums[6]),
                    })
                    .map_err(|e| perr(e.to_string()))?;
                }
                other => {
                    let kind: FactorKind = other.parse().map_err(perr)?;
                    if kind == FactorKind::GpsPrior {
                        unreachable!("handled above");
                    }
                    want(15)?;
                    g.add_factor(Factor::Relative {
                        kind,
                        from: index(nums[0])?,
                        to: index(nums[1])?,
                        measurement: pose_at(&nums[2..9]),
                        information: Vector6::from_column_slice(&nums[9..15]),
                    })
                    .map_err(|e| perr(e.to_string()))?;
                }
            }
        }
        Ok(g)
    }
}

/// `R ← R·Exp(ω)`, `t ← t + v` for `d = [ω; v]`.
/// Whether an ICP estimate stays within the configured gate of the reconstruction estimate.
fn icp_agrees(reconstruction: &Pose, icp: &Pose, config: &PoseGraphConfig) -> bool {
    let d = reconstruction.inverse() * icp;
    d.translation.vector.norm() <= config.icp_gate_trans && d.rotation.angle() <= config.icp_gate_rot
}

fn retract(p: &Pose, d: &[f64]) -> Pose {
    let mut rotation = p.rotation * UnitQuaternion::from_scaled_axis(Vector3::new(d[0], d[1], d[2]));
    rotation.renormalize();
    Isometry3::from_parts(Translation3::from(p.translation.vector + Vector3::new(d[3], d[4], d[5])), rotation)
}

fn whitened_residual(f: &Factor, poses: &[Pose]) -> DVector<f64> {
    match f {
        Factor::Prior { node, position, information } => {
            let r = poses[*node].translation.vector - position;
            DVector::from_iterator(3, (0..3).map(|i| information[i].sqrt() * r[i]))
        }
        Factor::Relative { from, to, measurement, information, .. } => {
            let e = measurement.inverse() * (poses[*from].inverse() * poses[*to]);
            let t = e.translation.vector;
            let w = e.rotation.scaled_axis();
            let r = [t.x, t.y, t.z, w.x, w.y, w.z];
            DVector::from_iterator(6, (0..6).map(|i| information[i].sqrt() * r[i]))
        }
    }
}

/// Mean translation error of graph nodes against reference anchor poses.
pub fn mean_position_error(graph: &PoseGraph, truth: &[Pose]) -> f64 {
    let n = graph.len().min(truth.len());
    if n == 0 {
        return 0.0;
    }
    graph.nodes()[..n]
        .iter()
        .zip(truth)
        .map(|(node, t)| (node.pose.translation.vector - t.translation.vector).norm())
        .sum::<f64>()
        / n as f64
}

/// Nearest-neighbor residuals from every point of `a` to the closest point of `b`.
pub fn nearest_distances(a: &[Point3<f64>], b: &[Point3<f64>]) -> Vec<f64> {
    let tree = KdTree::<3>::build(b.iter().map(|p| [p.x, p.y, p.z]).collect());
    a.iter()
        .map(|p| tree.nearest(&[p.x, p.y, p.z]).map_or(f64::INFINITY, |(_, d2)| d2.sqrt()))
        .collect()
}
