//! Deterministic sense–map–plan–move runner, task sequencing with a ground-truth
//! termination oracle, and evaluation metrics.
//!
//! A run advances in fixed ticks. Each tick asks the planner for an update, moves
//! the robot along its plan at bounded speed, captures a frame every
//! `capture_interval` meters, and every `submap_frames` captures reconstructs a
//! submap, adds it to the pose graph, optimizes, and fuses the new frames into
//! the grids. A task completes once any of its goal cells is observed after the
//! task was issued.

use std::io::{self, Write};
use std::path::Path;

use nalgebra::{Point2, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::baselines::{coverage_plan, BaselinePlanner, PlannerKind};
use crate::geometry::{nadir_pose, similarity_fit, PointCloud, Pose, Rect};
use crate::grid::{Cell, GridSpec};
use crate::mapping::{ChangeBBox, OccupancyGrid, SemanticMap, DEFAULT_EMA_ALPHA, DEFAULT_FEATURE_STRIDE};
use crate::planner::{ExplorationPlanner, HaloPlanner, PathPlan, PlanContext, PlanMode, PlanUpdate, PlannerConfig, PlannerError};
use crate::posegraph::{OptimizeReport, PoseGraph, PoseGraphConfig, PoseGraphError};
use crate::spatial::KdTree;
use crate::taskinfo::{update_relevancy, ClusterSet, FrontierParams, RelevancyGrid, RelevancyScope, TaskEmbedding};
use crate::world::{emulate_f3dr, perturb_relative, render_frame, sample_gps, CameraModel, NoiseSpec, SemanticWorld, SensorFrame, WorldError};

#[derive(Debug, Error)]
pub enum MissionError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("invalid mission: {0}")]
    BadSpec(String),
    #[error("distances must be positive, got d_opt = {d_opt}, d_actual = {d_actual}")]
    BadDistance { d_opt: f64, d_actual: f64 },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("the run has already finished")]
    Finished,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, MissionError>;

/// One task: its embedding and the ground-truth goal cells that end it.
#[derive(Clone, Debug, PartialEq)]
pub struct MissionTask {
    pub embedding: TaskEmbedding,
    pub goals: Vec<Cell>,
}

impl MissionTask {
    pub fn id(&self) -> &str {
        &self.embedding.task_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MissionSpec {
    pub tasks: Vec<MissionTask>,
    pub start: Point2<f64>,
    pub bounds: Rect,
    pub v_max: f64,
    pub altitude: f64,
    /// Meters of path between captures.
    pub capture_interval: f64,
    pub dt: f64,
    /// Straight scale-initialization leg flown before planning starts, meters.
    pub initial_leg: f64,
    /// Simulated seconds before the run is cut off.
    pub budget_s: f64,
    pub submap_frames: usize,
    pub overlap_frames: usize,
    /// Required clearance of `altitude` over the highest terrain, meters.
    pub altitude_margin: f64,
}

impl MissionSpec {
    pub fn new(tasks: Vec<MissionTask>, start: Point2<f64>, bounds: Rect) -> Self {
        Self {
            tasks,
            start,
            bounds,
            v_max: 2.0,
            altitude: 40.0,
            capture_interval: 2.0,
            dt: 0.5,
            initial_leg: 10.0,
            budget_s: 1800.0,
            submap_frames: 5,
            overlap_frames: 3,
            altitude_margin: 5.0,
        }
    }

    pub fn validate(&self, world: &SemanticWorld) -> Result<()> {
        let bad = |m: String| Err(MissionError::BadSpec(m));
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if let Some(t) = self.tasks.iter().find(|t| t.goals.is_empty()) {
            return bad(format!("task '{}' has no goal cells", t.id()));
        }
        let spec = world.spec();
        if let Some(t) = self.tasks.iter().find(|t| t.goals.iter().any(|c| c.0 >= spec.nx || c.1 >= spec.ny)) {
            return bad(format!("task '{}' has a goal outside the terrain", t.id()));
        }
        if let Some(t) = self.tasks.iter().find(|t| t.embedding.vector().len() != world.feature_dim()) {
            return bad(format!("task '{}' embedding has dimension {}, world has {}", t.id(), t.embedding.vector().len(), world.feature_dim()));
        }
        let positive = [
            ("v_max", self.v_max),
            ("capture_interval", self.capture_interval),
            ("dt", self.dt),
            ("budget_s", self.budget_s),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return bad(format!("{name} must be positive, got {v}"));
        }
        if !(self.initial_leg >= 0.0) {
            return bad(format!("initial_leg must be non-negative, got {}", self.initial_leg));
        }
        if self.submap_frames < 2 || self.overlap_frames == 0 {
            return bad("submaps need at least 2 new frames and 1 overlap frame".into());
        }
        let ceiling = world.terrain.max_elevation() + self.altitude_margin;
        if !(self.altitude >= ceiling) {
            return bad(format!("altitude {} m is below terrain maximum plus margin ({ceiling} m)", self.altitude));
        }
        if self.bounds.is_degenerate() {
            return bad("mission bounds are degenerate".into());
        }
        let wb = spec.bounds();
        if !(wb.contains(&self.bounds.min) && wb.contains(&self.bounds.max)) {
            return bad("mission bounds exceed the terrain".into());
        }
        if !self.bounds.contains(&self.start) {
            return bad("start lies outside the mission bounds".into());
        }
        Ok(())
    }
}

/// Which poses the grids are fused with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    #[default]
    Estimated,
    GroundTruth,
}

/// Everything a run needs besides the world.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub mission: MissionSpec,
    pub noise: NoiseSpec,
    pub camera: CameraModel,
    pub graph: PoseGraphConfig,
    pub planner: PlannerConfig,
    pub frontier: FrontierParams,
    pub ema_alpha: f64,
    pub feature_stride: usize,
    /// Levenberg–Marquardt iterations after each submap.
    pub optimize_iters: usize,
    pub pose_source: PoseSource,
    /// Idle ticks without map progress before a run is declared stalled.
    pub stall_ticks: usize,
    /// Unknown cells deeper than this inside the footprint of a fused frame are
    /// flagged unobservable, meters.
    pub unobservable_margin: f64,
}

impl SimConfig {
    pub fn new(mission: MissionSpec) -> Self {
        Self {
            mission,
            noise: NoiseSpec::default(),
            camera: CameraModel::default(),
            graph: PoseGraphConfig::default(),
            planner: PlannerConfig::default(),
            frontier: FrontierParams::default(),
            ema_alpha: DEFAULT_EMA_ALPHA,
            feature_stride: DEFAULT_FEATURE_STRIDE,
            optimize_iters: 10,
            pose_source: PoseSource::Estimated,
            stall_ticks: 10,
            unobservable_margin: 4.0,
        }
    }

    pub fn validate(&self, world: &SemanticWorld) -> Result<()> {
        self.mission.validate(world)?;
        self.noise.validate()?;
        self.camera.validate()?;
        self.planner.validate()?;
        self.frontier.validate().map_err(|e| MissionError::BadSpec(e.to_string()))?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(MissionError::BadSpec(format!("ema_alpha must lie in (0, 1], got {}", self.ema_alpha)));
        }
        Ok(())
    }

    /// Footprint half-width at the mission altitude over mean terrain.
    pub fn footprint_half_width(&self, world: &SemanticWorld) -> f64 {
        self.camera.footprint_half_width(self.mission.altitude - world.terrain.mean_elevation())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RobotState {
    pub position: Vector3<f64>,
    pub time: f64,
    pub distance_traveled: f64,
    pub since_capture: f64,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: String,
    pub data: Value,
}

pub fn write_event_log<W: Write>(events: &[Event], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub time_s: f64,
    pub distance_m: f64,
    pub d_opt_m: f64,
    /// `None` for incomplete tasks.
    pub cr: Option<f64>,
    pub complete: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub accuracy: f64,
    pub completion: f64,
    pub chamfer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub planner: PlannerKind,
    pub seed: u64,
    pub tasks: Vec<TaskMetrics>,
    pub total_time_s: f64,
    pub total_distance_m: f64,
    pub timed_out: bool,
    pub stalled: bool,
    pub recon: Option<ReconMetrics>,
}

impl MetricsRecord {
    pub fn all_complete(&self) -> bool {
        self.tasks.iter().all(|t| t.complete)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "task_id,time_s,distance_m,d_opt_m,cr,complete")?;
        for t in &self.tasks {
            writeln!(w, "{},{},{},{},{},{}", t.task_id, t.time_s, t.distance_m, t.d_opt_m, fmt_opt(t.cr), t.complete)?;
        }
        Ok(())
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// `d_opt / d_actual`, capped at 1.
pub fn competitive_ratio(d_opt: f64, d_actual: f64) -> Result<f64> {
    if !(d_opt > 0.0 && d_actual > 0.0) || !d_opt.is_finite() || !d_actual.is_finite() {
        return Err(MissionError::BadDistance { d_opt, d_actual });
    }
    Ok((d_opt / d_actual).min(1.0))
}

/// Ratio for a finished task; a task solvable without moving scores 1.
pub fn task_ratio(d_opt: f64, d_actual: f64) -> f64 {
    competitive_ratio(d_opt, d_actual).unwrap_or(1.0)
}

/// Horizontal distance from `issue` to the first position whose footprint holds
/// a goal cell center.
pub fn shortest_goal_distance(goals: &[Cell], spec: &GridSpec, issue: &Point2<f64>, half_width: f64) -> f64 {
    goals
        .iter()
        .map(|&c| (nalgebra::distance(issue, &spec.cell_center(c)) - half_width).max(0.0))
        .fold(f64::INFINITY, f64::min)
}

/// True once a goal cell has been observed at or after `since_stamp`.
pub fn check_termination(goals: &[Cell], occ: &OccupancyGrid, since_stamp: u64) -> bool {
    goals.iter().any(|&c| occ.is_known(c) && occ.last_seen(c) >= since_stamp)
}

/// RMSE of nearest-neighbor distances each way, and their mean. With `align`,
/// the reconstruction is first mapped onto `gt` by a similarity transform.
pub fn recon_metrics(recon: &PointCloud, gt: &PointCloud, align: bool) -> Result<ReconMetrics> {
    if recon.is_empty() || gt.is_empty() {
        return Err(MissionError::EmptyCloud);
    }
    let gt_tree = tree_of(&gt.points);
    let aligned: Vec<Point3<f64>> = if align {
        let (s, pose) = align_similarity(&recon.points, &gt.points, &gt_tree);
        recon.points.iter().map(|p| pose * Point3::from(p.coords * s)).collect()
    } else {
        recon.points.clone()
    };
    let recon_tree = tree_of(&aligned);
    let accuracy = rms(aligned.iter().map(|p| nearest(&gt_tree, p)));
    let completion = rms(gt.points.iter().map(|p| nearest(&recon_tree, p)));
    Ok(ReconMetrics { accuracy, completion, chamfer: 0.5 * (accuracy + completion) })
}

fn tree_of(points: &[Point3<f64>]) -> KdTree<3> {
    KdTree::build(points.iter().map(|p| [p.x, p.y, p.z]).collect())
}

fn nearest(tree: &KdTree<3>, p: &Point3<f64>) -> f64 {
    tree.nearest(&[p.x, p.y, p.z]).map_or(f64::INFINITY, |(_, d2)| d2.sqrt())
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    (sum / n.max(1) as f64).sqrt()
}

const ALIGN_SAMPLES: usize = 20_000;
const ALIGN_ITERS: usize = 30;

/// Centroid and RMS-radius matching, then nearest-neighbor similarity refinement.
fn align_similarity(src: &[Point3<f64>], dst: &[Point3<f64>], dst_tree: &KdTree<3>) -> (f64, Pose) {
    let step = (src.len() / ALIGN_SAMPLES).max(1);
    let sample: Vec<Point3<f64>> = src.iter().step_by(step).copied().collect();
    let centroid = |pts: &[Point3<f64>]| pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / pts.len() as f64;
    let radius = |pts: &[Point3<f64>], c: &Vector3<f64>| rms(pts.iter().map(|p| (p.coords - c).norm()));
    let (cs, cd) = (centroid(&sample), centroid(dst));
    let (rs, rd) = (radius(&sample, &cs), radius(dst, &cd));
    let mut s = if rs > 1e-12 && rd > 1e-12 { rd / rs } else { 1.0 };
    let mut pose = Pose::translation(cd.x - s * cs.x, cd.y - s * cs.y, cd.z - s * cs.z);
    let mut last = f64::INFINITY;
    for _ in 0..ALIGN_ITERS {
        let moved: Vec<Point3<f64>> = sample.iter().map(|p| pose * Point3::from(p.coords * s)).collect();
        let mut matched = Vec::with_capacity(moved.len());
        let mut err = 0.0;
        for p in &moved {
            let (i, d2) = dst_tree.nearest(&[p.x, p.y, p.z]).expect("non-empty target");
            let q = dst_tree.point(i);
            matched.push(Point3::new(q[0], q[1], q[2]));
            err += d2;
        }
        let err = (err / moved.len() as f64).sqrt();
        let Some((s_new, pose_new)) = similarity_fit(&sample, &matched) else { break };
        if !(s_new > 0.0) {
            break;
        }
        s = s_new;
        pose = pose_new;
        if (last - err).abs() <= 1e-9 * last.max(1.0) {
            break;
        }
        last = err;
    }
    (s, pose)
}

/// Result of reconstructing one batch of frames.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub node: usize,
    /// Frames this batch introduced, with the poses used to fuse them.
    pub frames: Vec<(SensorFrame, Pose)>,
    pub loop_with: Option<usize>,
    pub report: OptimizeReport,
    pub scale: f64,
}

/// Frame capture and submap reconstruction feeding a pose graph.
#[derive(Clone, Debug)]
pub struct SubmapBatcher {
    pub graph: PoseGraph,
    pending: Vec<(SensorFrame, Vector3<f64>)>,
    overlap: Vec<(SensorFrame, Vector3<f64>)>,
    anchors_true: Vec<Pose>,
    next_frame_id: u64,
    batch: usize,
    overlap_len: usize,
}

impl SubmapBatcher {
    pub fn new(graph: PoseGraph, batch: usize, overlap_len: usize) -> Self {
        Self {
            graph,
            pending: Vec::new(),
            overlap: Vec::new(),
            anchors_true: Vec::new(),
            next_frame_id: 0,
            batch,
            overlap_len,
        }
    }

    /// Id the next captured frame will get.
    pub fn next_frame_id(&self) -> u64 {
        self.next_frame_id
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_full(&self) -> bool {
        self.pending.len() >= self.batch
    }

    pub fn can_flush(&self) -> bool {
        !self.pending.is_empty() && self.pending.len() + self.overlap.len() >= 2
    }

    /// True anchor pose of each node, used by the loop-closure oracle.
    pub fn true_anchors(&self) -> &[Pose] {
        &self.anchors_true
    }

    pub fn capture(
        &mut self,
        world: &SemanticWorld,
        camera: &CameraModel,
        noise: &NoiseSpec,
        pose: &Pose,
        time: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<u64> {
        let id = self.next_frame_id;
        let frame = render_frame(world, pose, camera, noise, rng)?.with_stamp(id, time);
        let gps = sample_gps(&pose.translation.vector, noise, rng).position;
        self.pending.push((frame, gps));
        self.next_frame_id += 1;
        Ok(id)
    }

    /// Reconstructs the pending frames with the retained overlap, adds the submap,
    /// closes at most one loop and optimizes.
    pub fn process(&mut self, noise: &NoiseSpec, optimize_iters: usize, rng: &mut ChaCha8Rng) -> Result<BatchOutcome> {
        let new: Vec<SensorFrame> = self.pending.iter().map(|(f, _)| f.clone()).collect();
        let old: Vec<SensorFrame> = self.overlap.iter().map(|(f, _)| f.clone()).collect();
        let pred = emulate_f3dr(&new, &old, noise, rng)?;
        let gps: Vec<Vector3<f64>> = self.overlap.iter().chain(&self.pending).map(|(_, g)| *g).collect();
        let node = self.graph.add_submap(&pred, &gps)?;
        self.anchors_true.push(old.first().unwrap_or(&new[0]).true_pose);

        let position = self.graph.nodes()[node].pose.translation.vector;
        let loop_with = self.graph.detect_loop_candidates(&position).first().copied();
        if let Some(from) = loop_with {
            let meas = perturb_relative(&self.anchors_true[from], &self.anchors_true[node], noise, 1.0, rng);
            self.graph.add_loop(from, node, meas)?;
        }
        let report = optimize_if_constrained(&mut self.graph, optimize_iters)?;

        let poses = self.graph.frame_world_poses(node);
        let frames = std::mem::take(&mut self.pending)
            .into_iter()
            .map(|(f, g)| {
                let pose = poses.iter().find(|(id, _)| *id == f.id).map(|(_, p)| *p).expect("frame belongs to the submap");
                self.overlap.push((f.clone(), g));
                (f, pose)
            })
            .collect();
        let keep = self.overlap.len().saturating_sub(self.overlap_len);
        self.overlap.drain(..keep);
        Ok(BatchOutcome { node, frames, loop_with, report, scale: self.graph.scale() })
    }
}

/// A lone submap without GPS priors has nothing to optimize and keeps its pose.
fn optimize_if_constrained(graph: &mut PoseGraph, iters: usize) -> Result<OptimizeReport> {
    if graph.factors().is_empty() {
        let cost = graph.cost();
        return Ok(OptimizeReport { initial_cost: cost, final_cost: cost, iterations: 0, converged: true });
    }
    Ok(graph.optimize(iters)?)
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct MissionOutcome {
    pub metrics: MetricsRecord,
    pub events: Vec<Event>,
    pub map: SemanticMap,
    pub clusters: ClusterSet,
    pub relevancy: RelevancyGrid,
    pub graph: PoseGraph,
    /// Robot positions at every tick.
    pub trajectory: Vec<Point2<f64>>,
}

impl MissionOutcome {
    /// Writes grid matrices, the feature and relevancy grids, frontier clusters,
    /// the pose graph, the reconstructed cloud and the terrain as PLY.
    pub fn export_maps(&self, world: &SemanticWorld, dir: &Path) -> io::Result<()> {
        use std::fs::File;
        use std::io::BufWriter;
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
        self.map.occupancy.write_matrix(open("occupancy.txt")?)?;
        self.map.features.write_binary(open("features.bin")?)?;
        self.relevancy.write_binary(open("relevancy.bin")?)?;
        self.clusters.write_text(open("frontiers.txt")?)?;
        open("posegraph.txt")?.write_all(self.graph.to_text().as_bytes())?;
        self.graph.export_world_cloud().write_ply(open("reconstruction.ply")?)?;
        world.surface_cloud(1).write_ply(open("terrain.ply")?)?;
        let mut traj = open("trajectory.csv")?;
        writeln!(traj, "x,y")?;
        for p in &self.trajectory {
            writeln!(traj, "{},{}", p.x, p.y)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ActiveTask {
    index: usize,
    issue_time: f64,
    issue_distance: f64,
    issue_stamp: u64,
    d_opt: f64,
}

/// A mission in progress.
pub struct SimRun<'w> {
    world: &'w SemanticWorld,
    cfg: SimConfig,
    kind: PlannerKind,
    seed: u64,
    rng: ChaCha8Rng,
    batcher: SubmapBatcher,
    map: SemanticMap,
    clusters: ClusterSet,
    rel: RelevancyGrid,
    planner: Box<dyn ExplorationPlanner>,
    robot: RobotState,
    plan: Option<PathPlan>,
    waypoint: usize,
    scripted: bool,
    active: Option<ActiveTask>,
    new_task: bool,
    exhausted: bool,
    idle_ticks: usize,
    ticks: u64,
    results: Vec<TaskMetrics>,
    events: Vec<Event>,
    trajectory: Vec<Point2<f64>>,
    half_width: f64,
    inner_half_width: f64,
    timed_out: bool,
    stalled: bool,
    finished: bool,
}

impl<'w> SimRun<'w> {
    pub fn new(world: &'w SemanticWorld, cfg: &SimConfig, kind: PlannerKind, seed: u64) -> Result<Self> {
        cfg.validate(world)?;
        let spec = *world.spec();
        let m = &cfg.mission;
        let half_width = cfg.footprint_half_width(world);
        let planner: Box<dyn ExplorationPlanner> = match kind {
            PlannerKind::Halo => Box::new(HaloPlanner::new(spec, m.bounds, cfg.planner)?),
            PlannerKind::Baseline(b) => Box::new(BaselinePlanner::new(b, m.bounds, 2.0 * half_width, cfg.planner)?),
        };
        let mut map = SemanticMap::new(spec, world.feature_dim(), cfg.ema_alpha);
        map.feature_stride = cfg.feature_stride.max(1);
        // Cells outside the mission bounds never become exploration targets.
        let (xs, ys) = spec.cells_centered_in(&m.bounds);
        for iy in 0..spec.ny {
            for ix in 0..spec.nx {
                if !(xs.contains(&ix) && ys.contains(&iy)) {
                    map.occupancy.mark_unobservable((ix, iy));
                }
            }
        }
        let mut graph = PoseGraph::new(cfg.graph);
        graph.set_initial_rotation(nadir_pose(Vector3::zeros(), 0.0).rotation);
        Ok(Self {
            world,
            kind,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batcher: SubmapBatcher::new(graph, m.submap_frames, m.overlap_frames),
            map,
            clusters: ClusterSet::new(),
            rel: RelevancyGrid::new(spec),
            planner,
            robot: RobotState {
                position: Vector3::new(m.start.x, m.start.y, m.altitude),
                time: 0.0,
                distance_traveled: 0.0,
                since_capture: 0.0,
            },
            plan: None,
            waypoint: 0,
            scripted: false,
            active: None,
            new_task: false,
            exhausted: false,
            idle_ticks: 0,
            ticks: 0,
            results: Vec::new(),
            events: Vec::new(),
            trajectory: Vec::new(),
            half_width,
            inner_half_width: cfg.camera.footprint_half_width(m.altitude - world.terrain.max_elevation()) - cfg.unobservable_margin,
            timed_out: false,
            stalled: false,
            finished: false,
            cfg: cfg.clone(),
        })
    }

    pub fn robot(&self) -> &RobotState {
        &self.robot
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn map(&self) -> &SemanticMap {
        &self.map
    }

    pub fn clusters(&self) -> &ClusterSet {
        &self.clusters
    }

    pub fn relevancy(&self) -> &RelevancyGrid {
        &self.rel
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.batcher.graph
    }

    pub fn plan(&self) -> Option<&PathPlan> {
        self.plan.as_ref()
    }

    pub fn active_task(&self) -> Option<usize> {
        self.active.map(|a| a.index)
    }

    pub fn results(&self) -> &[TaskMetrics] {
        &self.results
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn is_idle(&self) -> bool {
        self.plan.as_ref().map_or(true, |p| self.waypoint >= p.waypoints.len())
    }

    fn xy(&self) -> Point2<f64> {
        Point2::new(self.robot.position.x, self.robot.position.y)
    }

    fn log(&mut self, kind: &str, data: Value) {
        self.events.push(Event { t: self.robot.time, kind: kind.to_string(), data });
    }

    /// Advances the simulation by one tick of `dt`.
    pub fn step(&mut self) -> Result<()> {
        if self.finished {
            return Err(MissionError::Finished);
        }
        if self.ticks == 0 {
            self.begin()?;
        }
        self.ticks += 1;

        let was_idle = self.is_idle();
        if self.scripted && was_idle {
            self.scripted = false;
        }
        if !self.scripted {
            self.consult_planner(was_idle)?;
        }

        let moved = self.advance();
        self.robot.time += self.cfg.mission.dt;
        self.trajectory.push(self.xy());
        let arrived = moved > 0.0 && self.is_idle();
        if self.robot.since_capture >= self.cfg.mission.capture_interval - 1e-9 || (arrived && self.robot.since_capture > 1e-9) {
            self.capture()?;
        }

        let mut progressed = moved > 0.0;
        if self.batcher.is_full() || (self.is_idle() && self.batcher.can_flush()) {
            self.process_batch()?;
            progressed = true;
        }
        self.check_tasks();
        if self.finished {
            return Ok(());
        }

        self.idle_ticks = if progressed { 0 } else { self.idle_ticks + 1 };
        if self.idle_ticks >= self.cfg.stall_ticks.max(1) || (self.exhausted && self.is_idle() && !self.batcher.can_flush()) {
            self.stalled = true;
            self.log("planner_stalled", json!({ "task": self.active.map(|a| a.index), "exhausted": self.exhausted }));
            self.finish();
        } else if self.robot.time >= self.cfg.mission.budget_s - 1e-9 {
            self.timed_out = true;
            self.log("timeout", json!({ "budget_s": self.cfg.mission.budget_s }));
            self.finish();
        }
        Ok(())
    }

    fn begin(&mut self) -> Result<()> {
        let m = &self.cfg.mission;
        let (start, leg, altitude) = (m.start, m.initial_leg, m.altitude);
        let center = m.bounds.center();
        let dir = if nalgebra::distance(&start, &center) > 1e-9 { (center - start).normalize() } else { nalgebra::Vector2::x() };
        let leg_end = start + dir * leg;
        self.log(
            "start",
            json!({ "planner": self.kind.as_str(), "seed": self.seed, "start": [start.x, start.y], "altitude": altitude }),
        );
        self.issue_task(0);
        self.capture()?;
        if leg > 0.0 {
            self.plan = Some(PathPlan { waypoints: vec![start, leg_end], mode: PlanMode::Explore, target_region: usize::MAX });
            self.waypoint = 1;
            self.scripted = true;
            self.log("initial_leg", json!({ "to": [leg_end.x, leg_end.y] }));
        }
        Ok(())
    }

    fn issue_task(&mut self, index: usize) {
        let task = &self.cfg.mission.tasks[index];
        let issue = self.xy();
        let d_opt = shortest_goal_distance(&task.goals, self.world.spec(), &issue, self.half_width);
        let id = task.id().to_string();
        self.active = Some(ActiveTask {
            index,
            issue_time: self.robot.time,
            issue_distance: self.robot.distance_traveled,
            issue_stamp: self.batcher.next_frame_id() + 1,
            d_opt,
        });
        update_relevancy(&mut self.rel, &self.map.features, &self.cfg.mission.tasks[index].embedding, RelevancyScope::Full);
        self.new_task = true;
        self.exhausted = false;
        self.log("task_issued", json!({ "task": id, "index": index, "position": [issue.x, issue.y], "d_opt": d_opt }));
    }

    fn consult_planner(&mut self, idle: bool) -> Result<()> {
        let ctx = PlanContext {
            time: self.robot.time,
            robot: self.xy(),
            occ: &self.map.occupancy,
            clusters: &self.clusters,
            rel: &self.rel,
            new_task: self.new_task,
            idle,
        };
        let update = self.planner.update(&ctx)?;
        self.new_task = false;
        match update {
            PlanUpdate::Keep => {}
            PlanUpdate::Replace(plan) => {
                let waypoints: Vec<[f64; 2]> = plan.waypoints.iter().map(|p| [p.x, p.y]).collect();
                let region = (plan.target_region != usize::MAX).then_some(plan.target_region);
                self.log("plan", json!({ "mode": plan.mode, "region": region, "waypoints": waypoints }));
                self.waypoint = 1.min(plan.waypoints.len());
                self.plan = Some(plan);
                self.exhausted = false;
            }
            PlanUpdate::Exhausted => {
                if idle && !self.exhausted {
                    self.log("exhausted", json!({ "task": self.active.map(|a| a.index) }));
                }
                self.exhausted = idle;
            }
        }
        Ok(())
    }

    /// Moves along the plan by at most `v_max·dt` of path length.
    fn advance(&mut self) -> f64 {
        let Some(plan) = &self.plan else { return 0.0 };
        let mut budget = self.cfg.mission.v_max * self.cfg.mission.dt;
        let mut moved = 0.0;
        let mut pos = self.xy();
        while budget > 0.0 && self.waypoint < plan.waypoints.len() {
            let target = plan.waypoints[self.waypoint];
            let d = nalgebra::distance(&pos, &target);
            if d <= budget {
                pos = target;
                budget -= d;
                moved += d;
                self.waypoint += 1;
            } else {
                pos += (target - pos) * (budget / d);
                moved += budget;
                budget = 0.0;
            }
        }
        self.robot.position.x = pos.x;
        self.robot.position.y = pos.y;
        self.robot.distance_traveled += moved;
        self.robot.since_capture += moved;
        moved
    }

    fn capture(&mut self) -> Result<()> {
        let pose = nadir_pose(self.robot.position, 0.0);
        let id = self.batcher.capture(self.world, &self.cfg.camera, &self.cfg.noise, &pose, self.robot.time, &mut self.rng)?;
        self.robot.since_capture = 0.0;
        let p = self.robot.position;
        self.log("capture", json!({ "frame": id, "position": [p.x, p.y, p.z] }));
        Ok(())
    }

    fn process_batch(&mut self) -> Result<()> {
        let out = self.batcher.process(&self.cfg.noise, self.cfg.optimize_iters, &mut self.rng)?;
        let mut bbox = ChangeBBox::empty();
        for (frame, est) in &out.frames {
            let pose = match self.cfg.pose_source {
                PoseSource::Estimated => *est,
                PoseSource::GroundTruth => frame.true_pose,
            };
            bbox = bbox.union(&self.map.integrate_frame(&pose, frame));
        }
        for (_, pose) in &out.frames {
            bbox = bbox.union(&self.flag_unobservable(pose));
        }
        self.map.take_change_bbox();
        self.clusters.update(&self.map.occupancy, &bbox, &self.cfg.frontier);
        if let Some(a) = self.active {
            let task = &self.cfg.mission.tasks[a.index].embedding;
            update_relevancy(&mut self.rel, &self.map.features, task, RelevancyScope::Changed(bbox));
        }
        let frames: Vec<u64> = out.frames.iter().map(|(f, _)| f.id).collect();
        let pose_error = out
            .frames
            .iter()
            .map(|(f, est)| (est.translation.vector - f.true_pose.translation.vector).norm())
            .sum::<f64>()
            / out.frames.len().max(1) as f64;
        self.log(
            "submap",
            json!({
                "node": out.node,
                "frames": frames,
                "scale": out.scale,
                "pose_error": pose_error,
                "loop_with": out.loop_with,
                "cost_before": out.report.initial_cost,
                "cost_after": out.report.final_cost,
                "clusters": self.clusters.len(),
                "known_cells": self.map.occupancy.known_count(),
            }),
        );
        Ok(())
    }

    /// Flags cells that stayed unknown deep inside a fused footprint.
    fn flag_unobservable(&mut self, pose: &Pose) -> ChangeBBox {
        let mut changed = ChangeBBox::empty();
        let r = self.inner_half_width;
        if r <= 0.0 {
            return changed;
        }
        let p = pose.translation.vector;
        let spec = *self.map.spec();
        let (xs, ys) = spec.cells_centered_in(&Rect::from_corners(p.x - r, p.y - r, p.x + r, p.y + r));
        for iy in ys {
            for ix in xs.clone() {
                if self.map.occupancy.mark_unobservable((ix, iy)) {
                    changed.include((ix, iy));
                }
            }
        }
        changed
    }

    fn check_tasks(&mut self) {
        let Some(a) = self.active else { return };
        let task = &self.cfg.mission.tasks[a.index];
        if !check_termination(&task.goals, &self.map.occupancy, a.issue_stamp) {
            return;
        }
        let distance = self.robot.distance_traveled - a.issue_distance;
        let cr = task_ratio(a.d_opt, distance);
        let id = task.id().to_string();
        self.results.push(TaskMetrics {
            task_id: id.clone(),
            time_s: self.robot.time - a.issue_time,
            distance_m: distance,
            d_opt_m: a.d_opt,
            cr: Some(cr),
            complete: true,
        });
        self.log("task_complete", json!({ "task": id, "distance": distance, "d_opt": a.d_opt, "cr": cr }));
        if a.index + 1 < self.cfg.mission.tasks.len() {
            self.issue_task(a.index + 1);
        } else {
            self.active = None;
            self.finish();
        }
    }

    fn finish(&mut self) {
        if let Some(a) = self.active.take() {
            for (k, task) in self.cfg.mission.tasks.iter().enumerate().skip(a.index) {
                let started = k == a.index;
                self.results.push(TaskMetrics {
                    task_id: task.id().to_string(),
                    time_s: if started { self.robot.time - a.issue_time } else { 0.0 },
                    distance_m: if started { self.robot.distance_traveled - a.issue_distance } else { 0.0 },
                    d_opt_m: if started { a.d_opt } else { f64::NAN },
                    cr: None,
                    complete: false,
                });
            }
        }
        self.finished = true;
        let r = self.robot;
        self.log(
            "end",
            json!({
                "time": r.time,
                "distance": r.distance_traveled,
                "complete": self.results.iter().all(|t| t.complete),
                "timed_out": self.timed_out,
                "stalled": self.stalled,
            }),
        );
    }

    /// Steps to completion and hands back the metrics and final state.
    pub fn run(mut self) -> Result<MissionOutcome> {
        while !self.finished {
            self.step()?;
        }
        Ok(self.into_outcome())
    }

    fn into_outcome(self) -> MissionOutcome {
        let metrics = MetricsRecord {
            planner: self.kind,
            seed: self.seed,
            tasks: self.results,
            total_time_s: self.robot.time,
            total_distance_m: self.robot.distance_traveled,
            timed_out: self.timed_out,
            stalled: self.stalled,
            recon: None,
        };
        MissionOutcome {
            metrics,
            events: self.events,
            map: self.map,
            clusters: self.clusters,
            relevancy: self.rel,
            graph: self.batcher.graph,
            trajectory: self.trajectory,
        }
    }
}

/// Runs one mission to completion, timeout or stall.
pub fn run_mission(world: &SemanticWorld, cfg: &SimConfig, kind: PlannerKind, seed: u64) -> Result<MissionOutcome> {
    SimRun::new(world, cfg, kind, seed)?.run()
}

/// Scripted flight patterns for reconstruction benchmarks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// Boustrophedon over the mission bounds.
    #[default]
    Coverage,
    /// Closed loop around the bounds, inset by half a footprint.
    Perimeter,
}

impl std::str::FromStr for Trajectory {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "coverage" => Ok(Self::Coverage),
            "perimeter" => Ok(Self::Perimeter),
            _ => Err(format!("unknown trajectory '{s}' (expected coverage or perimeter)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub gps: bool,
    pub frames: u64,
    pub submaps: usize,
    pub scale: f64,
    pub metrics: ReconMetrics,
    /// Exported world cloud before alignment.
    #[serde(skip)]
    pub cloud: PointCloud,
}

/// Positions every `interval` meters along a polyline, starting at its first point
/// and ending at its last.
pub fn sample_path(waypoints: &[Point2<f64>], interval: f64) -> Vec<Point2<f64>> {
    let mut out: Vec<Point2<f64>> = waypoints.first().copied().into_iter().collect();
    let mut carried = 0.0;
    for w in waypoints.windows(2) {
        let len = nalgebra::distance(&w[0], &w[1]);
        let mut s = interval - carried;
        while s <= len + 1e-9 {
            out.push(w[0] + (w[1] - w[0]) * (s / len));
            s += interval;
        }
        carried = len - (s - interval);
    }
    if let (Some(last), Some(end)) = (out.last(), waypoints.last()) {
        if nalgebra::distance(last, end) > 1e-9 {
            out.push(*end);
        }
    }
    out
}

/// Flies a scripted path, builds the pose graph, and scores the exported cloud
/// against the world surface after similarity alignment.
pub fn run_recon_bench(world: &SemanticWorld, cfg: &SimConfig, trajectory: Trajectory, gps: bool, seed: u64) -> Result<ReconRow> {
    cfg.validate(world)?;
    let m = &cfg.mission;
    let hw = cfg.footprint_half_width(world);
    let waypoints = match trajectory {
        Trajectory::Coverage => coverage_plan(&m.bounds, &m.start, 1.6 * hw).waypoints,
        Trajectory::Perimeter => {
            let b = m.bounds;
            let inset = hw.min(0.5 * b.width()).min(0.5 * b.height());
            let c = Rect::from_corners(b.min.x + inset, b.min.y + inset, b.max.x - inset, b.max.y - inset).corners();
            vec![m.start, c[0], c[1], c[2], c[3], c[0]]
        }
    };
    let mut graph_cfg = cfg.graph;
    graph_cfg.use_gps_priors = gps;
    let mut graph = PoseGraph::new(graph_cfg);
    graph.set_initial_rotation(nadir_pose(Vector3::zeros(), 0.0).rotation);
    let mut batcher = SubmapBatcher::new(graph, m.submap_frames, m.overlap_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = sample_path(&waypoints, m.capture_interval);
    for (k, p) in positions.iter().enumerate() {
        let pose = nadir_pose(Vector3::new(p.x, p.y, m.altitude), 0.0);
        batcher.capture(world, &cfg.camera, &cfg.noise, &pose, k as f64 * m.capture_interval / m.v_max, &mut rng)?;
        if batcher.is_full() {
            batcher.process(&cfg.noise, cfg.optimize_iters, &mut rng)?;
        }
    }
    if batcher.can_flush() {
        batcher.process(&cfg.noise, cfg.optimize_iters, &mut rng)?;
    }
    optimize_if_constrained(&mut batcher.graph, cfg.optimize_iters.max(20))?;
    let cloud = batcher.graph.export_world_cloud();
    let metrics = recon_metrics(&cloud, &world.surface_cloud(1), true)?;
    Ok(ReconRow {
        gps,
        frames: batcher.next_frame_id(),
        submaps: batcher.graph.len(),
        scale: batcher.graph.scale(),
        metrics,
        cloud,
    })
}

/// One cell of a planner × seed sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub planner: PlannerKind,
    pub seed: u64,
    pub result: std::result::Result<MetricsRecord, String>,
}

/// Runs every planner × seed pair in parallel; failures are kept per cell.
pub fn run_sweep<F>(planners: &[PlannerKind], seeds: &[u64], run: F) -> Vec<SweepRow>
where
    F: Fn(PlannerKind, u64) -> Result<MetricsRecord> + Sync,
{
    let jobs: Vec<(PlannerKind, u64)> = planners.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    jobs.into_par_iter()
        .map(|(planner, seed)| SweepRow { planner, seed, result: run(planner, seed).map_err(|e| e.to_string()) })
        .collect()
}

/// Per-planner aggregate in the shape of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlannerSummary {
    pub planner: PlannerKind,
    pub runs: usize,
    pub failed_runs: usize,
    pub tasks_complete: usize,
    pub tasks_incomplete: usize,
    /// Over completed tasks.
    pub mean_time_s: Option<f64>,
    /// Over all tasks, including the distance flown on incomplete ones.
    pub mean_distance_m: Option<f64>,
    /// Over completed tasks.
    pub mean_cr: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn summarize(rows: &[SweepRow]) -> Vec<PlannerSummary> {
    let mut order: Vec<PlannerKind> = Vec::new();
    for r in rows {
        if !order.contains(&r.planner) {
            order.push(r.planner);
        }
    }
    order
        .into_iter()
        .map(|planner| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.planner == planner).collect();
            let tasks: Vec<&TaskMetrics> = mine.iter().filter_map(|r| r.result.as_ref().ok()).flat_map(|m| &m.tasks).collect();
            let done: Vec<&TaskMetrics> = tasks.iter().copied().filter(|t| t.complete).collect();
            PlannerSummary {
                planner,
                runs: mine.len(),
                failed_runs: mine.iter().filter(|r| r.result.is_err()).count(),
                tasks_complete: done.len(),
                tasks_incomplete: tasks.len() - done.len(),
                mean_time_s: mean(&done.iter().map(|t| t.time_s).collect::<Vec<_>>()),
                mean_distance_m: mean(&tasks.iter().map(|t| t.distance_m).collect::<Vec<_>>()),
                mean_cr: mean(&done.iter().filter_map(|t| t.cr).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn write_sweep_rows<W: Write>(rows: &[SweepRow], mut w: W) -> io::Result<()> {
    writeln!(w, "planner,seed,task_id,time_s,distance_m,d_opt_m,cr,complete,error")?;
    for r in rows {
        match &r.result {
            Ok(m) => {
                for t in &m.tasks {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},",
                        r.planner, r.seed, t.task_id, t.time_s, t.distance_m, t.d_opt_m, fmt_opt(t.cr), t.complete
                    )?;
                }
            }
            Err(e) => writeln!(w, "{},{},,,,,,false,\"{}\"", r.planner, r.seed, e.replace('"', "'"))?,
        }
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(summary: &[PlannerSummary], mut w: W) -> io::Result<()> {
    writeln!(w, "planner,runs,failed_runs,tasks_complete,tasks_incomplete,mean_time_s,mean_distance_m,mean_cr")?;
    for s in summary {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.planner,
            s.runs,
            s.failed_runs,
            s.tasks_complete,
            s.tasks_incomplete,
            fmt_opt(s.mean_time_s),
            fmt_opt(s.mean_distance_m),
            fmt_opt(s.mean_cr)
        )?;
    }
    Ok(())
}

/// Fixed-width comparison table.
pub fn format_summary_table(summary: &[PlannerSummary]) -> String {
    let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut out = format!("{:<10} {:>5} {:>9} {:>11} {:>12} {:>8}\n", "planner", "runs", "complete", "time [s]", "dist [m]", "CR");
    for s in summary {
        out += &format!(
            "{:<10} {:>5} {:>4}/{:<4} {:>11} {:>12} {:>8}\n",
            s.planner.as_str(),
            s.runs,
            s.tasks_complete,
            s.tasks_complete + s.tasks_incomplete,
            cell(s.mean_time_s),
            cell(s.mean_distance_m),
            cell(s.mean_cr)
        );
    }
    out
}
