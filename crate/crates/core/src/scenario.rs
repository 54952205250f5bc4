//! Scenario files and procedural test worlds.
//!
//! A scenario is a TOML document with the sections `[world]`, `[noise]`,
//! `[camera]`, `[graph]`, `[planner]`, `[frontier]`, `[mapping]`, `[mission]`
//! (with `[[mission.tasks]]`) and `[seeds]`. The world is either spelled out
//! (terrain, labels, classes, goals) or produced by a named generator, in which
//! case the layout depends on the run seed.
//!
//! Grid rows in inline arrays and terrain files map to `iy` in order: the first
//! row is `iy = 0`. Cells are written as `[ix, iy]`.
//!
//! ```toml
//! [world]
//! size = [60, 60]
//! resolution = 2.0
//! terrain = { flat = 0.0 }
//! labels = { fill = 0, rects = [{ class = 3, cells = [40, 40, 42, 42] }] }
//! classes = [{ id = 0, name = "grass" }, { id = 3, name = "car" }]
//! goals = { find_car = [[41, 41]] }
//!
//! [mission]
//! start = [20.0, 20.0]
//! tasks = [{ id = "find_car", description = "a parked car", classes = [[3, 1.0]] }]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::geometry::Rect;
use crate::grid::{Cell, GridSpec};
use crate::mission::{MissionError, MissionSpec, MissionTask, PoseSource, SimConfig};
use crate::planner::PlannerConfig;
use crate::posegraph::PoseGraphConfig;
use crate::taskinfo::{FrontierParams, TaskEmbedding};
use crate::world::{CameraModel, ClassId, FeatureDictionary, Heightfield, NoiseSpec, SemanticWorld, WorldError, DEFAULT_FEATURE_DIM};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario syntax: {0}")]
    Parse(String),
    #[error("scenario schema: {0}")]
    Schema(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Mission(#[from] MissionError),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

fn schema<T>(msg: impl Into<String>) -> Result<T> {
    Err(ScenarioError::Schema(msg.into()))
}

/// A world together with everything needed to fly missions in it.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub world: SemanticWorld,
    pub config: SimConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Corridor,
    TwoTask,
    Flat,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    world: RawWorld,
    #[serde(default)]
    noise: Option<NoiseSpec>,
    #[serde(default)]
    camera: Option<RawCamera>,
    #[serde(default)]
    graph: Option<PoseGraphConfig>,
    #[serde(default)]
    planner: Option<PlannerConfig>,
    #[serde(default)]
    frontier: Option<FrontierParams>,
    #[serde(default)]
    mapping: Option<RawMapping>,
    #[serde(default)]
    mission: RawMission,
    #[serde(default)]
    seeds: Option<RawSeeds>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorld {
    generator: Option<Generator>,
    size: Option<[usize; 2]>,
    resolution: Option<f64>,
    origin: Option<[f64; 2]>,
    feature_dim: Option<usize>,
    dictionary_seed: Option<u64>,
    terrain: Option<RawTerrain>,
    labels: Option<RawLabels>,
    #[serde(default)]
    classes: Vec<RawClass>,
    #[serde(default)]
    goals: BTreeMap<String, Vec<[usize; 2]>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum RawTerrain {
    Flat(f64),
    Rows(Vec<Vec<f64>>),
    File {
        path: String,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabels {
    #[serde(default)]
    fill: ClassId,
    rows: Option<Vec<Vec<ClassId>>>,
    #[serde(default)]
    rects: Vec<RawRect>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRect {
    class: ClassId,
    /// Inclusive `[ix0, iy0, ix1, iy1]`.
    cells: [usize; 4],
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    id: ClassId,
    #[serde(default)]
    name: String,
    vector: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    pixels: usize,
    half_width_per_m: f64,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMapping {
    ema_alpha: Option<f64>,
    feature_stride: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMission {
    start: Option<[f64; 2]>,
    bounds: Option<[f64; 4]>,
    v_max: Option<f64>,
    altitude: Option<f64>,
    capture_interval: Option<f64>,
    dt: Option<f64>,
    initial_leg: Option<f64>,
    budget_s: Option<f64>,
    submap_frames: Option<usize>,
    overlap_frames: Option<usize>,
    optimize_iters: Option<usize>,
    pose_source: Option<PoseSource>,
    stall_ticks: Option<usize>,
    unobservable_margin: Option<f64>,
    #[serde(default)]
    tasks: Vec<RawTask>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    id: String,
    #[serde(default)]
    description: String,
    /// `(class, weight)` pairs mixed into the embedding.
    #[serde(default)]
    classes: Vec<(ClassId, f64)>,
    vector: Option<Vec<f64>>,
    /// Defaults to `world.goals[id]`.
    goals: Option<Vec<[usize; 2]>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSeeds {
    list: Vec<u64>,
}

/// A parsed and validated scenario file.
#[derive(Clone, Debug)]
pub struct ScenarioFile {
    raw: RawScenario,
    base_dir: PathBuf,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses and schema-checks a scenario; relative file references resolve
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let file = Self { raw, base_dir: base_dir.to_path_buf() };
        file.build(file.seeds().first().copied().unwrap_or(0))?;
        Ok(file)
    }

    /// Seeds listed in `[seeds]`, or `[0]`.
    pub fn seeds(&self) -> Vec<u64> {
        self.raw.seeds.as_ref().map_or_else(|| vec![0], |s| s.list.clone())
    }

    pub fn generator(&self) -> Option<Generator> {
        self.raw.world.generator
    }

    /// Instantiates the scenario for one run seed.
    pub fn build(&self, seed: u64) -> Result<Scenario> {
        let mut scenario = match self.raw.world.generator {
            Some(g) => {
                if self.raw.world.terrain.is_some() || self.raw.world.labels.is_some() || !self.raw.mission.tasks.is_empty() {
                    return schema("a generated world takes no terrain, labels or tasks");
                }
                generate(g, seed)
            }
            None => self.build_explicit()?,
        };
        self.apply_overrides(&mut scenario.config)?;
        scenario.config.validate(&scenario.world)?;
        Ok(scenario)
    }

    fn build_explicit(&self) -> Result<Scenario> {
        let w = &self.raw.world;
        let Some([nx, ny]) = w.size else { return schema("world.size = [nx, ny] is required") };
        let resolution = w.resolution.unwrap_or(2.0);
        let origin = w.origin.unwrap_or([0.0, 0.0]);
        let spec = GridSpec::new(Point2::new(origin[0], origin[1]), resolution, nx, ny);
        if !spec.is_valid() {
            return schema(format!("invalid grid: size {nx}×{ny}, resolution {resolution}"));
        }
        let terrain = match w.terrain.as_ref().unwrap_or(&RawTerrain::Flat(0.0)) {
            RawTerrain::Flat(z) => Heightfield::flat(spec, *z)?,
            RawTerrain::Rows(rows) => Heightfield::new(spec, flatten(rows, nx, ny, "terrain.rows")?)?,
            RawTerrain::File { path, scale, offset } => {
                let values = read_grid_file(&self.base_dir.join(path), nx, ny)?;
                Heightfield::new(spec, values.into_iter().map(|v| offset + scale * v).collect())?
            }
        };
        let labels = match &w.labels {
            None => vec![0; spec.len()],
            Some(l) => {
                let mut out = match &l.rows {
                    Some(rows) => flatten(rows, nx, ny, "labels.rows")?,
                    None => vec![l.fill; spec.len()],
                };
                for r in &l.rects {
                    let [x0, y0, x1, y1] = r.cells;
                    if x0 > x1 || y0 > y1 || x1 >= nx || y1 >= ny {
                        return schema(format!("label rect {:?} is empty or outside the grid", r.cells));
                    }
                    for iy in y0..=y1 {
                        for ix in x0..=x1 {
                            out[spec.index((ix, iy))] = r.class;
                        }
                    }
                }
                out
            }
        };
        let dim = w.feature_dim.unwrap_or(DEFAULT_FEATURE_DIM);
        let mut ids: Vec<ClassId> = w.classes.iter().map(|c| c.id).collect();
        ids.extend(labels.iter().copied());
        ids.sort_unstable();
        ids.dedup();
        let seed = w.dictionary_seed.unwrap_or_else(|| self.raw.noise.map_or(0, |n| n.seed));
        let mut dictionary = FeatureDictionary::random_orthonormal(&ids, dim, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for c in &w.classes {
            if let Some(v) = &c.vector {
                dictionary.insert(c.id, v).map_err(|e| ScenarioError::Schema(format!("class {} ('{}'): {e}", c.id, c.name)))?;
            }
        }
        let goals: BTreeMap<String, Vec<Cell>> =
            w.goals.iter().map(|(k, v)| (k.clone(), v.iter().map(|c| (c[0], c[1])).collect())).collect();
        let world = SemanticWorld::new(terrain, labels, dictionary, goals)?;

        let m = &self.raw.mission;
        if m.tasks.is_empty() {
            return schema("mission.tasks must list at least one task");
        }
        let mut tasks = Vec::new();
        for t in &m.tasks {
            let e = match (&t.vector, t.classes.is_empty()) {
                (Some(v), true) => v.clone(),
                (None, false) => world.dictionary.mix(&t.classes)?,
                _ => return schema(format!("task '{}' needs exactly one of `classes` or `vector`", t.id)),
            };
            let embedding = TaskEmbedding::new(t.id.clone(), &e, t.description.clone())
                .map_err(|e| ScenarioError::Schema(format!("task '{}': {e}", t.id)))?;
            let goals: Vec<Cell> = match &t.goals {
                Some(g) => g.iter().map(|c| (c[0], c[1])).collect(),
                None => match world.goal_cells(&t.id) {
                    Some(g) => g.to_vec(),
                    None => return schema(format!("task '{}' has no goals in the task or in world.goals", t.id)),
                },
            };
            tasks.push(MissionTask { embedding, goals });
        }
        let bounds = world.spec().bounds();
        let start = m.start.map_or(bounds.center(), |s| Point2::new(s[0], s[1]));
        Ok(Scenario { config: SimConfig::new(MissionSpec::new(tasks, start, bounds)), world })
    }

    fn apply_overrides(&self, cfg: &mut SimConfig) -> Result<()> {
        let r = &self.raw;
        if let Some(n) = r.noise {
            cfg.noise = n;
        }
        if let Some(c) = r.camera {
            cfg.camera = CameraModel::square(c.pixels, c.half_width_per_m);
        }
        if let Some(g) = r.graph {
            cfg.graph = g;
        }
        if let Some(p) = r.planner {
            cfg.planner = p;
        }
        if let Some(f) = r.frontier {
            cfg.frontier = f;
        }
        if let Some(m) = r.mapping {
            cfg.ema_alpha = m.ema_alpha.unwrap_or(cfg.ema_alpha);
            cfg.feature_stride = m.feature_stride.unwrap_or(cfg.feature_stride);
        }
        let m = &r.mission;
        let s = &mut cfg.mission;
        if r.world.generator.is_some() {
            if let Some(p) = m.start {
                s.start = Point2::new(p[0], p[1]);
            }
        }
        if let Some(b) = m.bounds {
            s.bounds = Rect::from_corners(b[0], b[1], b[2], b[3]);
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = m.$f { s.$f = v; } )* };
        }
        set!(v_max, altitude, capture_interval, dt, initial_leg, budget_s, submap_frames, overlap_frames);
        cfg.optimize_iters = m.optimize_iters.unwrap_or(cfg.optimize_iters);
        cfg.pose_source = m.pose_source.unwrap_or(cfg.pose_source);
        cfg.stall_ticks = m.stall_ticks.unwrap_or(cfg.stall_ticks);
        cfg.unobservable_margin = m.unobservable_margin.unwrap_or(cfg.unobservable_margin);
        Ok(())
    }
}

fn flatten<T: Copy>(rows: &[Vec<T>], nx: usize, ny: usize, what: &str) -> Result<Vec<T>> {
    if rows.len() != ny || rows.iter().any(|r| r.len() != nx) {
        return schema(format!("{what} must have {ny} rows of {nx} values"));
    }
    Ok(rows.iter().flatten().copied().collect())
}

/// Reads a whitespace- or comma-separated matrix of numbers.
fn read_grid_file(path: &Path, nx: usize, ny: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| ScenarioError::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    flatten(&rows, nx, ny, &path.display().to_string())
}

/// Class ids used by the generators.
pub mod classes {
    use crate::world::ClassId;
    pub const GRASS: ClassId = 0;
    pub const FOREST: ClassId = 1;
    pub const ROAD: ClassId = 2;
    pub const CAR: ClassId = 3;
    pub const BUILDING: ClassId = 4;
    pub const TENT: ClassId = 5;
    pub const WATER: ClassId = 6;
    pub const ALL: [ClassId; 7] = [GRASS, FOREST, ROAD, CAR, BUILDING, TENT, WATER];
    /// Tire-track stages of the corridor generator, first to last; each blends
    /// the road vector with a growing share of the car vector.
    pub const TRACKS: [ClassId; 5] = [10, 11, 12, 13, 14];
}

use classes::*;

/// Raster being painted by a generator.
struct Canvas {
    spec: GridSpec,
    labels: Vec<ClassId>,
    elevation: Vec<f64>,
}

impl Canvas {
    fn new(size_m: f64, resolution: f64) -> Self {
        let n = (size_m / resolution).round() as usize;
        let spec = GridSpec::new(Point2::origin(), resolution, n, n);
        Self { spec, labels: vec![GRASS; spec.len()], elevation: vec![0.0; spec.len()] }
    }

    /// Smooth rolling terrain between 0 and `amplitude`.
    fn hills(&mut self, amplitude: f64, rng: &mut ChaCha8Rng) {
        let waves: Vec<(f64, f64, f64)> =
            (0..3).map(|_| (rng.gen_range(40.0..90.0), rng.gen_range(40.0..90.0), rng.gen_range(0.0..std::f64::consts::TAU))).collect();
        for i in 0..self.spec.len() {
            let p = self.spec.cell_center(self.spec.cell_at(i));
            let v: f64 = waves.iter().map(|(a, b, ph)| (p.x / a + ph).sin() * (p.y / b).cos()).sum::<f64>() / 3.0;
            self.elevation[i] = 0.5 * amplitude * (1.0 + v);
        }
    }

    fn paint_where(&mut self, class: ClassId, inside: impl Fn(Point2<f64>) -> bool) -> Vec<Cell> {
        let mut cells = Vec::new();
        for i in 0..self.spec.len() {
            let c = self.spec.cell_at(i);
            if inside(self.spec.cell_center(c)) {
                self.labels[i] = class;
                cells.push(c);
            }
        }
        cells
    }

    fn disc(&mut self, center: Point2<f64>, radius: f64, class: ClassId) -> Vec<Cell> {
        self.paint_where(class, |p| nalgebra::distance(&p, &center) <= radius)
    }

    fn rect(&mut self, min: Point2<f64>, max: Point2<f64>, class: ClassId) -> Vec<Cell> {
        self.paint_where(class, |p| p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y)
    }

    /// Paints a band around the polyline, picking the class by the arc-length
    /// fraction of the closest point so that `classes` run from first to last.
    fn graded_polyline(&mut self, points: &[Point2<f64>], half_width: f64, classes: &[ClassId]) {
        let segs: Vec<(Point2<f64>, Point2<f64>)> = points.windows(2).map(|w| (w[0], w[1])).collect();
        let mut offsets = vec![0.0];
        for (a, b) in &segs {
            offsets.push(offsets.last().unwrap() + nalgebra::distance(a, b));
        }
        let total = *offsets.last().unwrap();
        for i in 0..self.spec.len() {
            let p = self.spec.cell_center(self.spec.cell_at(i));
            let mut best = (f64::INFINITY, 0.0);
            for (k, (a, b)) in segs.iter().enumerate() {
                let ab = b - a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = nalgebra::distance(&p, &(a + ab * t));
                if d < best.0 {
                    best = (d, offsets[k] + t * len2.sqrt());
                }
            }
            if best.0 <= half_width {
                let stage = ((best.1 / total * classes.len() as f64) as usize).min(classes.len() - 1);
                self.labels[i] = classes[stage];
            }
        }
    }

    fn scatter(&mut self, rng: &mut ChaCha8Rng, count: usize, class: ClassId, keep_clear: &[(Point2<f64>, f64)]) {
        self.scatter_sized(rng, count, class, 6.0..18.0, keep_clear);
    }

    fn scatter_sized(
        &mut self,
        rng: &mut ChaCha8Rng,
        count: usize,
        class: ClassId,
        radius: std::ops::Range<f64>,
        keep_clear: &[(Point2<f64>, f64)],
    ) {
        let size = self.spec.bounds().max.x;
        for _ in 0..count {
            let c = Point2::new(rng.gen_range(0.0..size), rng.gen_range(0.0..size));
            let r = rng.gen_range(radius.clone());
            if keep_clear.iter().any(|(q, d)| nalgebra::distance(&c, q) < d + r) {
                continue;
            }
            if class == BUILDING {
                self.rect(c - Vector2::repeat(r / 2.0), c + Vector2::repeat(r / 2.0), class);
            } else {
                self.disc(c, r, class);
            }
        }
    }

    fn into_world(self, goals: BTreeMap<String, Vec<Cell>>, dictionary: FeatureDictionary) -> SemanticWorld {
        let terrain = Heightfield::new(self.spec, self.elevation).expect("finite elevations");
        SemanticWorld::new(terrain, self.labels, dictionary, goals).expect("generated world is consistent")
    }
}

fn generator_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn dictionary(rng: &mut ChaCha8Rng) -> FeatureDictionary {
    FeatureDictionary::random_orthonormal(&ALL, DEFAULT_FEATURE_DIM, rng).expect("dimension exceeds class count")
}

fn task(world: &SemanticWorld, id: &str, description: &str, mix: &[(ClassId, f64)]) -> MissionTask {
    let e = world.dictionary.mix(mix).expect("generator classes exist");
    MissionTask {
        embedding: TaskEmbedding::new(id, &e, description).expect("nonzero mix"),
        goals: world.goal_cells(id).expect("goal painted").to_vec(),
    }
}

pub fn generate(generator: Generator, seed: u64) -> Scenario {
    match generator {
        Generator::Corridor => corridor_scenario(seed),
        Generator::TwoTask => two_task_scenario(seed),
        Generator::Flat => flat_scenario(seed),
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: (f64, f64), spread: f64) -> Point2<f64> {
    Point2::new(base.0 + rng.gen_range(-spread..=spread), base.1 + rng.gen_range(-spread..=spread))
}

/// 400 m square with a band of tire tracks winding from the start toward a car
/// parked at its far end. Track features drift from the road vector toward the
/// car vector along the band, so relevancy to the car task rises toward the goal.
pub fn corridor_scenario(seed: u64) -> Scenario {
    const DECOYS: usize = 120;
    let mut rng = generator_rng(seed, 0xC022);
    let mut dict = dictionary(&mut rng);
    for (k, &id) in TRACKS.iter().enumerate() {
        let w = 0.2 * (k + 1) as f64;
        let v = dict.mix(&[(ROAD, 1.0), (CAR, w)]).expect("base classes exist");
        dict.insert(id, &v).expect("dimension matches");
    }
    let mut canvas = Canvas::new(400.0, 2.0);
    canvas.hills(6.0, &mut rng);
    let start = jitter(&mut rng, (60.0, 60.0), 15.0);
    let goal = jitter(&mut rng, (300.0, 300.0), 30.0);
    let dir = (goal - start).normalize();
    let normal = Vector2::new(-dir.y, dir.x);
    let mut track = vec![start];
    for k in 1..4 {
        let along = start + (goal - start) * (k as f64 / 4.0);
        track.push(along + normal * rng.gen_range(-30.0..30.0));
    }
    track.push(goal);
    let clear = [(start, 15.0), (goal, 12.0)];
    canvas.scatter(&mut rng, 40, FOREST, &clear);
    canvas.scatter(&mut rng, 12, BUILDING, &clear);
    canvas.scatter(&mut rng, 6, WATER, &clear);
    canvas.scatter_sized(&mut rng, DECOYS, ROAD, 2.0..5.0, &clear);
    canvas.graded_polyline(&track, 12.0, &TRACKS);
    let car = canvas.disc(goal, 3.0, CAR);
    let bounds = canvas.spec.bounds();
    let world = canvas.into_world(BTreeMap::from([("find_car".to_string(), car)]), dict);
    let tasks = vec![task(&world, "find_car", "find the red car parked at the end of the tire tracks", &[(CAR, 1.0), (ROAD, 0.8)])];
    let mut config = SimConfig::new(MissionSpec::new(tasks, start, bounds));
    config.camera = CameraModel::square(64, 0.5);
    config.planner.s_reg = 15.0;
    config.mission.budget_s = 1200.0;
    Scenario { world, config }
}

/// 240 m square. Task 1 is a car hidden far from the start; a tent stands next to
/// the start, inside the first surveyed tile, and task 2 asks for the tent.
pub fn two_task_scenario(seed: u64) -> Scenario {
    let mut rng = generator_rng(seed, 0x7A5C);
    let dict = dictionary(&mut rng);
    let mut canvas = Canvas::new(240.0, 2.0);
    canvas.hills(4.0, &mut rng);
    let start = jitter(&mut rng, (75.0, 75.0), 3.0);
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let tent_at = start + Vector2::new(heading.cos(), heading.sin()) * 8.0;
    let car_at = jitter(&mut rng, (190.0, 170.0), 20.0);
    let clear = [(start, 10.0), (tent_at, 10.0), (car_at, 10.0)];
    canvas.scatter(&mut rng, 25, FOREST, &clear);
    canvas.scatter(&mut rng, 6, BUILDING, &clear);
    let tent = canvas.disc(tent_at, 5.0, TENT);
    let car = canvas.disc(car_at, 3.0, CAR);
    let bounds = canvas.spec.bounds();
    let goals = BTreeMap::from([("find_car".to_string(), car), ("find_tent".to_string(), tent)]);
    let world = canvas.into_world(goals, dict);
    let tasks = vec![
        task(&world, "find_car", "find the red car", &[(CAR, 1.0)]),
        task(&world, "find_tent", "go back to the orange tent", &[(TENT, 1.0), (GRASS, 0.2)]),
    ];
    let mut config = SimConfig::new(MissionSpec::new(tasks, start, bounds));
    config.camera = CameraModel::square(64, 0.5);
    config.planner.s_reg = 30.0;
    config.mission.budget_s = 1200.0;
    Scenario { world, config }
}

/// 120 m flat square with a single car 40 m from the start.
pub fn flat_scenario(seed: u64) -> Scenario {
    let mut rng = generator_rng(seed, 0xF1A7);
    let dict = dictionary(&mut rng);
    let mut canvas = Canvas::new(120.0, 2.0);
    let start = Point2::new(30.0, 30.0);
    let car = canvas.disc(Point2::new(70.0, 80.0), 3.0, CAR);
    let bounds = canvas.spec.bounds();
    let world = canvas.into_world(BTreeMap::from([("find_car".to_string(), car)]), dict);
    let tasks = vec![task(&world, "find_car", "find the red car", &[(CAR, 1.0)])];
    let mut config = SimConfig::new(MissionSpec::new(tasks, start, bounds));
    config.camera = CameraModel::square(64, 0.5);
    config.mission.budget_s = 600.0;
    Scenario { world, config }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[world]
size = [40, 30]
resolution = 2.0
terrain = { flat = 1.0 }
labels = { fill = 0, rects = [{ class = 3, cells = [30, 20, 31, 21] }] }
classes = [{ id = 0, name = "grass" }, { id = 3, name = "car" }]
goals = { find_car = [[30, 20]] }

[noise]
gps_sigma = 0.5

[mission]
start = [20.0, 20.0]
budget_s = 100.0
tasks = [{ id = "find_car", description = "car", classes = [[3, 1.0]] }]

[seeds]
list = [4, 5]
"#;

    #[test]
    fn explicit_scenario_builds() {
        let f = ScenarioFile::parse(SMALL, Path::new(".")).unwrap();
        assert_eq!(f.seeds(), vec![4, 5]);
        let s = f.build(4).unwrap();
        assert_eq!(s.world.spec().nx, 40);
        assert_eq!(s.world.label((30, 21)), 3);
        assert_eq!(s.world.label((29, 21)), 0);
        assert_eq!(s.config.noise.gps_sigma, 0.5);
        assert_eq!(s.config.noise.depth_sigma_rel, NoiseSpec::default().depth_sigma_rel);
        assert_eq!(s.config.mission.budget_s, 100.0);
        assert_eq!(s.config.mission.tasks[0].goals, vec![(30, 20)]);
        assert_eq!(s.world.terrain.elevation((3, 3)), 1.0);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let broken = SMALL.replace("budget_s = 100.0", "budget_s = = 100.0");
        let msg = ScenarioFile::parse(&broken, Path::new(".")).unwrap_err().to_string();
        assert!(msg.contains("line 15"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = SMALL.replace("[noise]", "[noise]\ngps_sgima = 1.0");
        assert!(matches!(ScenarioFile::parse(&bad, Path::new(".")), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn semantic_errors_are_reported() {
        let bad = SMALL.replace("goals = { find_car = [[30, 20]] }", "goals = { find_car = [[50, 20]] }");
        assert!(ScenarioFile::parse(&bad, Path::new(".")).is_err());
        let bad = SMALL.replace("start = [20.0, 20.0]", "start = [200.0, 20.0]");
        assert!(matches!(ScenarioFile::parse(&bad, Path::new(".")), Err(ScenarioError::Mission(_))));
    }

    #[test]
    fn terrain_file_is_read_relative_to_the_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<String> = (0..30).map(|iy| vec![format!("{}", iy % 3); 40].join(" ")).collect();
        std::fs::write(dir.path().join("dem.txt"), rows.join("\n")).unwrap();
        let text = SMALL.replace("terrain = { flat = 1.0 }", "terrain = { file = { path = \"dem.txt\", scale = 2.0, offset = 1.0 } }");
        std::fs::write(dir.path().join("s.toml"), text).unwrap();
        let s = ScenarioFile::load(&dir.path().join("s.toml")).unwrap().build(0).unwrap();
        assert_eq!(s.world.terrain.elevation((0, 2)), 5.0);
        assert_eq!(s.world.terrain.elevation((7, 0)), 1.0);
    }

    #[test]
    fn generated_scenarios_are_valid_and_seeded() {
        for g in [Generator::Corridor, Generator::TwoTask, Generator::Flat] {
            let a = generate(g, 3);
            a.config.validate(&a.world).unwrap();
            let b = generate(g, 3);
            assert_eq!(a.world.labels(), b.world.labels());
            assert_eq!(a.config.mission.start, b.config.mission.start);
        }
        assert_ne!(generate(Generator::Corridor, 1).world.labels(), generate(Generator::Corridor, 2).world.labels());
    }

    #[test]
    fn generator_sections_override_knobs() {
        let text = "[world]\ngenerator = \"flat\"\n[mission]\nbudget_s = 50.0\n[planner]\ns_reg = 30.0\n";
        let s = ScenarioFile::parse(text, Path::new(".")).unwrap().build(1).unwrap();
        assert_eq!(s.config.mission.budget_s, 50.0);
        assert_eq!(s.config.planner.s_reg, 30.0);
        assert_eq!(s.config.planner.eps_r, PlannerConfig::default().eps_r);
    }
}
