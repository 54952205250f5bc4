//! Task information extracted from the map: geometric frontier clusters and
//! per-cell task relevancy, both maintained incrementally from change boxes.
//!
//! Frontier clusters are grown as 8-connected components of frontier cells and
//! then split along their principal axis while too large. Every cluster remembers
//! the component ("group") it was split from. An update re-grows every component
//! that touches the change box and drops all sibling clusters of any group it
//! disturbs, so the incremental result is the same partition a full recompute
//! would give.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Write};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, GridSpec};
use crate::mapping::{ChangeBBox, FeatureGrid, OccupancyGrid};
use crate::world::{dot, norm, normalized};

#[derive(Debug, Error, PartialEq)]
pub enum TaskInfoError {
    #[error("cluster cells coincide; cannot split")]
    DegenerateCluster,
    #[error("task embedding must be a nonzero finite vector")]
    BadEmbedding,
    #[error("invalid frontier parameters: {0}")]
    BadParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierParams {
    /// Components with a smaller radius are discarded, meters.
    pub ftr_min: f64,
    /// Clusters with a larger radius are split, meters.
    pub ftr_max: f64,
}

impl Default for FrontierParams {
    fn default() -> Self {
        Self { ftr_min: 2.0, ftr_max: 20.0 }
    }
}

impl FrontierParams {
    pub fn validate(&self) -> Result<(), TaskInfoError> {
        if self.ftr_min >= 0.0 && self.ftr_min < self.ftr_max && self.ftr_max.is_finite() {
            Ok(())
        } else {
            Err(TaskInfoError::BadParams(format!("need 0 <= ftr_min < ftr_max, got {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontierCluster {
    pub id: u64,
    /// Member cells, sorted by `(iy, ix)`.
    pub cells: Vec<Cell>,
    pub centroid: Point2<f64>,
    pub radius: f64,
    pub mean_utility: f64,
    group: u64,
}

impl FrontierCluster {
    pub fn from_cells(id: u64, mut cells: Vec<Cell>, spec: &GridSpec) -> Self {
        assert!(!cells.is_empty(), "cluster needs cells");
        cells.sort_by_key(|c| (c.1, c.0));
        let (centroid, radius) = centroid_radius(&cells, spec);
        Self { id, cells, centroid, radius, mean_utility: 0.0, group: 0 }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

fn centroid_radius(cells: &[Cell], spec: &GridSpec) -> (Point2<f64>, f64) {
    let n = cells.len() as f64;
    let (sx, sy) = cells.iter().fold((0.0, 0.0), |(sx, sy), &c| {
        let p = spec.cell_center(c);
        (sx + p.x, sy + p.y)
    });
    let centroid = Point2::new(sx / n, sy / n);
    let radius = cells
        .iter()
        .map(|&c| nalgebra::distance(&spec.cell_center(c), &centroid))
        .fold(0.0, f64::max);
    (centroid, radius)
}

/// A known cell with at least one unknown, observable 4-neighbor inside the map.
pub fn is_frontier(occ: &OccupancyGrid, c: Cell) -> bool {
    occ.is_known(c) && occ.spec.neighbors4(c).any(|n| !occ.is_known(n) && !occ.is_unobservable(n))
}

/// Recursively splits a cluster along the first principal axis of its cell
/// centers until every piece has radius ≤ `ftr_max`. Pieces carry id 0; callers
/// assign ids. A cluster already within the limit comes back unchanged.
pub fn split_cluster(
    cluster: &FrontierCluster,
    spec: &GridSpec,
    ftr_max: f64,
) -> Result<Vec<FrontierCluster>, TaskInfoError> {
    if cluster.radius <= ftr_max {
        return Ok(vec![cluster.clone()]);
    }
    let mut parts = Vec::new();
    split_cells(cluster.cells.clone(), spec, ftr_max, &mut parts)?;
    Ok(parts
        .into_iter()
        .map(|cells| {
            let mut c = FrontierCluster::from_cells(0, cells, spec);
            c.group = cluster.group;
            c
        })
        .collect())
}

fn split_cells(cells: Vec<Cell>, spec: &GridSpec, ftr_max: f64, out: &mut Vec<Vec<Cell>>) -> Result<(), TaskInfoError> {
    let (centroid, radius) = centroid_radius(&cells, spec);
    if radius <= ftr_max {
        out.push(cells);
        return Ok(());
    }
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &c in &cells {
        let d = spec.cell_center(c) - centroid;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let axis = principal_axis(sxx, sxy, syy);
    let (pos, neg): (Vec<Cell>, Vec<Cell>) = cells
        .into_iter()
        .partition(|&c| (spec.cell_center(c) - centroid).dot(&axis) > 0.0);
    if pos.is_empty() || neg.is_empty() {
        return Err(TaskInfoError::DegenerateCluster);
    }
    split_cells(neg, spec, ftr_max, out)?;
    split_cells(pos, spec, ftr_max, out)
}

/// Unit eigenvector of the largest eigenvalue of `[[a, b], [b, c]]`.
fn principal_axis(a: f64, b: f64, c: f64) -> nalgebra::Vector2<f64> {
    let half_diff = 0.5 * (a - c);
    let lambda = 0.5 * (a + c) + (half_diff * half_diff + b * b).sqrt();
    let v = if b.abs() > 1e-12 * (a.abs() + c.abs()).max(1e-300) {
        nalgebra::Vector2::new(lambda - c, b)
    } else if a >= c {
        nalgebra::Vector2::new(1.0, 0.0)
    } else {
        nalgebra::Vector2::new(0.0, 1.0)
    };
    v.normalize()
}

const NO_OWNER: u64 = u64::MAX;

/// The live set of frontier clusters.
#[derive(Clone, Debug, Default)]
pub struct ClusterSet {
    clusters: BTreeMap<u64, FrontierCluster>,
    groups: BTreeMap<u64, Vec<u64>>,
    owner: Vec<u64>,
    visit: Vec<u32>,
    generation: u32,
    spec: Option<GridSpec>,
    next_id: u64,
    next_group: u64,
}

impl ClusterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clusters from scratch over the whole map.
    pub fn full_scan(occ: &OccupancyGrid, params: &FrontierParams) -> Self {
        let mut set = Self::new();
        set.update(occ, &ChangeBBox::full(&occ.spec), params);
        set
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FrontierCluster> {
        self.clusters.values()
    }

    pub fn get(&self, id: u64) -> Option<&FrontierCluster> {
        self.clusters.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut FrontierCluster> {
        self.clusters.get_mut(&id)
    }

    /// Cluster cell sets, for comparing partitions independent of ids.
    pub fn partition(&self) -> BTreeSet<Vec<Cell>> {
        self.clusters.values().map(|c| c.cells.clone()).collect()
    }

    fn ensure_spec(&mut self, spec: &GridSpec) {
        if self.spec.as_ref() != Some(spec) {
            assert!(self.clusters.is_empty(), "cluster set reused with a different grid");
            self.spec = Some(*spec);
            self.owner = vec![NO_OWNER; spec.len()];
            self.visit = vec![0; spec.len()];
            self.generation = 0;
        }
    }

    /// Re-clusters everything the change box could have affected.
    pub fn update(&mut self, occ: &OccupancyGrid, bbox: &ChangeBBox, params: &FrontierParams) {
        let spec = occ.spec;
        self.ensure_spec(&spec);
        if bbox.is_empty() {
            return;
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.visit.iter_mut().for_each(|v| *v = 0);
            self.generation = 1;
        }
        let region = bbox.inflated(1, &spec);

        let mut removed_groups: BTreeSet<u64> = BTreeSet::new();
        let mut seeds: Vec<Cell> = Vec::new();
        for c in region.cells() {
            let owner = self.owner[spec.index(c)];
            if owner != NO_OWNER {
                removed_groups.insert(self.clusters[&owner].group);
            }
            if is_frontier(occ, c) {
                seeds.push(c);
            }
        }

        let mut components: Vec<Vec<Cell>> = Vec::new();
        let mut expanded: BTreeSet<u64> = BTreeSet::new();
        loop {
            let fresh: Vec<u64> = removed_groups.difference(&expanded).copied().collect();
            for g in fresh {
                expanded.insert(g);
                for cid in &self.groups[&g] {
                    seeds.extend(self.clusters[cid].cells.iter().copied().filter(|&c| is_frontier(occ, c)));
                }
            }
            if seeds.is_empty() {
                break;
            }
            for s in std::mem::take(&mut seeds) {
                if self.visit[spec.index(s)] == self.generation {
                    continue;
                }
                let comp = self.grow(occ, s);
                for &c in &comp {
                    let owner = self.owner[spec.index(c)];
                    if owner != NO_OWNER {
                        removed_groups.insert(self.clusters[&owner].group);
                    }
                }
                components.push(comp);
            }
        }

        for g in &removed_groups {
            for cid in self.groups.remove(g).unwrap_or_default() {
                if let Some(cluster) = self.clusters.remove(&cid) {
                    for c in cluster.cells {
                        self.owner[spec.index(c)] = NO_OWNER;
                    }
                }
            }
        }

        for comp in components {
            let whole = FrontierCluster::from_cells(0, comp, &spec);
            if whole.radius < params.ftr_min {
                continue;
            }
            let group = self.next_group;
            self.next_group += 1;
            let mut parts = Vec::new();
            split_cells(whole.cells, &spec, params.ftr_max, &mut parts)
                .expect("distinct cells always split");
            let mut ids = Vec::with_capacity(parts.len());
            for cells in parts {
                let mut cluster = FrontierCluster::from_cells(self.next_id, cells, &spec);
                cluster.group = group;
                self.next_id += 1;
                for &c in &cluster.cells {
                    self.owner[spec.index(c)] = cluster.id;
                }
                ids.push(cluster.id);
                self.clusters.insert(cluster.id, cluster);
            }
            self.groups.insert(group, ids);
        }
    }

    /// 8-connected region growing over frontier cells.
    fn grow(&mut self, occ: &OccupancyGrid, seed: Cell) -> Vec<Cell> {
        let spec = occ.spec;
        let mut out = Vec::new();
        let mut queue = VecDeque::from([seed]);
        self.visit[spec.index(seed)] = self.generation;
        while let Some(c) = queue.pop_front() {
            out.push(c);
            for n in spec.neighbors8(c) {
                let i = spec.index(n);
                if self.visit[i] != self.generation && is_frontier(occ, n) {
                    self.visit[i] = self.generation;
                    queue.push_back(n);
                }
            }
        }
        out
    }

    /// Text export: `id cx cy radius utility cell_count`, one cluster per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# id centroid_x centroid_y radius_m mean_utility cells")?;
        for c in self.clusters.values() {
            writeln!(w, "{} {} {} {} {} {}", c.id, c.centroid.x, c.centroid.y, c.radius, c.mean_utility, c.cells.len())?;
        }
        Ok(())
    }
}

/// Change-box driven frontier update.
pub fn detect_frontiers(occ: &OccupancyGrid, bbox: &ChangeBBox, clusters: &mut ClusterSet, params: &FrontierParams) {
    clusters.update(occ, bbox, params);
}

/// Text embedding of a task, emulated from the world dictionary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub task_id: String,
    e: Vec<f64>,
    pub description: String,
}

impl TaskEmbedding {
    pub fn new(task_id: impl Into<String>, e: &[f64], description: impl Into<String>) -> Result<Self, TaskInfoError> {
        if e.iter().any(|x| !x.is_finite()) {
            return Err(TaskInfoError::BadEmbedding);
        }
        let e = normalized(e).ok_or(TaskInfoError::BadEmbedding)?;
        Ok(Self { task_id: task_id.into(), e, description: description.into() })
    }

    pub fn vector(&self) -> &[f64] {
        &self.e
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelevancyScope {
    Full,
    Changed(ChangeBBox),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevancyGrid {
    pub spec: GridSpec,
    scores: Vec<Option<f64>>,
}

impl RelevancyGrid {
    pub fn new(spec: GridSpec) -> Self {
        Self { spec, scores: vec![None; spec.len()] }
    }

    pub fn score(&self, c: Cell) -> Option<f64> {
        self.scores[self.spec.index(c)]
    }

    pub fn scores(&self) -> &[Option<f64>] {
        &self.scores
    }

    /// Binary export in the feature-grid layout with `d = 1`, NaN for unobserved.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "RELGRID nx={} ny={} d=1 resolution={} origin_x={} origin_y={}",
            self.spec.nx, self.spec.ny, self.spec.resolution, self.spec.origin.x, self.spec.origin.y
        )?;
        for s in &self.scores {
            w.write_all(&s.unwrap_or(f64::NAN).to_le_bytes())?;
        }
        Ok(())
    }
}

/// Clamped cosine similarity between two vectors.
pub fn clamped_cosine(f: &[f64], e: &[f64]) -> f64 {
    let n = norm(f) * norm(e);
    if n <= 0.0 {
        return 0.0;
    }
    (dot(f, e) / n).clamp(0.0, 1.0)
}

/// Rescores observed cells in scope as `max(0, cos(feature, e))`.
pub fn update_relevancy(rel: &mut RelevancyGrid, feat: &FeatureGrid, task: &TaskEmbedding, scope: RelevancyScope) {
    assert_eq!(rel.spec, feat.spec, "relevancy and feature grids must share a grid");
    let spec = rel.spec;
    let mut rescore = |c: Cell| {
        rel.scores[spec.index(c)] = feat.feature(c).map(|f| clamped_cosine(f, task.vector()));
    };
    match scope {
        RelevancyScope::Full => (0..spec.len()).for_each(|i| rescore(spec.cell_at(i))),
        RelevancyScope::Changed(b) => b.cells().for_each(rescore),
    }
}

/// Mean over member cells of the thresholded relevancy; scores below `eps_ftr`
/// count as 0 and unobserved cells as `u0`.
pub fn score_cluster(cluster: &FrontierCluster, rel: &RelevancyGrid, eps_ftr: f64, u0: f64) -> f64 {
    if cluster.cells.is_empty() {
        return 0.0;
    }
    let sum: f64 = cluster.cells.iter().map(|&c| thresholded(rel.score(c), eps_ftr, u0)).sum();
    sum / cluster.cells.len() as f64
}

#[inline]
pub(crate) fn thresholded(score: Option<f64>, eps: f64, u0: f64) -> f64 {
    match score {
        None => u0,
        Some(s) if s < eps => 0.0,
        Some(s) => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(n: usize) -> GridSpec {
        GridSpec::new(Point2::new(0.0, 0.0), 1.0, n, n)
    }

    /// Independent frontier oracle: scan every cell with the raw predicate.
    fn brute_frontier(occ: &OccupancyGrid) -> BTreeSet<Cell> {
        let s = occ.spec;
        let mut out = BTreeSet::new();
        for y in 0..s.ny {
            for x in 0..s.nx {
                if !occ.is_known((x, y)) {
                    continue;
                }
                let mut unknown = false;
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < s.nx && (ny as usize) < s.ny {
                        let n = (nx as usize, ny as usize);
                        unknown |= !occ.is_known(n) && !occ.is_unobservable(n);
                    }
                }
                if unknown {
                    out.insert((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn fully_known_map_has_no_frontiers() {
        let mut occ = OccupancyGrid::new(spec(8));
        for i in 0..64 {
            occ.mark_known(occ.spec.cell_at(i), 1);
        }
        let set = ClusterSet::full_scan(&occ, &FrontierParams { ftr_min: 0.0, ftr_max: 20.0 });
        assert!(set.is_empty());
    }

    #[test]
    fn half_known_map_single_column_cluster() {
        let mut occ = OccupancyGrid::new(spec(10));
        for y in 0..10 {
            for x in 0..5 {
                occ.mark_known((x, y), 1);
            }
        }
        let set = ClusterSet::full_scan(&occ, &FrontierParams { ftr_min: 0.0, ftr_max: 20.0 });
        assert_eq!(set.len(), 1);
        let c = set.iter().next().unwrap();
        let expect: Vec<Cell> = (0..10).map(|y| (4, y)).collect();
        assert_eq!(c.cells, expect);
        assert_eq!(brute_frontier(&occ), expect.iter().copied().collect());
        assert_relative_eq!(c.centroid.x, 4.5);
        assert_relative_eq!(c.centroid.y, 5.0);
    }

    #[test]
    fn small_components_are_discarded() {
        let mut occ = OccupancyGrid::new(spec(10));
        occ.mark_known((5, 5), 1);
        let keep = ClusterSet::full_scan(&occ, &FrontierParams { ftr_min: 0.0, ftr_max: 5.0 });
        assert_eq!(keep.len(), 1);
        let drop = ClusterSet::full_scan(&occ, &FrontierParams { ftr_min: 2.0, ftr_max: 5.0 });
        assert!(drop.is_empty());
    }

    #[test]
    fn split_collinear_cluster() {
        let s = GridSpec::new(Point2::new(0.0, 0.0), 1.0, 30, 3);
        let cells: Vec<Cell> = (0..21).map(|x| (x, 1)).collect();
        let cluster = FrontierCluster::from_cells(7, cells.clone(), &s);
        assert_relative_eq!(cluster.radius, 10.0);
        let parts = split_cluster(&cluster, &s, 6.0).unwrap();
        assert!(parts.len() >= 2);
        let mut all: Vec<Cell> = parts.iter().flat_map(|p| p.cells.clone()).collect();
        all.sort();
        let mut expect = cells;
        expect.sort();
        assert_eq!(all, expect);
        for p in &parts {
            // Brute-force radius from the member cells.
            let n = p.cells.len() as f64;
            let cx = p.cells.iter().map(|c| c.0 as f64 + 0.5).sum::<f64>() / n;
            let r = p.cells.iter().map(|c| (c.0 as f64 + 0.5 - cx).abs()).fold(0.0, f64::max);
            assert!(r <= 6.0);
        }
    }

    #[test]
    fn split_within_limit_is_identity() {
        let s = spec(10);
        let cluster = FrontierCluster::from_cells(3, vec![(1, 1), (2, 1)], &s);
        let parts = split_cluster(&cluster, &s, 5.0).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].cells, cluster.cells);
    }

    #[test]
    fn split_two_points() {
        let s = spec(10);
        let cluster = FrontierCluster::from_cells(0, vec![(1, 1), (5, 1)], &s);
        let parts = split_cluster(&cluster, &s, 1.0).unwrap();
        let sets: BTreeSet<Vec<Cell>> = parts.into_iter().map(|p| p.cells).collect();
        assert_eq!(sets, BTreeSet::from([vec![(1, 1)], vec![(5, 1)]]));
    }

    fn apply(occ: &mut OccupancyGrid, x0: usize, y0: usize, w: usize, h: usize, unobservable: bool) -> ChangeBBox {
        let mut b = ChangeBBox::empty();
        for y in y0..(y0 + h).min(occ.spec.ny) {
            for x in x0..(x0 + w).min(occ.spec.nx) {
                if unobservable {
                    occ.mark_unobservable((x, y));
                } else {
                    occ.mark_known((x, y), 1);
                }
                b.include((x, y));
            }
        }
        b
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn incremental_matches_full_recompute(
            rects in proptest::collection::vec((0usize..40, 0usize..40, 1usize..12, 1usize..12, prop::bool::weighted(0.2)), 1..15),
            ftr_min in 0.0f64..2.0,
            ftr_max in 2.5f64..8.0,
        ) {
            let params = FrontierParams { ftr_min, ftr_max };
            let mut occ = OccupancyGrid::new(spec(40));
            let mut inc = ClusterSet::new();
            for (x, y, w, h, hidden) in rects {
                let b = apply(&mut occ, x, y, w, h, hidden);
                inc.update(&occ, &b, &params);
                let full = ClusterSet::full_scan(&occ, &params);
                prop_assert_eq!(inc.partition(), full.partition());
            }
        }

        #[test]
        fn clusters_cover_frontier_exactly(
            rects in proptest::collection::vec((0usize..30, 0usize..30, 1usize..10, 1usize..10, prop::bool::weighted(0.2)), 1..10),
        ) {
            let params = FrontierParams { ftr_min: 0.0, ftr_max: 4.0 };
            let mut occ = OccupancyGrid::new(spec(30));
            let mut inc = ClusterSet::new();
            for (x, y, w, h, hidden) in rects {
                let b = apply(&mut occ, x, y, w, h, hidden);
                inc.update(&occ, &b, &params);
            }
            let mut union = BTreeSet::new();
            for c in inc.iter() {
                prop_assert!(c.radius <= params.ftr_max + 1e-12);
                for &cell in &c.cells {
                    prop_assert!(union.insert(cell), "cell in two clusters");
                }
            }
            prop_assert_eq!(union, brute_frontier(&occ));
        }
    }

    fn feature_grid_with(spec: GridSpec, cells: &[(Cell, Vec<f64>)]) -> FeatureGrid {
        let mut g = FeatureGrid::new(spec, 3, 0.3);
        for (c, f) in cells {
            g.observe(*c, f);
        }
        g
    }

    #[test]
    fn relevancy_cosine_and_clamp() {
        let s = spec(3);
        let task = TaskEmbedding::new("t", &[1.0, 0.0, 0.0], "find it").unwrap();
        let feat = feature_grid_with(
            s,
            &[((0, 0), vec![1.0, 0.0, 0.0]), ((1, 0), vec![0.0, 1.0, 0.0]), ((2, 0), vec![-1.0, 0.0, 0.0])],
        );
        let mut rel = RelevancyGrid::new(s);
        update_relevancy(&mut rel, &feat, &task, RelevancyScope::Full);
        assert_eq!(rel.score((0, 0)), Some(1.0));
        assert_eq!(rel.score((1, 0)), Some(0.0));
        assert_eq!(rel.score((2, 0)), Some(0.0));
        assert_eq!(rel.score((0, 1)), None);
    }

    #[test]
    fn new_task_refresh_leaves_no_stale_scores() {
        let s = spec(4);
        let feat = feature_grid_with(s, &[((0, 0), vec![1.0, 0.0, 0.0]), ((3, 3), vec![0.0, 1.0, 0.0])]);
        let mut rel = RelevancyGrid::new(s);
        let t1 = TaskEmbedding::new("a", &[1.0, 0.0, 0.0], "").unwrap();
        let t2 = TaskEmbedding::new("b", &[0.0, 1.0, 0.0], "").unwrap();
        update_relevancy(&mut rel, &feat, &t1, RelevancyScope::Full);
        update_relevancy(&mut rel, &feat, &t2, RelevancyScope::Full);
        let mut fresh = RelevancyGrid::new(s);
        update_relevancy(&mut fresh, &feat, &t2, RelevancyScope::Full);
        assert_eq!(rel, fresh);
    }

    #[test]
    fn relevancy_scope_limits_updates() {
        let s = spec(4);
        let feat = feature_grid_with(s, &[((0, 0), vec![1.0, 0.0, 0.0]), ((3, 3), vec![1.0, 0.0, 0.0])]);
        let mut rel = RelevancyGrid::new(s);
        let t = TaskEmbedding::new("a", &[1.0, 0.0, 0.0], "").unwrap();
        update_relevancy(&mut rel, &feat, &t, RelevancyScope::Changed(ChangeBBox::new((0, 0), (1, 1))));
        assert_eq!(rel.score((0, 0)), Some(1.0));
        assert_eq!(rel.score((3, 3)), None);
    }

    proptest! {
        #[test]
        fn relevancy_invariant_to_feature_scale(
            f in proptest::collection::vec(-1.0f64..1.0, 3),
            e in proptest::collection::vec(-1.0f64..1.0, 3),
            k in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&f) > 1e-3 && norm(&e) > 1e-3);
            let scaled: Vec<f64> = f.iter().map(|x| x * k).collect();
            let a = clamped_cosine(&f, &e);
            let b = clamped_cosine(&scaled, &e);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn cluster_scoring() {
        let s = spec(4);
        let mut rel = RelevancyGrid::new(s);
        rel.scores[s.index((0, 0))] = Some(0.8);
        rel.scores[s.index((1, 0))] = Some(0.8);
        let c = FrontierCluster::from_cells(0, vec![(0, 0), (1, 0)], &s);
        assert_relative_eq!(score_cluster(&c, &rel, 0.3, 0.05), 0.8);

        rel.scores[s.index((0, 0))] = Some(0.2);
        rel.scores[s.index((1, 0))] = Some(0.6);
        assert_relative_eq!(score_cluster(&c, &rel, 0.3, 0.05), 0.3);

        let unobserved = FrontierCluster::from_cells(1, vec![(2, 2), (3, 3)], &s);
        assert_relative_eq!(score_cluster(&unobserved, &rel, 0.3, 0.05), 0.05);
    }

    #[test]
    fn embedding_rejects_zero() {
        assert_eq!(TaskEmbedding::new("t", &[0.0, 0.0], "").unwrap_err(), TaskInfoError::BadEmbedding);
        let t = TaskEmbedding::new("t", &[3.0, 4.0], "").unwrap();
        assert_relative_eq!(norm(t.vector()), 1.0);
    }
}
