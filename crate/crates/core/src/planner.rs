//! Hierarchical planning: a global layer that tiles the area into regions and
//! picks the best exploration or exploitation region by utility per meter, and
//! a local layer that tours the chosen region's frontier clusters (open ATSP)
//! or flies straight to an exploitation region.

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::{DMatrix, Point2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rect;
use crate::grid::GridSpec;
use crate::mapping::OccupancyGrid;
use crate::taskinfo::{score_cluster, thresholded, ClusterSet, RelevancyGrid};

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    BadConfig(String),
    #[error("no candidate regions")]
    NoCandidates,
    #[error("region {0} has no frontier clusters")]
    EmptyRegion(usize),
    #[error("no frontier clusters")]
    NoFrontiers,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Region edge length, meters.
    pub s_reg: f64,
    /// Relevancy gate for exploration utility.
    pub eps_e: f64,
    /// Relevancy gate for exploitation labels.
    pub eps_r: f64,
    /// Relevancy gate for cluster utility.
    pub eps_ftr: f64,
    /// Utility of an unobserved cell.
    pub u0: f64,
    /// Lower clamp on travel cost, meters.
    pub c_min: f64,
    /// Global re-selection period, seconds.
    pub global_period: f64,
    /// Local replanning period, seconds.
    pub local_period: f64,
    /// Known fraction at which a region counts as explored.
    pub explored_fraction: f64,
    /// Largest tour solved exactly.
    pub n_exact: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            s_reg: 40.0,
            eps_e: 0.25,
            eps_r: 0.6,
            eps_ftr: 0.25,
            u0: 0.05,
            c_min: 1.0,
            global_period: 2.0,
            local_period: 1.0,
            explored_fraction: 0.95,
            n_exact: 12,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let ok = self.s_reg > 0.0
            && self.s_reg.is_finite()
            && unit(self.eps_e)
            && unit(self.eps_r)
            && unit(self.eps_ftr)
            && unit(self.u0)
            && self.c_min > 0.0
            && self.global_period > 0.0
            && self.local_period > 0.0
            && self.explored_fraction > 0.0
            && self.explored_fraction <= 1.0
            && self.n_exact <= 20;
        if ok {
            Ok(())
        } else {
            Err(PlannerError::BadConfig(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    None,
    Exploration,
    Exploitation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: usize,
    pub bounds: Rect,
    pub label: RegionLabel,
    pub utility: f64,
    pub cost: f64,
    pub clusters: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Explore,
    Exploit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathPlan {
    pub waypoints: Vec<Point2<f64>>,
    pub mode: PlanMode,
    /// Region id for HALO plans; baselines report `usize::MAX`.
    pub target_region: usize,
}

impl PathPlan {
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| nalgebra::distance(&w[0], &w[1])).sum()
    }
}

/// Tiles `bounds` with `s_reg` squares from the min corner, truncating the last row and column.
pub fn decompose_regions(bounds: &Rect, s_reg: f64) -> Result<Vec<Region>, PlannerError> {
    if !(s_reg > 0.0) || !s_reg.is_finite() {
        return Err(PlannerError::BadConfig(format!("s_reg must be positive, got {s_reg}")));
    }
    if bounds.is_degenerate() {
        return Err(PlannerError::BadConfig("degenerate bounds".into()));
    }
    let (cols, rows) = tile_counts(bounds, s_reg);
    let mut regions = Vec::with_capacity(cols * rows);
    for j in 0..rows {
        for i in 0..cols {
            let x0 = bounds.min.x + i as f64 * s_reg;
            let y0 = bounds.min.y + j as f64 * s_reg;
            let x1 = if i + 1 == cols { bounds.max.x } else { x0 + s_reg };
            let y1 = if j + 1 == rows { bounds.max.y } else { y0 + s_reg };
            regions.push(Region {
                id: regions.len(),
                bounds: Rect::from_corners(x0, y0, x1, y1),
                label: RegionLabel::None,
                utility: 0.0,
                cost: 0.0,
                clusters: Vec::new(),
            });
        }
    }
    Ok(regions)
}

fn tile_counts(bounds: &Rect, s_reg: f64) -> (usize, usize) {
    let count = |extent: f64| ((extent / s_reg - 1e-9).ceil() as usize).max(1);
    (count(bounds.width()), count(bounds.height()))
}

/// One entry of the pooled global argmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub region: usize,
    pub label: RegionLabel,
    pub utility: f64,
    pub center: Point2<f64>,
}

/// `argmax u/c` with `c = max(c_min, ‖robot − center‖)`; ties go to the earlier candidate
/// in (region id, label) order. Returns the winner and its cost.
pub fn select_next_region(
    candidates: &[Candidate],
    robot: &Point2<f64>,
    c_min: f64,
) -> Result<(Candidate, f64), PlannerError> {
    let mut sorted: Vec<&Candidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| (c.region, c.label));
    let mut best: Option<(Candidate, f64, f64)> = None;
    for c in sorted {
        let cost = nalgebra::distance(robot, &c.center).max(c_min);
        let ratio = c.utility / cost;
        if best.as_ref().map_or(true, |b| ratio > b.2) {
            best = Some((*c, cost, ratio));
        }
    }
    best.map(|(c, cost, _)| (c, cost)).ok_or(PlannerError::NoCandidates)
}

/// Region bookkeeping of the global planner, including the persistent
/// exploitation labels.
#[derive(Clone, Debug)]
pub struct GlobalPlanner {
    pub config: PlannerConfig,
    bounds: Rect,
    cols: usize,
    rows: usize,
    regions: Vec<Region>,
    cells: Vec<(Range<usize>, Range<usize>)>,
    exploit: BTreeSet<usize>,
}

impl GlobalPlanner {
    pub fn new(spec: GridSpec, bounds: Rect, config: PlannerConfig) -> Result<Self, PlannerError> {
        config.validate()?;
        let regions = decompose_regions(&bounds, config.s_reg)?;
        let (cols, rows) = tile_counts(&bounds, config.s_reg);
        let cells = regions.iter().map(|r| spec.cells_centered_in(&r.bounds)).collect();
        Ok(Self { config, bounds, cols, rows, regions, cells, exploit: BTreeSet::new() })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn exploitation_regions(&self) -> &BTreeSet<usize> {
        &self.exploit
    }

    /// Region whose half-open tile holds `p`; points outside are clamped to the border tiles.
    pub fn region_of(&self, p: &Point2<f64>) -> usize {
        let s = self.config.s_reg;
        let ix = (((p.x - self.bounds.min.x) / s).floor().max(0.0) as usize).min(self.cols - 1);
        let iy = (((p.y - self.bounds.min.y) / s).floor().max(0.0) as usize).min(self.rows - 1);
        iy * self.cols + ix
    }

    fn region_cells(&self, r: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (xs, ys) = self.cells[r].clone();
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }

    fn cell_count(&self, r: usize) -> usize {
        self.cells[r].0.len() * self.cells[r].1.len()
    }

    /// Clears exploitation labels and relabels every explored region whose best
    /// cell beats `eps_r`.
    pub fn on_new_task(&mut self, rel: &RelevancyGrid, occ: &OccupancyGrid) {
        self.exploit.clear();
        for r in 0..self.regions.len() {
            let n = self.cell_count(r);
            if n == 0 {
                continue;
            }
            let known = self.region_cells(r).filter(|&c| occ.is_known(c)).count();
            if (known as f64) < self.config.explored_fraction * n as f64 {
                continue;
            }
            if self.max_relevancy(r, rel) > self.config.eps_r {
                self.exploit.insert(r);
            }
        }
    }

    fn max_relevancy(&self, r: usize, rel: &RelevancyGrid) -> f64 {
        self.region_cells(r).filter_map(|c| rel.score(c)).fold(0.0, f64::max)
    }

    /// Drops the exploitation label of every region containing the robot.
    pub fn observe_robot(&mut self, robot: &Point2<f64>) -> Vec<usize> {
        let visited: Vec<usize> = self
            .exploit
            .iter()
            .copied()
            .filter(|&r| self.regions[r].bounds.contains(robot))
            .collect();
        for r in &visited {
            self.exploit.remove(r);
        }
        visited
    }

    /// Assigns clusters to regions by centroid.
    pub fn assign_clusters(&mut self, clusters: &ClusterSet) {
        for r in &mut self.regions {
            r.clusters.clear();
        }
        for c in clusters.iter() {
            let r = self.region_of(&c.centroid);
            self.regions[r].clusters.push(c.id);
        }
    }

    /// Labels regions and returns the pooled candidates (exploration then
    /// exploitation per region, ascending id).
    pub fn label(&mut self, clusters: &ClusterSet, rel: &RelevancyGrid) -> Vec<Candidate> {
        self.assign_clusters(clusters);
        let mut out = Vec::new();
        for r in 0..self.regions.len() {
            let center = self.regions[r].bounds.center();
            let explore = !self.regions[r].clusters.is_empty();
            let exploit = self.exploit.contains(&r);
            let mut utility = 0.0;
            if explore {
                let n = self.cell_count(r).max(1);
                let sum: f64 = self
                    .region_cells(r)
                    .map(|c| thresholded(rel.score(c), self.config.eps_e, self.config.u0))
                    .sum();
                utility = sum / n as f64;
                out.push(Candidate { region: r, label: RegionLabel::Exploration, utility, center });
            }
            if exploit {
                utility = self.max_relevancy(r, rel);
                out.push(Candidate { region: r, label: RegionLabel::Exploitation, utility, center });
            }
            let region = &mut self.regions[r];
            region.utility = utility;
            region.label = if exploit {
                RegionLabel::Exploitation
            } else if explore {
                RegionLabel::Exploration
            } else {
                RegionLabel::None
            };
        }
        out
    }

    pub fn region(&self, id: usize) -> &Region {
        &self.regions[id]
    }
}

/// Open-tour cost matrix: node 0 is the robot, returning to it is free.
pub fn build_atsp_cost(robot: &Point2<f64>, centroids: &[Point2<f64>]) -> DMatrix<f64> {
    let n = centroids.len() + 1;
    let pt = |i: usize| if i == 0 { *robot } else { centroids[i - 1] };
    DMatrix::from_fn(n, n, |i, j| if j == 0 || i == j { 0.0 } else { nalgebra::distance(&pt(i), &pt(j)) })
}

/// Cost of visiting `order` (nodes 1..N) starting from node 0, summed in path order.
pub fn tour_cost(c: &DMatrix<f64>, order: &[usize]) -> f64 {
    let mut cost = 0.0;
    let mut prev = 0;
    for &k in order {
        cost += c[(prev, k)];
        prev = k;
    }
    cost
}

/// Exact for `N ≤ n_exact`, heuristic above.
pub fn solve_atsp(c: &DMatrix<f64>, n_exact: usize) -> Vec<usize> {
    let n = c.nrows().saturating_sub(1);
    if n <= n_exact.min(20) {
        solve_atsp_exact(c)
    } else {
        solve_atsp_heuristic(c)
    }
}

/// Held–Karp dynamic program over subsets of nodes 1..N.
pub fn solve_atsp_exact(c: &DMatrix<f64>) -> Vec<usize> {
    let n = c.nrows().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    assert!(n <= 20, "exact tour limited to 20 nodes");
    let full = (1usize << n) - 1;
    let mut dp = vec![f64::INFINITY; (1 << n) * n];
    let mut parent = vec![usize::MAX; (1 << n) * n];
    for j in 0..n {
        dp[(1 << j) * n + j] = c[(0, j + 1)];
    }
    for mask in 1..=full {
        for j in 0..n {
            let cur = dp[mask * n + j];
            if mask & (1 << j) == 0 || !cur.is_finite() {
                continue;
            }
            for k in 0..n {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let cand = cur + c[(j + 1, k + 1)];
                if cand < dp[next * n + k] {
                    dp[next * n + k] = cand;
                    parent[next * n + k] = j;
                }
            }
        }
    }
    let mut last = 0;
    for j in 1..n {
        if dp[full * n + j] < dp[full * n + last] {
            last = j;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut mask = full;
    let mut j = last;
    loop {
        order.push(j + 1);
        let p = parent[mask * n + j];
        mask &= !(1 << j);
        if p == usize::MAX {
            break;
        }
        j = p;
    }
    order.reverse();
    order
}

const HEURISTIC_STARTS: usize = 12;

/// Nearest-neighbor constructions from the closest first stops, each refined by
/// 2-opt and or-opt moves; the cheapest result wins.
pub fn solve_atsp_heuristic(c: &DMatrix<f64>) -> Vec<usize> {
    let n = c.nrows().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut firsts: Vec<usize> = (1..=n).collect();
    firsts.sort_by(|a, b| c[(0, *a)].total_cmp(&c[(0, *b)]).then(a.cmp(b)));
    firsts.truncate(HEURISTIC_STARTS);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for first in firsts {
        let mut path = vec![0usize, first];
        let mut left: BTreeSet<usize> = (1..=n).filter(|&k| k != first).collect();
        while !left.is_empty() {
            let cur = *path.last().unwrap();
            let next = *left
                .iter()
                .min_by(|a, b| c[(cur, **a)].total_cmp(&c[(cur, **b)]))
                .unwrap();
            left.remove(&next);
            path.push(next);
        }
        local_search(c, &mut path);
        path.remove(0);
        let cost = tour_cost(c, &path);
        if best.as_ref().map_or(true, |(b, _)| cost < *b) {
            best = Some((cost, path));
        }
    }
    best.expect("at least one start").1
}

/// 2-opt and or-opt descent on an open path that starts at node 0.
fn local_search(c: &DMatrix<f64>, path: &mut Vec<usize>) {
    const EPS: f64 = 1e-12;
    let n = path.len() - 1;
    let edge = |a: usize, b: Option<&usize>| b.map_or(0.0, |b| c[(a, *b)]);
    for _ in 0..10_000 {
        let mut improved = false;
        // 2-opt: reverse path[i..=j], counting the flipped inner edges.
        for i in 1..path.len() {
            for j in i + 1..path.len() {
                let (a, b, d) = (path[i - 1], path[i], path[j]);
                let e = path.get(j + 1);
                let inner: f64 = path[i..=j].windows(2).map(|w| c[(w[1], w[0])] - c[(w[0], w[1])]).sum();
                let delta = c[(a, d)] + edge(b, e) - c[(a, b)] - edge(d, e) + inner;
                if delta < -EPS {
                    path[i..=j].reverse();
                    improved = true;
                }
            }
        }
        // Or-opt: move a segment of up to three nodes, optionally reversed.
        'outer: for len in 1..=3usize.min(n) {
            for i in 1..=path.len() - len {
                let (s0, s1) = (path[i], path[i + len - 1]);
                let prev = path[i - 1];
                let next = path.get(i + len).copied();
                let inner: f64 = path[i..i + len].windows(2).map(|w| c[(w[1], w[0])] - c[(w[0], w[1])]).sum();
                let gain = c[(prev, s0)] + edge(s1, next.as_ref()) - edge(prev, next.as_ref());
                let mut rest: Vec<usize> = path[..i].to_vec();
                rest.extend_from_slice(&path[i + len..]);
                for k in 0..rest.len() {
                    let x = rest[k];
                    let y = rest.get(k + 1);
                    if k + 1 == i {
                        continue;
                    }
                    let base = edge(x, y);
                    let fwd = c[(x, s0)] + edge(s1, y) - base;
                    let rev = c[(x, s1)] + edge(s0, y) - base + inner;
                    let (ins, reversed) = if rev < fwd { (rev, true) } else { (fwd, false) };
                    if ins - gain < -EPS {
                        let mut seg = path[i..i + len].to_vec();
                        if reversed {
                            seg.reverse();
                        }
                        let mut out = rest[..=k].to_vec();
                        out.extend(seg);
                        out.extend_from_slice(&rest[k + 1..]);
                        *path = out;
                        improved = true;
                        break 'outer;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Tour over the region's useful clusters; all are kept when none clears `eps_ftr`.
pub fn plan_exploration(
    region: &Region,
    clusters: &ClusterSet,
    rel: &RelevancyGrid,
    robot: &Point2<f64>,
    cfg: &PlannerConfig,
) -> Result<PathPlan, PlannerError> {
    let members: Vec<_> = region.clusters.iter().filter_map(|id| clusters.get(*id)).collect();
    if members.is_empty() {
        return Err(PlannerError::EmptyRegion(region.id));
    }
    let useful: Vec<_> = members
        .iter()
        .copied()
        .filter(|c| score_cluster(c, rel, cfg.eps_ftr, cfg.u0) >= cfg.eps_ftr)
        .collect();
    let kept = if useful.is_empty() { members } else { useful };
    let centroids: Vec<Point2<f64>> = kept.iter().map(|c| c.centroid).collect();
    Ok(tour_plan(robot, &centroids, cfg.n_exact, region.id))
}

/// `[robot, centroids in ATSP order]`, tagged as exploration.
pub fn tour_plan(robot: &Point2<f64>, centroids: &[Point2<f64>], n_exact: usize, target_region: usize) -> PathPlan {
    let order = solve_atsp(&build_atsp_cost(robot, centroids), n_exact);
    let mut waypoints = vec![*robot];
    waypoints.extend(order.iter().map(|&k| centroids[k - 1]));
    PathPlan { waypoints, mode: PlanMode::Explore, target_region }
}

pub fn plan_exploitation(region: &Region, robot: &Point2<f64>) -> PathPlan {
    PathPlan { waypoints: vec![*robot, region.bounds.center()], mode: PlanMode::Exploit, target_region: region.id }
}

/// Map state handed to planners every tick.
pub struct PlanContext<'a> {
    pub time: f64,
    pub robot: Point2<f64>,
    pub occ: &'a OccupancyGrid,
    pub clusters: &'a ClusterSet,
    pub rel: &'a RelevancyGrid,
    /// A task was issued since the previous call.
    pub new_task: bool,
    /// The robot has finished its current plan.
    pub idle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlanUpdate {
    Keep,
    Replace(PathPlan),
    /// Nothing left to explore or exploit.
    Exhausted,
}

/// Common interface of HALO and the baselines; each owns its replanning schedule.
pub trait ExplorationPlanner: Send {
    fn name(&self) -> &'static str;
    fn update(&mut self, ctx: &PlanContext<'_>) -> Result<PlanUpdate, PlannerError>;
}

/// The hierarchical planner.
#[derive(Clone, Debug)]
pub struct HaloPlanner {
    pub global: GlobalPlanner,
    target: Option<(usize, RegionLabel)>,
    next_global: f64,
    next_local: f64,
}

impl HaloPlanner {
    pub fn new(spec: GridSpec, bounds: Rect, config: PlannerConfig) -> Result<Self, PlannerError> {
        Ok(Self {
            global: GlobalPlanner::new(spec, bounds, config)?,
            target: None,
            next_global: f64::NEG_INFINITY,
            next_local: f64::NEG_INFINITY,
        })
    }

    pub fn target(&self) -> Option<(usize, RegionLabel)> {
        self.target
    }

    fn reselect(&mut self, ctx: &PlanContext<'_>) -> Result<bool, PlannerError> {
        let candidates = self.global.label(ctx.clusters, ctx.rel);
        self.next_global = ctx.time + self.global.config.global_period;
        let (best, cost) = select_next_region(&candidates, &ctx.robot, self.global.config.c_min)?;
        self.global.regions[best.region].cost = cost;
        let key = (best.region, best.label);
        let changed = self.target != Some(key);
        self.target = Some(key);
        Ok(changed)
    }

    fn local_plan(&mut self, ctx: &PlanContext<'_>) -> Result<PathPlan, PlannerError> {
        let (region, label) = self.target.expect("target selected");
        self.next_local = ctx.time + self.global.config.local_period;
        if label == RegionLabel::Exploitation {
            return Ok(plan_exploitation(self.global.region(region), &ctx.robot));
        }
        self.global.assign_clusters(ctx.clusters);
        plan_exploration(self.global.region(region), ctx.clusters, ctx.rel, &ctx.robot, &self.global.config)
    }
}

impl ExplorationPlanner for HaloPlanner {
    fn name(&self) -> &'static str {
        "halo"
    }

    fn update(&mut self, ctx: &PlanContext<'_>) -> Result<PlanUpdate, PlannerError> {
        if ctx.new_task {
            self.global.on_new_task(ctx.rel, ctx.occ);
            self.target = None;
        }
        self.global.observe_robot(&ctx.robot);
        // An exploitation flight is kept until it reaches the region center.
        let committed = matches!(self.target, Some((_, RegionLabel::Exploitation))) && !ctx.idle;
        let mut changed = false;
        if self.target.is_none() || ctx.idle || (!committed && ctx.time >= self.next_global) {
            match self.reselect(ctx) {
                Ok(c) => changed = c,
                Err(PlannerError::NoCandidates) => {
                    self.target = None;
                    return Ok(PlanUpdate::Exhausted);
                }
                Err(e) => return Err(e),
            }
        }
        if !(changed || ctx.idle || ctx.time >= self.next_local) {
            return Ok(PlanUpdate::Keep);
        }
        match self.local_plan(ctx) {
            Ok(plan) => Ok(PlanUpdate::Replace(plan)),
            Err(PlannerError::EmptyRegion(_)) => {
                // The target's frontiers vanished since the last selection.
                match self.reselect(ctx) {
                    Ok(_) => Ok(PlanUpdate::Replace(self.local_plan(ctx)?)),
                    Err(PlannerError::NoCandidates) => {
                        self.target = None;
                        Ok(PlanUpdate::Exhausted)
                    }
                    Err(e) => Err(e),
                }
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::ChangeBBox;
    use crate::taskinfo::FrontierParams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiling_examples() {
        let r = decompose_regions(&Rect::from_corners(0.0, 0.0, 100.0, 100.0), 50.0).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|x| x.bounds.width() == 50.0 && x.bounds.height() == 50.0));
        let r = decompose_regions(&Rect::from_corners(0.0, 0.0, 110.0, 100.0), 50.0).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(r.iter().filter(|x| (x.bounds.width() - 10.0).abs() < 1e-12).count(), 2);
        assert!(matches!(
            decompose_regions(&Rect::from_corners(0.0, 0.0, 1.0, 1.0), 0.0),
            Err(PlannerError::BadConfig(_))
        ));
    }

    proptest! {
        #[test]
        fn regions_partition_every_cell(
            nx in 1usize..60, ny in 1usize..60, res in 0.5f64..3.0, s_reg in 1.0f64..40.0,
        ) {
            let spec = GridSpec::new(Point2::new(-7.0, 3.0), res, nx, ny);
            let g = GlobalPlanner::new(spec, spec.bounds(), PlannerConfig { s_reg, ..PlannerConfig::default() }).unwrap();
            let mut owner = vec![0u32; spec.len()];
            for r in 0..g.regions().len() {
                for c in g.region_cells(r) {
                    owner[spec.index(c)] += 1;
                }
            }
            prop_assert!(owner.iter().all(|&n| n == 1));
            let area: f64 = g.regions().iter().map(|r| r.bounds.area()).sum();
            prop_assert!((area - spec.bounds().area()).abs() < 1e-6 * spec.bounds().area());
        }
    }

    fn cand(region: usize, u: f64, x: f64) -> Candidate {
        Candidate { region, label: RegionLabel::Exploration, utility: u, center: Point2::new(x, 0.0) }
    }

    #[test]
    fn selection_examples() {
        let robot = Point2::origin();
        let (c, _) = select_next_region(&[cand(3, 0.1, 5.0)], &robot, 1.0).unwrap();
        assert_eq!(c.region, 3);
        let (c, cost) = select_next_region(&[cand(0, 0.4, 10.0), cand(1, 0.8, 40.0)], &robot, 1.0).unwrap();
        assert_eq!(c.region, 0);
        assert_relative_eq!(cost, 10.0);
        let (_, cost) = select_next_region(&[cand(0, 0.4, 0.0)], &robot, 1.0).unwrap();
        assert_eq!(cost, 1.0);
        assert_eq!(select_next_region(&[], &robot, 1.0).unwrap_err(), PlannerError::NoCandidates);
        // Equal ratios: lower id wins.
        let (c, _) = select_next_region(&[cand(5, 0.2, 10.0), cand(2, 0.4, 20.0)], &robot, 1.0).unwrap();
        assert_eq!(c.region, 2);
    }

    proptest! {
        #[test]
        fn selection_invariant_to_utility_scale(
            us in prop::collection::vec((0.01f64..1.0, -100.0f64..100.0), 1..8),
            k in 0.01f64..100.0,
        ) {
            let robot = Point2::origin();
            let a: Vec<Candidate> = us.iter().enumerate().map(|(i, (u, x))| cand(i, *u, *x)).collect();
            let b: Vec<Candidate> = a.iter().map(|c| Candidate { utility: c.utility * k, ..*c }).collect();
            let ratios: Vec<f64> = a.iter().map(|c| c.utility / nalgebra::distance(&robot, &c.center).max(1.0)).collect();
            let mut sorted = ratios.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            prop_assume!(sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9 * sorted[0]);
            prop_assert_eq!(
                select_next_region(&a, &robot, 1.0).unwrap().0.region,
                select_next_region(&b, &robot, 1.0).unwrap().0.region
            );
        }
    }

    #[test]
    fn atsp_cost_matrix() {
        let c = build_atsp_cost(&Point2::origin(), &[Point2::new(3.0, 4.0)]);
        assert_eq!(c[(0, 1)], 5.0);
        assert_eq!(c[(1, 0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps: Vec<Point2<f64>> = (0..3).map(|_| Point2::new(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0))).collect();
        let c = build_atsp_cost(&Point2::new(1.0, 1.0), &ps);
        for i in 0..3 {
            for j in 0..3 {
                let d = ((ps[i].x - ps[j].x).powi(2) + (ps[i].y - ps[j].y).powi(2)).sqrt();
                assert!((c[(i + 1, j + 1)] - d).abs() < 1e-12);
                assert_eq!(c[(i + 1, j + 1)], c[(j + 1, i + 1)]);
            }
        }
    }

    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let x = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn atsp_small_cases() {
        let c = build_atsp_cost(&Point2::origin(), &[Point2::new(5.0, 0.0)]);
        assert_eq!(solve_atsp(&c, 12), vec![1]);
        let c = build_atsp_cost(&Point2::origin(), &[Point2::new(1.0, 0.0), Point2::new(2.0, 0.0), Point2::new(3.0, 0.0)]);
        let order = solve_atsp(&c, 12);
        assert_eq!(order, vec![1, 2, 3]);
        assert_relative_eq!(tour_cost(&c, &order), 3.0);
        let best = permutations(&[1, 2, 3]).iter().map(|p| tour_cost(&c, p)).fold(f64::INFINITY, f64::min);
        assert_relative_eq!(best, 3.0);
        assert_eq!(solve_atsp_heuristic(&c), vec![1, 2, 3]);
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let ps: Vec<Point2<f64>> = (0..n).map(|_| Point2::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0))).collect();
        build_atsp_cost(&Point2::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)), &ps)
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=7 {
            for _ in 0..5 {
                let c = random_instance(&mut rng, n);
                let items: Vec<usize> = (1..=n).collect();
                let best = permutations(&items).iter().map(|p| tour_cost(&c, p)).fold(f64::INFINITY, f64::min);
                let order = solve_atsp_exact(&c);
                let mut seen = order.clone();
                seen.sort();
                assert_eq!(seen, items);
                assert_eq!(tour_cost(&c, &order), best);
            }
        }
    }

    #[test]
    fn heuristic_visits_every_node_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [1, 2, 5, 20, 40] {
            let c = random_instance(&mut rng, n);
            let mut order = solve_atsp(&c, 12);
            order.sort();
            assert_eq!(order, (1..=n).collect::<Vec<_>>());
        }
    }

    fn grid_with_clusters() -> (OccupancyGrid, ClusterSet, RelevancyGrid) {
        let spec = GridSpec::new(Point2::origin(), 1.0, 40, 40);
        let mut occ = OccupancyGrid::new(spec);
        // Two separate known blocks, each ringed by frontier cells.
        for (x0, y0) in [(2, 2), (25, 25)] {
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    occ.mark_known((x, y), 1);
                }
            }
        }
        let clusters = ClusterSet::full_scan(&occ, &FrontierParams { ftr_min: 0.0, ftr_max: 50.0 });
        (occ, clusters, RelevancyGrid::new(spec))
    }

    #[test]
    fn unobserved_region_explores_with_prior() {
        let (occ, clusters, rel) = grid_with_clusters();
        let mut g = GlobalPlanner::new(occ.spec, occ.spec.bounds(), PlannerConfig { s_reg: 20.0, ..Default::default() }).unwrap();
        let cands = g.label(&clusters, &rel);
        assert_eq!(cands.len(), 2);
        assert!(cands.iter().all(|c| c.label == RegionLabel::Exploration));
        assert_relative_eq!(cands[0].utility, 0.05, epsilon = 1e-12);
        assert_eq!(g.region(0).clusters.len(), 1);
    }

    #[test]
    fn exploration_utility_thresholds() {
        let spec = GridSpec::new(Point2::origin(), 1.0, 2, 2);
        let mut occ = OccupancyGrid::new(spec);
        occ.mark_known((0, 0), 1);
        let clusters = ClusterSet::full_scan(&occ, &FrontierParams { ftr_min: 0.0, ftr_max: 5.0 });
        let mut feat = crate::mapping::FeatureGrid::new(spec, 2, 0.3);
        let a = [1.0, 0.0];
        let e = [0.8, 0.6];
        // cos(a, e) = 0.8 and cos(low, e) = 0.2.
        let low = [0.2 * 0.8 - 0.96f64.sqrt() * 0.6, 0.2 * 0.6 + 0.96f64.sqrt() * 0.8];
        feat.observe((0, 0), &low);
        feat.observe((1, 0), &low);
        feat.observe((0, 1), &a);
        feat.observe((1, 1), &a);
        let task = crate::taskinfo::TaskEmbedding::new("t", &e, "").unwrap();
        let mut rel = RelevancyGrid::new(spec);
        crate::taskinfo::update_relevancy(&mut rel, &feat, &task, crate::taskinfo::RelevancyScope::Full);
        assert_relative_eq!(rel.score((0, 0)).unwrap(), 0.2, epsilon = 1e-12);
        let mut g = GlobalPlanner::new(spec, spec.bounds(), PlannerConfig { s_reg: 2.0, ..Default::default() }).unwrap();
        let cands = g.label(&clusters, &rel);
        assert_relative_eq!(cands[0].utility, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn exploitation_labels_persist_until_visit_or_new_task() {
        let spec = GridSpec::new(Point2::origin(), 1.0, 20, 10);
        let mut occ = OccupancyGrid::new(spec);
        for i in 0..spec.len() {
            occ.mark_known(spec.cell_at(i), 1);
        }
        let mut rel = RelevancyGrid::new(spec);
        let mut feat = crate::mapping::FeatureGrid::new(spec, 2, 0.3);
        for i in 0..spec.len() {
            feat.observe(spec.cell_at(i), &[0.0, 1.0]);
        }
        feat.observe((15, 5), &[1.0, 0.0]);
        feat.observe((15, 5), &[1.0, 0.0]);
        let task = crate::taskinfo::TaskEmbedding::new("t", &[1.0, 0.0], "").unwrap();
        crate::taskinfo::update_relevancy(&mut rel, &feat, &task, crate::taskinfo::RelevancyScope::Full);
        let mut g = GlobalPlanner::new(spec, spec.bounds(), PlannerConfig { s_reg: 10.0, ..Default::default() }).unwrap();
        g.on_new_task(&rel, &occ);
        assert_eq!(g.exploitation_regions(), &BTreeSet::from([1]));
        let cands = g.label(&ClusterSet::new(), &rel);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].label, RegionLabel::Exploitation);
        assert!(cands[0].utility > 0.6);
        assert!(g.observe_robot(&Point2::new(5.0, 5.0)).is_empty());
        assert_eq!(g.exploitation_regions().len(), 1);
        assert_eq!(g.observe_robot(&Point2::new(12.0, 5.0)), vec![1]);
        assert!(g.exploitation_regions().is_empty());
        g.on_new_task(&rel, &occ);
        assert_eq!(g.exploitation_regions().len(), 1);
        let empty = RelevancyGrid::new(spec);
        g.on_new_task(&empty, &occ);
        assert!(g.exploitation_regions().is_empty());
    }

    #[test]
    fn exploration_plan_pruning() {
        let (_, clusters, mut rel) = grid_with_clusters();
        let spec = rel.spec;
        let ids: Vec<u64> = clusters.iter().map(|c| c.id).collect();
        let region = Region {
            id: 0,
            bounds: spec.bounds(),
            label: RegionLabel::Exploration,
            utility: 0.0,
            cost: 0.0,
            clusters: ids.clone(),
        };
        let cfg = PlannerConfig { eps_ftr: 0.3, ..Default::default() };
        let robot = Point2::new(20.0, 20.0);
        // Both clusters below the gate: both kept.
        let plan = plan_exploration(&region, &clusters, &rel, &robot, &cfg).unwrap();
        assert_eq!(plan.waypoints.len(), 3);
        assert_eq!(plan.waypoints[0], robot);
        // Make the second cluster useful: only it survives.
        let second = clusters.get(ids[1]).unwrap();
        for &c in &second.cells {
            rel_set(&mut rel, c, 0.7);
        }
        let plan = plan_exploration(&region, &clusters, &rel, &robot, &cfg).unwrap();
        assert_eq!(plan.waypoints, vec![robot, second.centroid]);
        assert_eq!(plan.mode, PlanMode::Explore);
        let empty = Region { clusters: vec![], ..region };
        assert_eq!(plan_exploration(&empty, &clusters, &rel, &robot, &cfg).unwrap_err(), PlannerError::EmptyRegion(0));
    }

    fn rel_set(rel: &mut RelevancyGrid, c: (usize, usize), v: f64) {
        let mut feat = crate::mapping::FeatureGrid::new(rel.spec, 2, 1.0);
        let e = [1.0, 0.0];
        let f = [v, (1.0 - v * v).sqrt()];
        feat.observe(c, &f);
        let task = crate::taskinfo::TaskEmbedding::new("t", &e, "").unwrap();
        crate::taskinfo::update_relevancy(rel, &feat, &task, crate::taskinfo::RelevancyScope::Changed(ChangeBBox::new(c, c)));
    }

    #[test]
    fn exploitation_plan_is_straight() {
        let region = decompose_regions(&Rect::from_corners(0.0, -10.0, 20.0, 10.0), 20.0).unwrap().remove(0);
        let plan = plan_exploitation(&region, &Point2::origin());
        assert_eq!(plan.waypoints, vec![Point2::origin(), Point2::new(10.0, 0.0)]);
        assert_relative_eq!(plan.length(), 10.0);
        let plan = plan_exploitation(&region, &Point2::new(10.0, 0.0));
        assert_eq!(plan.length(), 0.0);
        assert_eq!(plan.mode, PlanMode::Exploit);
    }

    #[test]
    fn halo_plans_then_reports_exhaustion() {
        let (occ, clusters, rel) = grid_with_clusters();
        let mut halo = HaloPlanner::new(occ.spec, occ.spec.bounds(), PlannerConfig { s_reg: 20.0, ..Default::default() }).unwrap();
        let ctx = PlanContext { time: 0.0, robot: Point2::new(5.0, 5.0), occ: &occ, clusters: &clusters, rel: &rel, new_task: true, idle: true };
        let PlanUpdate::Replace(plan) = halo.update(&ctx).unwrap() else { panic!("expected a plan") };
        assert_eq!(plan.target_region, 0);
        let ctx = PlanContext { time: 0.5, idle: false, new_task: false, ..ctx };
        assert_eq!(halo.update(&ctx).unwrap(), PlanUpdate::Keep);
        let empty = ClusterSet::new();
        let ctx = PlanContext { time: 3.0, clusters: &empty, ..ctx };
        assert_eq!(halo.update(&ctx).unwrap(), PlanUpdate::Exhausted);
    }
}
