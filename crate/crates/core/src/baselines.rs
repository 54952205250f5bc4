//! Comparison planners driven by the same mission loop as HALO.

use std::fmt;
use std::str::FromStr;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::geometry::Rect;
use crate::planner::{
    tour_plan, ExplorationPlanner, PathPlan, PlanContext, PlanMode, PlanUpdate, PlannerConfig, PlannerError,
};
use crate::taskinfo::{score_cluster, ClusterSet, RelevancyGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineKind {
    Coverage,
    Frontier,
    Fuel,
    Vlfm,
}

/// Every selectable planner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PlannerKind {
    Halo,
    Baseline(BaselineKind),
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 5] = [
        PlannerKind::Halo,
        PlannerKind::Baseline(BaselineKind::Coverage),
        PlannerKind::Baseline(BaselineKind::Frontier),
        PlannerKind::Baseline(BaselineKind::Fuel),
        PlannerKind::Baseline(BaselineKind::Vlfm),
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerKind::Halo => "halo",
            PlannerKind::Baseline(BaselineKind::Coverage) => "coverage",
            PlannerKind::Baseline(BaselineKind::Frontier) => "frontier",
            PlannerKind::Baseline(BaselineKind::Fuel) => "fuel",
            PlannerKind::Baseline(BaselineKind::Vlfm) => "vlfm",
        }
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlannerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PlannerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown planner {s:?}; expected one of halo, coverage, frontier, fuel, vlfm"))
    }
}

impl TryFrom<String> for PlannerKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<PlannerKind> for String {
    fn from(k: PlannerKind) -> String {
        k.as_str().to_string()
    }
}

fn no_region() -> usize {
    usize::MAX
}

/// Nearest bounds corner, then boustrophedon sweeps along x, one per
/// footprint-wide swath in y.
pub fn coverage_plan(bounds: &Rect, robot: &Point2<f64>, footprint_width: f64) -> PathPlan {
    assert!(footprint_width > 0.0, "footprint width must be positive");
    let corner = *bounds
        .corners()
        .iter()
        .min_by(|a, b| nalgebra::distance(robot, a).total_cmp(&nalgebra::distance(robot, b)))
        .unwrap();
    let from_low_y = corner.y == bounds.min.y;
    let mut heading_max_x = corner.x == bounds.min.x;
    let swaths = ((bounds.height() / footprint_width - 1e-9).ceil() as usize).max(1);
    let mut waypoints = vec![*robot, corner];
    for k in 0..swaths {
        let offset = (footprint_width * (k as f64 + 0.5)).min(bounds.height());
        let y = if from_low_y { bounds.min.y + offset } else { bounds.max.y - offset };
        let (x0, x1) = if heading_max_x { (bounds.min.x, bounds.max.x) } else { (bounds.max.x, bounds.min.x) };
        waypoints.push(Point2::new(x0, y));
        waypoints.push(Point2::new(x1, y));
        heading_max_x = !heading_max_x;
    }
    PathPlan { waypoints, mode: PlanMode::Explore, target_region: no_region() }
}

/// Straight to the closest cluster centroid.
pub fn nearest_frontier_plan(clusters: &ClusterSet, robot: &Point2<f64>) -> Result<PathPlan, PlannerError> {
    let mut best: Option<(f64, Point2<f64>)> = None;
    for c in clusters.iter() {
        let d = nalgebra::distance(robot, &c.centroid);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, c.centroid));
        }
    }
    let (_, target) = best.ok_or(PlannerError::NoFrontiers)?;
    Ok(PathPlan { waypoints: vec![*robot, target], mode: PlanMode::Explore, target_region: no_region() })
}

/// Open tour through every cluster centroid in the map.
pub fn fuel_plan(clusters: &ClusterSet, robot: &Point2<f64>, n_exact: usize) -> Result<PathPlan, PlannerError> {
    if clusters.is_empty() {
        return Err(PlannerError::NoFrontiers);
    }
    let centroids: Vec<Point2<f64>> = clusters.iter().map(|c| c.centroid).collect();
    Ok(tour_plan(robot, &centroids, n_exact, no_region()))
}

/// Best utility per meter over individual clusters.
pub fn vlfm_select(
    clusters: &ClusterSet,
    rel: &RelevancyGrid,
    robot: &Point2<f64>,
    cfg: &PlannerConfig,
) -> Result<PathPlan, PlannerError> {
    let mut best: Option<(f64, Point2<f64>)> = None;
    for c in clusters.iter() {
        let u = score_cluster(c, rel, cfg.eps_ftr, cfg.u0);
        let ratio = u / nalgebra::distance(robot, &c.centroid).max(cfg.c_min);
        if best.map_or(true, |(br, _)| ratio > br) {
            best = Some((ratio, c.centroid));
        }
    }
    let (_, target) = best.ok_or(PlannerError::NoFrontiers)?;
    Ok(PathPlan { waypoints: vec![*robot, target], mode: PlanMode::Explore, target_region: no_region() })
}

/// A baseline on the local replanning schedule.
#[derive(Clone, Debug)]
pub struct BaselinePlanner {
    pub kind: BaselineKind,
    pub config: PlannerConfig,
    bounds: Rect,
    footprint_width: f64,
    coverage_issued: bool,
    next_local: f64,
}

impl BaselinePlanner {
    pub fn new(kind: BaselineKind, bounds: Rect, footprint_width: f64, config: PlannerConfig) -> Result<Self, PlannerError> {
        config.validate()?;
        if !(footprint_width > 0.0) {
            return Err(PlannerError::BadConfig(format!("footprint width must be positive, got {footprint_width}")));
        }
        Ok(Self { kind, config, bounds, footprint_width, coverage_issued: false, next_local: f64::NEG_INFINITY })
    }
}

impl ExplorationPlanner for BaselinePlanner {
    fn name(&self) -> &'static str {
        PlannerKind::Baseline(self.kind).as_str()
    }

    fn update(&mut self, ctx: &PlanContext<'_>) -> Result<PlanUpdate, PlannerError> {
        if self.kind == BaselineKind::Coverage {
            if !self.coverage_issued {
                self.coverage_issued = true;
                return Ok(PlanUpdate::Replace(coverage_plan(&self.bounds, &ctx.robot, self.footprint_width)));
            }
            return Ok(if ctx.idle { PlanUpdate::Exhausted } else { PlanUpdate::Keep });
        }
        if !(ctx.new_task || ctx.idle || ctx.time >= self.next_local) {
            return Ok(PlanUpdate::Keep);
        }
        self.next_local = ctx.time + self.config.local_period;
        let plan = match self.kind {
            BaselineKind::Frontier => nearest_frontier_plan(ctx.clusters, &ctx.robot),
            BaselineKind::Fuel => fuel_plan(ctx.clusters, &ctx.robot, self.config.n_exact),
            BaselineKind::Vlfm => vlfm_select(ctx.clusters, ctx.rel, &ctx.robot, &self.config),
            BaselineKind::Coverage => unreachable!("handled above"),
        };
        match plan {
            Ok(p) => Ok(PlanUpdate::Replace(p)),
            Err(PlannerError::NoFrontiers) => Ok(PlanUpdate::Exhausted),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::mapping::OccupancyGrid;
    use crate::planner::{build_atsp_cost, solve_atsp, tour_cost};
    use crate::taskinfo::FrontierParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planner_names_round_trip() {
        for k in PlannerKind::ALL {
            assert_eq!(k.as_str().parse::<PlannerKind>().unwrap(), k);
        }
        assert!("astar".parse::<PlannerKind>().is_err());
    }

    #[test]
    fn coverage_starts_at_nearest_corner() {
        let b = Rect::from_corners(0.0, 0.0, 100.0, 100.0);
        let plan = coverage_plan(&b, &Point2::new(100.0, 100.0), 30.0);
        assert_eq!(plan.waypoints[1], Point2::new(100.0, 100.0));
        let plan = coverage_plan(&b, &Point2::new(10.0, 90.0), 30.0);
        assert_eq!(plan.waypoints[1], Point2::new(0.0, 100.0));
    }

    #[test]
    fn coverage_swath_count() {
        let b = Rect::from_corners(0.0, 0.0, 100.0, 100.0);
        let plan = coverage_plan(&b, &Point2::origin(), 30.0);
        assert_eq!((plan.waypoints.len() - 2) / 2, 4);
        // Every point of the bounds is within half a footprint of some sweep line.
        let ys: Vec<f64> = plan.waypoints[2..].iter().map(|p| p.y).collect();
        for k in 0..=100 {
            let y = k as f64;
            assert!(ys.iter().any(|s| (s - y).abs() <= 15.0 + 1e-9));
        }
    }

    #[test]
    fn coverage_single_swath() {
        let b = Rect::from_corners(0.0, 0.0, 100.0, 20.0);
        let plan = coverage_plan(&b, &Point2::origin(), 40.0);
        assert_eq!(plan.waypoints.len() - 2, 2);
        assert_eq!(plan.waypoints[2].x, 0.0);
        assert_eq!(plan.waypoints[3].x, 100.0);
    }

    fn clusters_at(points: &[(usize, usize)]) -> ClusterSet {
        let spec = GridSpec::new(Point2::origin(), 1.0, 100, 100);
        let mut occ = OccupancyGrid::new(spec);
        for &c in points {
            occ.mark_known(c, 1);
        }
        ClusterSet::full_scan(&occ, &FrontierParams { ftr_min: 0.0, ftr_max: 5.0 })
    }

    #[test]
    fn nearest_frontier_examples() {
        let set = clusters_at(&[(5, 0), (0, 9)]);
        let plan = nearest_frontier_plan(&set, &Point2::new(0.5, 0.5)).unwrap();
        assert_eq!(plan.waypoints[1], Point2::new(5.5, 0.5));
        assert_eq!(nearest_frontier_plan(&ClusterSet::new(), &Point2::origin()).unwrap_err(), PlannerError::NoFrontiers);
    }

    #[test]
    fn nearest_frontier_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(usize, usize)> = (0..20).map(|_| (rng.gen_range(0..50) * 2, rng.gen_range(0..50) * 2)).collect();
        let set = clusters_at(&pts);
        let robot = Point2::new(37.0, 61.0);
        let plan = nearest_frontier_plan(&set, &robot).unwrap();
        let best = pts
            .iter()
            .map(|&(x, y)| ((x as f64 + 0.5 - robot.x).powi(2) + (y as f64 + 0.5 - robot.y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!((nalgebra::distance(&robot, &plan.waypoints[1]) - best).abs() < 1e-9);
    }

    #[test]
    fn fuel_equals_region_free_tour() {
        let set = clusters_at(&[(10, 0), (20, 0), (30, 0)]);
        let robot = Point2::new(0.5, 0.5);
        let plan = fuel_plan(&set, &robot, 12).unwrap();
        let xs: Vec<f64> = plan.waypoints.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.5, 10.5, 20.5, 30.5]);
        let centroids: Vec<Point2<f64>> = set.iter().map(|c| c.centroid).collect();
        let c = build_atsp_cost(&robot, &centroids);
        let order = solve_atsp(&c, 12);
        assert!((plan.length() - tour_cost(&c, &order)).abs() < 1e-9);
        let single = clusters_at(&[(40, 40)]);
        assert_eq!(fuel_plan(&single, &robot, 12).unwrap().waypoints.len(), 2);
    }

    #[test]
    fn vlfm_cost_benefit() {
        let set = clusters_at(&[(10, 0), (40, 0)]);
        let spec = GridSpec::new(Point2::origin(), 1.0, 100, 100);
        let mut feat = crate::mapping::FeatureGrid::new(spec, 2, 1.0);
        feat.observe((10, 0), &[0.4, (1.0f64 - 0.16).sqrt()]);
        feat.observe((40, 0), &[0.8, 0.6]);
        let task = crate::taskinfo::TaskEmbedding::new("t", &[1.0, 0.0], "").unwrap();
        let mut rel = RelevancyGrid::new(spec);
        crate::taskinfo::update_relevancy(&mut rel, &feat, &task, crate::taskinfo::RelevancyScope::Full);
        let robot = Point2::new(0.5, 0.5);
        let plan = vlfm_select(&set, &rel, &robot, &PlannerConfig::default()).unwrap();
        assert_eq!(plan.waypoints[1], Point2::new(10.5, 0.5));
        // Equal utilities reduce to the nearest cluster.
        let flat = RelevancyGrid::new(spec);
        let plan = vlfm_select(&set, &flat, &Point2::new(39.0, 0.5), &PlannerConfig::default()).unwrap();
        assert_eq!(plan.waypoints[1], Point2::new(40.5, 0.5));
    }
}
