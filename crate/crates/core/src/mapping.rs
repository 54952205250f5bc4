//! 2D metric-semantic grid map.
//!
//! The occupancy layer only distinguishes known from unknown cells; the feature
//! layer keeps one unit-norm embedding per cell, fused across observations with an
//! exponential moving average. Every update grows a pending change box that
//! incremental consumers (frontiers, relevancy) drain with [`SemanticMap::take_change_bbox`].

use std::io::{self, BufRead, Write};

use nalgebra::Point2;

use crate::geometry::Pose;
use crate::grid::{Cell, GridSpec};
use crate::world::SensorFrame;

pub const DEFAULT_EMA_ALPHA: f64 = 0.3;
pub const DEFAULT_FEATURE_STRIDE: usize = 4;

/// Inclusive bounding box of grid cells, possibly empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChangeBBox {
    bounds: Option<(Cell, Cell)>,
}

impl ChangeBBox {
    pub fn empty() -> Self {
        Self { bounds: None }
    }

    pub fn new(min: Cell, max: Cell) -> Self {
        debug_assert!(min.0 <= max.0 && min.1 <= max.1);
        Self { bounds: Some((min, max)) }
    }

    pub fn full(spec: &GridSpec) -> Self {
        Self::new((0, 0), (spec.nx - 1, spec.ny - 1))
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_none()
    }

    pub fn min_index(&self) -> Option<Cell> {
        self.bounds.map(|b| b.0)
    }

    pub fn max_index(&self) -> Option<Cell> {
        self.bounds.map(|b| b.1)
    }

    pub fn include(&mut self, c: Cell) {
        self.bounds = Some(match self.bounds {
            None => (c, c),
            Some((lo, hi)) => ((lo.0.min(c.0), lo.1.min(c.1)), (hi.0.max(c.0), hi.1.max(c.1))),
        });
    }

    pub fn union(&self, other: &ChangeBBox) -> ChangeBBox {
        let mut out = *self;
        if let Some((lo, hi)) = other.bounds {
            out.include(lo);
            out.include(hi);
        }
        out
    }

    pub fn contains(&self, c: Cell) -> bool {
        self.bounds
            .is_some_and(|(lo, hi)| c.0 >= lo.0 && c.0 <= hi.0 && c.1 >= lo.1 && c.1 <= hi.1)
    }

    /// Grows the box by `n` cells on every side, clipped to the grid.
    pub fn inflated(&self, n: usize, spec: &GridSpec) -> ChangeBBox {
        match self.bounds {
            None => *self,
            Some((lo, hi)) => ChangeBBox::new(
                (lo.0.saturating_sub(n), lo.1.saturating_sub(n)),
                ((hi.0 + n).min(spec.nx - 1), (hi.1 + n).min(spec.ny - 1)),
            ),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> {
        let (lo, hi) = self.bounds.unwrap_or(((1, 1), (0, 0)));
        (lo.1..=hi.1).flat_map(move |y| (lo.0..=hi.0).map(move |x| (x, y)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    known: Vec<bool>,
    /// Frame stamp of the latest observation of each cell; 0 = never.
    last_seen: Vec<u64>,
    /// Unknown cells that a fused frame should have covered but did not.
    unobservable: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(spec: GridSpec) -> Self {
        Self {
            spec,
            known: vec![false; spec.len()],
            last_seen: vec![0; spec.len()],
            unobservable: vec![false; spec.len()],
        }
    }

    pub fn is_known(&self, c: Cell) -> bool {
        self.known[self.spec.index(c)]
    }

    pub fn last_seen(&self, c: Cell) -> u64 {
        self.last_seen[self.spec.index(c)]
    }

    /// Marks a cell known. Known cells never revert.
    pub fn mark_known(&mut self, c: Cell, stamp: u64) -> bool {
        let i = self.spec.index(c);
        let changed = !self.known[i];
        self.known[i] = true;
        self.last_seen[i] = self.last_seen[i].max(stamp);
        changed
    }

    /// Flags an unknown cell as not worth exploring. Returns whether anything changed.
    pub fn mark_unobservable(&mut self, c: Cell) -> bool {
        let i = self.spec.index(c);
        let changed = !self.known[i] && !self.unobservable[i];
        self.unobservable[i] |= !self.known[i];
        changed
    }

    /// Unknown and flagged by [`Self::mark_unobservable`].
    pub fn is_unobservable(&self, c: Cell) -> bool {
        let i = self.spec.index(c);
        !self.known[i] && self.unobservable[i]
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|k| **k).count()
    }

    pub fn known_mask(&self) -> &[bool] {
        &self.known
    }

    /// Plain-text matrix, one row per `iy`, 0 = unknown, 1 = known.
    pub fn write_matrix<W: Write>(&self, mut w: W) -> io::Result<()> {
        for iy in 0..self.spec.ny {
            let row: Vec<&str> = (0..self.spec.nx)
                .map(|ix| if self.is_known((ix, iy)) { "1" } else { "0" })
                .collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Writes any per-cell scalar layer as a plain-text matrix.
pub fn write_scalar_matrix<W: Write>(spec: &GridSpec, values: &[f64], mut w: W) -> io::Result<()> {
    for iy in 0..spec.ny {
        let row: Vec<String> = (0..spec.nx).map(|ix| format!("{}", values[spec.index((ix, iy))])).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    dim: usize,
    alpha: f64,
    features: Vec<f64>,
    counts: Vec<u32>,
}

impl FeatureGrid {
    pub fn new(spec: GridSpec, dim: usize, alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "EMA weight must lie in (0, 1]");
        Self { spec, dim, alpha, features: vec![0.0; spec.len() * dim], counts: vec![0; spec.len()] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn count(&self, c: Cell) -> u32 {
        self.counts[self.spec.index(c)]
    }

    pub fn feature(&self, c: Cell) -> Option<&[f64]> {
        let i = self.spec.index(c);
        (self.counts[i] > 0).then(|| &self.features[i * self.dim..(i + 1) * self.dim])
    }

    /// Fuses one observation into a cell.
    pub fn observe(&mut self, c: Cell, f: &[f64]) {
        let i = self.spec.index(c);
        let slot = &mut self.features[i * self.dim..(i + 1) * self.dim];
        ema_update_in_place(slot, self.counts[i] > 0, f, self.alpha);
        self.counts[i] = self.counts[i].saturating_add(1);
    }

    /// Binary dump: a text header line, then `nx·ny·dim` little-endian f64 values,
    /// NaN for never-observed cells.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "FEATGRID nx={} ny={} d={} resolution={} origin_x={} origin_y={}",
            self.spec.nx, self.spec.ny, self.dim, self.spec.resolution, self.spec.origin.x, self.spec.origin.y
        )?;
        for i in 0..self.spec.len() {
            for k in 0..self.dim {
                let v = if self.counts[i] > 0 { self.features[i * self.dim + k] } else { f64::NAN };
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Per-cell rows read back from [`FeatureGrid::write_binary`] or a relevancy dump.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDump {
    pub spec: GridSpec,
    pub dim: usize,
    pub values: Vec<f64>,
}

pub fn read_grid_binary<R: BufRead>(mut r: R) -> io::Result<GridDump> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut fields = std::collections::BTreeMap::new();
    let mut tokens = header.split_whitespace();
    let magic = tokens.next().ok_or_else(|| bad("missing header"))?;
    if magic != "FEATGRID" && magic != "RELGRID" {
        return Err(bad("unknown magic"));
    }
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad("malformed header field"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing {k}")));
    let parse_f = |k: &str| -> io::Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
    let parse_u = |k: &str| -> io::Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
    let spec = GridSpec::new(
        Point2::new(parse_f("origin_x")?, parse_f("origin_y")?),
        parse_f("resolution")?,
        parse_u("nx")?,
        parse_u("ny")?,
    );
    let dim = parse_u("d")?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != spec.len() * dim * 8 {
        return Err(bad("payload size mismatch"));
    }
    let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(GridDump { spec, dim, values })
}

/// `normalize((1 − alpha)·f_old + alpha·f_new)`, or `f_new` for a first
/// observation. An exactly cancelling blend also falls back to `f_new`.
pub fn ema_update(f_old: Option<&[f64]>, f_new: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = f_old.map_or_else(|| vec![0.0; f_new.len()], <[f64]>::to_vec);
    ema_update_in_place(&mut out, f_old.is_some(), f_new, alpha);
    out
}

fn ema_update_in_place(slot: &mut [f64], has_old: bool, f_new: &[f64], alpha: f64) {
    debug_assert!(alpha > 0.0 && alpha <= 1.0);
    if !has_old {
        slot.copy_from_slice(f_new);
        return;
    }
    let mut n2 = 0.0;
    for (s, x) in slot.iter_mut().zip(f_new) {
        *s = (1.0 - alpha) * *s + alpha * x;
        n2 += *s * *s;
    }
    let n = n2.sqrt();
    if n < 1e-12 {
        slot.copy_from_slice(f_new);
    } else {
        slot.iter_mut().for_each(|s| *s /= n);
    }
}

/// Occupancy and feature layers on one grid, plus the pending change box.
#[derive(Clone, Debug)]
pub struct SemanticMap {
    pub occupancy: OccupancyGrid,
    pub features: FeatureGrid,
    pending: ChangeBBox,
    /// Only every `feature_stride`-th pixel row/column is fused into features.
    pub feature_stride: usize,
}

impl SemanticMap {
    pub fn new(spec: GridSpec, feature_dim: usize, alpha: f64) -> Self {
        Self {
            occupancy: OccupancyGrid::new(spec),
            features: FeatureGrid::new(spec, feature_dim, alpha),
            pending: ChangeBBox::empty(),
            feature_stride: DEFAULT_FEATURE_STRIDE,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.occupancy.spec
    }

    /// Back-projects a posed frame. Returns the box of touched cells, which is also
    /// merged into the pending box. The observation stamp is `frame.id + 1`.
    pub fn integrate_frame(&mut self, pose: &Pose, frame: &SensorFrame) -> ChangeBBox {
        let spec = *self.spec();
        let stamp = frame.id + 1;
        let stride = self.feature_stride.max(1);
        let mut touched = ChangeBBox::empty();
        let cam = &frame.camera;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let i = frame.pixel_index(u, v);
                let Some(d) = frame.depth[i] else { continue };
                let p = pose * nalgebra::Point3::from(cam.ray(u, v) * d);
                let Some(cell) = spec.cell_of(p.x, p.y) else { continue };
                self.occupancy.mark_known(cell, stamp);
                touched.include(cell);
                if u % stride == 0 && v % stride == 0 {
                    if let Some(f) = frame.feature(i) {
                        self.features.observe(cell, f);
                    }
                }
            }
        }
        self.pending = self.pending.union(&touched);
        touched
    }

    pub fn pending_change_bbox(&self) -> ChangeBBox {
        self.pending
    }

    /// Returns the accumulated change box and resets it.
    pub fn take_change_bbox(&mut self) -> ChangeBBox {
        std::mem::take(&mut self.pending)
    }
}
