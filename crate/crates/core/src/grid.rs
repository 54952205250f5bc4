//! Regular 2D grid geometry shared by terrain, occupancy, features and relevancy.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::geometry::Rect;

/// Cell index `(ix, iy)`.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// World position of the minimum corner of cell (0, 0).
    pub origin: Point2<f64>,
    /// Meters per cell.
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(origin: Point2<f64>, resolution: f64, nx: usize, ny: usize) -> Self {
        Self { origin, resolution, nx, ny }
    }

    pub fn is_valid(&self) -> bool {
        self.resolution > 0.0 && self.nx >= 1 && self.ny >= 1 && self.origin.x.is_finite() && self.origin.y.is_finite()
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.1 * self.nx + c.0
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> Cell {
        (index % self.nx, index / self.nx)
    }

    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        let fx = (x - self.origin.x) / self.resolution;
        let fy = (y - self.origin.y) / self.resolution;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    pub fn cell_center(&self, c: Cell) -> Point2<f64> {
        Point2::new(
            self.origin.x + (c.0 as f64 + 0.5) * self.resolution,
            self.origin.y + (c.1 as f64 + 0.5) * self.resolution,
        )
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(
            self.origin,
            Point2::new(
                self.origin.x + self.nx as f64 * self.resolution,
                self.origin.y + self.ny as f64 * self.resolution,
            ),
        )
    }

    /// Cells whose centers lie in the half-open rectangle `[min, max)`.
    pub fn cells_centered_in(&self, rect: &Rect) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let range = |lo: f64, hi: f64, origin: f64, n: usize| {
            let a = ((lo - origin) / self.resolution - 0.5).ceil().max(0.0) as usize;
            let b = ((hi - origin) / self.resolution - 0.5).ceil().max(0.0) as usize;
            a.min(n)..b.min(n)
        };
        (
            range(rect.min.x, rect.max.x, self.origin.x, self.nx),
            range(rect.min.y, rect.max.y, self.origin.y, self.ny),
        )
    }

    /// 4-connected neighbors inside the grid.
    pub fn neighbors4(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        const D: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        D.iter().filter_map(move |&(dx, dy)| self.offset(c, dx, dy))
    }

    /// 8-connected neighbors inside the grid.
    pub fn neighbors8(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        const D: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        D.iter().filter_map(move |&(dx, dy)| self.offset(c, dx, dy))
    }

    fn offset(&self, c: Cell, dx: isize, dy: isize) -> Option<Cell> {
        let x = c.0 as isize + dx;
        let y = c.1 as isize + dy;
        (x >= 0 && y >= 0 && (x as usize) < self.nx && (y as usize) < self.ny).then_some((x as usize, y as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_lookup_round_trip() {
        let spec = GridSpec::new(Point2::new(-10.0, -10.0), 2.0, 10, 10);
        assert_eq!(spec.cell_of(-10.0, -10.0), Some((0, 0)));
        assert_eq!(spec.cell_of(9.99, 9.99), Some((9, 9)));
        assert_eq!(spec.cell_of(10.0, 0.0), None);
        assert_eq!(spec.cell_of(-10.01, 0.0), None);
        let c = spec.cell_center((3, 4));
        assert_eq!(spec.cell_of(c.x, c.y), Some((3, 4)));
        assert_eq!(spec.cell_at(spec.index((7, 2))), (7, 2));
    }

    #[test]
    fn centered_ranges_partition() {
        let spec = GridSpec::new(Point2::new(0.0, 0.0), 1.0, 10, 10);
        let (a, _) = spec.cells_centered_in(&Rect::from_corners(0.0, 0.0, 5.0, 10.0));
        let (b, _) = spec.cells_centered_in(&Rect::from_corners(5.0, 0.0, 10.0, 10.0));
        assert_eq!(a, 0..5);
        assert_eq!(b, 5..10);
    }

    #[test]
    fn neighbor_counts() {
        let spec = GridSpec::new(Point2::new(0.0, 0.0), 1.0, 3, 3);
        assert_eq!(spec.neighbors4((0, 0)).count(), 2);
        assert_eq!(spec.neighbors8((1, 1)).count(), 8);
        assert_eq!(spec.neighbors8((2, 2)).count(), 3);
    }
}
