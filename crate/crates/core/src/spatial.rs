//! Static k-d tree for nearest-neighbor queries over small fixed dimensions.
//!
//! Built once, queried many times. Splits on the axis of largest spread with a
//! median partition, so heavily duplicated coordinates (flat terrain) are fine.

const LEAF_SIZE: usize = 8;

pub struct KdTree<const K: usize> {
    points: Vec<[f64; K]>,
    order: Vec<usize>,
    /// Split axis for the node whose pivot sits at `order[mid]`.
    axes: Vec<u8>,
}

impl<const K: usize> KdTree<K> {
    pub fn build(points: Vec<[f64; K]>) -> Self {
        let n = points.len();
        let mut tree = Self {
            order: (0..n).collect(),
            axes: vec![0; n],
            points,
        };
        tree.build_range(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; K] {
        &self.points[index]
    }

    fn build_range(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut best_axis = 0;
        let mut best_spread = f64::NEG_INFINITY;
        for axis in 0..K {
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[lo..hi] {
                let v = self.points[i][axis];
                mn = mn.min(v);
                mx = mx.max(v);
            }
            if mx - mn > best_spread {
                best_spread = mx - mn;
                best_axis = axis;
            }
        }
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][best_axis].total_cmp(&points[b][best_axis])
        });
        self.axes[mid] = best_axis as u8;
        self.build_range(lo, mid);
        self.build_range(mid + 1, hi);
    }

    /// Index of the nearest stored point and its squared distance.
    pub fn nearest(&self, query: &[f64; K]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(query, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: &[f64; K], lo: usize, hi: usize, best: &mut (usize, f64)) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d = dist2(&self.points[i], q);
                if d < best.1 || (d == best.1 && i < best.0) {
                    *best = (i, d);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let pivot = self.order[mid];
        let axis = self.axes[mid] as usize;
        let d = dist2(&self.points[pivot], q);
        if d < best.1 || (d == best.1 && pivot < best.0) {
            *best = (pivot, d);
        }
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn dist2<const K: usize>(a: &[f64; K], b: &[f64; K]) -> f64 {
    let mut s = 0.0;
    for k in 0..K {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}
