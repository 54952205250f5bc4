//! Rigid-body helpers, planar rectangles, point clouds and closed-form
//! point-set alignment shared by the mapping and pose-graph code.

use nalgebra::{
    Isometry3, Matrix3, Point2, Point3, Rotation3, Translation3, UnitQuaternion, Vector3,
};
use serde::{Deserialize, Serialize};

/// Rigid transform, read as `target ← source`.
pub type Pose = Isometry3<f64>;

/// Orientation of a downward-looking camera with the given heading.
///
/// Camera axes: x right, y down in the image, z along the optical axis.
/// At zero yaw the camera x axis is world +x and the optical axis is world -z.
pub fn nadir_rotation(yaw: f64) -> UnitQuaternion<f64> {
    let flip = Rotation3::from_matrix_unchecked(Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0,
    ));
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    UnitQuaternion::from_rotation_matrix(&(yaw * flip))
}

pub fn nadir_pose(position: Vector3<f64>, yaw: f64) -> Pose {
    Isometry3::from_parts(Translation3::from(position), nadir_rotation(yaw))
}

/// Scales only the translational part of a transform.
pub fn scale_translation(pose: &Pose, s: f64) -> Pose {
    Isometry3::from_parts(Translation3::from(pose.translation.vector * s), pose.rotation)
}

/// Rotation angle of `a⁻¹·b` in radians.
pub fn rotation_distance(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.rotation_to(b).angle()
}

/// Chordal L2 mean of a set of rotations, projected back onto SO(3).
pub fn mean_rotation(rotations: &[UnitQuaternion<f64>]) -> Option<UnitQuaternion<f64>> {
    if rotations.is_empty() {
        return None;
    }
    let mut sum = Matrix3::zeros();
    for q in rotations {
        sum += q.to_rotation_matrix().into_inner();
    }
    Some(UnitQuaternion::from_rotation_matrix(&project_to_so3(&sum)))
}

fn project_to_so3(m: &Matrix3<f64>) -> Rotation3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Rotation3::from_matrix_unchecked(u * d * v_t)
}

/// Averages several estimates of the same transform.
pub fn mean_pose(poses: &[Pose]) -> Option<Pose> {
    let rotations: Vec<_> = poses.iter().map(|p| p.rotation).collect();
    let rotation = mean_rotation(&rotations)?;
    let t = poses
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.translation.vector)
        / poses.len() as f64;
    Some(Isometry3::from_parts(Translation3::from(t), rotation))
}

/// Axis-aligned rectangle in world meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point2<f64>,
    pub max: Point2<f64>,
}

impl Rect {
    pub fn new(min: Point2<f64>, max: Point2<f64>) -> Self {
        Self { min, max }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(Point2::new(x0.min(x1), y0.min(y1)), Point2::new(x0.max(x1), y0.max(y1)))
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn corners(&self) -> [Point2<f64>; 4] {
        [
            self.min,
            Point2::new(self.max.x, self.min.y),
            self.max,
            Point2::new(self.min.x, self.max.y),
        ]
    }
}

/// Points with one scalar "color" channel each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub colors: Vec<f64>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            points: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn from_points(points: Vec<Point3<f64>>) -> Self {
        let colors = vec![0.0; points.len()];
        Self { points, colors }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Point3<f64>, color: f64) {
        self.points.push(p);
        self.colors.push(color);
    }

    pub fn extend_from(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        self.colors.extend_from_slice(&other.colors);
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose * p).collect(),
            colors: self.colors.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| Point3::from(p.coords * s)).collect(),
            colors: self.colors.clone(),
        }
    }

    /// ASCII PLY with one scalar `intensity` property per vertex.
    pub fn write_ply<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", self.len())?;
        writeln!(w, "property double x\nproperty double y\nproperty double z\nproperty double intensity\nend_header")?;
        for (p, c) in self.points.iter().zip(&self.colors) {
            writeln!(w, "{} {} {} {}", p.x, p.y, p.z, c)?;
        }
        Ok(())
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.len() as f64))
    }
}

/// Weighted least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn rigid_fit(src: &[Point3<f64>], dst: &[Point3<f64>], weights: Option<&[f64]>) -> Option<Pose> {
    let (scale, pose) = fit_impl(src, dst, weights, false)?;
    debug_assert!((scale - 1.0).abs() < 1e-12);
    Some(pose)
}

/// Least-squares similarity transform `dst ≈ s·R·src + t`; returns `(s, pose)` where
/// the pose holds `R` and `t`.
pub fn similarity_fit(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Option<(f64, Pose)> {
    fit_impl(src, dst, None, true)
}

fn fit_impl(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Option<(f64, Pose)> {
    if src.len() != dst.len() || src.is_empty() {
        return None;
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(w).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for i in 0..src.len() {
        mu_s += src[i].coords * w(i);
        mu_d += dst[i].coords * w(i);
    }
    mu_s /= total;
    mu_d /= total;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..src.len() {
        let a = src[i].coords - mu_s;
        let b = dst[i].coords - mu_d;
        cov += w(i) * b * a.transpose();
        var_s += w(i) * a.norm_squared();
    }
    cov /= total;
    var_s /= total;

    let svd = cov.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = if with_scale {
        if var_s <= 0.0 {
            return None;
        }
        (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s
    } else {
        1.0
    };
    let t = mu_d - scale * r * mu_s;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Some((scale, Isometry3::from_parts(Translation3::from(t), rotation)))
}
