use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Pose, RigidTransform};

/// Oriented bounding box. `center` places the box in its parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: Pose,
    pub half_extents: Vector3<f64>,
}

impl Obb {
    pub fn new(center: Pose, half_extents: Vector3<f64>) -> Self {
        Self { center, half_extents }
    }

    pub fn axis_aligned(center: Vector3<f64>, half_extents: Vector3<f64>) -> Self {
        Self::new(Pose::new(center, Default::default()), half_extents)
    }

    pub fn is_valid(&self) -> bool {
        self.half_extents.iter().all(|h| h.is_finite() && *h > 0.0) && self.center.is_finite()
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.product()
    }

    /// The same box expressed in the frame that `t` maps into.
    pub fn transformed(&self, t: &RigidTransform) -> Obb {
        Obb {
            center: t.compose(&self.center.to_transform()).to_pose(),
            half_extents: self.half_extents,
        }
    }

    /// Box grown by `margin` on every face.
    pub fn inflated(&self, margin: f64) -> Obb {
        Obb {
            center: self.center,
            half_extents: self.half_extents.add_scalar(margin),
        }
    }

    pub fn axes(&self) -> [Vector3<f64>; 3] {
        let r = self.center.orientation.to_rotation_matrix();
        [
            r.matrix().column(0).into_owned(),
            r.matrix().column(1).into_owned(),
            r.matrix().column(2).into_owned(),
        ]
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let axes = self.axes();
        let c = self.center.position;
        let h = self.half_extents;
        let mut out = [Vector3::zeros(); 8];
        for (i, o) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *o = c + axes[0] * (sx * h.x) + axes[1] * (sy * h.y) + axes[2] * (sz * h.z);
        }
        out
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_extents.norm()
    }

    /// World-axis-aligned bounds as (min, max).
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.center.orientation.to_rotation_matrix();
        let ext = r.matrix().abs() * self.half_extents;
        (self.center.position - ext, self.center.position + ext)
    }

    /// Closed-set point containment with absolute tolerance `eps`.
    pub fn contains(&self, p: &Vector3<f64>, eps: f64) -> bool {
        let local = self.center.orientation.inverse() * (p - self.center.position);
        (0..3).all(|i| local[i].abs() <= self.half_extents[i] + eps)
    }

    /// Radius of the projection of this box onto unit-ish `axis`.
    fn project_radius(&self, axes: &[Vector3<f64>; 3], axis: &Vector3<f64>) -> f64 {
        (0..3).map(|i| self.half_extents[i] * axes[i].dot(axis).abs()).sum()
    }
}

/// Separating-axis test over the 15 candidate axes. Touching boxes count as
/// intersecting.
pub fn obb_intersects(a: &Obb, b: &Obb) -> bool {
    let d = b.center.position - a.center.position;
    let ra_bound = a.bounding_radius();
    let rb_bound = b.bounding_radius();
    if d.norm() > ra_bound + rb_bound {
        return false;
    }
    let aa = a.axes();
    let ba = b.axes();
    let separated = |axis: &Vector3<f64>| -> bool {
        let len2 = axis.norm_squared();
        if len2 < 1e-18 {
            return false;
        }
        let ra = a.project_radius(&aa, axis);
        let rb = b.project_radius(&ba, axis);
        d.dot(axis).abs() > ra + rb
    };
    for axis in aa.iter().chain(ba.iter()) {
        if separated(axis) {
            return false;
        }
    }
    for ea in &aa {
        for eb in &ba {
            let axis = ea.cross(eb);
            // near-parallel edge pairs are covered by the face axes
            if axis.norm_squared() < 1e-12 {
                continue;
            }
            if separated(&axis.normalize()) {
                return false;
            }
        }
    }
    true
}

/// Range of displacements `d` along `dir` for which box `a` moved by `d * dir`
/// overlaps box `b`. Exact: the separating-axis conditions are linear in `d`.
pub fn overlap_interval(a: &Obb, b: &Obb, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let aa = a.axes();
    let ba = b.axes();
    let mut axes: Vec<Vector3<f64>> = aa.iter().chain(ba.iter()).copied().collect();
    for ea in &aa {
        for eb in &ba {
            let c = ea.cross(eb);
            if c.norm_squared() > 1e-12 {
                axes.push(c.normalize());
            }
        }
    }
    let sep = b.center.position - a.center.position;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for l in &axes {
        let r: f64 = (0..3).map(|i| a.half_extents[i] * aa[i].dot(l).abs()).sum::<f64>()
            + (0..3).map(|i| b.half_extents[i] * ba[i].dot(l).abs()).sum::<f64>();
        let s = sep.dot(l);
        let v = dir.dot(l);
        if v.abs() < 1e-12 {
            if s.abs() > r {
                return None;
            }
            continue;
        }
        let (x, y) = ((s - r) / v, (s + r) / v);
        lo = lo.max(x.min(y));
        hi = hi.min(x.max(y));
        if lo > hi {
            return None;
        }
    }
    Some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn unit_cube(x: f64) -> Obb {
        Obb::axis_aligned(Vector3::new(x, 0.0, 0.0), Vector3::new(0.5, 0.5, 0.5))
    }

    #[test]
    fn overlapping_and_disjoint_cubes() {
        assert!(obb_intersects(&unit_cube(0.0), &unit_cube(0.5)));
        assert!(!obb_intersects(&unit_cube(0.0), &unit_cube(2.0)));
    }

    #[test]
    fn touching_counts_as_intersecting() {
        assert!(obb_intersects(&unit_cube(0.0), &unit_cube(1.0)));
        assert!(!obb_intersects(&unit_cube(0.0), &unit_cube(1.0 + 1e-9)));
    }

    #[test]
    fn rotated_cube_corner_reaches_neighbour() {
        // corner of a 45-degree cube at 1.2 reaches x = 1.2 - 0.7071 = 0.4929 < 0.5
        let rotated = Obb::new(
            Pose::new(
                Vector3::new(1.2, 0.0, 0.0),
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_4),
            ),
            Vector3::new(0.5, 0.5, 0.5),
        );
        assert!(obb_intersects(&unit_cube(0.0), &rotated));
        let far = Obb { center: rotated.center.translated(&Vector3::new(0.01, 0.0, 0.0)), ..rotated };
        assert!(!obb_intersects(&unit_cube(0.0), &far));
    }

    #[test]
    fn edge_edge_separation_needs_cross_axes() {
        // two boxes rotated so that only an edge-cross axis separates them
        let a = Obb::new(
            Pose::new(Vector3::zeros(), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_4)),
            Vector3::new(0.5, 0.5, 0.5),
        );
        let b = Obb::new(
            Pose::new(
                Vector3::new(0.0, 0.0, 1.22),
                UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_4),
            ),
            Vector3::new(0.5, 0.5, 0.5),
        );
        // top edge of a runs along the diagonal, bottom edge of b along x
        let sampled = b
            .corners()
            .iter()
            .any(|c| a.contains(c, 0.0));
        assert!(!sampled);
        assert_eq!(obb_intersects(&a, &b), obb_intersects(&b, &a));
    }

    #[test]
    fn volume_and_validity() {
        let b = Obb::axis_aligned(Vector3::zeros(), Vector3::new(0.1, 0.2, 0.3));
        assert!((b.volume() - 0.048).abs() < 1e-15);
        assert!(b.is_valid());
        let bad = Obb::axis_aligned(Vector3::zeros(), Vector3::new(0.1, 0.0, 0.3));
        assert!(!bad.is_valid());
    }
}
