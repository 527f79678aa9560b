use nalgebra::{Matrix4, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A rigid transform in SE(3): rotate, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// A placement of a frame in the world: where it is and how it is turned.
///
/// Numerically identical to [`RigidTransform`]; the two types exist so that
/// signatures say whether a value is a location or an operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = q.into_inner();
    let n = q.norm();
    let q = if (n - 1.0).abs() > 0.0 { q / n } else { q };
    // keep w >= 0 so equal rotations have equal storage
    let q = if q.w < 0.0 { -q } else { q };
    Unit::new_unchecked(q)
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Rotation about the world z axis by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle))
    }

    /// Maps a local point `p` to `self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rotation = renormalize(self.rotation.inverse());
        RigidTransform {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_pose(&self) -> Pose {
        Pose {
            position: self.translation,
            orientation: self.rotation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.rotation
            .to_homogeneous()
            .append_translation(&self.translation)
    }

    /// Translation distance and rotation angle (radians) of this transform
    /// taken as a displacement from the identity.
    pub fn magnitude(&self) -> (f64, f64) {
        (self.translation.norm(), self.rotation.angle())
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        RigidTransform::identity().to_pose()
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: renormalize(orientation),
        }
    }

    pub fn from_position(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.orientation,
            translation: self.position,
        }
    }

    /// This pose moved by `delta` in world coordinates, orientation untouched.
    pub fn translated(&self, delta: &Vector3<f64>) -> Pose {
        Pose {
            position: self.position + delta,
            orientation: self.orientation,
        }
    }

    /// Linear position, spherical-linear orientation.
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        let position = self.position.lerp(&other.position, t);
        let orientation = self
            .orientation
            .try_slerp(&other.orientation, t, 1e-12)
            .unwrap_or(if t < 0.5 { self.orientation } else { other.orientation });
        Pose::new(position, orientation)
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        (
            (self.position - other.position).norm(),
            self.orientation.angle_to(&other.orientation),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_transform().is_finite()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<Pose> for RigidTransform {
    fn from(p: Pose) -> Self {
        p.to_transform()
    }
}

impl From<RigidTransform> for Pose {
    fn from(t: RigidTransform) -> Self {
        t.to_pose()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    /// w, x, y, z
    orientation: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let q = self.orientation.quaternion();
        PoseRepr {
            position: [self.position.x, self.position.y, self.position.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        let [w, x, y, z] = repr.orientation;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-6 || repr.position.iter().any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom("pose must be finite with a non-zero quaternion"));
        }
        // exact unit quaternions are kept bit-for-bit so documents round-trip
        let q = if (n - 1.0).abs() < 1e-12 { q } else { q / n };
        Ok(Pose {
            position: Vector3::from(repr.position),
            orientation: Unit::new_unchecked(q),
        })
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_pose().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Pose::deserialize(deserializer).map(|p| p.to_transform())
    }
}
