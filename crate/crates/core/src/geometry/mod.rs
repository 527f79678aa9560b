//! Rigid-body transform algebra and oriented-box collision primitives.
//!
//! Conventions: transforms map local coordinates to world coordinates with
//! column-vector semantics, so `a.compose(&b)` applies `b` first. Quaternions
//! are stored `w, x, y, z` on the wire and renormalized after every
//! composition.

mod obb;
mod sweep;
mod transform;

pub use obb::{obb_intersects, overlap_interval, Obb};
pub use sweep::{sample_count, swept_collides, Collision, SweepError};
pub(crate) use sweep::first_contact;
pub use transform::{Pose, RigidTransform};

pub use nalgebra::{UnitQuaternion, Vector3};

/// Local-to-world transform of every box in `boxes` under `pose`.
pub fn place_boxes(boxes: &[Obb], pose: &Pose) -> Vec<Obb> {
    boxes.iter().map(|b| b.transformed(&pose.to_transform())).collect()
}
