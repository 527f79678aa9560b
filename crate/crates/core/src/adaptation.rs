//! Design-versus-built deviation handling.
//!
//! Three situations change where a target should go:
//!
//! - its rigid parent was built somewhere else (the target follows the
//!   parent's deviation so its placement relative to the parent is kept);
//! - the seat it rests on was built higher or lower (only the height follows);
//! - a neighbouring as-built object occupies part of its slot (the target is
//!   offset along the row, or a human resolves it).
//!
//! Every result is a suggestion; the workflow decides whether it is applied.

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bim::{BimObject, BimRepository, Layer, RelationshipKind, RepoError};
use crate::geometry::{obb_intersects, overlap_interval, place_boxes, Obb, Pose, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSettings {
    /// Deviations below this translation (m) are ignored.
    pub tolerance_translation: f64,
    /// Deviations below this rotation (rad) are ignored.
    pub tolerance_rotation: f64,
    /// Inflation used when deciding whether a neighbour intrudes.
    pub nearby_clearance: f64,
    /// Gap restored between target and intruder when offsetting.
    pub offset_clearance: f64,
    /// Direction targets are offset along; falls back to the axis of least
    /// penetration when absent.
    #[serde(default)]
    pub row_axis: Option<[f64; 3]>,
    /// Offsets beyond this distance are reported as unsolvable.
    pub max_offset: f64,
}

impl Default for AdaptationSettings {
    fn default() -> Self {
        Self {
            tolerance_translation: 0.001,
            tolerance_rotation: 0.2f64.to_radians(),
            nearby_clearance: 0.0,
            offset_clearance: 0.001,
            row_axis: None,
            max_offset: 0.25,
        }
    }
}

impl AdaptationSettings {
    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [
            self.tolerance_translation,
            self.tolerance_rotation,
            self.nearby_clearance,
            self.offset_clearance,
            self.max_offset,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("adaptation tolerances and clearances must be non-negative".into());
        }
        if self.offset_clearance <= self.nearby_clearance {
            return Err("offset_clearance must exceed nearby_clearance".into());
        }
        if let Some(a) = self.row_axis {
            if Vector3::from(a).norm() < 1e-9 {
                return Err("row_axis must be non-zero".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    ParentDeviation,
    SeatDeviation,
    NearbyObjectDeviation,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub kind: DeviationKind,
    pub target_id: String,
    /// Parent, seat or first intruder.
    pub reference_id: Option<String>,
    pub design_transform: RigidTransform,
    pub built_transform: RigidTransform,
    /// Translation (m) and rotation (rad) of the design-built deviation.
    pub magnitude: (f64, f64),
    pub intruders: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    AcceptSuggestion,
    ManualPoseAdjust,
    ManualReplacement,
    KeepOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSuggestion {
    pub target_id: String,
    pub suggested_pose: Pose,
    pub basis: DeviationKind,
    pub affects_subsequent: bool,
    /// World translation added by a nearby-object offset.
    pub offset: Option<[f64; 3]>,
    pub alternatives: Vec<Alternative>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptError {
    #[error("unknown target '{0}'")]
    UnknownTarget(String),
    #[error("target '{0}' is not pending")]
    NotPending(String),
    #[error("'{reference}' (reference of '{target}') has no as-built pose; rescan required")]
    NotScanned { target: String, reference: String },
    #[error("no offset along the row clears '{target}' from {intruders:?}; human intervention required")]
    Unsolvable { target: String, intruders: Vec<String> },
    #[error(transparent)]
    Repo(#[from] RepoError),
}

/// Relative transform from the designed to the built frame of a parent.
pub fn design_built_deviation(design: &RigidTransform, built: &RigidTransform) -> RigidTransform {
    design.invert().compose(built)
}

/// Installation pose that keeps the target's design placement relative to a
/// parent that was built at `built` instead of `design`.
pub fn adapt_parent_deviation(
    target_design: &RigidTransform,
    design: &RigidTransform,
    built: &RigidTransform,
) -> Pose {
    if design == built {
        return target_design.to_pose();
    }
    // built ∘ design⁻¹ ∘ target  ==  design ∘ deviation ∘ design⁻¹ ∘ target
    built.compose(&design.invert().compose(target_design)).to_pose()
}

/// Height-only adaptation for a target resting on a seat.
pub fn adapt_seat_deviation(target_design: &Pose, seat_design_z: f64, seat_built_z: f64) -> Pose {
    let mut p = *target_design;
    p.position.z = target_design.position.z + (seat_built_z - seat_design_z);
    p
}

/// Collision geometry of one repository object in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: String,
    pub boxes: Vec<Obb>,
}

impl SceneObject {
    pub fn from_object(o: &BimObject) -> Self {
        Self { id: o.id.clone(), boxes: o.world_boxes() }
    }
}

/// Ids of every scene object touching the target geometry inflated by
/// `clearance` at `target_pose`.
pub fn check_nearby(
    target_pose: &Pose,
    target_geometry: &[Obb],
    scene: &[SceneObject],
    clearance: f64,
) -> Vec<String> {
    let inflated: Vec<Obb> = target_geometry.iter().map(|b| b.inflated(clearance)).collect();
    let placed = place_boxes(&inflated, target_pose);
    scene
        .iter()
        .filter(|o| o.boxes.iter().any(|b| placed.iter().any(|t| obb_intersects(t, b))))
        .map(|o| o.id.clone())
        .collect()
}

/// Smallest non-negative distance along `dir` that leaves the inflated
/// target touching at most (never overlapping) every obstacle.
fn clearing_distance(
    target_pose: &Pose,
    target_geometry: &[Obb],
    obstacles: &[&SceneObject],
    dir: &Vector3<f64>,
    clearance: f64,
) -> f64 {
    let inflated: Vec<Obb> = target_geometry.iter().map(|b| b.inflated(clearance)).collect();
    let placed = place_boxes(&inflated, target_pose);
    let intervals: Vec<(f64, f64)> = obstacles
        .iter()
        .flat_map(|o| o.boxes.iter())
        .flat_map(|b| placed.iter().filter_map(move |t| overlap_interval(t, b, dir)))
        .collect();
    let mut d = 0.0f64;
    loop {
        let blocking = intervals.iter().filter(|(lo, hi)| *lo <= d && d < *hi).map(|(_, hi)| *hi).fold(None, |m: Option<f64>, h| Some(m.map_or(h, |m| m.max(h))));
        match blocking {
            Some(h) if h.is_finite() => d = h,
            Some(_) => return f64::INFINITY,
            None => return d,
        }
    }
}

/// Unit direction of least escape distance, pointing from the obstacles'
/// centroid towards the target.
fn least_penetration_axis(
    target_pose: &Pose,
    target_geometry: &[Obb],
    obstacles: &[&SceneObject],
    clearance: f64,
) -> Vector3<f64> {
    let rot = target_pose.orientation;
    let centroid = {
        let pts: Vec<_> = obstacles.iter().flat_map(|o| o.boxes.iter().map(|b| b.center.position)).collect();
        pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len().max(1) as f64
    };
    let away = target_pose.position - centroid;
    let mut best = (f64::INFINITY, Vector3::x());
    for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
        let w = rot * axis;
        let dir = if w.dot(&away) >= 0.0 { w } else { -w };
        let d = clearing_distance(target_pose, target_geometry, obstacles, &dir, clearance);
        if d < best.0 {
            best = (d, dir);
        }
    }
    best.1
}

fn offset_suggestion(
    target_id: &str,
    target_pose: &Pose,
    target_geometry: &[Obb],
    obstacles: &[&SceneObject],
    row_axis: Option<[f64; 3]>,
    clearance: f64,
    max_offset: f64,
) -> Result<AdaptationSuggestion, AdaptError> {
    let dir = match row_axis {
        Some(a) => Unit::new_normalize(Vector3::from(a)).into_inner(),
        None => least_penetration_axis(target_pose, target_geometry, obstacles, clearance),
    };
    let d = clearing_distance(target_pose, target_geometry, obstacles, &dir, clearance);
    if !(d <= max_offset) {
        return Err(AdaptError::Unsolvable {
            target: target_id.to_string(),
            intruders: obstacles.iter().map(|o| o.id.clone()).collect(),
        });
    }
    let offset = dir * d;
    Ok(AdaptationSuggestion {
        target_id: target_id.to_string(),
        suggested_pose: target_pose.translated(&offset),
        basis: DeviationKind::NearbyObjectDeviation,
        affects_subsequent: true,
        offset: Some(offset.into()),
        alternatives: vec![
            Alternative::AcceptSuggestion,
            Alternative::ManualPoseAdjust,
            Alternative::ManualReplacement,
            Alternative::KeepOriginal,
        ],
    })
}

/// Offset that moves the target along `row_axis` just far enough to keep
/// `clearance` from `intruder`.
pub fn suggest_offset(
    target_id: &str,
    target_pose: &Pose,
    target_geometry: &[Obb],
    intruder: &SceneObject,
    row_axis: Option<[f64; 3]>,
    clearance: f64,
    max_offset: f64,
) -> Result<AdaptationSuggestion, AdaptError> {
    offset_suggestion(target_id, target_pose, target_geometry, &[intruder], row_axis, clearance, max_offset)
}

/// Records a human replacement of `target_id` with a differently shaped piece.
pub fn apply_manual_replacement(
    repo: &mut BimRepository,
    target_id: &str,
    replacement_geometry: Vec<Obb>,
    placed_pose: Pose,
) -> Result<(), AdaptError> {
    let t = repo
        .object(target_id)
        .ok_or_else(|| AdaptError::UnknownTarget(target_id.to_string()))?;
    if !t.is_target() {
        return Err(AdaptError::UnknownTarget(target_id.to_string()));
    }
    if !t.status.is_pending() {
        return Err(AdaptError::NotPending(target_id.to_string()));
    }
    repo.resolve_manually(
        target_id,
        replacement_geometry,
        placed_pose,
        "manually replaced by the human co-worker",
    )?;
    Ok(())
}

/// The objects a target must be checked against: everything as-built or
/// virtual except the target's own parent/seat and anything derived from
/// the target itself.
pub fn nearby_scene(repo: &BimRepository, target: &BimObject) -> Vec<SceneObject> {
    let parent = target.relationship.parent_id.as_deref();
    let supports = |o: &BimObject| {
        if target.relationship.kind == RelationshipKind::Adjacent {
            return false;
        }
        Some(o.id.as_str()) == parent || (o.source_id.is_some() && o.source_id.as_deref() == parent)
    };
    repo.objects()
        .filter(|o| matches!(o.layer, Layer::AsBuilt | Layer::VirtualCollision))
        .filter(|o| o.source_id.as_deref() != Some(target.id.as_str()))
        .filter(|o| !supports(o))
        .map(SceneObject::from_object)
        .collect()
}

/// Design and as-built frames of a reference object.
fn reference_frames(
    repo: &BimRepository,
    target: &BimObject,
    reference: &str,
) -> Result<(RigidTransform, RigidTransform), AdaptError> {
    let not_scanned = || AdaptError::NotScanned {
        target: target.id.clone(),
        reference: reference.to_string(),
    };
    let r = repo.object(reference).ok_or_else(not_scanned)?;
    match r.layer {
        Layer::AsBuilt => Ok((r.pose.to_transform(), r.pose.to_transform())),
        _ => {
            let built = repo.as_built_of(reference).ok_or_else(not_scanned)?;
            Ok((r.pose.to_transform(), built.pose.to_transform()))
        }
    }
}

/// Full analysis of one pending target: relationship rule first, then the
/// nearby-object check on the resulting pose.
///
/// `carry` is a world translation already accepted for an earlier target in
/// the same row; it shifts this target's design pose before analysis.
pub fn analyze_target(
    repo: &BimRepository,
    target_id: &str,
    settings: &AdaptationSettings,
    carry: &Vector3<f64>,
) -> Result<(DeviationReport, AdaptationSuggestion), AdaptError> {
    let target = repo
        .object(target_id)
        .filter(|o| o.is_target())
        .ok_or_else(|| AdaptError::UnknownTarget(target_id.to_string()))?;
    if !target.status.is_pending() {
        return Err(AdaptError::NotPending(target_id.to_string()));
    }
    let design_pose = target.pose.translated(carry);
    let mut report = DeviationReport {
        kind: DeviationKind::None,
        target_id: target_id.to_string(),
        reference_id: target.relationship.parent_id.clone(),
        design_transform: RigidTransform::identity(),
        built_transform: RigidTransform::identity(),
        magnitude: (0.0, 0.0),
        intruders: vec![],
    };
    let mut pose = design_pose;
    let mut basis = DeviationKind::None;

    match (target.relationship.kind, target.relationship.parent_id.as_deref()) {
        (RelationshipKind::FullyConnected, Some(parent)) => {
            let (design, built) = reference_frames(repo, target, parent)?;
            let (dt, dr) = design_built_deviation(&design, &built).magnitude();
            report.design_transform = design;
            report.built_transform = built;
            report.magnitude = (dt, dr);
            if dt >= settings.tolerance_translation || dr >= settings.tolerance_rotation {
                basis = DeviationKind::ParentDeviation;
                pose = adapt_parent_deviation(&design_pose.to_transform(), &design, &built);
            }
        }
        (RelationshipKind::Seated, Some(seat)) => {
            let (design, built) = reference_frames(repo, target, seat)?;
            let dz = built.translation.z - design.translation.z;
            report.design_transform = design;
            report.built_transform = built;
            report.magnitude = (dz.abs(), 0.0);
            if dz.abs() >= settings.tolerance_translation {
                basis = DeviationKind::SeatDeviation;
                pose = adapt_seat_deviation(&design_pose, design.translation.z, built.translation.z);
            }
        }
        _ => {}
    }

    let scene = nearby_scene(repo, target);
    let intruders = check_nearby(&pose, &target.boxes, &scene, settings.nearby_clearance);
    let mut suggestion = AdaptationSuggestion {
        target_id: target_id.to_string(),
        suggested_pose: pose,
        basis,
        affects_subsequent: false,
        offset: None,
        alternatives: if basis == DeviationKind::None {
            vec![Alternative::AcceptSuggestion]
        } else {
            vec![Alternative::AcceptSuggestion, Alternative::ManualPoseAdjust, Alternative::KeepOriginal]
        },
    };
    if !intruders.is_empty() {
        let obstacles: Vec<&SceneObject> = scene.iter().collect();
        let mut offset = offset_suggestion(
            target_id,
            &pose,
            &target.boxes,
            &obstacles,
            settings.row_axis,
            settings.offset_clearance,
            settings.max_offset,
        )
        .map_err(|_| AdaptError::Unsolvable { target: target_id.to_string(), intruders: intruders.clone() })?;
        report.kind = DeviationKind::NearbyObjectDeviation;
        report.reference_id = intruders.first().cloned();
        report.intruders = intruders;
        offset.target_id = target_id.to_string();
        suggestion = offset;
    } else {
        report.kind = basis;
    }
    Ok((report, suggestion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn tf(yaw_deg: f64, x: f64, y: f64, z: f64) -> RigidTransform {
        RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_deg.to_radians()),
            Vector3::new(x, y, z),
        )
    }

    /// Matrix oracle: homogeneous inverse times product, written out by hand.
    fn mat(t: &RigidTransform) -> [[f64; 4]; 4] {
        let m = t.to_matrix();
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = m[(i, j)];
            }
        }
        out
    }

    fn mat_inv(m: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = m[j][i];
            }
            out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
        }
        out[3][3] = 1.0;
        out
    }

    fn mat_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    fn assert_mat_eq(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4], tol: f64) {
        for i in 0..4 {
            for j in 0..4 {
                assert!((a[i][j] - b[i][j]).abs() < tol, "{i},{j}: {} vs {}", a[i][j], b[i][j]);
            }
        }
    }

    #[test]
    fn deviation_of_equal_frames_is_identity() {
        let t = tf(17.0, 1.0, 2.0, 3.0);
        let (dt, dr) = design_built_deviation(&t, &t).magnitude();
        assert!(dt < 1e-15 && dr < 1e-7);
    }

    #[test]
    fn deviation_from_identity_design_is_the_built_transform() {
        let d = design_built_deviation(&RigidTransform::identity(), &RigidTransform::from_translation(0.0, 0.0, 0.012));
        assert_eq!(d.translation, Vector3::new(0.0, 0.0, 0.012));
    }

    #[test]
    fn deviation_matches_matrix_oracle() {
        let design = tf(10.0, 0.0, 0.0, 0.0);
        let built = RigidTransform::from_translation(0.05, 0.0, 0.0).compose(&design);
        let expected = mat_mul(&mat_inv(&mat(&design)), &mat(&built));
        assert_mat_eq(&mat(&design_built_deviation(&design, &built)), &expected, 1e-12);
    }

    #[test]
    fn zero_deviation_returns_target_exactly() {
        let t = tf(33.0, 0.4, -0.1, 0.9);
        let d = tf(-5.0, 1.0, 1.0, 0.2);
        assert_eq!(adapt_parent_deviation(&d, &t, &t), d.to_pose());
    }

    #[test]
    fn parent_rotation_preserves_relative_pose() {
        let design = tf(0.0, 1.0, 0.0, 0.0);
        let built = tf(2.0, 1.010, 0.005, 0.0);
        let panel = tf(0.0, 1.3, -0.01, 0.6);
        let adapted = adapt_parent_deviation(&panel, &design, &built).to_transform();
        let lhs = mat_mul(&mat_inv(&mat(&built)), &mat(&adapted));
        let rhs = mat_mul(&mat_inv(&mat(&design)), &mat(&panel));
        assert_mat_eq(&lhs, &rhs, 1e-9);
    }

    #[test]
    fn pure_translation_parent_shifts_target() {
        let h = 0.012;
        let panel = tf(25.0, 0.3, 0.2, 0.1);
        let p = adapt_parent_deviation(&panel, &RigidTransform::identity(), &RigidTransform::from_translation(0.0, 0.0, h));
        assert!((p.position - (panel.translation + Vector3::new(0.0, 0.0, h))).norm() < 1e-15);
        assert!(p.orientation.angle_to(&panel.rotation) < 1e-12);
    }

    #[test]
    fn seat_changes_height_only() {
        let p = Pose::new(Vector3::new(0.1, 0.2, 0.3), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        assert_eq!(adapt_seat_deviation(&p, 0.5, 0.5), p);
        let up = adapt_seat_deviation(&p, 0.0, 0.012);
        assert_eq!(up.position.z, 0.3 + 0.012);
        assert_eq!((up.position.x, up.position.y, up.orientation), (0.1, 0.2, p.orientation));
        let down = adapt_seat_deviation(&p, 0.0, -0.005);
        assert_eq!(down.position.z, 0.3 - 0.005);
    }

    fn block() -> Vec<Obb> {
        vec![Obb::axis_aligned(Vector3::zeros(), Vector3::new(0.045, 0.09, 0.045))]
    }

    /// Stud whose +x face sits at `face_x`.
    fn stud(face_x: f64) -> SceneObject {
        SceneObject {
            id: "stud".into(),
            boxes: vec![Obb::axis_aligned(Vector3::new(face_x - 0.02, 0.0, 0.045), Vector3::new(0.02, 0.3, 0.045))],
        }
    }

    fn slot(gap: f64) -> Pose {
        Pose::from_position(gap + 0.045, 0.0, 0.045)
    }

    #[test]
    fn nearby_check_cases() {
        assert!(check_nearby(&slot(0.010), &block(), &[stud(0.0)], 0.0).is_empty());
        assert_eq!(check_nearby(&slot(0.010), &block(), &[stud(0.018)], 0.0), vec!["stud"]);
        assert!(check_nearby(&slot(0.010), &block(), &[stud(-0.005)], 0.0).is_empty());
    }

    /// 1-D oracle: along x both boxes are intervals, so the offset is
    /// (stud face + clearance) - (slot left edge) when positive.
    fn interval_oracle(face: f64, slot_left: f64, clearance: f64) -> f64 {
        (face + clearance - slot_left).max(0.0)
    }

    #[test]
    fn offset_is_penetration_plus_clearance() {
        let gap = 0.010;
        let face = gap + 0.008;
        let s = suggest_offset("b0", &slot(gap), &block(), &stud(face), Some([1.0, 0.0, 0.0]), 0.001, 0.25).unwrap();
        let expected = interval_oracle(face, gap, 0.001);
        assert!((expected - 0.009).abs() < 1e-12);
        let off = s.offset.unwrap();
        assert!((off[0] - expected).abs() < 1e-12, "{off:?}");
        assert!(s.affects_subsequent);
        assert_eq!(s.basis, DeviationKind::NearbyObjectDeviation);
    }

    #[test]
    fn tangent_intruder_needs_clearance_only() {
        let gap = 0.010;
        let s = suggest_offset("b0", &slot(gap), &block(), &stud(gap), Some([1.0, 0.0, 0.0]), 0.001, 0.25).unwrap();
        assert!((s.offset.unwrap()[0] - 0.001).abs() < 1e-12);
    }

    #[test]
    fn offset_is_minimal() {
        let gap = 0.003;
        let face = gap + 0.006;
        let clearance = 0.002;
        let s = suggest_offset("b0", &slot(gap), &block(), &stud(face), Some([1.0, 0.0, 0.0]), clearance, 0.25).unwrap();
        let d = s.offset.unwrap()[0];
        let delta = 1e-6;
        let shorter = slot(gap).translated(&Vector3::new(d - delta, 0.0, 0.0));
        assert!(!check_nearby(&shorter, &block(), &[stud(face)], clearance).is_empty());
        assert!(check_nearby(&s.suggested_pose, &block(), &[stud(face)], 0.0).is_empty());
    }

    #[test]
    fn spanning_intruder_is_unsolvable() {
        let wall = SceneObject {
            id: "wall".into(),
            boxes: vec![Obb::axis_aligned(Vector3::new(0.5, 0.0, 0.045), Vector3::new(1.0, 0.3, 0.045))],
        };
        let r = suggest_offset("b0", &slot(0.01), &block(), &wall, Some([1.0, 0.0, 0.0]), 0.001, 0.25);
        assert!(matches!(r, Err(AdaptError::Unsolvable { .. })));
    }

    #[test]
    fn least_penetration_axis_without_row_axis() {
        let gap = 0.010;
        let s = suggest_offset("b0", &slot(gap), &block(), &stud(gap + 0.004), None, 0.001, 0.25).unwrap();
        let off = s.offset.unwrap();
        assert!((off[0] - 0.005).abs() < 1e-12 && off[1].abs() < 1e-15, "{off:?}");
    }
}
