//! The layered building-information repository.
//!
//! Objects live on exactly one of five layers. Targets carry a construction
//! sequence and a grip indicator; as-built data (scans and installation
//! records) accumulate during a session and are written back out as a
//! checkpoint document in the same format the scenario was loaded from.

mod repo;
mod scenario;

pub use repo::{as_built_id, AsBuiltRecord, BimRepository, RepoError, ScanRecord};
pub use scenario::{
    ObjectEntry, ScenarioDocument, ScenarioError, StackEntry, ValidationIssue, FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::geometry::{Obb, Pose, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Target,
    AsBuilt,
    Materials,
    AsDesigned,
    VirtualCollision,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::Target,
        Layer::AsBuilt,
        Layer::Materials,
        Layer::AsDesigned,
        Layer::VirtualCollision,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Layer::Target => "target",
            Layer::AsBuilt => "as_built",
            Layer::Materials => "materials",
            Layer::AsDesigned => "as_designed",
            Layer::VirtualCollision => "virtual_collision",
        }
    }

    pub fn parse(s: &str) -> Option<Layer> {
        Layer::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

/// How a target's correct pose depends on another object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationshipKind {
    /// Independent unless the neighbour physically intrudes.
    Adjacent,
    /// Rests on the parent by gravity; follows it vertically only.
    Seated,
    /// Rigidly part of the parent; follows every deviation.
    FullyConnected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relationship {
    #[serde(default)]
    pub parent_id: Option<String>,
    pub kind: RelationshipKind,
}

impl Default for Relationship {
    fn default() -> Self {
        Self { parent_id: None, kind: RelationshipKind::Adjacent }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStatus {
    #[default]
    Pending,
    Installed,
    ResolvedManually,
}

impl TargetStatus {
    pub fn is_pending(&self) -> bool {
        matches!(self, TargetStatus::Pending)
    }
}

/// A fiducial attached to an object. `marker_to_object` is the fixed offset
/// from the marker frame to the object's pose indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub marker_to_object: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimObject {
    pub id: String,
    pub name: String,
    pub layer: Layer,
    /// Geometry in the object's local frame.
    pub boxes: Vec<Obb>,
    /// World pose: as-designed for design and target layers, as-built otherwise.
    pub pose: Pose,
    pub relationship: Relationship,
    pub sequence_index: Option<u32>,
    pub workpiece_type: String,
    /// Grasp frame in the local frame; tool +z points away from the part.
    pub grip_indicator: Option<Pose>,
    pub task_related: bool,
    pub color: [u8; 3],
    pub marker: Option<MarkerSpec>,
    /// Simulation ground truth when it differs from `pose`.
    pub true_pose: Option<Pose>,
    pub status: TargetStatus,
    pub annotation: Option<String>,
    /// For as-built copies and twins: the object they were derived from.
    pub source_id: Option<String>,
}

impl BimObject {
    pub fn world_boxes(&self) -> Vec<Obb> {
        crate::geometry::place_boxes(&self.boxes, &self.pose)
    }

    pub fn is_target(&self) -> bool {
        self.layer == Layer::Target
    }

    pub fn ground_truth_pose(&self) -> Pose {
        self.true_pose.unwrap_or(self.pose)
    }
}

/// A stack of identical workpieces. Items are indexed from the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialStack {
    pub id: String,
    pub workpiece_type: String,
    pub quantity: u32,
    /// Pose of the bottom item.
    pub base_pose: Pose,
    pub item_vertical_pitch: f64,
    /// Item geometry in the item's local frame.
    pub boxes: Vec<Obb>,
    pub grip_indicator: Pose,
    pub color: [u8; 3],
    pub marker: Option<MarkerSpec>,
    pub true_base_pose: Option<Pose>,
}

impl MaterialStack {
    /// Pose of item `index` (0 = bottom) stacked above `base`.
    pub fn item_pose_from(base: &Pose, pitch: f64, index: u32) -> Pose {
        base.translated(&nalgebra::Vector3::new(0.0, 0.0, index as f64 * pitch))
    }

    pub fn item_pose(&self, index: u32) -> Pose {
        Self::item_pose_from(&self.base_pose, self.item_vertical_pitch, index)
    }

    /// Pose of the item the robot would pick next.
    pub fn top_item_pose(&self) -> Option<Pose> {
        self.quantity.checked_sub(1).map(|i| self.item_pose(i))
    }

    /// World boxes of every remaining item.
    pub fn item_boxes(&self) -> Vec<Obb> {
        (0..self.quantity)
            .flat_map(|i| crate::geometry::place_boxes(&self.boxes, &self.item_pose(i)))
            .collect()
    }
}
