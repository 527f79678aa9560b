//! Simulated marker-based localization.
//!
//! Noise is injected on the marker's pose and then carried through the fixed
//! marker-to-object offset, so orientation error grows into position error
//! with distance from the marker.

use std::collections::BTreeMap;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bim::{BimRepository, Layer, MaterialStack};
use crate::geometry::{Obb, Pose, RigidTransform};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Per-axis standard deviation of marker position error (m).
    pub sigma_translation: f64,
    /// Standard deviation of the marker rotation error angle (rad).
    pub sigma_rotation: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn zero(seed: u64) -> Self {
        Self { sigma_translation: 0.0, sigma_rotation: 0.0, seed }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_translation == 0.0 && self.sigma_rotation == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.sigma_translation) && ok(self.sigma_rotation) {
            Ok(())
        } else {
            Err("noise sigmas must be finite and non-negative".into())
        }
    }
}

/// Metadata encoded on a stack marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackMetadata {
    pub workpiece_type: String,
    pub quantity: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerBinding {
    pub object_id: String,
    pub marker_to_object: RigidTransform,
    pub metadata: Option<StackMetadata>,
}

/// A physical body the simulator knows the true placement of.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueBody {
    pub pose: Pose,
    pub boxes: Vec<Obb>,
    pub workpiece_type: String,
}

impl TrueBody {
    pub fn world_boxes(&self) -> Vec<Obb> {
        crate::geometry::place_boxes(&self.boxes, &self.pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueStack {
    pub quantity: u32,
    pub base_pose: Pose,
    pub pitch: f64,
    pub boxes: Vec<Obb>,
    pub workpiece_type: String,
}

impl TrueStack {
    pub fn item_pose(&self, index: u32) -> Pose {
        MaterialStack::item_pose_from(&self.base_pose, self.pitch, index)
    }

    pub fn item_boxes(&self) -> Vec<Obb> {
        (0..self.quantity)
            .flat_map(|i| crate::geometry::place_boxes(&self.boxes, &self.item_pose(i)))
            .collect()
    }
}

/// The simulator's hidden state: where things really are.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthWorld {
    pub bodies: BTreeMap<String, TrueBody>,
    pub stacks: BTreeMap<String, TrueStack>,
}

impl GroundTruthWorld {
    /// Physical contents of a freshly loaded scenario: as-built, as-designed
    /// (already erected) and material objects at their true poses, plus every
    /// stack. Targets and virtual volumes have no physical body.
    pub fn from_repository(repo: &BimRepository) -> Self {
        let bodies = repo
            .objects()
            .filter(|o| matches!(o.layer, Layer::AsBuilt | Layer::AsDesigned | Layer::Materials))
            .filter(|o| o.source_id.is_none())
            .map(|o| {
                (
                    o.id.clone(),
                    TrueBody {
                        pose: o.ground_truth_pose(),
                        boxes: o.boxes.clone(),
                        workpiece_type: o.workpiece_type.clone(),
                    },
                )
            })
            .collect();
        let stacks = repo
            .stacks()
            .map(|s| {
                (
                    s.id.clone(),
                    TrueStack {
                        quantity: s.quantity,
                        base_pose: s.true_base_pose.unwrap_or(s.base_pose),
                        pitch: s.item_vertical_pitch,
                        boxes: s.boxes.clone(),
                        workpiece_type: s.workpiece_type.clone(),
                    },
                )
            })
            .collect();
        Self { bodies, stacks }
    }

    pub fn true_pose(&self, id: &str) -> Option<Pose> {
        self.bodies
            .get(id)
            .map(|b| b.pose)
            .or_else(|| self.stacks.get(id).map(|s| s.base_pose))
    }
}

/// Marker bindings declared in the repository, objects first then stacks.
pub fn bindings_from(repo: &BimRepository) -> Vec<MarkerBinding> {
    let objects = repo.objects().filter(|o| o.source_id.is_none()).filter_map(|o| {
        o.marker.map(|m| MarkerBinding {
            object_id: o.id.clone(),
            marker_to_object: m.marker_to_object,
            metadata: None,
        })
    });
    let stacks = repo.stacks().filter_map(|s| {
        s.marker.map(|m| MarkerBinding {
            object_id: s.id.clone(),
            marker_to_object: m.marker_to_object,
            metadata: Some(StackMetadata {
                workpiece_type: s.workpiece_type.clone(),
                quantity: s.quantity as i64,
            }),
        })
    });
    objects.chain(stacks).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub object_id: String,
    pub pose: Pose,
    pub metadata: Option<StackMetadata>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("marker bound to '{0}', which is not in the world")]
    MissingObject(String),
    #[error("stack '{id}' reports negative quantity {quantity}")]
    NegativeQuantity { id: String, quantity: i64 },
}

/// Rotation with a uniformly random axis and a Gaussian angle.
fn rotation_noise(rng: &mut ChaCha8Rng, sigma: f64) -> UnitQuaternion<f64> {
    let axis = loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm_squared() > 1e-12 {
            break Unit::new_normalize(v);
        }
    };
    let angle: f64 = StandardNormal.sample(rng);
    UnitQuaternion::from_axis_angle(&axis, angle * sigma)
}

/// Detects every bound marker once. Deterministic for a given seed; each
/// binding consumes a fixed number of draws so worlds that differ only in
/// geometry see identical noise.
pub fn scan_environment(
    world: &GroundTruthWorld,
    bindings: &[MarkerBinding],
    noise: &NoiseModel,
) -> Result<Vec<Detection>, PerceptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = Vec::with_capacity(bindings.len());
    for b in bindings {
        let truth = world
            .true_pose(&b.object_id)
            .ok_or_else(|| PerceptionError::MissingObject(b.object_id.clone()))?;
        let dt = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ) * noise.sigma_translation;
        let dr = rotation_noise(&mut rng, noise.sigma_rotation);
        let pose = if noise.is_zero() {
            truth
        } else {
            let marker = truth.to_transform().compose(&b.marker_to_object.invert());
            let detected_marker = RigidTransform::new(marker.rotation * dr, marker.translation + dt);
            detected_marker.compose(&b.marker_to_object).to_pose()
        };
        out.push(Detection { object_id: b.object_id.clone(), pose, metadata: b.metadata.clone() });
    }
    Ok(out)
}

/// A stack as reconstructed from one marker detection.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredStack {
    pub id: String,
    pub workpiece_type: String,
    pub quantity: u32,
    pub base_pose: Pose,
    pub pitch: f64,
}

impl InferredStack {
    pub fn top_item_pose(&self) -> Option<Pose> {
        self.quantity
            .checked_sub(1)
            .map(|i| MaterialStack::item_pose_from(&self.base_pose, self.pitch, i))
    }
}

pub fn infer_stack(
    id: &str,
    metadata: &StackMetadata,
    detected_base: Pose,
    pitch: f64,
) -> Result<InferredStack, PerceptionError> {
    let quantity = u32::try_from(metadata.quantity).map_err(|_| PerceptionError::NegativeQuantity {
        id: id.to_string(),
        quantity: metadata.quantity,
    })?;
    Ok(InferredStack {
        id: id.to_string(),
        workpiece_type: metadata.workpiece_type.clone(),
        quantity,
        base_pose: detected_base,
        pitch,
    })
}
