use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    AsBuiltRecord, BimObject, Layer, MarkerSpec, MaterialStack, Relationship, RelationshipKind,
    ScanRecord, TargetStatus,
};
use crate::geometry::{Obb, Pose};
use crate::perception::NoiseModel;
use crate::robot::WorkCell;

pub const FORMAT_VERSION: u32 = 1;

/// One entry of the `objects` section.
///
/// `layer` stays a plain string here so that an unknown layer surfaces as a
/// validation issue naming the object rather than a bare parse error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub id: String,
    pub name: String,
    pub layer: String,
    pub boxes: Vec<Obb>,
    pub pose: Pose,
    #[serde(default)]
    pub relationship: Relationship,
    #[serde(default)]
    pub sequence_index: Option<u32>,
    #[serde(default)]
    pub workpiece_type: String,
    #[serde(default)]
    pub grip_indicator: Option<Pose>,
    #[serde(default = "default_true")]
    pub task_related: bool,
    #[serde(default)]
    pub color: [u8; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<MarkerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_pose: Option<Pose>,
    #[serde(default, skip_serializing_if = "TargetStatus::is_pending")]
    pub status: TargetStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackEntry {
    pub id: String,
    pub workpiece_type: String,
    pub quantity: u32,
    pub base_pose: Pose,
    pub item_vertical_pitch: f64,
    pub boxes: Vec<Obb>,
    pub grip_indicator: Pose,
    #[serde(default)]
    pub color: [u8; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<MarkerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_base_pose: Option<Pose>,
}

/// The on-disk twin: one file describes one work cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub objects: Vec<ObjectEntry>,
    #[serde(default)]
    pub stacks: Vec<StackEntry>,
    #[serde(default)]
    pub noise_model: NoiseModel,
    pub workcell: WorkCell,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub as_built_records: Vec<AsBuiltRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scan_records: Vec<ScanRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    /// Every object involved in the violation.
    pub object_ids: Vec<String>,
    pub rule: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.object_ids.join(", "), self.rule)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed scenario document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("scenario failed validation: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationIssue>),
}

impl ScenarioDocument {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let doc: ScenarioDocument = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(ScenarioError::Version { found: doc.format_version });
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario documents always serialize");
        s.push('\n');
        s
    }

    /// Checks every invariant and converts into domain values.
    pub(crate) fn validate(
        &self,
    ) -> Result<(Vec<BimObject>, Vec<MaterialStack>), ScenarioError> {
        let mut issues = Vec::new();
        let issue = |ids: &[&str], rule: String| ValidationIssue {
            object_ids: ids.iter().map(|s| s.to_string()).collect(),
            rule,
        };

        let mut objects = Vec::with_capacity(self.objects.len());
        let mut seen = HashSet::new();
        for e in &self.objects {
            if !seen.insert(e.id.as_str()) {
                issues.push(issue(&[&e.id], "duplicate object id".into()));
            }
            let Some(layer) = Layer::parse(&e.layer) else {
                issues.push(issue(&[&e.id], format!("unknown layer '{}'", e.layer)));
                continue;
            };
            for b in &e.boxes {
                if !b.is_valid() {
                    issues.push(issue(&[&e.id], "box half extents must be positive".into()));
                }
            }
            if e.relationship.kind != RelationshipKind::Adjacent && e.relationship.parent_id.is_none() {
                issues.push(issue(&[&e.id], "seated or fully connected relationship needs a parent".into()));
            }
            if layer == Layer::Target {
                if e.sequence_index.is_none() {
                    issues.push(issue(&[&e.id], "target without sequence_index".into()));
                }
                if e.grip_indicator.is_none() {
                    issues.push(issue(&[&e.id], "target without grip_indicator".into()));
                }
            } else if e.status != TargetStatus::Pending {
                issues.push(issue(&[&e.id], "only targets carry an installation status".into()));
            }
            objects.push(BimObject {
                id: e.id.clone(),
                name: e.name.clone(),
                layer,
                boxes: e.boxes.clone(),
                pose: e.pose,
                relationship: e.relationship.clone(),
                sequence_index: e.sequence_index,
                workpiece_type: e.workpiece_type.clone(),
                grip_indicator: e.grip_indicator,
                task_related: e.task_related,
                color: e.color,
                marker: e.marker,
                true_pose: e.true_pose,
                status: e.status,
                annotation: e.annotation.clone(),
                source_id: e.source_id.clone(),
            });
        }

        let mut by_sequence: HashMap<u32, Vec<&str>> = HashMap::new();
        for o in objects.iter().filter(|o| o.is_target()) {
            if let Some(s) = o.sequence_index {
                by_sequence.entry(s).or_default().push(&o.id);
            }
        }
        let mut dup: Vec<_> = by_sequence.into_iter().filter(|(_, ids)| ids.len() > 1).collect();
        dup.sort();
        for (s, ids) in dup {
            issues.push(issue(&ids, format!("duplicate sequence_index {s}")));
        }

        let ids: HashSet<&str> = self.objects.iter().map(|e| e.id.as_str()).collect();
        for e in &self.objects {
            if let Some(p) = &e.relationship.parent_id {
                if !ids.contains(p.as_str()) {
                    issues.push(issue(&[&e.id], format!("dangling parent_id '{p}'")));
                }
            }
            if let Some(s) = &e.source_id {
                if !ids.contains(s.as_str()) {
                    issues.push(issue(&[&e.id], format!("dangling source_id '{s}'")));
                }
            }
        }
        let parents: HashMap<&str, &str> = self
            .objects
            .iter()
            .filter_map(|e| e.relationship.parent_id.as_deref().map(|p| (e.id.as_str(), p)))
            .collect();
        for start in parents.keys() {
            let mut cur = *start;
            let mut steps = 0;
            while let Some(p) = parents.get(cur) {
                cur = p;
                steps += 1;
                if cur == *start {
                    issues.push(issue(&[start], "cycle in parent relationships".into()));
                    break;
                }
                if steps > parents.len() {
                    break;
                }
            }
        }

        let mut stacks = Vec::with_capacity(self.stacks.len());
        let mut stack_ids = HashSet::new();
        for s in &self.stacks {
            if !stack_ids.insert(s.id.as_str()) || ids.contains(s.id.as_str()) {
                issues.push(issue(&[&s.id], "duplicate stack id".into()));
            }
            if !(s.item_vertical_pitch >= 0.0) {
                issues.push(issue(&[&s.id], "item_vertical_pitch must be non-negative".into()));
            }
            if s.boxes.iter().any(|b| !b.is_valid()) {
                issues.push(issue(&[&s.id], "box half extents must be positive".into()));
            }
            stacks.push(MaterialStack {
                id: s.id.clone(),
                workpiece_type: s.workpiece_type.clone(),
                quantity: s.quantity,
                base_pose: s.base_pose,
                item_vertical_pitch: s.item_vertical_pitch,
                boxes: s.boxes.clone(),
                grip_indicator: s.grip_indicator,
                color: s.color,
                marker: s.marker,
                true_base_pose: s.true_base_pose,
            });
        }

        for r in &self.as_built_records {
            let ok = objects.iter().any(|o| o.id == r.target_id && o.is_target());
            if !ok {
                issues.push(issue(&[&r.target_id], "as-built record for unknown target".into()));
            }
        }
        for r in &self.scan_records {
            if !ids.contains(r.object_id.as_str()) && !stack_ids.contains(r.object_id.as_str()) {
                issues.push(issue(&[&r.object_id], "scan record for unknown object".into()));
            }
        }
        if let Err(e) = self.workcell.validate() {
            issues.push(issue(&["workcell"], e));
        }
        if let Err(e) = self.noise_model.validate() {
            issues.push(issue(&["noise_model"], e));
        }

        if issues.is_empty() {
            Ok((objects, stacks))
        } else {
            Err(ScenarioError::Validation(issues))
        }
    }
}

impl From<&BimObject> for ObjectEntry {
    fn from(o: &BimObject) -> Self {
        ObjectEntry {
            id: o.id.clone(),
            name: o.name.clone(),
            layer: o.layer.as_str().to_string(),
            boxes: o.boxes.clone(),
            pose: o.pose,
            relationship: o.relationship.clone(),
            sequence_index: o.sequence_index,
            workpiece_type: o.workpiece_type.clone(),
            grip_indicator: o.grip_indicator,
            task_related: o.task_related,
            color: o.color,
            marker: o.marker,
            true_pose: o.true_pose,
            status: o.status,
            annotation: o.annotation.clone(),
            source_id: o.source_id.clone(),
        }
    }
}

impl From<&MaterialStack> for StackEntry {
    fn from(s: &MaterialStack) -> Self {
        StackEntry {
            id: s.id.clone(),
            workpiece_type: s.workpiece_type.clone(),
            quantity: s.quantity,
            base_pose: s.base_pose,
            item_vertical_pitch: s.item_vertical_pitch,
            boxes: s.boxes.clone(),
            grip_indicator: s.grip_indicator,
            color: s.color,
            marker: s.marker,
            true_base_pose: s.true_base_pose,
        }
    }
}
