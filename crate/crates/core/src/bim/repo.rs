use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BimObject, Layer, MaterialStack, ObjectEntry, ScenarioDocument, ScenarioError, StackEntry,
    TargetStatus, FORMAT_VERSION,
};
use crate::geometry::{Obb, Pose};
use crate::perception::{InferredStack, NoiseModel};
use crate::robot::WorkCell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsBuiltRecord {
    pub target_id: String,
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub object_id: String,
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RepoError {
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error("unknown stack '{0}'")]
    UnknownStack(String),
    #[error("'{0}' is not a target")]
    NotATarget(String),
    #[error("target '{0}' has already been installed or resolved")]
    AlreadyRecorded(String),
    #[error("object '{id}' is on layer {layer:?}; scans apply to as-designed or as-built objects")]
    NotScannable { id: String, layer: Layer },
    #[error("stack '{0}' is empty")]
    EmptyStack(String),
}

/// In-memory twin of the building-information model for one work cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BimRepository {
    pub name: String,
    pub noise_model: NoiseModel,
    pub workcell: WorkCell,
    objects: IndexMap<String, BimObject>,
    stacks: IndexMap<String, MaterialStack>,
    as_built_records: Vec<AsBuiltRecord>,
    scan_records: Vec<ScanRecord>,
}

/// Id under which the as-built counterpart of `id` is stored.
pub fn as_built_id(id: &str) -> String {
    format!("as-built:{id}")
}

impl BimRepository {
    pub fn load_scenario(text: &str) -> Result<Self, ScenarioError> {
        Self::from_document(&ScenarioDocument::parse(text)?)
    }

    pub fn from_document(doc: &ScenarioDocument) -> Result<Self, ScenarioError> {
        let (objects, stacks) = doc.validate()?;
        Ok(Self {
            name: doc.name.clone(),
            noise_model: doc.noise_model.clone(),
            workcell: doc.workcell.clone(),
            objects: objects.into_iter().map(|o| (o.id.clone(), o)).collect(),
            stacks: stacks.into_iter().map(|s| (s.id.clone(), s)).collect(),
            as_built_records: doc.as_built_records.clone(),
            scan_records: doc.scan_records.clone(),
        })
    }

    pub fn to_document(&self) -> ScenarioDocument {
        ScenarioDocument {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            objects: self.objects.values().map(ObjectEntry::from).collect(),
            stacks: self.stacks.values().map(StackEntry::from).collect(),
            noise_model: self.noise_model.clone(),
            workcell: self.workcell.clone(),
            as_built_records: self.as_built_records.clone(),
            scan_records: self.scan_records.clone(),
        }
    }

    /// Checkpoint document: the whole repository including as-built records,
    /// scans and the current material quantities.
    pub fn export_checkpoint(&self) -> String {
        self.to_document().to_json()
    }

    pub fn object(&self, id: &str) -> Option<&BimObject> {
        self.objects.get(id)
    }

    pub fn objects(&self) -> impl Iterator<Item = &BimObject> {
        self.objects.values()
    }

    pub fn objects_on(&self, layer: Layer) -> impl Iterator<Item = &BimObject> {
        self.objects.values().filter(move |o| o.layer == layer)
    }

    pub fn stack(&self, id: &str) -> Option<&MaterialStack> {
        self.stacks.get(id)
    }

    pub fn stacks(&self) -> impl Iterator<Item = &MaterialStack> {
        self.stacks.values()
    }

    pub fn as_built_records(&self) -> &[AsBuiltRecord] {
        &self.as_built_records
    }

    pub fn scan_records(&self) -> &[ScanRecord] {
        &self.scan_records
    }

    /// The as-built counterpart of `id`: the object itself when it is on the
    /// as-built layer, its scanned twin when it is an as-designed object, the
    /// installed copy when it is a target.
    pub fn as_built_of(&self, id: &str) -> Option<&BimObject> {
        let o = self.objects.get(id)?;
        match o.layer {
            Layer::AsBuilt => Some(o),
            _ => self.objects.get(&as_built_id(id)),
        }
    }

    /// Targets still waiting for installation, in construction sequence.
    pub fn pending_targets(&self) -> Vec<&BimObject> {
        let mut v: Vec<_> = self
            .objects
            .values()
            .filter(|o| o.is_target() && o.status.is_pending())
            .collect();
        v.sort_by_key(|o| o.sequence_index);
        v
    }

    pub fn target_count(&self) -> usize {
        self.objects.values().filter(|o| o.is_target()).count()
    }

    pub fn next_target(&self) -> Option<&BimObject> {
        self.pending_targets().into_iter().next()
    }

    /// Installs `target_id` at `installed_pose` and places an as-built copy.
    pub fn record_as_built(
        &mut self,
        target_id: &str,
        installed_pose: Pose,
        timestamp: f64,
    ) -> Result<(), RepoError> {
        let target = self.pending_target(target_id)?.clone();
        let copy = BimObject {
            id: as_built_id(target_id),
            layer: Layer::AsBuilt,
            pose: installed_pose,
            sequence_index: None,
            marker: None,
            true_pose: None,
            status: TargetStatus::Pending,
            annotation: None,
            source_id: Some(target_id.to_string()),
            ..target
        };
        self.objects.insert(copy.id.clone(), copy);
        self.objects[target_id].status = TargetStatus::Installed;
        self.as_built_records.push(AsBuiltRecord {
            target_id: target_id.to_string(),
            pose: installed_pose,
            timestamp,
        });
        Ok(())
    }

    /// Marks a pending target as resolved by hand and records the piece that
    /// was actually put in its place.
    pub fn resolve_manually(
        &mut self,
        target_id: &str,
        replacement_geometry: Vec<Obb>,
        placed_pose: Pose,
        annotation: &str,
    ) -> Result<(), RepoError> {
        let target = self.pending_target(target_id)?.clone();
        let replacement = BimObject {
            id: as_built_id(target_id),
            name: format!("{} (manual replacement)", target.name),
            layer: Layer::AsBuilt,
            boxes: replacement_geometry,
            pose: placed_pose,
            sequence_index: None,
            marker: None,
            true_pose: None,
            status: TargetStatus::Pending,
            annotation: Some(annotation.to_string()),
            source_id: Some(target_id.to_string()),
            ..target
        };
        self.objects.insert(replacement.id.clone(), replacement);
        let t = &mut self.objects[target_id];
        t.status = TargetStatus::ResolvedManually;
        t.annotation = Some(annotation.to_string());
        Ok(())
    }

    fn pending_target(&self, target_id: &str) -> Result<&BimObject, RepoError> {
        let t = self
            .objects
            .get(target_id)
            .ok_or_else(|| RepoError::UnknownObject(target_id.to_string()))?;
        if !t.is_target() {
            return Err(RepoError::NotATarget(target_id.to_string()));
        }
        if !t.status.is_pending() {
            return Err(RepoError::AlreadyRecorded(target_id.to_string()));
        }
        Ok(t)
    }

    /// Registers a sensed pose. As-designed objects gain (or update) an
    /// as-built twin; as-built objects move in place.
    pub fn record_scan(
        &mut self,
        object_id: &str,
        detected_pose: Pose,
        timestamp: f64,
    ) -> Result<(), RepoError> {
        let o = self
            .objects
            .get(object_id)
            .ok_or_else(|| RepoError::UnknownObject(object_id.to_string()))?
            .clone();
        match o.layer {
            Layer::AsBuilt => {
                self.objects[object_id].pose = detected_pose;
            }
            Layer::AsDesigned => {
                let twin_id = as_built_id(object_id);
                if let Some(twin) = self.objects.get_mut(&twin_id) {
                    twin.pose = detected_pose;
                } else {
                    let twin = BimObject {
                        id: twin_id.clone(),
                        layer: Layer::AsBuilt,
                        pose: detected_pose,
                        marker: None,
                        true_pose: None,
                        source_id: Some(object_id.to_string()),
                        ..o
                    };
                    self.objects.insert(twin_id, twin);
                }
            }
            layer => {
                return Err(RepoError::NotScannable { id: object_id.to_string(), layer });
            }
        }
        self.scan_records.push(ScanRecord {
            object_id: object_id.to_string(),
            pose: detected_pose,
            timestamp,
        });
        Ok(())
    }

    /// Replaces a stack's detected location and count.
    pub fn update_stack(&mut self, inferred: &InferredStack, timestamp: f64) -> Result<(), RepoError> {
        let slot = self
            .stacks
            .get_mut(&inferred.id)
            .ok_or_else(|| RepoError::UnknownStack(inferred.id.clone()))?;
        slot.base_pose = inferred.base_pose;
        slot.quantity = inferred.quantity;
        slot.item_vertical_pitch = inferred.pitch;
        slot.workpiece_type = inferred.workpiece_type.clone();
        self.scan_records.push(ScanRecord {
            object_id: inferred.id.clone(),
            pose: inferred.base_pose,
            timestamp,
        });
        Ok(())
    }

    /// Takes the top item: returns its pose before the count drops.
    pub fn consume_material(&mut self, stack_id: &str) -> Result<Pose, RepoError> {
        let s = self
            .stacks
            .get_mut(stack_id)
            .ok_or_else(|| RepoError::UnknownStack(stack_id.to_string()))?;
        let pose = s.top_item_pose().ok_or_else(|| RepoError::EmptyStack(stack_id.to_string()))?;
        s.quantity -= 1;
        Ok(pose)
    }

    /// First non-empty stack holding `workpiece_type`.
    pub fn stack_for(&self, workpiece_type: &str) -> Option<&MaterialStack> {
        self.stacks
            .values()
            .find(|s| s.workpiece_type == workpiece_type && s.quantity > 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;
    use nalgebra::{UnitQuaternion, Vector3};

    fn drywall() -> BimRepository {
        BimRepository::from_document(&scenarios::drywall()).unwrap()
    }

    #[test]
    fn drywall_has_four_sequenced_targets() {
        let repo = drywall();
        assert_eq!(repo.target_count(), 4);
        assert_eq!(repo.next_target().unwrap().sequence_index, Some(0));
        let layers: Vec<_> = ["ground-floor", "frame", "laser-curtain"]
            .iter()
            .map(|id| repo.object(id).unwrap().layer)
            .collect();
        assert_eq!(layers, [Layer::AsBuilt, Layer::AsDesigned, Layer::VirtualCollision]);
    }

    #[test]
    fn empty_object_list_loads() {
        let mut doc = scenarios::drywall();
        doc.objects.clear();
        doc.stacks.clear();
        let repo = BimRepository::from_document(&doc).unwrap();
        assert_eq!(repo.objects().count(), 0);
        assert!(repo.next_target().is_none());
    }

    #[test]
    fn duplicate_sequence_index_names_both_targets() {
        let mut doc = scenarios::drywall();
        let ids: Vec<_> = doc.objects.iter().filter(|o| o.layer == "target").map(|o| o.id.clone()).collect();
        for o in doc.objects.iter_mut().filter(|o| o.id == ids[0] || o.id == ids[1]) {
            o.sequence_index = Some(0);
        }
        match BimRepository::from_document(&doc) {
            Err(ScenarioError::Validation(issues)) => {
                let dup = issues.iter().find(|i| i.rule.contains("duplicate sequence_index")).unwrap();
                assert!(dup.object_ids.contains(&ids[0]) && dup.object_ids.contains(&ids[1]));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn validation_catches_each_rule() {
        let base = scenarios::drywall();
        let target = base.objects.iter().position(|o| o.layer == "target").unwrap();
        let cases: Vec<(Box<dyn Fn(&mut ScenarioDocument)>, &str)> = vec![
            (Box::new(move |d| d.objects[target].layer = "scaffold".into()), "unknown layer"),
            (Box::new(move |d| d.objects[target].grip_indicator = None), "grip_indicator"),
            (Box::new(move |d| d.objects[target].relationship.parent_id = Some("ghost".into())), "dangling parent_id"),
            (Box::new(move |d| d.objects[target].sequence_index = None), "sequence_index"),
        ];
        for (mutate, needle) in cases {
            let mut doc = base.clone();
            mutate(&mut doc);
            let err = BimRepository::from_document(&doc).unwrap_err();
            assert!(err.to_string().contains(needle), "{needle}: {err}");
        }
    }

    #[test]
    fn parent_cycle_is_rejected() {
        let mut doc = scenarios::drywall();
        let frame = doc.objects.iter().position(|o| o.id == "frame").unwrap();
        let panel = doc.objects.iter().find(|o| o.layer == "target").unwrap().id.clone();
        doc.objects[frame].relationship.parent_id = Some(panel);
        let err = BimRepository::from_document(&doc).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        assert!(matches!(BimRepository::load_scenario("{"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn next_target_follows_sequence() {
        let mut repo = drywall();
        let ids: Vec<String> = repo.pending_targets().iter().map(|o| o.id.clone()).collect();
        for id in &ids[..2] {
            let pose = repo.object(id).unwrap().pose;
            repo.record_as_built(id, pose, 0.0).unwrap();
        }
        assert_eq!(repo.next_target().unwrap().id, ids[2]);
        for id in &ids[2..] {
            let pose = repo.object(id).unwrap().pose;
            repo.record_as_built(id, pose, 0.0).unwrap();
        }
        assert!(repo.next_target().is_none());
    }

    #[test]
    fn record_as_built_copies_pose_exactly_and_rejects_double() {
        let mut repo = drywall();
        let id = repo.next_target().unwrap().id.clone();
        let design = repo.object(&id).unwrap().pose;
        let installed = design.translated(&Vector3::new(0.0, 0.0, 0.005));
        repo.record_as_built(&id, installed, 1.0).unwrap();
        let copy = repo.as_built_of(&id).unwrap();
        assert_eq!(copy.layer, Layer::AsBuilt);
        assert_eq!(copy.pose, installed);
        assert_eq!(repo.object(&id).unwrap().status, TargetStatus::Installed);
        assert_eq!(
            repo.record_as_built(&id, installed, 2.0),
            Err(RepoError::AlreadyRecorded(id.clone()))
        );
        assert_eq!(
            repo.record_as_built("nope", installed, 2.0),
            Err(RepoError::UnknownObject("nope".into()))
        );
    }

    #[test]
    fn scan_creates_and_updates_twin() {
        let mut repo = drywall();
        let design = repo.object("frame").unwrap().pose;
        repo.record_scan("frame", design, 0.0).unwrap();
        assert_eq!(repo.as_built_of("frame").unwrap().pose, design);
        let rotated = Pose::new(
            design.position,
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 2f64.to_radians()) * design.orientation,
        );
        repo.record_scan("frame", rotated, 1.0).unwrap();
        assert_eq!(repo.as_built_of("frame").unwrap().pose, rotated);
        assert_eq!(repo.scan_records().len(), 2);
        assert!(matches!(repo.record_scan("ghost", design, 0.0), Err(RepoError::UnknownObject(_))));
    }

    #[test]
    fn consume_material_uses_pitch_model() {
        let mut repo = drywall();
        let mut doc = repo.to_document();
        doc.stacks[0].quantity = 3;
        doc.stacks[0].item_vertical_pitch = 0.02;
        doc.stacks[0].base_pose = Pose::identity();
        repo = BimRepository::from_document(&doc).unwrap();
        let id = doc.stacks[0].id.clone();
        // three items: 0, 20, 40 mm
        let pick = repo.consume_material(&id).unwrap();
        assert!((pick.position.z - 0.04).abs() < 1e-15);
        assert_eq!(repo.stack(&id).unwrap().quantity, 2);
        repo.consume_material(&id).unwrap();
        let last = repo.consume_material(&id).unwrap();
        assert_eq!(last, Pose::identity());
        assert_eq!(repo.consume_material(&id), Err(RepoError::EmptyStack(id.clone())));
    }

    #[test]
    fn fresh_export_equals_canonical_input() {
        let doc = scenarios::drywall();
        let text = doc.to_json();
        let repo = BimRepository::load_scenario(&text).unwrap();
        assert_eq!(repo.export_checkpoint(), ScenarioDocument::parse(&text).unwrap().to_json());
    }
}
