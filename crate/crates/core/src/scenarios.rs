//! Bundled scenarios: the drywall case study and the block experiment.
//!
//! Both are built in code so the experiment harness can vary parameters;
//! the canonical documents are also shipped under `scenarios/`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{UnitQuaternion, Vector3};

use crate::adaptation::AdaptationSettings;
use crate::bim::{MarkerSpec, ObjectEntry, Relationship, RelationshipKind, ScenarioDocument, StackEntry, TargetStatus, FORMAT_VERSION};
use crate::geometry::{Obb, Pose, RigidTransform};
use crate::perception::NoiseModel;
use crate::robot::WorkCell;

const FOOT: f64 = 0.3048;

fn cuboid(center: [f64; 3], half: [f64; 3]) -> Obb {
    Obb::axis_aligned(Vector3::from(center), Vector3::from(half))
}

fn marker(x: f64, y: f64, z: f64) -> Option<MarkerSpec> {
    // the object pose expressed in the marker frame
    Some(MarkerSpec { marker_to_object: RigidTransform::from_translation(x, y, z) })
}

fn entry(id: &str, name: &str, layer: &str, boxes: Vec<Obb>, pose: Pose, color: [u8; 3]) -> ObjectEntry {
    ObjectEntry {
        id: id.into(),
        name: name.into(),
        layer: layer.into(),
        boxes,
        pose,
        relationship: Relationship::default(),
        sequence_index: None,
        workpiece_type: String::new(),
        grip_indicator: None,
        task_related: true,
        color,
        marker: None,
        true_pose: None,
        status: TargetStatus::Pending,
        annotation: None,
        source_id: None,
    }
}

fn rot_x(angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), angle)
}

/// Length of the wall frame: 8 ft.
pub const FRAME_LENGTH: f64 = 8.0 * FOOT;
/// Height of the wall frame and of a large panel: 4 ft.
pub const FRAME_HEIGHT: f64 = 4.0 * FOOT;
/// Width of every panel: 2 ft.
pub const PANEL_WIDTH: f64 = 2.0 * FOOT;
pub const PANEL_THICKNESS: f64 = 0.012;
/// Gap between panel back and frame face.
pub const PANEL_STANDOFF: f64 = 0.001;
/// Joint between neighbouring panels.
pub const PANEL_JOINT: f64 = 0.003;
/// Clearance between panel bottom and floor.
pub const PANEL_FLOOR_GAP: f64 = 0.005;
pub const HANDLE: f64 = 0.03;

fn panel_boxes(height: f64) -> Vec<Obb> {
    vec![
        cuboid([0.0, 0.0, 0.0], [PANEL_WIDTH / 2.0, PANEL_THICKNESS / 2.0, height / 2.0]),
        cuboid([0.0, PANEL_THICKNESS / 2.0 + HANDLE / 2.0, 0.0], [HANDLE / 2.0; 3]),
    ]
}

/// Grasp on the handle face, tool +z along the panel's +y.
fn panel_grip() -> Pose {
    Pose::new(Vector3::new(0.0, PANEL_THICKNESS / 2.0 + HANDLE, 0.0), rot_x(-FRAC_PI_2))
}

/// The drywall case study: a wall frame to be sheathed with three
/// 2 ft x 4 ft panels and one 2 ft x 2 ft panel, taken from two stacks.
///
/// The frame stands 2 degrees (yaw) and 10 mm off its design pose; the
/// robot only learns this by scanning the frame's marker.
pub fn drywall() -> ScenarioDocument {
    let frame_pose = Pose::from_position(0.3, 0.4, 0.0);
    let frame_true = Pose::new(
        frame_pose.position + Vector3::new(0.010, 0.0, 0.0),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 2f64.to_radians()),
    );
    let stud = |x: f64| cuboid([x, -0.045, FRAME_HEIGHT / 2.0], [0.02, 0.045, FRAME_HEIGHT / 2.0]);
    let mut frame_boxes: Vec<Obb> = (0..=4)
        .map(|k| (k as f64 * PANEL_WIDTH).clamp(0.02, FRAME_LENGTH - 0.02))
        .map(stud)
        .collect();
    frame_boxes.push(cuboid([FRAME_LENGTH / 2.0, -0.045, 0.02], [FRAME_LENGTH / 2.0, 0.045, 0.02]));
    frame_boxes.push(cuboid([FRAME_LENGTH / 2.0, -0.045, FRAME_HEIGHT - 0.02], [FRAME_LENGTH / 2.0, 0.045, 0.02]));

    let mut frame = entry("frame", "Wall frame (design)", "as_designed", frame_boxes, frame_pose, [196, 164, 112]);
    frame.workpiece_type = "frame".into();
    // marker at the far end of the frame: a long lever to the pose indicator
    frame.marker = marker(-FRAME_LENGTH, 0.0, -0.6);
    frame.true_pose = Some(frame_true);

    let mut ground = entry(
        "ground-floor",
        "Ground floor",
        "as_built",
        vec![cuboid([0.0, 0.0, -0.05], [3.0, 3.0, 0.05])],
        Pose::from_position(1.0, -0.5, 0.0),
        [128, 128, 128],
    );
    ground.workpiece_type = "ground".into();
    ground.task_related = false;
    let mut surroundings = entry(
        "workspace-surroundings",
        "Workspace surroundings",
        "as_built",
        vec![cuboid([0.0, 0.0, 0.5], [0.3, 0.3, 0.5])],
        Pose::from_position(-1.6, -1.8, 0.0),
        [90, 110, 140],
    );
    surroundings.workpiece_type = "furniture".into();
    surroundings.task_related = false;
    let mut walls = entry(
        "lab-walls",
        "Lab walls",
        "as_built",
        vec![cuboid([0.0, 0.0, 1.5], [3.0, 0.1, 1.5])],
        Pose::from_position(1.0, 2.6, 0.0),
        [220, 220, 210],
    );
    walls.workpiece_type = "wall".into();
    walls.task_related = false;
    let mut curtain = entry(
        "laser-curtain",
        "Safety laser curtain",
        "virtual_collision",
        vec![cuboid([0.0, 0.0, 1.2], [0.01, 2.5, 1.2])],
        Pose::from_position(3.8, -0.5, 0.0),
        [255, 60, 60],
    );
    curtain.task_related = false;

    let mut objects = vec![ground, surroundings, walls, frame, curtain];
    for i in 0..4u32 {
        let small = i == 3;
        let height = if small { 2.0 * FOOT } else { FRAME_HEIGHT };
        let local = Vector3::new(
            i as f64 * (PANEL_WIDTH + PANEL_JOINT) + PANEL_WIDTH / 2.0,
            PANEL_STANDOFF + PANEL_THICKNESS / 2.0,
            PANEL_FLOOR_GAP + height / 2.0,
        );
        let pose = frame_pose.to_transform().compose(&RigidTransform::from_translation(local.x, local.y, local.z)).to_pose();
        let kind = if small { "panel-small" } else { "panel-large" };
        let mut p = entry(
            &format!("panel-{i}"),
            &format!("Drywall panel {} ({kind})", i + 1),
            "target",
            panel_boxes(height),
            pose,
            [240, 240, 235],
        );
        p.relationship = Relationship { parent_id: Some("frame".into()), kind: RelationshipKind::FullyConnected };
        p.sequence_index = Some(i);
        p.workpiece_type = kind.into();
        p.grip_indicator = Some(panel_grip());
        objects.push(p);
    }

    let stack = |id: &str, kind: &str, qty: u32, height: f64, x: f64| StackEntry {
        id: id.into(),
        workpiece_type: kind.into(),
        quantity: qty,
        // lying flat, handle up, on 2 mm spacers
        base_pose: Pose::new(Vector3::new(x, -1.2, PANEL_THICKNESS / 2.0 + 0.002), rot_x(FRAC_PI_2)),
        item_vertical_pitch: 0.045,
        boxes: panel_boxes(height),
        grip_indicator: panel_grip(),
        color: [240, 240, 235],
        marker: marker(0.0, -0.1, 0.0),
        true_base_pose: None,
    };

    ScenarioDocument {
        format_version: FORMAT_VERSION,
        name: "drywall".into(),
        objects,
        stacks: vec![
            stack("stack-large", "panel-large", 3, FRAME_HEIGHT, 1.0),
            stack("stack-small", "panel-small", 1, 2.0 * FOOT, 2.2),
        ],
        noise_model: NoiseModel::zero(0),
        workcell: WorkCell {
            reach_envelope: vec![cuboid([1.25, -0.5, 1.35], [2.25, 2.0, 1.35])],
            base_travel: 4.5,
            speed_fraction: 0.03,
            safety_curtain: vec!["laser-curtain".into()],
            drop_height: 0.0,
            home: Pose::from_position(1.2, -0.3, 1.5),
            gripper: vec![cuboid([0.0, 0.0, 0.085], [0.05, 0.05, 0.08])],
            approach_height: 0.15,
            safe_height: 2.1,
            checked_step: 0.002,
            contact_step: 0.001,
            tick: 5.0,
            plan_attempts: 64,
            adaptation: AdaptationSettings::default(),
        },
        as_built_records: vec![],
        scan_records: vec![],
    }
}

pub const BLOCK_HALF: [f64; 3] = [0.045, 0.09, 0.045];
/// Centre-to-centre spacing of blocks in the row.
pub const BLOCK_PITCH: f64 = 0.092;
/// How far an intruding stud reaches into the first slot.
pub const STUD_INTRUSION: f64 = 0.008;
/// Left edge of the first block slot.
const ROW_START: f64 = 0.1;
const ROW_Y: f64 = 0.2;

/// Parameters of one block-experiment trial.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOptions {
    /// Designed gap between the stud and the first block (m).
    pub gap: f64,
    /// True displacement of the stud along the row, towards the blocks (m).
    /// Positive values beyond `gap` intrude into the first slot.
    pub stud_shift: f64,
    pub noise: NoiseModel,
    pub blocks: u32,
}

impl BlockOptions {
    pub fn new(gap: f64) -> Self {
        Self { gap, stud_shift: 0.0, noise: NoiseModel::zero(0), blocks: 4 }
    }

    /// Stud moved into the first slot by [`STUD_INTRUSION`].
    pub fn intruding(mut self) -> Self {
        self.stud_shift = self.gap + STUD_INTRUSION;
        self
    }

    /// Stud moved away from the blocks by `distance`.
    pub fn outward(mut self, distance: f64) -> Self {
        self.stud_shift = -distance;
        self
    }
}

/// The block experiment: a row of blocks laid next to a stud whose
/// as-built position may differ from design.
pub fn blocks(opts: &BlockOptions) -> ScenarioDocument {
    let block_boxes = vec![cuboid([0.0; 3], BLOCK_HALF)];
    let grip = Pose::from_position(0.0, 0.0, BLOCK_HALF[2]);

    let mut ground = entry(
        "ground",
        "Ground",
        "as_built",
        vec![cuboid([0.0, 0.0, -0.05], [1.5, 1.5, 0.05])],
        Pose::from_position(0.5, 0.0, 0.0),
        [128, 128, 128],
    );
    ground.workpiece_type = "ground".into();
    ground.task_related = false;

    let stud_pose = Pose::from_position(ROW_START - opts.gap - 0.02, ROW_Y, 0.045);
    let mut stud = entry("stud", "Stud", "as_built", vec![cuboid([0.0; 3], [0.02, 0.3, 0.045])], stud_pose, [196, 164, 112]);
    stud.workpiece_type = "stud".into();
    stud.marker = marker(0.0, -0.28, 0.0);
    stud.true_pose = Some(stud_pose.translated(&Vector3::new(opts.stud_shift, 0.0, 0.0)));

    let mut objects = vec![ground, stud];
    for i in 0..opts.blocks {
        let x = ROW_START + BLOCK_HALF[0] + i as f64 * BLOCK_PITCH;
        let mut b = entry(
            &format!("block-{i}"),
            &format!("Block {}", i + 1),
            "target",
            block_boxes.clone(),
            Pose::from_position(x, ROW_Y, BLOCK_HALF[2]),
            [200, 60, 50],
        );
        b.relationship = Relationship { parent_id: Some("ground".into()), kind: RelationshipKind::Seated };
        b.sequence_index = Some(i);
        b.workpiece_type = "block".into();
        b.grip_indicator = Some(grip);
        objects.push(b);
    }

    ScenarioDocument {
        format_version: FORMAT_VERSION,
        name: "blocks".into(),
        objects,
        stacks: vec![StackEntry {
            id: "block-stack".into(),
            workpiece_type: "block".into(),
            quantity: opts.blocks,
            base_pose: Pose::from_position(0.9, -0.7, BLOCK_HALF[2] + 0.002),
            item_vertical_pitch: BLOCK_PITCH,
            boxes: block_boxes,
            grip_indicator: grip,
            color: [200, 60, 50],
            marker: marker(0.0, 0.1, 0.0),
            true_base_pose: None,
        }],
        noise_model: opts.noise.clone(),
        workcell: WorkCell {
            reach_envelope: vec![cuboid([0.5, -0.2, 0.5], [1.0, 1.0, 0.5])],
            base_travel: 0.0,
            speed_fraction: 0.07,
            safety_curtain: vec![],
            drop_height: 0.002,
            home: Pose::from_position(0.5, 0.0, 0.6),
            gripper: vec![cuboid([0.0, 0.0, 0.045], [0.03, 0.03, 0.04])],
            approach_height: 0.1,
            safe_height: 0.45,
            checked_step: 0.002,
            contact_step: 0.001,
            tick: 1.0,
            plan_attempts: 64,
            adaptation: AdaptationSettings {
                offset_clearance: opts.gap,
                row_axis: Some([1.0, 0.0, 0.0]),
                max_offset: 0.1,
                ..AdaptationSettings::default()
            },
        },
        as_built_records: vec![],
        scan_records: vec![],
    }
}

/// Looks up a bundled scenario by name.
pub fn builtin(name: &str) -> Option<ScenarioDocument> {
    match name {
        "drywall" => Some(drywall()),
        "blocks" => Some(blocks(&BlockOptions::new(0.010))),
        _ => None,
    }
}
