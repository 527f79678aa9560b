//! Simulated manipulator.
//!
//! The robot is a free end-effector (gripper boxes plus whatever it holds)
//! confined to a reach envelope. Plans are checked against the believed
//! scene; execution is checked against the simulator's ground truth, so the
//! gap between the two is where physical failures come from.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::AdaptationSettings;
use crate::geometry::{first_contact, overlap_interval, place_boxes, Obb, Pose, RigidTransform, SweepError};
use crate::perception::GroundTruthWorld;

/// End-effector speed at `speed_fraction == 1` (m/s).
pub const NOMINAL_LINEAR_SPEED: f64 = 0.25;
/// End-effector turn rate at `speed_fraction == 1` (rad/s).
pub const NOMINAL_ANGULAR_SPEED: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkCell {
    /// Region the tool centre point can reach (union of boxes, world frame).
    pub reach_envelope: Vec<Obb>,
    /// Travel of the linear base unit (m); informational, already folded
    /// into the envelope.
    #[serde(default)]
    pub base_travel: f64,
    pub speed_fraction: f64,
    /// Ids of the virtual-collision objects that act as the safety curtain.
    #[serde(default)]
    pub safety_curtain: Vec<String>,
    /// Height above the place pose at which parts are released (m).
    #[serde(default)]
    pub drop_height: f64,
    pub home: Pose,
    /// Gripper geometry in the tool frame (+z points away from the part).
    pub gripper: Vec<Obb>,
    /// Vertical approach and retreat distance at pick and place (m).
    pub approach_height: f64,
    /// Minimum tool height for lift-and-carry moves (m).
    pub safe_height: f64,
    /// Spatial resolution of plan validation (m).
    pub checked_step: f64,
    /// Spatial resolution of contact detection during execution (m).
    pub contact_step: f64,
    /// Simulated seconds between emitted robot states.
    pub tick: f64,
    /// Random-via attempts before planning gives up.
    pub plan_attempts: u32,
    #[serde(default)]
    pub adaptation: AdaptationSettings,
}

impl Default for WorkCell {
    fn default() -> Self {
        Self {
            reach_envelope: vec![Obb::axis_aligned(
                Vector3::new(0.5, 0.0, 0.5),
                Vector3::new(1.0, 1.2, 0.5),
            )],
            base_travel: 0.0,
            speed_fraction: 1.0,
            safety_curtain: vec![],
            drop_height: 0.0,
            home: Pose::from_position(0.5, 0.0, 0.6),
            gripper: vec![Obb::axis_aligned(Vector3::new(0.0, 0.0, 0.045), Vector3::new(0.03, 0.03, 0.04))],
            approach_height: 0.1,
            safe_height: 0.4,
            checked_step: 0.002,
            contact_step: 0.001,
            tick: 0.5,
            plan_attempts: 64,
            adaptation: AdaptationSettings::default(),
        }
    }
}

impl WorkCell {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.speed_fraction > 0.0 && self.speed_fraction <= 1.0) {
            return Err(format!("speed_fraction must be in (0, 1], got {}", self.speed_fraction));
        }
        if !(self.drop_height >= 0.0 && self.drop_height.is_finite()) {
            return Err("drop_height must be non-negative".into());
        }
        for (name, v) in [
            ("checked_step", self.checked_step),
            ("contact_step", self.contact_step),
            ("tick", self.tick),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.approach_height >= 0.0 && self.safe_height.is_finite()) {
            return Err("approach_height and safe_height must be finite and non-negative".into());
        }
        if self.reach_envelope.is_empty() || self.reach_envelope.iter().any(|b| !b.is_valid()) {
            return Err("reach_envelope needs at least one valid box".into());
        }
        if self.gripper.is_empty() || self.gripper.iter().any(|b| !b.is_valid()) {
            return Err("gripper needs at least one valid box".into());
        }
        if !self.home.is_finite() {
            return Err("home pose must be finite".into());
        }
        self.adaptation.validate()
    }

    pub fn reachable(&self, p: &Vector3<f64>) -> bool {
        self.reach_envelope.iter().any(|b| b.contains(p, 1e-9))
    }

    fn linear_speed(&self) -> f64 {
        NOMINAL_LINEAR_SPEED * self.speed_fraction
    }

    fn angular_speed(&self) -> f64 {
        NOMINAL_ANGULAR_SPEED * self.speed_fraction
    }

    /// Time to move between two poses.
    pub fn segment_duration(&self, a: &Pose, b: &Pose) -> f64 {
        let (lin, ang) = a.distance(b);
        (lin / self.linear_speed()).max(ang / self.angular_speed())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperState {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotMode {
    Idle,
    Moving,
    SafetyHold,
}

/// What the gripper is holding and where it sits relative to the tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldPayload {
    pub object_id: String,
    /// Geometry in the object's local frame.
    pub boxes: Vec<Obb>,
    /// Object pose in the tool frame.
    pub in_hand: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub end_effector_pose: Pose,
    pub gripper: GripperState,
    pub payload: Option<HeldPayload>,
    pub mode: RobotMode,
    /// Simulated time (s).
    pub time: f64,
}

impl RobotState {
    pub fn at_rest(pose: Pose, time: f64) -> Self {
        Self { end_effector_pose: pose, gripper: GripperState::Open, payload: None, mode: RobotMode::Idle, time }
    }
}

/// A workpiece as the planner sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadSpec {
    pub object_id: String,
    /// Geometry in the object's local frame.
    pub boxes: Vec<Obb>,
    /// Grasp frame in the object's local frame.
    pub grip: Pose,
    /// Stack the item is taken from, if any.
    #[serde(default)]
    pub stack_id: Option<String>,
}

impl PayloadSpec {
    /// Object geometry expressed in the tool frame.
    fn tool_boxes(&self) -> Vec<Obb> {
        let inv = self.grip.to_transform().invert();
        self.boxes.iter().map(|b| b.transformed(&inv)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickPlaceRequest {
    pub payload: PayloadSpec,
    /// Believed object pose at the pick location.
    pub pick: Pose,
    /// Object pose to install.
    pub place: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    Straight,
    LiftAndCarry,
    RandomVia,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPlan {
    pub plan_id: String,
    pub seed: u64,
    /// Tool poses in the world frame; the first is the robot's pose when planned.
    pub waypoints: Vec<Pose>,
    /// Waypoint indices where the part is gripped and released.
    pub payload_segment: (usize, usize),
    pub checked_step: f64,
    pub strategy: PlanStrategy,
    pub request: PickPlaceRequest,
    /// Object pose at release (place raised by the drop height).
    pub release_pose: Pose,
}

impl MotionPlan {
    pub fn path_length(&self) -> f64 {
        polyline_length(&self.waypoints)
    }

    /// Length travelled while holding the part.
    pub fn carry_length(&self) -> f64 {
        let (a, d) = self.payload_segment;
        polyline_length(&self.waypoints[a..=d])
    }

    /// Straight-line distance between grasp and release.
    pub fn straight_distance(&self) -> f64 {
        let (a, d) = self.payload_segment;
        (self.waypoints[d].position - self.waypoints[a].position).norm()
    }

    /// Collision body of the robot on segment `i` (waypoint `i` to `i + 1`).
    pub fn segment_body(&self, i: usize, gripper: &[Obb]) -> Vec<Obb> {
        let mut body = gripper.to_vec();
        let (a, d) = self.payload_segment;
        if (a..d).contains(&i) {
            body.extend(self.request.payload.tool_boxes());
        }
        body
    }
}

fn polyline_length(p: &[Pose]) -> f64 {
    p.windows(2).map(|w| (w[1].position - w[0].position).norm()).sum()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("{what} at ({x:.3}, {y:.3}, {z:.3}) is outside the reach envelope", x = .position[0], y = .position[1], z = .position[2])]
    Unreachable { what: String, position: [f64; 3] },
    #[error("no collision-free {leg} found after {attempts} attempts")]
    NoPath { leg: String, attempts: u32 },
    #[error("the gripper is already holding '{0}'")]
    GripperOccupied(String),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

struct Leg<'a> {
    name: &'static str,
    body: &'a [Obb],
    scene: &'a [Obb],
}

fn clear(path: &[Pose], leg: &Leg<'_>, step: f64, include_start: bool) -> Result<bool, PlanError> {
    Ok(first_contact(path, leg.body, leg.scene, step, include_start)?.is_none())
}

fn above(p: &Pose, h: f64) -> Pose {
    p.translated(&Vector3::new(0.0, 0.0, h))
}

/// Connects `from` to `to`, returning the intermediate and final waypoints.
fn connect(
    from: &Pose,
    to: &Pose,
    leg: &Leg<'_>,
    cell: &WorkCell,
    rng: &mut ChaCha8Rng,
    allow_straight: bool,
) -> Result<(Vec<Pose>, PlanStrategy), PlanError> {
    let step = cell.checked_step;
    if allow_straight && clear(&[*from, *to], leg, step, false)? {
        return Ok((vec![*to], PlanStrategy::Straight));
    }

    let jitter = !allow_straight;
    let mut safe_z = cell.safe_height.max(from.position.z).max(to.position.z);
    let mut lateral = Vector3::zeros();
    if jitter {
        safe_z += rng.gen_range(0.0..0.1);
        lateral = Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0);
    }
    let lift = Pose::new(Vector3::new(from.position.x, from.position.y, safe_z), from.orientation);
    let drop = Pose::new(Vector3::new(to.position.x, to.position.y, safe_z), to.orientation);
    let mut vias = vec![lift];
    if jitter {
        let mid = lift.interpolate(&drop, 0.5);
        vias.push(mid.translated(&lateral));
    }
    vias.push(drop);
    if vias.iter().all(|v| cell.reachable(&v.position)) {
        let mut path = vec![*from];
        path.extend(&vias);
        path.push(*to);
        if clear(&path, leg, step, false)? {
            vias.push(*to);
            return Ok((vias, PlanStrategy::LiftAndCarry));
        }
    }

    let (lo, hi) = cell
        .reach_envelope
        .iter()
        .map(Obb::aabb)
        .reduce(|(a0, a1), (b0, b1)| (a0.inf(&b0), a1.sup(&b1)))
        .expect("validated envelope is non-empty");
    for _ in 0..cell.plan_attempts {
        let p = Vector3::new(
            rng.gen_range(lo.x..=hi.x),
            rng.gen_range(lo.y..=hi.y),
            rng.gen_range(from.position.z.min(to.position.z)..=hi.z),
        );
        if !cell.reachable(&p) {
            continue;
        }
        let via = Pose::new(p, from.interpolate(to, 0.5).orientation);
        if clear(&[*from, via, *to], leg, step, false)? {
            return Ok((vec![via, *to], PlanStrategy::RandomVia));
        }
    }
    Err(PlanError::NoPath { leg: leg.name.to_string(), attempts: cell.plan_attempts })
}

fn check_reach(cell: &WorkCell, what: &str, p: &Pose) -> Result<(), PlanError> {
    if cell.reachable(&p.position) {
        Ok(())
    } else {
        Err(PlanError::Unreachable { what: what.to_string(), position: p.position.into() })
    }
}

fn build_plan(
    start: &Pose,
    request: &PickPlaceRequest,
    scene: &[Obb],
    cell: &WorkCell,
    seed: u64,
    allow_straight: bool,
) -> Result<MotionPlan, PlanError> {
    let grip = request.payload.grip.to_transform();
    let release_pose = above(&request.place, cell.drop_height);
    let tool_pick = request.pick.to_transform().compose(&grip).to_pose();
    let tool_release = release_pose.to_transform().compose(&grip).to_pose();
    let pick_above = above(&tool_pick, cell.approach_height);
    let place_above = above(&tool_release, cell.approach_height);
    check_reach(cell, "pick pose", &tool_pick)?;
    check_reach(cell, "pick approach", &pick_above)?;
    check_reach(cell, "place pose", &tool_release)?;
    check_reach(cell, "place approach", &place_above)?;

    let mut carry_body = cell.gripper.clone();
    carry_body.extend(request.payload.tool_boxes());
    let empty = Leg { name: "transit", body: &cell.gripper, scene };
    let loaded = Leg { name: "carry", body: &carry_body, scene };
    let step = cell.checked_step;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waypoints = vec![*start];
    let (transit, _) = connect(start, &pick_above, &empty, cell, &mut rng, allow_straight)?;
    waypoints.extend(transit);

    let descend = Leg { name: "pick approach", ..empty };
    if !clear(&[pick_above, tool_pick], &descend, step, false)? {
        return Err(PlanError::NoPath { leg: descend.name.into(), attempts: 1 });
    }
    waypoints.push(tool_pick);
    let attach = waypoints.len() - 1;
    let lift = Leg { name: "lift", ..loaded };
    if !clear(&[tool_pick, pick_above], &lift, step, false)? {
        return Err(PlanError::NoPath { leg: lift.name.into(), attempts: 1 });
    }
    waypoints.push(pick_above);

    let (carry, strategy) = connect(&pick_above, &place_above, &loaded, cell, &mut rng, allow_straight)?;
    waypoints.extend(carry);
    let lower = Leg { name: "place approach", ..loaded };
    if !clear(&[place_above, tool_release], &lower, step, false)? {
        return Err(PlanError::NoPath { leg: lower.name.into(), attempts: 1 });
    }
    waypoints.push(tool_release);
    let detach = waypoints.len() - 1;
    let retreat = Leg { name: "retreat", ..empty };
    if !clear(&[tool_release, place_above], &retreat, step, false)? {
        return Err(PlanError::NoPath { leg: retreat.name.into(), attempts: 1 });
    }
    waypoints.push(place_above);

    Ok(MotionPlan {
        plan_id: format!("plan-{seed:016x}"),
        seed,
        waypoints,
        payload_segment: (attach, detach),
        checked_step: step,
        strategy,
        request: request.clone(),
        release_pose,
    })
}

/// Plans pick, lift, carry, place and retreat for one workpiece.
///
/// `scene` is the believed planning scene in world coordinates; it must not
/// contain the item being picked. The seed only matters once the straight
/// and lift-and-carry strategies fail.
pub fn plan_pick_and_place(
    state: &RobotState,
    request: &PickPlaceRequest,
    scene: &[Obb],
    cell: &WorkCell,
    seed: u64,
) -> Result<MotionPlan, PlanError> {
    if let Some(p) = &state.payload {
        return Err(PlanError::GripperOccupied(p.object_id.clone()));
    }
    build_plan(&state.end_effector_pose, request, scene, cell, seed, true)
}

/// Alternative plan between the same endpoints. Straight moves are skipped
/// and the lift-and-carry route is jittered by `seed`.
pub fn replan(previous: &MotionPlan, scene: &[Obb], cell: &WorkCell, seed: u64) -> Result<MotionPlan, PlanError> {
    build_plan(&previous.waypoints[0], &previous.request, scene, cell, seed, false)
}

/// Classification of a physical contact by what was hit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContactCause {
    HitGround,
    CollideWithStud,
    CollideWithBlock,
    CollideWith(String),
}

impl ContactCause {
    pub fn from_workpiece_type(t: &str) -> Self {
        match t {
            "ground" => ContactCause::HitGround,
            "stud" => ContactCause::CollideWithStud,
            "block" => ContactCause::CollideWithBlock,
            other => ContactCause::CollideWith(other.to_string()),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            ContactCause::HitGround => "hit-ground".into(),
            ContactCause::CollideWithStud => "collide-with-stud".into(),
            ContactCause::CollideWithBlock => "collide-with-block".into(),
            ContactCause::CollideWith(t) => format!("collide-with-{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Completed {
        /// Ground-truth object pose after release (and drop).
        achieved_pose: Pose,
    },
    Contact {
        obstacle_id: String,
        cause: ContactCause,
        /// Waypoint index the failing segment starts at.
        segment: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub plan_id: String,
    pub outcome: ExecutionOutcome,
    /// Simulated time at which motion ended.
    pub end_time: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobotError {
    #[error("resume requires an explicit safety confirmation")]
    MissingConfirmation,
    #[error("robot is not in safety hold")]
    NotHeld,
    #[error("robot is not moving")]
    NotMoving,
    #[error("stack '{0}' is not in the world")]
    UnknownStack(String),
    #[error("stack '{0}' is empty")]
    EmptyStack(String),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

/// Proof that a human cleared the workspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyConfirmation {
    operator: String,
}

impl SafetyConfirmation {
    pub fn confirmed_by(operator: impl Into<String>) -> Self {
        Self { operator: operator.into() }
    }

    pub fn operator(&self) -> &str {
        &self.operator
    }
}

/// Object pose in the tool frame once the jaws close.
///
/// The jaws centre the part along their closing axis (tool y) and square it
/// up, so those error components vanish; the rest carries over.
fn grasp(believed: &Pose, truth: &Pose, grip: &Pose) -> RigidTransform {
    let nominal = grip.to_transform().invert();
    if believed == truth {
        return nominal;
    }
    let delta = believed.to_transform().invert().compose(&truth.to_transform());
    let actual = nominal.compose(&delta);
    let mut err = actual.translation - nominal.translation;
    err.y = 0.0;
    RigidTransform::new(nominal.rotation, nominal.translation + err)
}

struct Obstacle {
    id: String,
    workpiece_type: String,
}

fn world_obstacles(world: &GroundTruthWorld, skip: Option<(&str, u32)>) -> (Vec<Obb>, Vec<Obstacle>) {
    let mut boxes = Vec::new();
    let mut meta = Vec::new();
    for (id, body) in &world.bodies {
        for b in body.world_boxes() {
            boxes.push(b);
            meta.push(Obstacle { id: id.clone(), workpiece_type: body.workpiece_type.clone() });
        }
    }
    for (id, stack) in &world.stacks {
        for i in 0..stack.quantity {
            if skip == Some((id.as_str(), i)) {
                continue;
            }
            for b in place_boxes(&stack.boxes, &stack.item_pose(i)) {
                boxes.push(b);
                meta.push(Obstacle { id: format!("{id}[{i}]"), workpiece_type: stack.workpiece_type.clone() });
            }
        }
    }
    (boxes, meta)
}

/// Distance a part can fall straight down before touching `scene`.
fn fall_distance(part: &[Obb], scene: &[Obb]) -> f64 {
    let down = -Vector3::z();
    part.iter()
        .flat_map(|p| scene.iter().filter_map(move |s| overlap_interval(p, s, &down)))
        .filter(|(_, hi)| *hi >= 0.0)
        .map(|(lo, _)| lo.max(0.0))
        .fold(f64::INFINITY, f64::min)
}

/// Time-stepped execution of one plan against the ground truth.
///
/// The outcome is resolved up front; stepping then replays the motion tick
/// by tick so observers see the same stream regardless of interrupts.
#[derive(Debug, Clone)]
pub struct Execution {
    plan: MotionPlan,
    tick: f64,
    start_time: f64,
    /// Cumulative time at each waypoint, relative to the start.
    times: Vec<f64>,
    end: f64,
    elapsed: f64,
    mode: RobotMode,
    finished: bool,
    held: HeldPayload,
    report: ExecutionReport,
}

impl Execution {
    pub fn start(
        plan: &MotionPlan,
        world: &GroundTruthWorld,
        cell: &WorkCell,
        start_time: f64,
    ) -> Result<Self, RobotError> {
        let payload = &plan.request.payload;
        let (truth, skip) = match &payload.stack_id {
            Some(sid) => {
                let s = world.stacks.get(sid).ok_or_else(|| RobotError::UnknownStack(sid.clone()))?;
                let top = s.quantity.checked_sub(1).ok_or_else(|| RobotError::EmptyStack(sid.clone()))?;
                (s.item_pose(top), Some((sid.as_str(), top)))
            }
            None => (plan.request.pick, None),
        };
        let in_hand = grasp(&plan.request.pick, &truth, &payload.grip);
        let held = HeldPayload { object_id: payload.object_id.clone(), boxes: payload.boxes.clone(), in_hand };
        let mut payload_tool: Vec<Obb> = payload.boxes.iter().map(|b| b.transformed(&in_hand)).collect();

        let (scene, meta) = world_obstacles(world, skip);
        let mut times = vec![0.0];
        for w in plan.waypoints.windows(2) {
            times.push(times.last().unwrap() + cell.segment_duration(&w[0], &w[1]));
        }
        let (attach, detach) = plan.payload_segment;
        let mut contact = None;
        for (i, w) in plan.waypoints.windows(2).enumerate() {
            let mut body = cell.gripper.clone();
            if (attach..detach).contains(&i) {
                body.append(&mut payload_tool.clone());
            }
            if let Some(c) = first_contact(w, &body, &scene, cell.contact_step, i == 0)? {
                contact = Some((i, c.fraction, c.collision.scene_index));
                break;
            }
        }

        let (outcome, end) = match contact {
            Some((i, f, si)) => (
                ExecutionOutcome::Contact {
                    obstacle_id: meta[si].id.clone(),
                    cause: ContactCause::from_workpiece_type(&meta[si].workpiece_type),
                    segment: i,
                },
                times[i] + f * (times[i + 1] - times[i]),
            ),
            None => {
                let nominal = payload.grip.to_transform().invert();
                let released = if in_hand == nominal {
                    plan.release_pose
                } else {
                    plan.waypoints[detach].to_transform().compose(&in_hand).to_pose()
                };
                let achieved = if cell.drop_height > 0.0 {
                    let part = place_boxes(&payload.boxes, &released);
                    let d = fall_distance(&part, &scene);
                    if d.is_finite() {
                        released.translated(&Vector3::new(0.0, 0.0, -d))
                    } else {
                        released
                    }
                } else {
                    released
                };
                (ExecutionOutcome::Completed { achieved_pose: achieved }, *times.last().unwrap())
            }
        };
        payload_tool.clear();
        let distance = match contact {
            Some((i, f, _)) => {
                polyline_length(&plan.waypoints[..=i])
                    + f * (plan.waypoints[i + 1].position - plan.waypoints[i].position).norm()
            }
            None => plan.path_length(),
        };
        Ok(Self {
            plan: plan.clone(),
            tick: cell.tick,
            start_time,
            times,
            end,
            elapsed: 0.0,
            mode: RobotMode::Moving,
            finished: false,
            held,
            report: ExecutionReport { plan_id: plan.plan_id.clone(), outcome, end_time: start_time + end, distance },
        })
    }

    /// Robot state at motion time `t` (relative to the start).
    fn state_at(&self, t: f64) -> RobotState {
        let n = self.plan.waypoints.len();
        let pose = if t >= *self.times.last().unwrap() {
            self.plan.waypoints[n - 1]
        } else {
            let i = self.times.partition_point(|&x| x <= t).saturating_sub(1).min(n - 2);
            let dur = self.times[i + 1] - self.times[i];
            let f = if dur > 0.0 { (t - self.times[i]) / dur } else { 1.0 };
            self.plan.waypoints[i].interpolate(&self.plan.waypoints[i + 1], f)
        };
        let (attach, detach) = self.plan.payload_segment;
        let holding = t >= self.times[attach] && t < self.times[detach];
        RobotState {
            end_effector_pose: pose,
            gripper: if holding { GripperState::Closed } else { GripperState::Open },
            payload: holding.then(|| self.held.clone()),
            mode: self.mode,
            time: self.start_time + t,
        }
    }

    /// Advances one tick. Returns `None` once motion has ended or while held.
    pub fn step(&mut self) -> Option<RobotState> {
        if self.finished || self.mode == RobotMode::SafetyHold {
            return None;
        }
        self.elapsed = (self.elapsed + self.tick).min(self.end);
        if self.elapsed >= self.end {
            self.finished = true;
            self.mode = RobotMode::Idle;
        }
        Some(self.state_at(self.elapsed))
    }

    pub fn state(&self) -> RobotState {
        self.state_at(self.elapsed)
    }

    /// Freezes motion immediately at the current pose.
    pub fn interrupt(&mut self) -> Result<RobotState, RobotError> {
        if self.finished || self.mode != RobotMode::Moving {
            return Err(RobotError::NotMoving);
        }
        self.mode = RobotMode::SafetyHold;
        Ok(self.state())
    }

    pub fn resume(&mut self, confirmation: Option<&SafetyConfirmation>) -> Result<(), RobotError> {
        if self.mode != RobotMode::SafetyHold {
            return Err(RobotError::NotHeld);
        }
        confirmation.ok_or(RobotError::MissingConfirmation)?;
        self.mode = RobotMode::Moving;
        Ok(())
    }

    pub fn mode(&self) -> RobotMode {
        self.mode
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn plan(&self) -> &MotionPlan {
        &self.plan
    }

    /// Final report; available once stepping has finished.
    pub fn report(&self) -> Option<&ExecutionReport> {
        self.finished.then_some(&self.report)
    }
}

/// Runs a plan to completion, collecting every emitted state.
pub fn execute(
    plan: &MotionPlan,
    world: &GroundTruthWorld,
    cell: &WorkCell,
    start_time: f64,
) -> Result<(Vec<RobotState>, ExecutionReport), RobotError> {
    let mut exec = Execution::start(plan, world, cell, start_time)?;
    let mut states = Vec::new();
    while let Some(s) = exec.step() {
        states.push(s);
    }
    let report = exec.report().cloned().expect("stepping ran to the end");
    Ok((states, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::swept_collides;
    use crate::perception::{TrueBody, TrueStack};

    fn block_boxes() -> Vec<Obb> {
        vec![Obb::axis_aligned(Vector3::zeros(), Vector3::new(0.045, 0.09, 0.045))]
    }

    fn payload(stack: Option<&str>) -> PayloadSpec {
        PayloadSpec {
            object_id: "b0".into(),
            boxes: block_boxes(),
            grip: Pose::from_position(0.0, 0.0, 0.045),
            stack_id: stack.map(String::from),
        }
    }

    fn ground() -> Obb {
        Obb::axis_aligned(Vector3::new(0.5, 0.0, -0.05), Vector3::new(1.5, 1.5, 0.05))
    }

    fn cell() -> WorkCell {
        WorkCell { drop_height: 0.002, speed_fraction: 0.5, ..WorkCell::default() }
    }

    fn request(pick: Pose, place: Pose) -> PickPlaceRequest {
        PickPlaceRequest { payload: payload(None), pick, place }
    }

    fn home() -> RobotState {
        RobotState::at_rest(cell().home, 0.0)
    }

    fn recheck(plan: &MotionPlan, scene: &[Obb], cell: &WorkCell) {
        for (i, w) in plan.waypoints.windows(2).enumerate() {
            let body = plan.segment_body(i, &cell.gripper);
            assert_eq!(swept_collides(w, &body, scene, plan.checked_step).unwrap(), None, "segment {i}");
        }
    }

    #[test]
    fn empty_scene_plan_is_collision_free() {
        let req = request(Pose::from_position(0.0, -0.5, 0.1), Pose::from_position(0.0, 0.5, 0.1));
        let plan = plan_pick_and_place(&home(), &req, &[], &cell(), 1).unwrap();
        assert!(plan.waypoints.len() >= 3);
        assert_eq!(plan.waypoints[0], cell().home);
        assert_eq!(plan.strategy, PlanStrategy::Straight);
        recheck(&plan, &[], &cell());
    }

    #[test]
    fn wall_forces_detour() {
        let c = cell();
        let wall = Obb::axis_aligned(Vector3::new(0.0, 0.0, 0.2), Vector3::new(0.5, 0.02, 0.2));
        let req = request(Pose::from_position(0.0, -0.4, 0.05), Pose::from_position(0.0, 0.4, 0.05));
        let plan = plan_pick_and_place(&home(), &req, &[wall], &c, 3).unwrap();
        assert_ne!(plan.strategy, PlanStrategy::Straight);
        recheck(&plan, &[wall], &c);
        let (a, d) = plan.payload_segment;
        let straight = [plan.waypoints[a + 1], plan.waypoints[d - 1]];
        let body = plan.segment_body(a, &c.gripper);
        assert!(swept_collides(&straight, &body, &[wall], c.checked_step).unwrap().is_some());
    }

    #[test]
    fn unreachable_place_is_rejected() {
        let req = request(Pose::from_position(0.0, 0.0, 0.05), Pose::from_position(5.0, 0.0, 0.05));
        let err = plan_pick_and_place(&home(), &req, &[], &cell(), 1).unwrap_err();
        assert!(matches!(err, PlanError::Unreachable { .. }), "{err}");
    }

    #[test]
    fn replan_keeps_endpoints_and_changes_route() {
        let c = cell();
        let req = request(Pose::from_position(0.0, -0.4, 0.05), Pose::from_position(0.2, 0.4, 0.05));
        let first = plan_pick_and_place(&home(), &req, &[], &c, 1).unwrap();
        let a = replan(&first, &[], &c, 2).unwrap();
        let b = replan(&first, &[], &c, 3).unwrap();
        assert_ne!(a.plan_id, first.plan_id);
        assert_eq!(a.waypoints.first(), first.waypoints.first());
        assert_eq!(a.waypoints.last(), first.waypoints.last());
        let dev = a
            .waypoints
            .iter()
            .zip(&b.waypoints)
            .map(|(p, q)| (p.position - q.position).norm())
            .fold(0.0, f64::max);
        assert!(dev > 0.0 || a.waypoints.len() != b.waypoints.len());
    }

    #[test]
    fn replan_avoids_new_obstacle() {
        let c = cell();
        let req = request(Pose::from_position(0.0, -0.4, 0.05), Pose::from_position(0.0, 0.4, 0.05));
        let first = plan_pick_and_place(&home(), &req, &[], &c, 1).unwrap();
        let wall = Obb::axis_aligned(Vector3::new(0.0, 0.0, 0.2), Vector3::new(0.5, 0.02, 0.2));
        let again = replan(&first, &[wall], &c, 9).unwrap();
        recheck(&again, &[wall], &c);
    }

    fn world_with_stack(detected_offset: Vector3<f64>) -> (GroundTruthWorld, PickPlaceRequest) {
        let mut world = GroundTruthWorld::default();
        world.bodies.insert(
            "ground".into(),
            TrueBody { pose: Pose::identity(), boxes: vec![ground()], workpiece_type: "ground".into() },
        );
        let base = Pose::from_position(0.0, -0.5, 0.047);
        world.stacks.insert(
            "s".into(),
            TrueStack { quantity: 1, base_pose: base, pitch: 0.092, boxes: block_boxes(), workpiece_type: "block".into() },
        );
        let req = PickPlaceRequest {
            payload: payload(Some("s")),
            pick: base.translated(&detected_offset),
            place: Pose::from_position(0.0, 0.5, 0.045),
        };
        (world, req)
    }

    #[test]
    fn noise_free_execution_reaches_release_pose() {
        let c = WorkCell { drop_height: 0.0, ..cell() };
        let (world, mut req) = world_with_stack(Vector3::zeros());
        req.place.position.z += 0.001;
        let plan = plan_pick_and_place(&home(), &req, &[ground()], &c, 1).unwrap();
        let (states, report) = execute(&plan, &world, &c, 0.0).unwrap();
        assert_eq!(report.outcome, ExecutionOutcome::Completed { achieved_pose: req.place });
        assert_eq!(states.last().unwrap().end_effector_pose, *plan.waypoints.last().unwrap());
    }

    #[test]
    fn drop_lands_on_support() {
        let c = cell();
        let (world, req) = world_with_stack(Vector3::zeros());
        let plan = plan_pick_and_place(&home(), &req, &[ground()], &c, 1).unwrap();
        let (_, report) = execute(&plan, &world, &c, 0.0).unwrap();
        let ExecutionOutcome::Completed { achieved_pose } = report.outcome else { panic!("{report:?}") };
        assert!((achieved_pose.position - req.place.position).norm() < 1e-12);
    }

    #[test]
    fn part_hanging_low_hits_ground() {
        // stack detected 3 mm higher than it is: the block hangs 3 mm low,
        // more than the 2 mm release height
        let c = cell();
        let (world, req) = world_with_stack(Vector3::new(0.0, 0.0, 0.003));
        let plan = plan_pick_and_place(&home(), &req, &[ground()], &c, 1).unwrap();
        let (_, report) = execute(&plan, &world, &c, 0.0).unwrap();
        assert!(
            matches!(report.outcome, ExecutionOutcome::Contact { cause: ContactCause::HitGround, .. }),
            "{report:?}"
        );
    }

    #[test]
    fn jaw_axis_error_is_compensated() {
        let c = cell();
        let (world, req) = world_with_stack(Vector3::new(0.0, 0.004, 0.0));
        let plan = plan_pick_and_place(&home(), &req, &[ground()], &c, 1).unwrap();
        let (_, report) = execute(&plan, &world, &c, 0.0).unwrap();
        let ExecutionOutcome::Completed { achieved_pose } = report.outcome else { panic!("{report:?}") };
        assert!((achieved_pose.position - req.place.position).norm() < 1e-9);
    }

    #[test]
    fn lateral_error_collides_with_stud() {
        let c = cell();
        let (mut world, req) = world_with_stack(Vector3::new(0.003, 0.0, 0.0));
        // stud face 2 mm from the slot on -x; the block arrives 3 mm to -x
        world.bodies.insert(
            "stud".into(),
            TrueBody {
                pose: Pose::identity(),
                boxes: vec![Obb::axis_aligned(Vector3::new(-0.045 - 0.002 - 0.02, 0.5, 0.045), Vector3::new(0.02, 0.3, 0.045))],
                workpiece_type: "stud".into(),
            },
        );
        let plan = plan_pick_and_place(&home(), &req, &[ground()], &c, 1).unwrap();
        let (_, report) = execute(&plan, &world, &c, 0.0).unwrap();
        assert!(
            matches!(&report.outcome, ExecutionOutcome::Contact { cause: ContactCause::CollideWithStud, obstacle_id, .. } if obstacle_id == "stud"),
            "{report:?}"
        );
    }

    #[test]
    fn interrupt_and_resume_match_uninterrupted_run() {
        let c = cell();
        let (world, req) = world_with_stack(Vector3::zeros());
        let plan = plan_pick_and_place(&home(), &req, &[ground()], &c, 1).unwrap();
        let (reference, report) = execute(&plan, &world, &c, 0.0).unwrap();

        let mut exec = Execution::start(&plan, &world, &c, 0.0).unwrap();
        let mut states = Vec::new();
        for _ in 0..(reference.len() / 2) {
            states.push(exec.step().unwrap());
        }
        let frozen = exec.interrupt().unwrap();
        assert_eq!(frozen.mode, RobotMode::SafetyHold);
        assert_eq!(frozen.end_effector_pose, states.last().unwrap().end_effector_pose);
        assert_eq!(exec.step(), None);
        assert_eq!(exec.resume(None), Err(RobotError::MissingConfirmation));
        assert_eq!(exec.mode(), RobotMode::SafetyHold);
        exec.resume(Some(&SafetyConfirmation::confirmed_by("operator"))).unwrap();
        while let Some(s) = exec.step() {
            states.push(s);
        }
        assert_eq!(states, reference);
        assert_eq!(exec.report(), Some(&report));
    }

    #[test]
    fn execution_is_deterministic() {
        let c = cell();
        let (world, req) = world_with_stack(Vector3::new(0.001, 0.0, 0.0));
        let plan = plan_pick_and_place(&home(), &req, &[ground()], &c, 1).unwrap();
        assert_eq!(execute(&plan, &world, &c, 3.0).unwrap(), execute(&plan, &world, &c, 3.0).unwrap());
    }

    #[test]
    fn workcell_validation() {
        assert!(WorkCell::default().validate().is_ok());
        assert!(WorkCell { speed_fraction: 0.0, ..WorkCell::default() }.validate().is_err());
        assert!(WorkCell { speed_fraction: 1.5, ..WorkCell::default() }.validate().is_err());
        assert!(WorkCell { drop_height: -0.1, ..WorkCell::default() }.validate().is_err());
    }
}
