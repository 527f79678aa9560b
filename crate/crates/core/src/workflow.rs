//! The collaborative construction process as a state machine.
//!
//! A [`Session`] owns the repository, the simulated world and the robot. It
//! advances only through [`SessionInput`]s (start, autonomous steps,
//! supervisor commands, safety interrupts), each of which is appended to an
//! ordered log together with the events it caused. Replaying the inputs of a
//! log against a fresh session reproduces it exactly.

use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    analyze_target, apply_manual_replacement, check_nearby, nearby_scene, AdaptError, AdaptationSuggestion,
    DeviationKind, DeviationReport,
};
use crate::bim::{as_built_id, BimRepository, Layer, ScenarioDocument, ScenarioError};
use crate::geometry::{place_boxes, Obb, Pose};
use crate::perception::{bindings_from, infer_stack, scan_environment, GroundTruthWorld, NoiseModel, TrueBody};
use crate::robot::{
    plan_pick_and_place, replan, ContactCause, Execution, ExecutionOutcome, ExecutionReport, GripperState, MotionPlan, PayloadSpec,
    PickPlaceRequest, PlanStrategy, RobotState, SafetyConfirmation,
};

/// Version of the session log schema.
pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowState {
    Idle,
    Scanning,
    FetchTarget,
    AwaitTargetConfirm,
    DeviationAnalysis,
    AwaitAdaptationDecision,
    Planning,
    AwaitPlanApproval,
    Previewing,
    Executing,
    SafetyHold,
    RecordingAsBuilt,
    ManualResolution,
    Checkpointing,
    TaskComplete,
    Aborted,
}

impl WorkflowState {
    /// States that advance on [`SessionInput::Step`] without a human.
    pub fn is_autonomous(&self) -> bool {
        matches!(
            self,
            WorkflowState::Scanning
                | WorkflowState::FetchTarget
                | WorkflowState::DeviationAnalysis
                | WorkflowState::Planning
                | WorkflowState::Executing
                | WorkflowState::RecordingAsBuilt
                | WorkflowState::Checkpointing
        )
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, WorkflowState::TaskComplete | WorkflowState::Aborted)
    }
}

/// A replacement piece placed by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualReplacement {
    pub boxes: Vec<Obb>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum SupervisorCommand {
    ConfirmTarget,
    SelectTarget { target_id: String },
    AcceptSuggestion,
    AdjustPose { pose: Pose },
    KeepOriginal,
    ManualResolve { replacement: ManualReplacement },
    RequestPreview,
    ApprovePlan,
    RequestReplan,
    ConfirmSafety,
    RequestCheckpoint,
    Abort,
}

impl SupervisorCommand {
    pub fn name(&self) -> &'static str {
        match self {
            SupervisorCommand::ConfirmTarget => "confirm_target",
            SupervisorCommand::SelectTarget { .. } => "select_target",
            SupervisorCommand::AcceptSuggestion => "accept_suggestion",
            SupervisorCommand::AdjustPose { .. } => "adjust_pose",
            SupervisorCommand::KeepOriginal => "keep_original",
            SupervisorCommand::ManualResolve { .. } => "manual_resolve",
            SupervisorCommand::RequestPreview => "request_preview",
            SupervisorCommand::ApprovePlan => "approve_plan",
            SupervisorCommand::RequestReplan => "request_replan",
            SupervisorCommand::ConfirmSafety => "confirm_safety",
            SupervisorCommand::RequestCheckpoint => "request_checkpoint",
            SupervisorCommand::Abort => "abort",
        }
    }

    /// Whether the command is accepted in `state`.
    pub fn legal_in(&self, state: WorkflowState) -> bool {
        use SupervisorCommand as C;
        use WorkflowState as S;
        matches!(
            (state, self),
            (_, C::RequestCheckpoint) |
            (S::AwaitTargetConfirm, C::ConfirmTarget | C::SelectTarget { .. } | C::Abort) |
            (
                S::AwaitAdaptationDecision,
                C::AcceptSuggestion | C::AdjustPose { .. } | C::KeepOriginal | C::ManualResolve { .. } | C::Abort,
            ) |
            (S::AwaitPlanApproval, C::RequestPreview | C::ApprovePlan | C::RequestReplan | C::Abort) |
            (S::SafetyHold, C::ConfirmSafety | C::Abort) |
            (
                S::ManualResolution,
                C::ManualResolve { .. } | C::RequestReplan | C::SelectTarget { .. } | C::Abort,
            )
        )
    }
}

/// Everything that can drive a session forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum SessionInput {
    Start,
    Step,
    Command { command: SupervisorCommand },
    SafetyInterrupt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub plan_id: String,
    pub target_id: String,
    pub strategy: PlanStrategy,
    pub waypoint_count: usize,
    pub path_length: f64,
    pub carry_length: f64,
    pub straight_distance: f64,
    pub duration: f64,
    pub place_pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorkflowEvent {
    StateChanged { from: WorkflowState, to: WorkflowState },
    AsBuiltUpdated { object_id: String, pose: Pose },
    TargetProposed { target_id: String, highlight: bool },
    DeviationFound { report: DeviationReport, suggestion: AdaptationSuggestion },
    PlanReady { summary: PlanSummary },
    PreviewFrames { plan_id: String, waypoints: Vec<Pose>, times: Vec<f64>, payload_segment: (usize, usize) },
    ExecutionState { state: RobotState },
    ExecutionFinished { report: ExecutionReport },
    BillboardMessage { text: String },
    TargetCompleted { target_id: String, pose: Pose },
    CheckpointSaved { as_built_records: usize, scan_records: usize },
    TaskFinished,
    SafetyTriggered,
    CommandRejected { input: SessionInput, state: WorkflowState, reason: String },
    Error { description: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoRules {
    /// Request a new plan when the carry path exceeds this multiple of the
    /// straight pick-to-place distance.
    pub replan_ratio: f64,
    /// Replans the policy requests per target before approving anyway.
    pub max_replans: u32,
    /// Synthetic time charged per human decision (s).
    pub decision_seconds: f64,
}

impl Default for AutoRules {
    fn default() -> Self {
        Self { replan_ratio: 1.8, max_replans: 3, decision_seconds: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Policy {
    Interactive,
    AutoApprove(AutoRules),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub policy: Policy,
    pub replan_cap: u32,
    pub scenario: ScenarioDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Header(Box<SessionHeader>),
    Input(SessionInput),
    Event(WorkflowEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    /// Simulated time (s).
    pub time: f64,
    pub entry: LogEntry,
}

/// How a target left the queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub target_id: String,
    pub placed: bool,
    pub manual: bool,
    pub failure: Option<ContactCause>,
    pub replans: u32,
    pub suggestion: Option<DeviationKind>,
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("{input} is not accepted in state {state:?}")]
    Illegal { input: String, state: WorkflowState },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("malformed session log line {line}: {reason}")]
    Log { line: usize, reason: String },
    #[error("replay diverged from the recorded log at record {0}")]
    Diverged(u64),
}

/// Accepted nearby-object offset that later siblings inherit.
#[derive(Debug, Clone, PartialEq)]
struct CarriedOffset {
    parent_id: Option<String>,
    after_sequence: u32,
    offset: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct Session {
    header: SessionHeader,
    repo: BimRepository,
    world: GroundTruthWorld,
    state: WorkflowState,
    robot: RobotState,
    clock: f64,
    rng: ChaCha8Rng,
    current_target: Option<String>,
    pending_report: Option<DeviationReport>,
    pending_suggestion: Option<AdaptationSuggestion>,
    approved_pose: Option<Pose>,
    pending_plan: Option<MotionPlan>,
    replan_requested: bool,
    replans: u32,
    execution: Option<Execution>,
    execution_started: f64,
    last_report: Option<ExecutionReport>,
    carried: Vec<CarriedOffset>,
    outcomes: Vec<TargetOutcome>,
    checkpoints: Vec<String>,
    human_decisions: u32,
    robot_seconds: f64,
    log: Vec<LogRecord>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the xor of both inputs
    let mut z = (a ^ b.rotate_left(32)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Session {
    pub fn new(scenario: ScenarioDocument, seed: u64, policy: Policy) -> Result<Self, WorkflowError> {
        Self::with_replan_cap(scenario, seed, policy, 5)
    }

    /// `replan_cap` bounds replans per target; one more sends the session
    /// to manual resolution.
    pub fn with_replan_cap(
        scenario: ScenarioDocument,
        seed: u64,
        policy: Policy,
        replan_cap: u32,
    ) -> Result<Self, WorkflowError> {
        let repo = BimRepository::from_document(&scenario)?;
        let world = GroundTruthWorld::from_repository(&repo);
        let robot = RobotState::at_rest(repo.workcell.home, 0.0);
        let header = SessionHeader { schema_version: LOG_SCHEMA_VERSION, seed, policy, replan_cap, scenario };
        let mut s = Self {
            repo,
            world,
            state: WorkflowState::Idle,
            robot,
            clock: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            current_target: None,
            pending_report: None,
            pending_suggestion: None,
            approved_pose: None,
            pending_plan: None,
            replan_requested: false,
            replans: 0,
            execution: None,
            execution_started: 0.0,
            last_report: None,
            carried: vec![],
            outcomes: vec![],
            checkpoints: vec![],
            human_decisions: 0,
            robot_seconds: 0.0,
            log: vec![],
            header: header.clone(),
        };
        s.record(LogEntry::Header(Box::new(header)));
        Ok(s)
    }

    pub fn state(&self) -> WorkflowState {
        self.state
    }

    pub fn repo(&self) -> &BimRepository {
        &self.repo
    }

    pub fn world(&self) -> &GroundTruthWorld {
        &self.world
    }

    pub fn robot(&self) -> &RobotState {
        &self.robot
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn current_target(&self) -> Option<&str> {
        self.current_target.as_deref()
    }

    pub fn pending_suggestion(&self) -> Option<&AdaptationSuggestion> {
        self.pending_suggestion.as_ref()
    }

    pub fn pending_plan(&self) -> Option<&MotionPlan> {
        self.pending_plan.as_ref()
    }

    pub fn last_report(&self) -> Option<&ExecutionReport> {
        self.last_report.as_ref()
    }

    pub fn outcomes(&self) -> &[TargetOutcome] {
        &self.outcomes
    }

    pub fn checkpoints(&self) -> &[String] {
        &self.checkpoints
    }

    pub fn human_decisions(&self) -> u32 {
        self.human_decisions
    }

    pub fn robot_seconds(&self) -> f64 {
        self.robot_seconds
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn events(&self) -> impl Iterator<Item = &WorkflowEvent> {
        self.log.iter().filter_map(|r| match &r.entry {
            LogEntry::Event(e) => Some(e),
            _ => None,
        })
    }

    /// The log as newline-delimited JSON.
    pub fn log_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("log records always serialize"));
            out.push('\n');
        }
        out
    }

    fn record(&mut self, entry: LogEntry) {
        let seq = self.log.len() as u64;
        self.log.push(LogRecord { seq, time: self.clock, entry });
    }

    fn emit(&mut self, event: WorkflowEvent) {
        self.record(LogEntry::Event(event));
    }

    fn transition(&mut self, to: WorkflowState) {
        let from = self.state;
        self.state = to;
        self.emit(WorkflowEvent::StateChanged { from, to });
    }

    fn billboard(&mut self, text: impl Into<String>) {
        self.emit(WorkflowEvent::BillboardMessage { text: text.into() });
    }

    fn fail_to_manual(&mut self, description: String) {
        self.emit(WorkflowEvent::Error { description });
        self.transition(WorkflowState::ManualResolution);
    }

    fn reject(&mut self, input: SessionInput, reason: String) -> Result<(), WorkflowError> {
        let state = self.state;
        let label = match &input {
            SessionInput::Command { command } => command.name().to_string(),
            other => format!("{other:?}").to_lowercase(),
        };
        self.emit(WorkflowEvent::CommandRejected { input, state, reason });
        Err(WorkflowError::Illegal { input: label, state })
    }

    /// Applies one input; rejected inputs are logged and leave the session
    /// otherwise untouched.
    pub fn apply(&mut self, input: SessionInput) -> Result<(), WorkflowError> {
        self.record(LogEntry::Input(input.clone()));
        match input {
            SessionInput::Start => self.on_start(),
            SessionInput::Step => self.on_step(),
            SessionInput::Command { command } => self.on_command(command),
            SessionInput::SafetyInterrupt => self.on_interrupt(),
        }
    }

    pub fn start(&mut self) -> Result<(), WorkflowError> {
        self.apply(SessionInput::Start)
    }

    pub fn step(&mut self) -> Result<(), WorkflowError> {
        self.apply(SessionInput::Step)
    }

    pub fn handle(&mut self, command: SupervisorCommand) -> Result<(), WorkflowError> {
        self.apply(SessionInput::Command { command })
    }

    pub fn safety_interrupt(&mut self) -> Result<(), WorkflowError> {
        self.apply(SessionInput::SafetyInterrupt)
    }

    fn on_start(&mut self) -> Result<(), WorkflowError> {
        if self.state != WorkflowState::Idle {
            return self.reject(SessionInput::Start, "session already started".into());
        }
        self.transition(WorkflowState::Scanning);
        self.billboard("scanning the environment");
        let bindings = bindings_from(&self.repo);
        if bindings.is_empty() {
            self.billboard("no markers visible; proceeding with design poses");
        }
        let noise = NoiseModel { seed: mix(self.header.seed, self.repo.noise_model.seed), ..self.repo.noise_model.clone() };
        match scan_environment(&self.world, &bindings, &noise) {
            Ok(detections) => {
                for d in detections {
                    let result = match &d.metadata {
                        Some(meta) => {
                            let pitch = self.repo.stack(&d.object_id).map_or(0.0, |s| s.item_vertical_pitch);
                            infer_stack(&d.object_id, meta, d.pose, pitch)
                                .map_err(|e| e.to_string())
                                .and_then(|s| self.repo.update_stack(&s, self.clock).map_err(|e| e.to_string()))
                        }
                        None => self.repo.record_scan(&d.object_id, d.pose, self.clock).map_err(|e| e.to_string()),
                    };
                    match result {
                        Ok(()) => self.emit(WorkflowEvent::AsBuiltUpdated { object_id: d.object_id, pose: d.pose }),
                        Err(e) => self.emit(WorkflowEvent::Error { description: e }),
                    }
                }
            }
            Err(e) => self.emit(WorkflowEvent::Error { description: e.to_string() }),
        }
        self.transition(WorkflowState::FetchTarget);
        Ok(())
    }

    fn on_step(&mut self) -> Result<(), WorkflowError> {
        match self.state {
            WorkflowState::FetchTarget => self.fetch_target(),
            WorkflowState::DeviationAnalysis => self.analyze(),
            WorkflowState::Planning => self.plan(),
            WorkflowState::Executing => self.advance_execution(),
            WorkflowState::RecordingAsBuilt => self.record_as_built(),
            WorkflowState::Checkpointing => {
                self.checkpoint();
                self.transition(WorkflowState::TaskComplete);
                self.emit(WorkflowEvent::TaskFinished);
            }
            state => {
                return self.reject(SessionInput::Step, format!("{state:?} waits for a supervisor decision"));
            }
        }
        Ok(())
    }

    fn reset_target(&mut self) {
        self.current_target = None;
        self.pending_report = None;
        self.pending_suggestion = None;
        self.approved_pose = None;
        self.pending_plan = None;
        self.replan_requested = false;
        self.replans = 0;
        self.execution = None;
    }

    fn propose(&mut self, target_id: String) {
        self.current_target = Some(target_id.clone());
        self.emit(WorkflowEvent::TargetProposed { target_id: target_id.clone(), highlight: true });
        self.billboard(format!("please confirm target {target_id}"));
    }

    fn fetch_target(&mut self) {
        self.reset_target();
        match self.repo.next_target().map(|t| t.id.clone()) {
            Some(id) => {
                self.transition(WorkflowState::AwaitTargetConfirm);
                self.propose(id);
            }
            None => {
                self.billboard("no target left in the queue");
                self.transition(WorkflowState::Checkpointing);
            }
        }
    }

    fn carry_for(&self, target_id: &str) -> Vector3<f64> {
        let Some(t) = self.repo.object(target_id) else { return Vector3::zeros() };
        let seq = t.sequence_index.unwrap_or(0);
        self.carried
            .iter()
            .filter(|c| c.parent_id == t.relationship.parent_id && seq > c.after_sequence)
            .map(|c| c.offset)
            .sum()
    }

    fn analyze(&mut self) {
        let id = self.current_target.clone().expect("analysis always has a target");
        let carry = self.carry_for(&id);
        self.billboard(format!("checking deviations around {id}"));
        match analyze_target(&self.repo, &id, &self.repo.workcell.adaptation, &carry) {
            Ok((report, suggestion)) => {
                if report.kind == DeviationKind::None {
                    self.approved_pose = Some(suggestion.suggested_pose);
                    self.billboard("no deviation: using the installation pose from the model");
                    self.transition(WorkflowState::Planning);
                } else {
                    self.pending_report = Some(report.clone());
                    self.pending_suggestion = Some(suggestion.clone());
                    self.emit(WorkflowEvent::DeviationFound { report, suggestion });
                    self.transition(WorkflowState::AwaitAdaptationDecision);
                }
            }
            Err(e @ (AdaptError::NotScanned { .. } | AdaptError::Unsolvable { .. })) => self.fail_to_manual(e.to_string()),
            Err(e) => self.fail_to_manual(e.to_string()),
        }
    }

    /// Believed collision scene for picking the top item of `stack_id`:
    /// everything built, stored or virtual, plus designed objects that have
    /// not been scanned, minus the item about to be picked.
    pub fn planning_scene(&self, stack_id: &str) -> Vec<Obb> {
        let mut scene = Vec::new();
        for o in self.repo.objects() {
            let include = match o.layer {
                Layer::AsBuilt | Layer::Materials | Layer::VirtualCollision => true,
                Layer::AsDesigned => self.repo.as_built_of(&o.id).is_none(),
                Layer::Target => false,
            };
            if include {
                scene.extend(o.world_boxes());
            }
        }
        for s in self.repo.stacks() {
            let keep = if s.id == stack_id { s.quantity.saturating_sub(1) } else { s.quantity };
            for i in 0..keep {
                scene.extend(place_boxes(&s.boxes, &s.item_pose(i)));
            }
        }
        scene
    }

    fn plan(&mut self) {
        let id = self.current_target.clone().expect("planning always has a target");
        let place = self.approved_pose.expect("planning always has an approved pose");
        let workpiece = self.repo.object(&id).map(|t| t.workpiece_type.clone()).unwrap_or_default();
        let Some(stack) = self.repo.stack_for(&workpiece).cloned() else {
            self.fail_to_manual(format!("no material of type '{workpiece}' left"));
            return;
        };
        let scene = self.planning_scene(&stack.id);
        let request = PickPlaceRequest {
            payload: PayloadSpec {
                object_id: id.clone(),
                boxes: stack.boxes.clone(),
                grip: stack.grip_indicator,
                stack_id: Some(stack.id.clone()),
            },
            pick: stack.top_item_pose().expect("stack_for only returns non-empty stacks"),
            place,
        };
        self.billboard("calculating the motion plan");
        let seed = self.rng.next_u64();
        let cell = &self.repo.workcell;
        let result = match (&self.pending_plan, self.replan_requested) {
            (Some(prev), true) if prev.waypoints[0] == self.robot.end_effector_pose && prev.request == request => {
                replan(prev, &scene, cell, seed)
            }
            _ => plan_pick_and_place(&self.robot, &request, &scene, cell, seed),
        };
        self.replan_requested = false;
        match result {
            Ok(plan) => {
                let duration = plan.waypoints.windows(2).map(|w| cell.segment_duration(&w[0], &w[1])).sum();
                let summary = PlanSummary {
                    plan_id: plan.plan_id.clone(),
                    target_id: id,
                    strategy: plan.strategy,
                    waypoint_count: plan.waypoints.len(),
                    path_length: plan.path_length(),
                    carry_length: plan.carry_length(),
                    straight_distance: plan.straight_distance(),
                    duration,
                    place_pose: place,
                };
                self.pending_plan = Some(plan);
                self.emit(WorkflowEvent::PlanReady { summary });
                self.transition(WorkflowState::AwaitPlanApproval);
            }
            Err(e) => {
                self.pending_plan = None;
                self.fail_to_manual(format!("planning failed: {e}"));
            }
        }
    }

    fn advance_execution(&mut self) {
        let exec = self.execution.as_mut().expect("executing always has an execution");
        if let Some(state) = exec.step() {
            self.clock = state.time;
            self.robot = state.clone();
            self.emit(WorkflowEvent::ExecutionState { state });
        }
        let exec = self.execution.as_ref().expect("still present");
        let Some(report) = exec.report().cloned() else { return };
        let plan = exec.plan().clone();
        self.robot.payload = None;
        self.robot.gripper = GripperState::Open;
        self.robot_seconds += report.end_time - self.execution_started;
        self.last_report = Some(report.clone());
        self.emit(WorkflowEvent::ExecutionFinished { report: report.clone() });
        match &report.outcome {
            ExecutionOutcome::Completed { .. } => self.transition(WorkflowState::RecordingAsBuilt),
            ExecutionOutcome::Contact { obstacle_id, cause, segment } => {
                // the part is lost once it has been picked
                if *segment >= plan.payload_segment.0 {
                    if let Some(sid) = &plan.request.payload.stack_id {
                        let _ = self.repo.consume_material(sid);
                        if let Some(s) = self.world.stacks.get_mut(sid) {
                            s.quantity = s.quantity.saturating_sub(1);
                        }
                    }
                }
                let id = self.current_target.clone().unwrap_or_default();
                self.outcomes.push(TargetOutcome {
                    target_id: id,
                    placed: false,
                    manual: false,
                    failure: Some(cause.clone()),
                    replans: self.replans,
                    suggestion: self.pending_report.as_ref().map(|r| r.kind),
                });
                self.execution = None;
                self.fail_to_manual(format!("contact with {obstacle_id}: {}", cause.tag()));
            }
        }
    }

    fn record_as_built(&mut self) {
        let id = self.current_target.clone().expect("recording always has a target");
        let manual = self.repo.object(&id).is_some_and(|t| !t.status.is_pending());
        let pose;
        if manual {
            let copy = self.repo.as_built_of(&id).expect("manual resolution adds an as-built copy");
            pose = copy.pose;
            let body = TrueBody { pose, boxes: copy.boxes.clone(), workpiece_type: copy.workpiece_type.clone() };
            self.world.bodies.insert(as_built_id(&id), body);
        } else {
            let report = self.last_report.clone().expect("recording follows an execution");
            let plan = self.pending_plan.clone().expect("recording follows a plan");
            pose = plan.request.place;
            let ExecutionOutcome::Completed { achieved_pose } = report.outcome else {
                unreachable!("only completed executions are recorded")
            };
            if let Err(e) = self.repo.record_as_built(&id, pose, self.clock) {
                self.fail_to_manual(e.to_string());
                return;
            }
            if let Some(sid) = &plan.request.payload.stack_id {
                let _ = self.repo.consume_material(sid);
                if let Some(s) = self.world.stacks.get_mut(sid) {
                    s.quantity = s.quantity.saturating_sub(1);
                }
            }
            let t = self.repo.object(&id).expect("recorded target exists");
            let body = TrueBody { pose: achieved_pose, boxes: t.boxes.clone(), workpiece_type: t.workpiece_type.clone() };
            self.world.bodies.insert(as_built_id(&id), body);
        }
        self.outcomes.push(TargetOutcome {
            target_id: id.clone(),
            placed: true,
            manual,
            failure: None,
            replans: self.replans,
            suggestion: self.pending_report.as_ref().map(|r| r.kind),
        });
        self.emit(WorkflowEvent::TargetCompleted { target_id: id, pose });
        self.transition(WorkflowState::FetchTarget);
    }

    fn checkpoint(&mut self) {
        self.checkpoints.push(self.repo.export_checkpoint());
        self.emit(WorkflowEvent::CheckpointSaved {
            as_built_records: self.repo.as_built_records().len(),
            scan_records: self.repo.scan_records().len(),
        });
    }

    fn on_interrupt(&mut self) -> Result<(), WorkflowError> {
        if self.state != WorkflowState::Executing {
            return self.reject(SessionInput::SafetyInterrupt, "robot is not moving".into());
        }
        let exec = self.execution.as_mut().expect("executing always has an execution");
        match exec.interrupt() {
            Ok(state) => {
                self.robot = state.clone();
                self.emit(WorkflowEvent::SafetyTriggered);
                self.emit(WorkflowEvent::ExecutionState { state });
                self.transition(WorkflowState::SafetyHold);
                self.billboard("person detected in the work cell: confirm safety to resume");
                Ok(())
            }
            Err(e) => self.reject(SessionInput::SafetyInterrupt, e.to_string()),
        }
    }

    fn on_command(&mut self, command: SupervisorCommand) -> Result<(), WorkflowError> {
        use SupervisorCommand as C;
        use WorkflowState as S;
        if !command.legal_in(self.state) {
            let reason = format!("{} is not accepted while {:?}", command.name(), self.state);
            return self.reject(SessionInput::Command { command }, reason);
        }
        if !matches!(command, C::RequestCheckpoint) {
            self.human_decisions += 1;
        }
        match (self.state, command) {
            (_, C::RequestCheckpoint) => self.checkpoint(),
            (_, C::Abort) => {
                if let Some(id) = self.current_target.clone() {
                    if self.outcomes.last().map(|o| &o.target_id) != Some(&id) {
                        self.outcomes.push(TargetOutcome {
                            target_id: id,
                            placed: false,
                            manual: false,
                            failure: None,
                            replans: self.replans,
                            suggestion: self.pending_report.as_ref().map(|r| r.kind),
                        });
                    }
                }
                self.execution = None;
                self.transition(S::Aborted);
            }
            (S::AwaitTargetConfirm, C::ConfirmTarget) => self.transition(S::DeviationAnalysis),
            (_, C::SelectTarget { target_id }) => {
                let ok = self.repo.object(&target_id).is_some_and(|t| t.is_target() && t.status.is_pending());
                if !ok {
                    let reason = format!("'{target_id}' is not a pending target");
                    return self.reject(SessionInput::Command { command: C::SelectTarget { target_id } }, reason);
                }
                self.reset_target();
                if self.state != S::AwaitTargetConfirm {
                    self.transition(S::AwaitTargetConfirm);
                }
                self.propose(target_id);
            }
            (S::AwaitAdaptationDecision, C::AcceptSuggestion) => {
                let s = self.pending_suggestion.clone().expect("decision state has a suggestion");
                if s.affects_subsequent {
                    if let (Some(offset), Some(t)) = (s.offset, self.repo.object(&s.target_id)) {
                        self.carried.push(CarriedOffset {
                            parent_id: t.relationship.parent_id.clone(),
                            after_sequence: t.sequence_index.unwrap_or(0),
                            offset: Vector3::from(offset),
                        });
                    }
                }
                self.approved_pose = Some(s.suggested_pose);
                self.transition(S::Planning);
            }
            (S::AwaitAdaptationDecision, C::AdjustPose { pose }) => {
                let id = self.current_target.clone().expect("decision state has a target");
                let t = self.repo.object(&id).expect("current target exists");
                let scene = nearby_scene(&self.repo, t);
                let intruders = check_nearby(&pose, &t.boxes, &scene, self.repo.workcell.adaptation.nearby_clearance);
                if !intruders.is_empty() {
                    let reason = format!("adjusted pose collides with {}", intruders.join(", "));
                    return self.reject(SessionInput::Command { command: C::AdjustPose { pose } }, reason);
                }
                self.approved_pose = Some(pose);
                self.transition(S::Planning);
            }
            (S::AwaitAdaptationDecision, C::KeepOriginal) => {
                let id = self.current_target.clone().expect("decision state has a target");
                self.approved_pose = self.repo.object(&id).map(|t| t.pose);
                self.transition(S::Planning);
            }
            (S::AwaitAdaptationDecision | S::ManualResolution, C::ManualResolve { replacement }) => {
                let Some(id) = self.current_target.clone() else {
                    let reason = "no current target to resolve".to_string();
                    return self.reject(SessionInput::Command { command: C::ManualResolve { replacement } }, reason);
                };
                match apply_manual_replacement(&mut self.repo, &id, replacement.boxes.clone(), replacement.pose) {
                    Ok(()) => self.transition(S::RecordingAsBuilt),
                    Err(e) => {
                        let reason = e.to_string();
                        return self.reject(SessionInput::Command { command: C::ManualResolve { replacement } }, reason);
                    }
                }
            }
            (S::AwaitPlanApproval, C::RequestPreview) => {
                let plan = self.pending_plan.clone().expect("approval state has a plan");
                self.transition(S::Previewing);
                let cell = &self.repo.workcell;
                let mut times = vec![0.0];
                for w in plan.waypoints.windows(2) {
                    times.push(times.last().unwrap() + cell.segment_duration(&w[0], &w[1]));
                }
                self.emit(WorkflowEvent::PreviewFrames {
                    plan_id: plan.plan_id.clone(),
                    waypoints: plan.waypoints.clone(),
                    times,
                    payload_segment: plan.payload_segment,
                });
                self.transition(S::AwaitPlanApproval);
            }
            (S::AwaitPlanApproval, C::ApprovePlan) => {
                let plan = self.pending_plan.clone().expect("approval state has a plan");
                match Execution::start(&plan, &self.world, &self.repo.workcell, self.clock) {
                    Ok(exec) => {
                        self.execution = Some(exec);
                        self.execution_started = self.clock;
                        self.transition(S::Executing);
                        self.billboard(format!("executing {}", plan.plan_id));
                    }
                    Err(e) => self.fail_to_manual(e.to_string()),
                }
            }
            (S::AwaitPlanApproval, C::RequestReplan) => {
                self.replans += 1;
                if self.replans > self.header.replan_cap {
                    self.fail_to_manual(format!("replan limit of {} reached", self.header.replan_cap));
                } else {
                    self.replan_requested = true;
                    self.transition(S::Planning);
                }
            }
            (S::ManualResolution, C::RequestReplan) => {
                if self.current_target.is_none() || self.approved_pose.is_none() {
                    let reason = "nothing to replan".to_string();
                    return self.reject(SessionInput::Command { command: C::RequestReplan }, reason);
                }
                self.replans = 0;
                self.replan_requested = true;
                self.transition(S::Planning);
            }
            (S::SafetyHold, C::ConfirmSafety) => {
                let exec = self.execution.as_mut().expect("hold always has an execution");
                exec.resume(Some(&SafetyConfirmation::confirmed_by("supervisor")))
                    .expect("execution is held");
                self.transition(S::Executing);
            }
            (state, command) => unreachable!("legality table admitted {command:?} in {state:?}"),
        }
        Ok(())
    }

    /// The decision an auto-approving supervisor takes in the current state.
    pub fn auto_command(&self, rules: &AutoRules) -> Option<SupervisorCommand> {
        match self.state {
            WorkflowState::AwaitTargetConfirm => Some(SupervisorCommand::ConfirmTarget),
            WorkflowState::AwaitAdaptationDecision => Some(SupervisorCommand::AcceptSuggestion),
            WorkflowState::AwaitPlanApproval => {
                let plan = self.pending_plan.as_ref()?;
                let detour = plan.carry_length() > rules.replan_ratio * plan.straight_distance();
                if detour && self.replans < rules.max_replans {
                    Some(SupervisorCommand::RequestReplan)
                } else {
                    Some(SupervisorCommand::ApprovePlan)
                }
            }
            WorkflowState::SafetyHold => Some(SupervisorCommand::ConfirmSafety),
            _ => None,
        }
    }

    /// Drives the session with `rules` until it completes, aborts or needs
    /// manual resolution. `max_inputs` bounds the number of inputs applied.
    pub fn run_auto(&mut self, rules: &AutoRules, max_inputs: usize) {
        if self.state == WorkflowState::Idle {
            let _ = self.start();
        }
        for _ in 0..max_inputs {
            if self.state.is_terminal() || self.state == WorkflowState::ManualResolution {
                return;
            }
            if self.state.is_autonomous() {
                let _ = self.step();
            } else if let Some(cmd) = self.auto_command(rules) {
                let _ = self.handle(cmd);
            } else {
                return;
            }
        }
    }
}

/// Parses an NDJSON session log.
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, WorkflowError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| WorkflowError::Log { line: i + 1, reason: e.to_string() })
        })
        .collect()
}

/// Rebuilds a session from the header and inputs of a log. With `verify`,
/// the regenerated log must match the recorded one record for record.
pub fn replay(records: &[LogRecord], verify: bool) -> Result<Session, WorkflowError> {
    let Some(LogRecord { entry: LogEntry::Header(header), .. }) = records.first() else {
        return Err(WorkflowError::Log { line: 1, reason: "log does not start with a header".into() });
    };
    if header.schema_version != LOG_SCHEMA_VERSION {
        return Err(WorkflowError::Log {
            line: 1,
            reason: format!("unsupported schema_version {}", header.schema_version),
        });
    }
    let mut session =
        Session::with_replan_cap(header.scenario.clone(), header.seed, header.policy.clone(), header.replan_cap)?;
    for r in &records[1..] {
        if let LogEntry::Input(input) = &r.entry {
            let _ = session.apply(input.clone());
        }
    }
    if verify {
        if let Some(i) = (0..records.len().max(session.log.len()))
            .find(|&i| records.get(i) != session.log.get(i))
        {
            return Err(WorkflowError::Diverged(i as u64));
        }
    }
    Ok(session)
}
