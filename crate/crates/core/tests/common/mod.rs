//! Independent oracles and drivers shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use bimtwin_core::geometry::{swept_collides, Obb, Pose, RigidTransform};
use bimtwin_core::workflow::{
    AutoRules, LogEntry, ManualReplacement, Session, SessionInput, SupervisorCommand, WorkflowEvent, WorkflowState,
};

pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    // uniform on SO(3) via a normalised Gaussian quaternion
    loop {
        let q = nalgebra::Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

pub fn random_transform(rng: &mut ChaCha8Rng, reach: f64) -> RigidTransform {
    let t = Vector3::new(rng.gen_range(-reach..reach), rng.gen_range(-reach..reach), rng.gen_range(-reach..reach));
    RigidTransform::new(random_rotation(rng), t)
}

/// Homogeneous 4x4 product, computed without the library's composition.
pub fn matrix_compose(a: &RigidTransform, b: &RigidTransform) -> (Matrix3<f64>, Vector3<f64>) {
    let ra = *a.rotation.to_rotation_matrix().matrix();
    let rb = *b.rotation.to_rotation_matrix().matrix();
    (ra * rb, ra * b.translation + a.translation)
}

pub fn matrix_inverse(a: &RigidTransform) -> RigidTransform {
    let r = a.rotation.to_rotation_matrix();
    let rt = r.transpose();
    RigidTransform::new(UnitQuaternion::from_rotation_matrix(&rt), -(rt * a.translation))
}

/// Largest entry-wise difference between two rigid transforms given as
/// (rotation matrix, translation).
pub fn transform_gap(a: (Matrix3<f64>, Vector3<f64>), b: (Matrix3<f64>, Vector3<f64>)) -> f64 {
    (a.0 - b.0).abs().max().max((a.1 - b.1).abs().max())
}

fn inside(b: &Obb, p: &Vector3<f64>) -> bool {
    let r = b.center.orientation.to_rotation_matrix();
    let local = r.transpose() * (p - b.center.position);
    (0..3).all(|i| local[i].abs() <= b.half_extents[i])
}

fn grid_hits(a: &Obb, b: &Obb, step: f64) -> bool {
    let r = a.center.orientation.to_rotation_matrix();
    let n = a.half_extents.map(|h| ((2.0 * h / step).ceil() as usize).max(1));
    for i in 0..=n.x {
        for j in 0..=n.y {
            for k in 0..=n.z {
                let local = Vector3::new(
                    -a.half_extents.x + 2.0 * a.half_extents.x * i as f64 / n.x as f64,
                    -a.half_extents.y + 2.0 * a.half_extents.y * j as f64 / n.y as f64,
                    -a.half_extents.z + 2.0 * a.half_extents.z * k as f64 / n.z as f64,
                );
                if inside(b, &(a.center.position + r * local)) {
                    return true;
                }
            }
        }
    }
    false
}

/// Point-sampling intersection oracle: grids of spacing at most `step` over
/// both boxes (faces included) tested for containment in the other box.
pub fn sampled_intersects(a: &Obb, b: &Obb, step: f64) -> bool {
    grid_hits(a, b, step) || grid_hits(b, a, step)
}

pub fn random_obb(rng: &mut ChaCha8Rng, spread: f64, min_half: f64, max_half: f64) -> Obb {
    let c = Vector3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread));
    let h = Vector3::new(
        rng.gen_range(min_half..max_half),
        rng.gen_range(min_half..max_half),
        rng.gen_range(min_half..max_half),
    );
    Obb::new(Pose::new(c, random_rotation(rng)), h)
}

fn resized(b: &Obb, margin: f64) -> Obb {
    Obb::new(b.center, b.half_extents.add_scalar(margin))
}

/// Draws a box pair whose answer the 1 mm oracle decides robustly: growing
/// or shrinking both boxes by `step` does not change the sampled answer.
pub fn decidable_pair(rng: &mut ChaCha8Rng, step: f64) -> (Obb, Obb, bool) {
    loop {
        let a = random_obb(rng, 0.02, 0.004, 0.02);
        let b = random_obb(rng, 0.02, 0.004, 0.02);
        let shrunk = sampled_intersects(&resized(&a, -step), &resized(&b, -step), step);
        let grown = sampled_intersects(&resized(&a, step), &resized(&b, step), step);
        if shrunk == grown {
            return (a, b, sampled_intersects(&a, &b, step));
        }
    }
}

/// Re-checks every segment of the pending plan against the believed scene
/// it was planned in.
pub fn recheck_pending_plan(session: &Session) -> Result<(), String> {
    let plan = session.pending_plan().ok_or("no pending plan")?;
    let stack = plan.request.payload.stack_id.clone().ok_or("plan without stack")?;
    let scene = session.planning_scene(&stack);
    let gripper = &session.repo().workcell.gripper;
    for i in 0..plan.waypoints.len() - 1 {
        let body = plan.segment_body(i, gripper);
        let hit = swept_collides(&plan.waypoints[i..=i + 1], &body, &scene, plan.checked_step)
            .map_err(|e| e.to_string())?;
        if let Some(c) = hit {
            return Err(format!("{} segment {i} hits scene box {}", plan.plan_id, c.scene_index));
        }
    }
    Ok(())
}

/// Drives `session` like `run_auto`, re-checking each plan before approval.
/// Returns the number of plans checked.
pub fn run_auto_checked(session: &mut Session, rules: &AutoRules) -> Result<usize, String> {
    let mut checked = 0;
    if session.state() == WorkflowState::Idle {
        let _ = session.start();
    }
    for _ in 0..1_000_000 {
        let state = session.state();
        if state.is_terminal() || state == WorkflowState::ManualResolution {
            return Ok(checked);
        }
        if state.is_autonomous() {
            let _ = session.step();
        } else {
            let cmd = session.auto_command(rules).ok_or("policy has no decision")?;
            if cmd == SupervisorCommand::ApprovePlan {
                recheck_pending_plan(session)?;
                checked += 1;
            }
            let _ = session.handle(cmd);
        }
    }
    Err("input budget exhausted".into())
}

/// Every entry into Executing must be caused by the most recent input, and
/// that input must be ApprovePlan (from plan approval) or ConfirmSafety
/// (resuming an approved execution from a safety hold).
pub fn audit_safety_gate(session: &Session) -> Result<usize, String> {
    let mut last_input: Option<&SessionInput> = None;
    let mut entries = 0;
    for r in session.log() {
        match &r.entry {
            LogEntry::Input(i) => last_input = Some(i),
            LogEntry::Event(WorkflowEvent::StateChanged { from, to: WorkflowState::Executing }) => {
                entries += 1;
                let cmd = match last_input {
                    Some(SessionInput::Command { command }) => command,
                    other => return Err(format!("record {}: Executing entered after {other:?}", r.seq)),
                };
                let ok = matches!(
                    (from, cmd),
                    (WorkflowState::AwaitPlanApproval, SupervisorCommand::ApprovePlan)
                        | (WorkflowState::SafetyHold, SupervisorCommand::ConfirmSafety)
                );
                if !ok {
                    return Err(format!("record {}: Executing entered from {from:?} by {cmd:?}", r.seq));
                }
            }
            _ => {}
        }
    }
    Ok(entries)
}

pub fn random_command(rng: &mut ChaCha8Rng, session: &Session) -> SupervisorCommand {
    let ids = ["block-0", "block-1", "block-2", "block-3", "ground", "stud", "nope"];
    let near = |rng: &mut ChaCha8Rng| {
        let base = session.repo().object("block-1").map(|o| o.pose).unwrap_or_else(Pose::identity);
        base.translated(&Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(0.0..0.02)))
    };
    match rng.gen_range(0..12) {
        0 => SupervisorCommand::ConfirmTarget,
        1 => SupervisorCommand::SelectTarget { target_id: ids[rng.gen_range(0..ids.len())].into() },
        2 => SupervisorCommand::AcceptSuggestion,
        3 => SupervisorCommand::AdjustPose { pose: near(rng) },
        4 => SupervisorCommand::KeepOriginal,
        5 => SupervisorCommand::ManualResolve {
            replacement: ManualReplacement {
                boxes: vec![Obb::axis_aligned(Vector3::zeros(), Vector3::new(0.03, 0.09, 0.045))],
                pose: near(rng),
            },
        },
        6 => SupervisorCommand::RequestPreview,
        7 => SupervisorCommand::ApprovePlan,
        8 => SupervisorCommand::RequestReplan,
        9 => SupervisorCommand::ConfirmSafety,
        10 => SupervisorCommand::RequestCheckpoint,
        _ => {
            if rng.gen_bool(0.2) {
                SupervisorCommand::Abort
            } else {
                SupervisorCommand::ApprovePlan
            }
        }
    }
}

/// Applies one random input. Rejected inputs must leave the state and the
/// repository untouched.
pub fn fuzz_input(rng: &mut ChaCha8Rng, session: &mut Session) -> Result<bool, String> {
    let input = match rng.gen_range(0..20) {
        0..=7 => SessionInput::Step,
        8 => SessionInput::SafetyInterrupt,
        9 => SessionInput::Start,
        _ => SessionInput::Command { command: random_command(rng, session) },
    };
    let before_state = session.state();
    let before_repo = session.repo().clone();
    let is_command = matches!(input, SessionInput::Command { .. });
    if session.apply(input.clone()).is_err() && (session.state() != before_state || *session.repo() != before_repo) {
        return Err(format!("rejected {input:?} changed the session"));
    }
    Ok(is_command)
}

/// Runs like `run_auto` but trips the safety curtain on the `at_tick`-th
/// execution step and resumes after the hold. Returns the time gap between
/// the interrupt and the last motion state before it, in ticks.
pub fn run_with_interrupt(session: &mut Session, rules: &AutoRules, at_tick: usize) -> Result<f64, String> {
    let _ = session.start();
    let tick = session.repo().workcell.tick;
    let mut ticks = 0;
    let mut lag = None;
    for _ in 0..1_000_000 {
        let state = session.state();
        if state.is_terminal() || state == WorkflowState::ManualResolution {
            return lag.ok_or_else(|| "the run never reached the interrupt tick".to_string());
        }
        if state == WorkflowState::Executing {
            ticks += 1;
            if ticks == at_tick {
                let before = session.robot().time;
                session.safety_interrupt().map_err(|e| e.to_string())?;
                if session.state() != WorkflowState::SafetyHold {
                    return Err(format!("interrupt left the session in {:?}", session.state()));
                }
                lag = Some((session.robot().time - before) / tick);
                let _ = session.step();
                if session.state() != WorkflowState::SafetyHold {
                    return Err("a step moved the robot during the hold".into());
                }
                continue;
            }
        }
        if state.is_autonomous() {
            let _ = session.step();
        } else {
            let cmd = session.auto_command(rules).ok_or("policy has no decision")?;
            let _ = session.handle(cmd);
        }
    }
    Err("input budget exhausted".into())
}

/// For each installed panel, the largest deviation of
/// `inv(T_B) * T_t` from `inv(T_D) * D_t`, where T_D/T_B are the designed
/// and scanned frame and D_t/T_t the designed and installed panel.
pub fn drywall_identity_errors(session: &Session) -> Vec<(String, f64)> {
    let repo = session.repo();
    let t_d = repo.object("frame").unwrap().pose.to_transform();
    let t_b = repo.as_built_of("frame").unwrap().pose.to_transform();
    repo.as_built_records()
        .iter()
        .map(|r| {
            let d_t = repo.object(&r.target_id).unwrap().pose.to_transform();
            let lhs = matrix_compose(&matrix_inverse(&t_b), &r.pose.to_transform());
            let rhs = matrix_compose(&matrix_inverse(&t_d), &d_t);
            (r.target_id.clone(), transform_gap(lhs, rhs))
        })
        .collect()
}
