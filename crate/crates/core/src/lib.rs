//! Closed-loop digital twin engine for BIM-driven human-robot collaborative
//! construction.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: rigid transforms, oriented boxes, swept collision checks.
//! - [`bim`]: the layered building-information repository and its scenario
//!   document format.
//! - [`perception`]: marker-based localization with a parametric noise model.
//! - [`adaptation`]: design-vs-built deviation detection and adapted poses.
//! - [`robot`]: free end-effector planning and time-stepped execution.
//! - [`workflow`]: the supervised construction state machine and event log.
//! - [`experiment`]: the block pick-and-place harness.
//! - [`scenarios`]: bundled drywall and block scenarios.

pub mod adaptation;
pub mod bim;
pub mod experiment;
pub mod geometry;
pub mod par;
pub mod perception;
pub mod robot;
pub mod scenarios;
pub mod workflow;

pub use geometry::{Obb, Pose, RigidTransform};
