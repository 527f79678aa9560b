use thiserror::Error;

use super::{obb_intersects, Obb, Pose};

/// First contact found along a swept path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Collision {
    /// Index of the path segment (its starting waypoint) where contact occurs.
    pub path_index: usize,
    /// Index into the scene slice.
    pub scene_index: usize,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SweepError {
    #[error("sweep step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("sweep path is empty")]
    EmptyPath,
}

/// Number of interpolation intervals used for one segment.
///
/// Always a power of two so that the sample set at a coarse step is a
/// subset of the sample set at any finer step.
pub fn sample_count(from: &Pose, to: &Pose, body_radius: f64, step: f64) -> usize {
    let (lin, ang) = from.distance(to);
    let travel = lin.max(ang * body_radius);
    let needed = (travel / step).ceil().max(1.0);
    if needed >= (1u64 << 40) as f64 {
        return 1 << 40;
    }
    (needed as usize).next_power_of_two()
}

/// Checks `body` (boxes in the moving frame) along `path` against `scene`.
///
/// Positions are interpolated linearly and orientations spherically so that
/// no point of the body moves more than `step` between samples.
pub fn swept_collides(
    path: &[Pose],
    body: &[Obb],
    scene: &[Obb],
    step: f64,
) -> Result<Option<Collision>, SweepError> {
    sweep(path, body, scene, step, true)
}

pub(crate) fn sweep(
    path: &[Pose],
    body: &[Obb],
    scene: &[Obb],
    step: f64,
    include_start: bool,
) -> Result<Option<Collision>, SweepError> {
    Ok(first_contact(path, body, scene, step, include_start)?.map(|c| c.collision))
}

/// A collision together with where along its segment it was sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Contact {
    pub collision: Collision,
    /// Interpolation parameter in `[0, 1]` within the segment.
    pub fraction: f64,
}

pub(crate) fn first_contact(
    path: &[Pose],
    body: &[Obb],
    scene: &[Obb],
    step: f64,
    include_start: bool,
) -> Result<Option<Contact>, SweepError> {
    if !(step > 0.0) {
        return Err(SweepError::NonPositiveStep(step));
    }
    if path.is_empty() {
        return Err(SweepError::EmptyPath);
    }
    if body.is_empty() || scene.is_empty() {
        return Ok(None);
    }
    let body_radius = body
        .iter()
        .map(|b| b.center.position.norm() + b.bounding_radius())
        .fold(0.0, f64::max);
    let spheres: Vec<_> = scene
        .iter()
        .map(|o| (o.center.position, o.bounding_radius()))
        .collect();

    let check = |pose: &Pose, candidates: &[usize]| -> Option<usize> {
        let t = pose.to_transform();
        candidates.iter().copied().find(|&si| {
            let (c, r) = spheres[si];
            (pose.position - c).norm() <= body_radius + r
                && body.iter().any(|b| obb_intersects(&b.transformed(&t), &scene[si]))
        })
    };
    let hit = |path_index, scene_index, fraction| {
        Some(Contact { collision: Collision { path_index, scene_index }, fraction })
    };

    if path.len() == 1 {
        if !include_start {
            return Ok(None);
        }
        let all: Vec<usize> = (0..scene.len()).collect();
        return Ok(check(&path[0], &all).and_then(|si| hit(0, si, 0.0)));
    }
    for (i, pair) in path.windows(2).enumerate() {
        // broad phase: obstacles within reach of the segment's swept sphere
        let (a, b) = (pair[0].position, pair[1].position);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let candidates: Vec<usize> = (0..scene.len())
            .filter(|&si| {
                let (c, r) = spheres[si];
                let t = if len2 > 0.0 { ((c - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                (a + ab * t - c).norm() <= body_radius + r
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let n = sample_count(&pair[0], &pair[1], body_radius, step);
        let first = if i == 0 && include_start { 0 } else { 1 };
        for k in first..=n {
            let fraction = k as f64 / n as f64;
            let pose = pair[0].interpolate(&pair[1], fraction);
            if let Some(si) = check(&pose, &candidates) {
                return Ok(hit(i, si, fraction));
            }
        }
    }
    Ok(None)
}
