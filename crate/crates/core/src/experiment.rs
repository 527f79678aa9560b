//! The block pick-and-place experiment: many auto-approved trials per gap
//! size, aggregated into success rates, replan counts and failure causes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::DeviationKind;
use crate::par::{map_indexed, ExecutionMode};
use crate::perception::NoiseModel;
use crate::robot::ContactCause;
use crate::scenarios::{blocks, BlockOptions};
use crate::workflow::{AutoRules, Policy, Session, WorkflowEvent, WorkflowState};

/// Upper bound on inputs per trial; a four-block run needs a few hundred.
const MAX_INPUTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Designed stud-to-block gaps (m).
    pub gaps: Vec<f64>,
    pub trials: u32,
    /// Localization noise; its seed is replaced per trial.
    pub noise: NoiseModel,
    /// Fraction of trials in which the stud intrudes into the first slot.
    pub intruding_fraction: f64,
    /// How far the stud is displaced away from the row in the other trials (m).
    pub outward_shift: f64,
    pub seed: u64,
    pub rules: AutoRules,
    pub mode: ExecutionMode,
}

impl ExperimentConfig {
    /// The four gaps of the original protocol, 10 trials each, half of them
    /// with an intruding stud.
    pub fn standard(noise: NoiseModel, seed: u64) -> Self {
        Self {
            gaps: vec![0.010, 0.005, 0.003, 0.001],
            trials: 10,
            noise,
            intruding_fraction: 0.5,
            outward_shift: 0.0,
            seed,
            rules: AutoRules::default(),
            mode: ExecutionMode::Parallel,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.gaps.is_empty() || self.gaps.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(ExperimentError::Invalid("all gaps must be positive".into()));
        }
        if self.trials == 0 {
            return Err(ExperimentError::Invalid("at least one trial per gap is required".into()));
        }
        if !(0.0..=1.0).contains(&self.intruding_fraction) {
            return Err(ExperimentError::Invalid("intruding_fraction must lie in [0, 1]".into()));
        }
        if !(self.outward_shift.is_finite() && self.outward_shift >= 0.0) {
            return Err(ExperimentError::Invalid("outward_shift must be non-negative".into()));
        }
        self.noise.validate().map_err(ExperimentError::Invalid)
    }

    /// Whether trial `index` uses an intruding stud. Intruding trials are
    /// spread evenly over the run.
    pub fn is_intruding(&self, index: u32) -> bool {
        let f = self.intruding_fraction;
        ((index + 1) as f64 * f).floor() > (index as f64 * f).floor()
    }

    /// Seed of trial `index`, shared by every gap so gaps see the same noise.
    pub fn trial_seed(&self, index: u32) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng.next_u64()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: u32,
    pub seed: u64,
    pub intruding: bool,
    pub success: bool,
    pub placements: u32,
    pub replans: u32,
    pub failure: Option<ContactCause>,
    /// Nearby-object suggestions raised during the trial.
    pub nearby_suggestions: u32,
    pub stud_contacts: u32,
    pub human_seconds: f64,
    pub robot_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub gap_size: f64,
    pub trials: u32,
    pub successes: u32,
    pub successful_placements: u32,
    pub replan_requests: u32,
    /// Failure cause tag to occurrence count.
    pub failure_causes: BTreeMap<String, u32>,
    pub per_trial: Vec<TrialResult>,
}

impl ExperimentRecord {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    fn from_trials(gap_size: f64, per_trial: Vec<TrialResult>) -> Self {
        let mut failure_causes = BTreeMap::new();
        for t in &per_trial {
            if let Some(c) = &t.failure {
                *failure_causes.entry(c.tag()).or_insert(0) += 1;
            }
        }
        Self {
            gap_size,
            trials: per_trial.len() as u32,
            successes: per_trial.iter().filter(|t| t.success).count() as u32,
            successful_placements: per_trial.iter().map(|t| t.placements).sum(),
            replan_requests: per_trial.iter().map(|t| t.replans).sum(),
            failure_causes,
            per_trial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub records: Vec<ExperimentRecord>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Aligned text table with one row per gap.
    pub fn table(&self) -> String {
        let rows: Vec<[String; 4]> = self
            .records
            .iter()
            .map(|r| {
                let causes = r
                    .failure_causes
                    .iter()
                    .map(|(c, n)| format!("{} ({n})", cause_label(c)))
                    .collect::<Vec<_>>()
                    .join(" ");
                [
                    format!("{} mm", fmt_mm(r.gap_size)),
                    format!("{:.0}", 100.0 * r.success_rate()),
                    format!("{} / {}", r.replan_requests, r.successful_placements),
                    causes,
                ]
            })
            .collect();
        let header = ["Size of gap", "Success rate (%)", "Replan request / Successful placements", "Reason for failure (occurrence)"];
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: [&str; 4]| {
            let text = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ");
            let _ = writeln!(out, "{}", text.trim_end());
        };
        line(&mut out, header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("-+-"));
        for row in &rows {
            line(&mut out, [&row[0], &row[1], &row[2], &row[3]]);
        }
        out
    }
}

fn fmt_mm(meters: f64) -> String {
    let mm = meters * 1000.0;
    if (mm - mm.round()).abs() < 1e-9 {
        format!("{}", mm.round())
    } else {
        format!("{mm}")
    }
}

fn cause_label(tag: &str) -> String {
    let words = tag.replace('-', " ");
    let mut c = words.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => words,
    }
}

/// Runs one auto-approved session of the block scenario.
pub fn run_trial(config: &ExperimentConfig, gap: f64, index: u32) -> TrialResult {
    let seed = config.trial_seed(index);
    let intruding = config.is_intruding(index);
    let mut opts = BlockOptions::new(gap);
    opts = if intruding { opts.intruding() } else { opts.outward(config.outward_shift) };
    opts.noise = NoiseModel { seed, ..config.noise.clone() };
    let blocks_total = opts.blocks;
    let mut session = Session::new(blocks(&opts), seed, Policy::AutoApprove(config.rules.clone()))
        .expect("generated block scenarios are valid");
    session.run_auto(&config.rules, MAX_INPUTS);

    let outcomes = session.outcomes();
    let placements = outcomes.iter().filter(|o| o.placed).count() as u32;
    let failure = outcomes.iter().find_map(|o| o.failure.clone());
    let nearby_suggestions = session
        .events()
        .filter(|e| matches!(e, WorkflowEvent::DeviationFound { report, .. } if report.kind == DeviationKind::NearbyObjectDeviation))
        .count() as u32;
    TrialResult {
        trial: index,
        seed,
        intruding,
        success: session.state() == WorkflowState::TaskComplete && placements == blocks_total,
        placements,
        replans: outcomes.iter().map(|o| o.replans).sum(),
        stud_contacts: outcomes.iter().filter(|o| o.failure == Some(ContactCause::CollideWithStud)).count() as u32,
        failure,
        nearby_suggestions,
        human_seconds: session.human_decisions() as f64 * config.rules.decision_seconds,
        robot_seconds: session.robot_seconds(),
    }
}

/// Runs every trial of every gap. Results do not depend on the execution mode.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let n = config.trials as usize;
    let jobs = config.gaps.len() * n;
    let mut results = map_indexed(jobs, config.mode, |j| run_trial(config, config.gaps[j / n], (j % n) as u32));
    let mut records = Vec::with_capacity(config.gaps.len());
    for &gap in &config.gaps {
        let rest = results.split_off(n);
        records.push(ExperimentRecord::from_trials(gap, std::mem::replace(&mut results, rest)));
    }
    Ok(ExperimentReport { config: config.clone(), records })
}
