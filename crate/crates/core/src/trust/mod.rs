//! Statistical trust gate for adopting an aggregated model.
//!
//! After a scheduled stage the server compares per-task accuracies of clients
//! fine-tuned from the rolling base (experiment) against the same tasks
//! fine-tuned from the original base (control) with a two-tailed paired
//! t-test. The candidate is kept only when the improvement is significant,
//! large by Cohen's d, and (by default) positive.

mod student_t;
mod ttest;

pub use student_t::{
    ln_beta, ln_gamma, p_value_two_tailed, regularized_incomplete_beta, student_t_cdf,
};
pub use ttest::{
    arm_summary, cohens_d, paired_differences, paired_t_test, t_statistic, ArmSummary,
    Degeneracy, PairedSample, TStatistic, TTestReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("paired arms differ in length: control {control}, experiment {experiment}")]
    PairedLength { control: usize, experiment: usize },
    #[error("need at least 2 pairs, got {0}")]
    TooFewSamples(usize),
    #[error("accuracy {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("all differences are zero")]
    DegenerateZero,
    #[error("all differences equal {mean}; t is unbounded")]
    DegenerateConstant { mean: f64 },
    #[error("degrees of freedom must be ≥ 1, got {0}")]
    InvalidDof(f64),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid gate configuration: {0}")]
    InvalidConfig(String),
}

fn default_alpha() -> f64 {
    0.05
}
fn default_d_min() -> f64 {
    0.8
}
fn default_true() -> bool {
    true
}
fn default_gate_every() -> u64 {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Significance level for the two-tailed p-value.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Minimum Cohen's d counted as a non-trivial improvement.
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "default_true")]
    pub require_positive_mean: bool,
    /// The gate runs at stages whose index is a multiple of this.
    #[serde(default = "default_gate_every")]
    pub gate_every: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            d_min: default_d_min(),
            require_positive_mean: true,
            gate_every: default_gate_every(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(StatsError::InvalidConfig(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.d_min >= 0.0 && self.d_min.is_finite()) {
            return Err(StatsError::InvalidConfig(format!("d_min {} must be ≥ 0", self.d_min)));
        }
        if self.gate_every == 0 {
            return Err(StatsError::InvalidConfig("gate_every must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn is_scheduled(&self, stage_index: u64) -> bool {
        self.gate_every > 0 && stage_index.is_multiple_of(self.gate_every)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    RetainCandidate,
    RetainBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub verdict: Verdict,
    pub report: TTestReport,
    pub reasons: Vec<String>,
}

/// Decides whether the aggregated candidate replaces the base.
pub fn gate(sample: &PairedSample, config: &GateConfig) -> Result<GateDecision, StatsError> {
    config.validate()?;
    let report = paired_t_test(sample)?;
    let mut reasons = Vec::new();
    let verdict = match report.degeneracy {
        Some(Degeneracy::AllZero) => {
            reasons.push("no improvement: every paired difference is zero".to_string());
            Verdict::RetainBase
        }
        Some(Degeneracy::Constant) if report.mean_diff > 0.0 => {
            reasons.push(format!(
                "degenerate: every difference equals {:+}; treated as significant improvement",
                report.mean_diff
            ));
            Verdict::RetainCandidate
        }
        Some(Degeneracy::Constant) => {
            reasons.push(format!(
                "degenerate: every difference equals {:+}; no improvement",
                report.mean_diff
            ));
            Verdict::RetainBase
        }
        None => {
            let significant = report.p_two_tailed < config.alpha;
            let large = report.cohens_d >= config.d_min;
            let positive = !config.require_positive_mean || report.mean_diff > 0.0;
            let mark = |ok: bool| if ok { "pass" } else { "fail" };
            reasons.push(format!(
                "{}: p = {:.4} vs alpha {}",
                mark(significant),
                report.p_two_tailed,
                config.alpha
            ));
            reasons.push(format!(
                "{}: d = {:.3} vs d_min {}",
                mark(large),
                report.cohens_d,
                config.d_min
            ));
            if config.require_positive_mean {
                reasons.push(format!("{}: mean difference {:+.4}", mark(positive), report.mean_diff));
            }
            if significant && large && positive {
                Verdict::RetainCandidate
            } else {
                Verdict::RetainBase
            }
        }
    };
    Ok(GateDecision { verdict, report, reasons })
}
