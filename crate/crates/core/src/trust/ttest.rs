//! Paired-sample t statistic, effect size and arm summaries.

use serde::{Deserialize, Serialize};

use super::student_t::p_value_two_tailed;
use super::StatsError;

/// Per-task accuracies (percent) of the control and experiment arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    control: Vec<f64>,
    experiment: Vec<f64>,
}

impl PairedSample {
    pub fn new(control: Vec<f64>, experiment: Vec<f64>) -> Result<Self, StatsError> {
        if control.len() != experiment.len() {
            return Err(StatsError::PairedLength {
                control: control.len(),
                experiment: experiment.len(),
            });
        }
        if control.len() < 2 {
            return Err(StatsError::TooFewSamples(control.len()));
        }
        if let Some(v) = control.iter().chain(&experiment).find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(StatsError::OutOfRange(*v));
        }
        Ok(Self { control, experiment })
    }

    pub fn control(&self) -> &[f64] {
        &self.control
    }

    pub fn experiment(&self) -> &[f64] {
        &self.experiment
    }

    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control.is_empty()
    }

    /// Same pairs with the arms exchanged.
    pub fn swapped(&self) -> Self {
        Self { control: self.experiment.clone(), experiment: self.control.clone() }
    }
}

/// `d_i = experiment_i − control_i`, in order.
pub fn paired_differences(sample: &PairedSample) -> Vec<f64> {
    sample.experiment.iter().zip(&sample.control).map(|(e, c)| e - c).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation, `n − 1` denominator.
fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TStatistic {
    pub t: f64,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub n: usize,
}

/// `t = x̄_d / (s_d / √n)`.
///
/// A zero standard deviation is reported as [`StatsError::DegenerateZero`]
/// (all differences zero) or [`StatsError::DegenerateConstant`].
pub fn t_statistic(diffs: &[f64]) -> Result<TStatistic, StatsError> {
    if diffs.len() < 2 {
        return Err(StatsError::TooFewSamples(diffs.len()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite("difference is not finite".into()));
    }
    let n = diffs.len();
    let mean_diff = mean(diffs);
    let sd_diff = sample_sd(diffs);
    if sd_diff == 0.0 {
        return Err(if mean_diff == 0.0 {
            StatsError::DegenerateZero
        } else {
            StatsError::DegenerateConstant { mean: mean_diff }
        });
    }
    let t = mean_diff / (sd_diff / (n as f64).sqrt());
    Ok(TStatistic { t, mean_diff, sd_diff, n })
}

/// Cohen's d for paired differences, `|x̄_d| / s_d`.
pub fn cohens_d(diffs: &[f64]) -> Result<f64, StatsError> {
    let s = t_statistic(diffs)?;
    Ok(s.mean_diff.abs() / s.sd_diff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub control_mean: f64,
    pub control_sd: f64,
    pub experiment_mean: f64,
    pub experiment_sd: f64,
}

pub fn arm_summary(sample: &PairedSample) -> ArmSummary {
    ArmSummary {
        control_mean: mean(&sample.control),
        control_sd: sample_sd(&sample.control),
        experiment_mean: mean(&sample.experiment),
        experiment_sd: sample_sd(&sample.experiment),
    }
}

/// How a zero-variance sample was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degeneracy {
    /// Every difference is zero: t = 0, p = 1, d = 0.
    AllZero,
    /// Every difference equals the same non-zero value: t = ±∞, p = 0, d = ∞.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    #[serde(with = "crate::serde_float")]
    pub t: f64,
    pub dof: usize,
    pub p_two_tailed: f64,
    #[serde(with = "crate::serde_float")]
    pub cohens_d: f64,
    pub control_mean: f64,
    pub control_sd: f64,
    pub experiment_mean: f64,
    pub experiment_sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degeneracy: Option<Degeneracy>,
}

/// Full paired t-test. Zero-variance samples follow the [`Degeneracy`]
/// conventions instead of failing.
pub fn paired_t_test(sample: &PairedSample) -> Result<TTestReport, StatsError> {
    let diffs = paired_differences(sample);
    let arms = arm_summary(sample);
    let n = diffs.len();
    let (mean_diff, sd_diff, t, p, d, degeneracy) = match t_statistic(&diffs) {
        Ok(s) => {
            let p = p_value_two_tailed(s.t, (n - 1) as f64)?;
            (s.mean_diff, s.sd_diff, s.t, p, s.mean_diff.abs() / s.sd_diff, None)
        }
        Err(StatsError::DegenerateZero) => (0.0, 0.0, 0.0, 1.0, 0.0, Some(Degeneracy::AllZero)),
        Err(StatsError::DegenerateConstant { mean }) => (
            mean,
            0.0,
            f64::INFINITY.copysign(mean),
            0.0,
            f64::INFINITY,
            Some(Degeneracy::Constant),
        ),
        Err(e) => return Err(e),
    };
    Ok(TTestReport {
        n,
        mean_diff,
        sd_diff,
        t,
        dof: n - 1,
        p_two_tailed: p,
        cohens_d: d,
        control_mean: arms.control_mean,
        control_sd: arms.control_sd,
        experiment_mean: arms.experiment_mean,
        experiment_sd: arms.experiment_sd,
        degeneracy,
    })
}
