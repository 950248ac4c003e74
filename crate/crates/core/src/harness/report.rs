use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::trust::GateDecision;

use super::{HarnessError, ScenarioConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub stage: u64,
    pub client_id: String,
    /// Test accuracy in percent.
    pub control_accuracy: f64,
    /// Absent for stage-1 clients and control-only runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u64,
    pub client_ids: Vec<String>,
    /// Whether the server closed this stage (false for control-only stages).
    pub server_stage: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adopted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateDecision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainPoint {
    pub stage: u64,
    pub mean_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub num_images: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub crate_version: String,
    pub global_seed: u64,
    pub config: ScenarioConfig,
    pub pretrain: PretrainSummary,
    pub rows: Vec<ClientRow>,
    pub stages: Vec<StageSummary>,
    pub gain_curve: Vec<GainPoint>,
    /// Paired test over every (control, experiment) pair of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_test: Option<GateDecision>,
}

/// Per-stage mean of `experiment − control` over paired rows, in stage order.
pub fn gain_curve(rows: &[ClientRow]) -> Vec<GainPoint> {
    let mut by_stage: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(e) = r.experiment_accuracy {
            let slot = by_stage.entry(r.stage).or_insert((0.0, 0));
            slot.0 += e - r.control_accuracy;
            slot.1 += 1;
        }
    }
    by_stage
        .into_iter()
        .map(|(stage, (sum, n))| GainPoint { stage, mean_gain: sum / n as f64 })
        .collect()
}

pub fn emit_gain_curve(report: &RunReport) -> Result<Vec<GainPoint>, HarnessError> {
    let curve = gain_curve(&report.rows);
    if curve.is_empty() {
        return Err(HarnessError::EmptySeries);
    }
    Ok(curve)
}

pub fn gain_curve_csv(points: &[GainPoint]) -> String {
    let mut out = String::from("stage,mean_gain\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.stage, p.mean_gain);
    }
    out
}

impl RunReport {
    /// Plain-text table of the rows followed by the gain curve and test.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:<24} {:>10} {:>10}", "stage", "client", "control", "experiment");
        for r in &self.rows {
            let exp = r.experiment_accuracy.map_or("-".to_string(), |e| format!("{e:.2}"));
            let _ = writeln!(
                out,
                "{:<6} {:<24} {:>10.2} {:>10}",
                r.stage, r.client_id, r.control_accuracy, exp
            );
        }
        if !self.gain_curve.is_empty() {
            out.push_str("\nmean gain per stage\n");
            for p in &self.gain_curve {
                let _ = writeln!(out, "  stage {}: {:+.3}", p.stage, p.mean_gain);
            }
        }
        for s in self.stages.iter().filter(|s| s.gate.is_some()) {
            let g = s.gate.as_ref().expect("filtered");
            let adopted = match s.adopted {
                Some(true) => "candidate adopted",
                Some(false) => "base kept",
                None => "not served",
            };
            let _ = writeln!(out, "\ngate at stage {}: {:?} ({adopted})", s.stage, g.verdict);
        }
        if let Some(g) = &self.final_test {
            let r = &g.report;
            let _ = writeln!(
                out,
                "\npaired t-test over {} pairs: t({}) = {:.3}, p = {:.4}, d = {:.3} -> {:?}",
                r.n, r.dof, r.t, r.p_two_tailed, r.cohens_d, g.verdict
            );
        }
        out
    }
}
