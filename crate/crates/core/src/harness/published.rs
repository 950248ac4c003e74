//! Published per-task accuracies of the reference eight-task study.

use crate::trust::{gate, GateConfig, GateDecision, PairedSample, StatsError};

use super::ClientRow;

/// Control accuracies (percent) of the six tasks in stages 2 to 4.
pub const PUBLISHED_CONTROL: [f64; 6] = [87.66, 96.18, 93.41, 75.15, 95.18, 92.0];
/// Experiment accuracies (percent), paired with [`PUBLISHED_CONTROL`].
pub const PUBLISHED_EXPERIMENT: [f64; 6] = [88.2, 96.57, 94.23, 80.89, 100.0, 95.0];

const STAGE_ONE: [(&str, f64); 2] = [("brain-tumor-classification-mri", 80.71), ("white-blood-cells", 98.09)];
const PAIRED_TASKS: [(&str, u64); 6] = [
    ("IDC", 2),
    ("NCT-CRC-HE-100k", 2),
    ("COVID-19_Radiography_Dataset", 3),
    ("Breast-Ultrasound", 3),
    ("ocular-toxoplasmosis-fundus", 4),
    ("BC Breast Cancer", 4),
];

/// Paired test and default-gate verdict on the published accuracies.
pub fn replay_paper_stats() -> Result<GateDecision, StatsError> {
    let sample = PairedSample::new(PUBLISHED_CONTROL.to_vec(), PUBLISHED_EXPERIMENT.to_vec())?;
    gate(&sample, &GateConfig::default())
}

/// The published results as report rows, stage-1 tasks unpaired.
pub fn published_rows() -> Vec<ClientRow> {
    let first = STAGE_ONE.iter().map(|&(id, c)| ClientRow {
        stage: 1,
        client_id: id.into(),
        control_accuracy: c,
        experiment_accuracy: None,
    });
    let paired = PAIRED_TASKS.iter().enumerate().map(|(i, &(id, stage))| ClientRow {
        stage,
        client_id: id.into(),
        control_accuracy: PUBLISHED_CONTROL[i],
        experiment_accuracy: Some(PUBLISHED_EXPERIMENT[i]),
    });
    first.chain(paired).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::gain_curve;
    use crate::trust::Verdict;

    #[test]
    fn replay_rounds_to_published_figures() {
        let g = replay_paper_stats().unwrap();
        let r = &g.report;
        assert_eq!(g.verdict, Verdict::RetainCandidate);
        assert_eq!(r.dof, 5);
        assert_eq!(format!("{:.1}", r.t), "2.7");
        assert_eq!(format!("{:.3}", r.p_two_tailed), "0.044");
        assert_eq!(format!("{:.2}", r.cohens_d), "1.09");
    }

    #[test]
    fn published_stage_gains() {
        let curve = gain_curve(&published_rows());
        let expected = [(2, 0.465), (3, 3.28), (4, 3.91)];
        assert_eq!(curve.len(), 3);
        for (p, (s, g)) in curve.iter().zip(expected) {
            assert_eq!(p.stage, s);
            assert!((p.mean_gain - g).abs() < 1e-9, "{p:?}");
        }
    }
}
