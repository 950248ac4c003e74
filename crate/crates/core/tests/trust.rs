mod common;

use fedstage_core::trust::{
    cohens_d, gate, p_value_two_tailed, paired_t_test, t_statistic, GateConfig, PairedSample,
    Verdict,
};
use proptest::prelude::*;

#[test]
fn p_values_match_quadrature() {
    for dof in [1u32, 2, 3, 5, 10, 30] {
        for t in [0.1, 0.7, 1.5, 2.678, 4.0, 8.0] {
            let p = p_value_two_tailed(t, dof as f64).unwrap();
            let q = common::p_value_by_quadrature(t, dof);
            assert!((p - q).abs() < 1e-8, "t {t}, dof {dof}: {p} vs {q}");
        }
    }
}

#[test]
fn hand_computed_small_sample() {
    // diffs 1, 2, 3: mean 2, sd 1, t = 2·√3, d = 2
    let s = PairedSample::new(vec![10.0, 10.0, 10.0], vec![11.0, 12.0, 13.0]).unwrap();
    let r = paired_t_test(&s).unwrap();
    assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    assert!((r.cohens_d - 2.0).abs() < 1e-12);
    assert_eq!(r.dof, 2);
}

/// Samples whose differences are not all equal.
fn arb_sample() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|n| {
        (prop::collection::vec(20.0f64..80.0, n), prop::collection::vec(-15.0f64..15.0, n))
            .prop_filter("non-constant differences", |(_, d)| {
                d.iter().any(|x| (x - d[0]).abs() > 1e-6)
            })
            .prop_map(|(c, d)| {
                let e = c.iter().zip(&d).map(|(c, d)| c + d).collect();
                (c, e)
            })
    })
}

fn diffs(c: &[f64], e: &[f64]) -> Vec<f64> {
    e.iter().zip(c).map(|(e, c)| e - c).collect()
}

proptest! {
    #[test]
    fn verdict_ignores_common_shift((c, e) in arb_sample(), shift in -5.0f64..5.0) {
        let base = gate(&PairedSample::new(c.clone(), e.clone()).unwrap(), &GateConfig::default()).unwrap();
        let moved = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
        let shifted = gate(&PairedSample::new(moved(&c), moved(&e)).unwrap(), &GateConfig::default()).unwrap();
        prop_assert_eq!(base.verdict, shifted.verdict);
        prop_assert!((base.report.t - shifted.report.t).abs() < 1e-6 * base.report.t.abs().max(1.0));
    }

    #[test]
    fn positive_scaling_leaves_statistics((c, e) in arb_sample(), k in 0.01f64..100.0) {
        let d = diffs(&c, &e);
        let scaled: Vec<f64> = d.iter().map(|x| x * k).collect();
        let (a, b) = (t_statistic(&d).unwrap(), t_statistic(&scaled).unwrap());
        prop_assert!((a.t - b.t).abs() < 1e-9 * a.t.abs().max(1.0));
        let (da, db) = (cohens_d(&d).unwrap(), cohens_d(&scaled).unwrap());
        prop_assert!((da - db).abs() < 1e-9 * da.max(1.0));
    }

    #[test]
    fn swapping_arms_negates_t((c, e) in arb_sample()) {
        let s = PairedSample::new(c, e).unwrap();
        let (fwd, back) = (paired_t_test(&s).unwrap(), paired_t_test(&s.swapped()).unwrap());
        prop_assert_eq!(fwd.t, -back.t);
        prop_assert_eq!(fwd.p_two_tailed, back.p_two_tailed);
        prop_assert_eq!(fwd.cohens_d, back.cohens_d);
        if fwd.mean_diff > 0.0 {
            prop_assert_eq!(gate(&s.swapped(), &GateConfig::default()).unwrap().verdict, Verdict::RetainBase);
        }
    }

    #[test]
    fn t_is_signed_d_times_root_n((c, e) in arb_sample()) {
        let r = paired_t_test(&PairedSample::new(c, e).unwrap()).unwrap();
        let expected = r.mean_diff.signum() * r.cohens_d * (r.n as f64).sqrt();
        prop_assert!((r.t - expected).abs() < 1e-9 * r.t.abs().max(1.0));
    }
}
