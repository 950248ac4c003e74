//! Analytic gradients against central finite differences.

mod common;

#[test]
fn cross_entropy_gradients_match() {
    for seed in 1..=5 {
        let e = common::cross_entropy_fd_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn mim_gradients_match() {
    for seed in 1..=5 {
        let e = common::mim_fd_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}
