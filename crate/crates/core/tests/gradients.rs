//! A reduced finite-difference run; the acceptance suite runs the full one.

use pahs_core::gradcheck::{check_cell, check_kernels, GradcheckOptions, CELL_TOL, KERNEL_TOL};

#[test]
fn kernels_pass_on_a_few_seeds() {
    let opts = GradcheckOptions {
        seeds: 3,
        ..GradcheckOptions::default()
    };
    let results = check_kernels(&opts).unwrap();
    assert!(results.len() >= 20);
    for r in &results {
        assert_eq!(r.tolerance, KERNEL_TOL);
        assert!(r.coordinates > 0, "{}", r.name);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn full_cell_passes_on_two_seeds() {
    for seed in [100, 101] {
        let r = check_cell(seed, &GradcheckOptions::default()).unwrap();
        assert_eq!(r.tolerance, CELL_TOL);
        assert!(r.passed(), "{r:?}");
    }
}
