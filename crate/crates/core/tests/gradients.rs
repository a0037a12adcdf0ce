use tridira_core::gradcheck::{suite, GradCheckConfig};

#[test]
fn every_block_and_loss_matches_finite_differences() {
    let checks = suite::run(11, GradCheckConfig::default());
    for c in &checks {
        println!("{:<55} max rel error {:.2e} over {} scalars", c.name, c.report.max_rel_error, c.report.checked);
    }
    let failed = suite::failures(&checks, 1e-4);
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn label_independence_leaves_the_prediction_head_alone() {
    assert_eq!(suite::head_gradient_leak(11), 0.0);
}
