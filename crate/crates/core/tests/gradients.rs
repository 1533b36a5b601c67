//! Finite-difference checks on a single seed; the acceptance target
//! repeats them over ten.

use depthfuse::pipeline::diagnostics::{block_gradient_cases, op_gradient_cases, pipeline_gradient_case, GradientCase};

fn assert_all_pass(cases: &[GradientCase]) {
    let bad: Vec<_> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} (seed {}): {:e}", c.name, c.seed, c.report.max_rel_error))
        .collect();
    assert!(bad.is_empty(), "gradient mismatches: {bad:#?}");
    assert!(cases.iter().all(|c| c.report.coordinates > 0));
}

#[test]
fn primitive_ops() {
    assert_all_pass(&op_gradient_cases(11).unwrap());
}

#[test]
fn blocks() {
    assert_all_pass(&block_gradient_cases(11).unwrap());
}

#[test]
fn whole_model_with_frozen_neighbors() {
    assert_all_pass(&[pipeline_gradient_case(11, 2).unwrap()]);
}
