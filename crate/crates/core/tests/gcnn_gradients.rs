//! Analytic GCNN gradients against central finite differences.

mod common;

use common::gradient_oracle;
use lesionuq::gcnn::Variant;

fn run_variant(variant: Variant) {
    let (max_rel, kinks_ok) = gradient_oracle(variant, 2024);
    eprintln!("{variant}: max rel err {max_rel:.3e}");
    assert!(
        max_rel < common::MAX_REL_ERR,
        "{variant}: max relative error {max_rel}"
    );
    assert!(
        kinks_ok,
        "{variant}: too many parameters sit on a ReLU kink"
    );
}

#[test]
fn classification_gradients_match_finite_differences() {
    run_variant(Variant::Classification);
}

#[test]
fn regression_gradients_match_finite_differences() {
    run_variant(Variant::Regression);
}
