mod common;

#[test]
fn full_model_gradient_matches_finite_differences() {
    let err = common::full_model_grad_error();
    assert!(err < 1e-3, "relative error {err}");
}
