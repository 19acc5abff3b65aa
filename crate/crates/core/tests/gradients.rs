mod common;

use common::gradcheck::{self, Check};

fn assert_all(checks: Vec<Check>) {
    assert!(!checks.is_empty());
    let problems: Vec<String> = checks.iter().filter_map(Check::problem).collect();
    assert!(problems.is_empty(), "{problems:#?}");
}

#[test]
fn conv3d_gradients() {
    assert_all(gradcheck::conv3d_gradients());
}

#[test]
fn batchnorm_gradients() {
    assert_all(gradcheck::batchnorm_gradients());
}

#[test]
fn activation_gradients() {
    assert_all(gradcheck::activation_gradients());
}

#[test]
fn dense_and_pool_gradients() {
    assert_all(gradcheck::dense_and_pool_gradients());
}

#[test]
fn conv_unit_gradients() {
    assert_all(gradcheck::conv_unit_gradients());
}

#[test]
fn voxres_gradients() {
    assert_all(gradcheck::voxres_gradients());
}

#[test]
fn network_gradients() {
    assert_all(vec![gradcheck::network_gradients()]);
}

#[test]
fn combined_loss_gradients() {
    assert_all(vec![gradcheck::combined_loss_gradients()]);
}
