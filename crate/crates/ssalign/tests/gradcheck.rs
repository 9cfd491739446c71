//! Finite-difference checks for every differentiable operation and for a
//! full encoder+heads composition, at 64-bit precision.

mod common;

const SEEDS: u64 = 20;

#[test]
fn conv2d_gradients() {
    (0..SEEDS).for_each(common::check_conv2d);
}

#[test]
fn linear_gradients() {
    (0..SEEDS).for_each(common::check_linear);
}

#[test]
fn relu_gradients() {
    (0..SEEDS).for_each(common::check_relu);
}

#[test]
fn max_pool2_gradients() {
    (0..SEEDS).for_each(common::check_max_pool2);
}

#[test]
fn global_avg_pool_gradients() {
    (0..SEEDS).for_each(common::check_global_avg_pool);
}

#[test]
fn batch_norm_gradients() {
    (0..SEEDS).for_each(common::check_batch_norm);
}

#[test]
fn softmax_cross_entropy_gradients() {
    (0..SEEDS).for_each(common::check_softmax_cross_entropy);
}

#[test]
fn square_loss_gradients() {
    (0..SEEDS).for_each(common::check_square_loss);
}

#[test]
fn add_and_sum_gradients() {
    (0..SEEDS).for_each(common::check_add_and_sum);
}

#[test]
fn full_composition_gradients() {
    common::check_full_composition();
}
