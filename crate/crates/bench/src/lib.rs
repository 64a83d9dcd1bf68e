//! Fixtures shared by the benchmarks.

use varprop_core::experiment::sine_architecture;
use varprop_core::train::{skeleton, LayerTemplate};
use varprop_core::{DropoutConvention, LayerSpec, NetworkSpec, RngStream, Tensor};

/// Dense network with `±1/√fan_in` uniform weights drawn from `seed`.
pub fn random_mlp(input: usize, layers: &[LayerTemplate], seed: u64) -> NetworkSpec {
    let sk = skeleton(input, layers, DropoutConvention::Standard).expect("valid topology");
    let mut rng = RngStream::new(seed, 0);
    let specs = sk
        .layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { weights, .. } => {
                let (rows, cols) = (weights.rows(), weights.cols());
                let bound = 1.0 / (cols as f64).sqrt();
                let w = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
                let b = (0..rows).map(|_| rng.uniform_range(-bound, bound)).collect();
                LayerSpec::dense(Tensor::matrix(rows, cols, w).expect("shape"), b)
            }
            other => other.clone(),
        })
        .collect();
    NetworkSpec::new(vec![input], specs).expect("valid network")
}

/// The sine-regression topology: three hidden layers of `hidden` units.
pub fn sine_net(hidden: usize) -> NetworkSpec {
    random_mlp(1, &sine_architecture(hidden, 0.1), 7)
}

/// One hidden layer with dropout on the input and after the hidden layer.
pub fn regression_net(inputs: usize, hidden: usize) -> NetworkSpec {
    use LayerTemplate::*;
    random_mlp(inputs, &[Dropout(0.05), Dense(hidden), Relu, Dropout(0.05), Dense(1)], 11)
}
