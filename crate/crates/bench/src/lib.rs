//! Fixtures shared by the benchmarks.

use fedem_core::data::synth_image;
use fedem_core::{GradientVector, ModelSpec, ParameterSet, Tensor};

/// The MNIST desk model: 784-256-10 sigmoid MLP.
pub fn mnist_mlp(seed: u64) -> ParameterSet {
    let spec: ModelSpec = "mlp:784-256-10:sigmoid:1x28x28".parse().expect("valid spec");
    ParameterSet::init(&spec, seed)
}

/// `n` pseudo-random 28x28 grayscale images in [0, 1] and cycling labels.
pub fn mnist_like_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(n * 784);
    for i in 0..n {
        data.extend_from_slice(synth_image(1, 28, seed + i as u64).data());
    }
    let images = Tensor::new(vec![n, 1, 28, 28], data).expect("shape");
    (images, (0..n).map(|i| i % 10).collect())
}

/// Gradient of the model on a batch, the attack's target.
pub fn target_gradient(theta: &ParameterSet, images: &Tensor, labels: &[usize]) -> GradientVector {
    let x = images.reshape(&[labels.len(), 784]).expect("784 pixels per image");
    theta.loss_and_grad(&x, labels).expect("finite loss").1
}
