//! Deterministic synthetic classification data for the healing demo.
//!
//! Eight Gaussian clusters in 64 dimensions: cluster means are seeded
//! unit-sphere directions scaled to radius 4, samples add unit-variance
//! isotropic noise. Labels cycle through the classes, so splits are
//! class-balanced within one sample. Everything is a pure function of the
//! seed — train and test are drawn from a single RNG stream in a fixed
//! order.

use crate::tensor::DenseTensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const INPUT_DIM: usize = 64;
pub const NUM_CLASSES: usize = 8;

/// A train/test split of the synthetic task. Inputs are row-major
/// `(n, INPUT_DIM)`; labels are class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train_inputs: Vec<f64>,
    pub train_labels: Vec<usize>,
    pub test_inputs: Vec<f64>,
    pub test_labels: Vec<usize>,
    pub generator_seed: u64,
}

fn draw_split(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    n: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(n * INPUT_DIM);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let mean = &means[class];
        for &m in mean.iter() {
            let noise: f64 = rng.sample(StandardNormal);
            inputs.push(m + noise);
        }
        labels.push(class);
    }
    (inputs, labels)
}

/// Generate the dataset. `n_train` and `n_test` must each cover every class
/// at least once.
pub fn generate_dataset(seed: u64, n_train: usize, n_test: usize) -> ToyDataset {
    assert!(
        n_train >= NUM_CLASSES && n_test >= NUM_CLASSES,
        "splits must cover all {NUM_CLASSES} classes"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(NUM_CLASSES);
    for _ in 0..NUM_CLASSES {
        let mut dir: Vec<f64> = (0..INPUT_DIM).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut dir {
            *x *= 4.0 / norm;
        }
        means.push(dir);
    }
    let (train_inputs, train_labels) = draw_split(&mut rng, &means, n_train);
    let (test_inputs, test_labels) = draw_split(&mut rng, &means, n_test);
    ToyDataset {
        train_inputs,
        train_labels,
        test_inputs,
        test_labels,
        generator_seed: seed,
    }
}

/// Gather `indices` rows of a row-major `(n, dim)` buffer into the
/// `(dim, batch)` column layout the model consumes.
pub fn batch_matrix(inputs: &[f64], dim: usize, indices: &[usize]) -> DenseTensor {
    let batch = indices.len();
    let mut data = vec![0.0f64; dim * batch];
    for (b, &idx) in indices.iter().enumerate() {
        let row = &inputs[idx * dim..(idx + 1) * dim];
        for (f, &v) in row.iter().enumerate() {
            data[f * batch + b] = v;
        }
    }
    DenseTensor::from_f64(&[dim, batch], data).expect("batch matrix shape is valid")
}
