#![allow(dead_code)]

use axvec_core::model::{ArchConfig, Variant};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

/// A network small enough for finite-difference checks.
pub fn tiny_config(variant: Variant) -> ArchConfig {
    ArchConfig {
        input_dim: 3,
        frame_layer_dims: vec![4, 4, 4, 4, 6],
        utterance_layer_dims: vec![5, 4],
        num_speakers: 2,
        variant,
        attention_hidden: 3,
        pool_size: 2,
        ..ArchConfig::default()
    }
}
