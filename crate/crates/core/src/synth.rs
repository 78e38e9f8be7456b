//! Seeded synthetic problem generation shared by tests, benches and the CLI.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;
use crate::problem::LayerProblem;

/// Standard-normal matrix, deterministic per seed.
pub fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Matrix::new(rows, cols, data).expect("normal samples are finite")
}

/// Seeded layer problem: W and X standard normal, FP input
/// `X~ = X + noise_level * N(0, 1)`. `noise_level == 0` gives the
/// symmetric case with the FP input exactly equal to X.
pub fn seeded_problem(seed: u64, m: usize, n: usize, k: usize, noise_level: f64) -> LayerProblem {
    let weights = seeded_matrix(m, n, seed);
    let quant_input = seeded_matrix(n, k, seed.wrapping_add(1));
    let fp_input = if noise_level == 0.0 {
        quant_input.clone()
    } else {
        let noise = seeded_matrix(n, k, seed.wrapping_add(2));
        let data = quant_input
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, e)| x + noise_level * e)
            .collect();
        Matrix::new(n, k, data).unwrap()
    };
    LayerProblem::new(weights, quant_input, fp_input).unwrap()
}
