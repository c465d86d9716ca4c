//! Seeded random streams.
//!
//! Every random draw in the lab goes through [`stream`], which derives a
//! ChaCha8 generator from a 64-bit seed and a 64-bit stream label. ChaCha8 is
//! a counter-based generator, so distinct `(seed, stream)` pairs give
//! independent sequences without any shared mutable state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::densela::DenseMatrix;

pub type LabRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for the `index`-th draw of a run (a training batch, say), distinct
/// across indices and across base seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1))
}

pub fn normals(rng: &mut LabRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Matrix with i.i.d. standard normal entries, filled row by row.
pub fn normal_matrix(rng: &mut LabRng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, normals(rng, rows * cols))
        .expect("shape and finiteness hold by construction")
}
