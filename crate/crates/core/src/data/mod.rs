//! Array files, dataset layout, synthetic data and training-set subsets.

pub mod arrayfile;
pub mod dataset;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use arrayfile::{read_array, write_array, Array, ArrayData};
pub use dataset::{case_name, list_cases, Case, Dataset, Manifest, Split};
pub use synth::{generate_synthetic, SynthConfig};

use crate::error::{Error, Result};

/// The first `floor(fraction * n)` ids of one seeded permutation, returned
/// in canonical order. Smaller fractions under the same seed are subsets of
/// larger ones.
pub fn subset_fraction(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = (fraction * ids.len() as f64 + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(Error::EmptySubset { total: ids.len(), fraction });
    }
    let mut out: Vec<String> = order[..keep].iter().map(|s| s.to_string()).collect();
    out.sort();
    Ok(out)
}

/// Horizontal flip of an `[H, W]` plane.
pub fn flip_horizontal<T: Copy>(plane: &mut [T], w: usize) {
    for row in plane.chunks_mut(w) {
        row.reverse();
    }
}

/// Clockwise quarter turn of a square `[n, n]` plane.
pub fn rotate90<T: Copy>(plane: &[T], n: usize) -> Vec<T> {
    let mut out = plane.to_vec();
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = plane[(n - 1 - x) * n + y];
        }
    }
    out
}
