//! Seeded fixtures shared by the benchmarks.

use focal_core::{EmbedMatrix, Instance, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x dim` matrix with entries uniform in [-1, 1).
pub fn matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbedMatrix {
    let values = (0..rows * dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    EmbedMatrix::new(rows, dim, values).expect("random rows are nonzero")
}

/// `count` instances of one modality, each with `rows` fragments.
pub fn instances(
    rng: &mut ChaCha8Rng,
    modality: Modality,
    count: usize,
    rows: usize,
    dim: usize,
) -> Vec<Instance> {
    let prefix = match modality {
        Modality::Text => "t",
        Modality::Image => "i",
    };
    (0..count)
        .map(|k| {
            Instance::new(
                format!("{prefix}{k}"),
                modality,
                matrix(rng, rows, dim),
                None,
            )
            .expect("fixture instance is valid")
        })
        .collect()
}
