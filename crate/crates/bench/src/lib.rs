//! Seeded fixtures shared by the criterion benches.

use eyolo_core::{Box3D, ConvParams, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_conv(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, seed: u64) -> ConvParams {
    ConvParams::new(
        random_tensor([out_ch, in_ch, kernel, kernel], seed),
        random_tensor([1, out_ch, 1, 1], seed + 1),
        stride,
    )
    .expect("valid conv shape")
}

/// Independent random box pairs inside the unit cube.
pub fn random_pairs(count: usize, seed: u64) -> Vec<(Box3D, Box3D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut one = || {
        let e: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.5));
        let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(e[a] / 2.0..1.0 - e[a] / 2.0));
        Box3D::labeled(0, 2, c, e)
    };
    (0..count).map(|_| (one(), one())).collect()
}
