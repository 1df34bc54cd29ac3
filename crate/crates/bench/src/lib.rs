//! Shared fixtures for the criterion benchmarks.

use cnmm::data::{gen_synthetic, Dataset, SyntheticSpec};
use cnmm::{Cnmm, Topology};

/// Synthetic training split with `per_class` images per class.
pub fn synthetic(per_class: usize, side: usize) -> Dataset {
    let spec = SyntheticSpec {
        num_classes: 3,
        train_per_class: per_class,
        test_per_class: 1,
        height: side,
        width: side,
        noise_sigma: 0.25,
        seed: 0,
    };
    gen_synthetic(&spec).expect("valid spec").0
}

/// Pure-chain model with the given shape.
pub fn chain_model(steps: usize, channels: usize, side: usize) -> Cnmm {
    Cnmm::new(Topology::chain(steps, channels, (side, side), 3), 0).expect("valid topology")
}
