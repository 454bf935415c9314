#![allow(dead_code)]

pub mod fd;
pub mod oracles;

use evi::data::{generate_synthetic, Dataset, SyntheticConfig};

/// The default synthetic world at a reduced size.
pub fn small_synthetic(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_records: n,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}
