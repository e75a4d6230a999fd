//! Seeded fixtures shared by the benchmarks.

use hgave_core::metrics::ScoredLink;
use hgave_core::synthetic::{planted, Planted, PlantedConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Planted corpus with `products` products over three categories.
pub fn corpus(products: usize) -> Planted {
    let common = (products / 5).max(6);
    planted(&PlantedConfig {
        products,
        common_aspects: common,
        common_per_product: 3,
        tail_aspects: products / 10,
        sessions: products,
        seed: 7,
        ..Default::default()
    })
    .expect("valid planted config")
}

/// `products × aspects` scored candidates with random labels.
pub fn scored(products: usize, aspects: usize) -> Vec<ScoredLink> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::with_capacity(products * aspects);
    for p in 0..products {
        for a in 0..aspects {
            out.push(ScoredLink::new(format!("p{p}"), format!("a{a}"), rng.random(), rng.random_bool(0.3)));
        }
    }
    out
}
