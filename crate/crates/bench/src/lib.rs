//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use asap_core::instance::{generate_instance, GenerationConfig, Instance};
use asap_core::policy::{PolicyConfig, PolicyNet};

pub fn instances(customers: usize, count: usize, seed: u64) -> Vec<Arc<Instance>> {
    (0..count as u64)
        .map(|i| Arc::new(generate_instance(customers, seed + i, &GenerationConfig::default()).expect("valid generator")))
        .collect()
}

pub fn desk_policy() -> PolicyNet {
    PolicyNet::new(PolicyConfig::desk(), 1).expect("valid desk config")
}
