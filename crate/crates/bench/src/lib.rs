//! Shared fixtures for the solver benchmarks.

use platoon_core::fixtures::{random_instance, Instance};
use platoon_core::{decompose_pd, stage_blocks, DeltaRule, DistributedProblem};

/// A perturbed ten-vehicle reference instance with its distributed form.
pub fn reference_case(p: usize, seed: u64) -> (Instance, DistributedProblem) {
    let inst = random_instance(seed, 10, p, 0.5);
    let dec = decompose_pd(&stage_blocks(&inst.weights, &inst.cfg).expect("valid weights"), DeltaRule::default())
        .expect("reference weights split");
    let dp = DistributedProblem::new(&inst.prob, &dec).expect("valid decomposition");
    (inst, dp)
}
