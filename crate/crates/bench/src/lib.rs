//! Seeded inputs shared by the benchmarks.

use dartspike_core::bidstack::BidStack;
use dartspike_core::synth::{generate, latent_observations, SynthSpec};
use dartspike_core::{Bucket, ExpectedPayoffs, ImpactParams, LabeledObservation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BUCKET: Bucket = Bucket::ALL[0];

/// Random sizing problem with `zones` zones.
pub fn sizing_instance(zones: usize, seed: u64) -> (ExpectedPayoffs, ImpactParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = ExpectedPayoffs::default();
    let mut k_z = std::collections::BTreeMap::new();
    for i in 0..zones {
        x.x.insert(format!("Z{i:02}"), rng.random_range(-50.0..50.0));
        k_z.insert(format!("Z{i:02}"), rng.random_range(0.01..0.5));
    }
    let params = ImpactParams {
        k_e_plus: [(BUCKET, rng.random_range(0.001..0.1))].into(),
        k_e_minus: [(BUCKET, rng.random_range(0.001..0.1))].into(),
        k_z,
        reference: None,
    };
    (x, params)
}

/// Planted-slope stack with `steps` steps per side.
pub fn stack(steps: usize) -> BidStack {
    let spec = SynthSpec {
        hours: 1,
        stack_steps: steps,
        ..Default::default()
    };
    let data = generate(&spec).expect("valid spec");
    data.stacks.into_values().next().expect("one stack")
}

/// Single-feature training rows drawn from the planted logistic model.
pub fn training_rows(n: usize) -> Vec<LabeledObservation> {
    let spec = SynthSpec {
        hours: n,
        zones: vec!["Z".into()],
        base_load: vec![1000.0],
        stacks: false,
        ..Default::default()
    };
    latent_observations(&generate(&spec).expect("valid spec"))
}
