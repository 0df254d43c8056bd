//! Small deterministic networks for tests, benches and the `gen-toy` command.

use std::sync::Arc;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Layer, Norm, ReluNetwork, Specification, VerificationInstance};

/// One input, two hidden ReLUs, one output:
/// `y = relu(2x - 1) - 2 relu(-x + 0.5) + 0.1`, which equals `2x - 0.9`
/// everywhere, with kinks of the individual neurons at `x = 0.5`.
pub fn scalar_example() -> ReluNetwork {
    ReluNetwork::new(vec![
        Layer::new(array![[2.0], [-1.0]], array![-1.0, 0.5]),
        Layer::new(array![[1.0, -2.0]], array![0.1]),
    ])
    .expect("valid example network")
}

/// `x0 = 0`, `delta = 1` (so `x` ranges over `[-1, 1]`), verifying `y >= 0`.
pub fn scalar_example_instance() -> VerificationInstance {
    VerificationInstance::new(
        Arc::new(scalar_example()),
        array![0.0],
        1.0,
        Norm::Inf,
        Specification::scalar(0),
    )
    .expect("valid example instance")
}

/// He-initialised network with widths `[input, hidden.., output]`.
pub fn random_network(widths: &[usize], seed: u64) -> ReluNetwork {
    assert!(widths.len() >= 3, "need input, at least one hidden and an output width");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wdist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let bdist = Normal::new(0.0, 0.1).unwrap();
            let weights = Array2::from_shape_fn((fan_out, fan_in), |_| wdist.sample(&mut rng));
            let bias = Array1::from_shape_fn(fan_out, |_| bdist.sample(&mut rng));
            Layer::new(weights, bias)
        })
        .collect();
    ReluNetwork::new(layers).expect("generated layers chain")
}

/// Random network plus a nominal point in `[-1, 1]^d`. The label is the
/// predicted class at `x0` and the target the runner-up, so `f(x0) >= 0`.
pub fn random_instance(widths: &[usize], delta: f64, seed: u64) -> VerificationInstance {
    let network = random_network(widths, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let x0: Array1<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let logits = network.forward(x0.view()).expect("dimension matches").logits;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let spec = if order.len() > 1 {
        Specification::margin(order[0], order[1])
    } else {
        Specification::scalar(0)
    };
    VerificationInstance::new(Arc::new(network), x0, delta, Norm::Inf, spec).expect("valid instance")
}

/// Radii used by [`sweep`].
pub const SWEEP_DELTAS: [f64; 2] = [0.05, 0.2];

/// The first `count` seeded `2-8-8-2` instances, alternating the radius
/// over [`SWEEP_DELTAS`], whose interval bounds leave at most `max_unstable`
/// neurons unstable. Returns `(seed, instance)` pairs.
pub fn sweep(count: usize, max_unstable: usize) -> Vec<(u64, VerificationInstance)> {
    let mut out = Vec::with_capacity(count);
    let mut seed = 0u64;
    while out.len() < count {
        let delta = SWEEP_DELTAS[out.len() % SWEEP_DELTAS.len()];
        let inst = random_instance(&[2, 8, 8, 2], delta, seed);
        let unstable = crate::propagate::ibp_bounds(&inst.network, inst.x0.view(), delta).unstable().len();
        if unstable <= max_unstable {
            out.push((seed, inst));
        }
        seed += 1;
    }
    out
}
