//! Shared fixtures for the benchmarks.

use ccver_core::model::toy;
use ccver_core::VerificationInstance;

/// The two-neuron example followed by `count` sweep instances.
pub fn fixtures(count: usize) -> Vec<(String, VerificationInstance)> {
    let mut out = vec![("example".to_owned(), toy::scalar_example_instance())];
    for (seed, inst) in toy::sweep(count, 20) {
        out.push((format!("seed{seed}"), inst));
    }
    out
}

/// A sweep instance that needs branching to decide.
pub fn branching_fixture() -> VerificationInstance {
    let mut inst = toy::random_instance(&[2, 8, 8, 2], 0.4, 7);
    inst.t_max = 20;
    inst.epsilon = 1e-6;
    inst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid() {
        let f = fixtures(3);
        assert_eq!(f.len(), 4);
        for (_, inst) in &f {
            inst.validate().unwrap();
        }
        branching_fixture().validate().unwrap();
    }
}
