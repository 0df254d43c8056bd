use ccver_core::bab::{verify, Verdict, VerifyConfig};
use ccver_core::model::toy;
use ccver_core::mpcc::{self, build_problem, SolveOptions};
use ccver_core::oracle::{self, PgdConfig};
use ccver_core::propagate::{optimize_relaxation, root_bounds, OptimizeConfig, Phase};
use ccver_core::SplitSet;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn safe_certificates_survive_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for (_, inst) in toy::sweep(30, 20) {
        let c = verify(&inst, &VerifyConfig::default()).unwrap();
        if c.verdict != Verdict::Safe {
            continue;
        }
        checked += 1;
        let samples = if checked <= 2 { 100_000 } else { 2_000 };
        for _ in 0..samples {
            let x: Array1<f64> = inst.x0.mapv(|v| v + inst.delta * rng.gen_range(-1.0..=1.0));
            assert!(inst.spec_value(x.view()).unwrap() >= 0.0);
        }
    }
    assert!(checked >= 5);
}

#[test]
fn unsafe_counterexamples_are_real() {
    let mut seen = 0;
    for (_, inst) in toy::sweep(60, 20) {
        let c = verify(&inst, &VerifyConfig::default()).unwrap();
        if c.verdict != Verdict::Unsafe {
            continue;
        }
        seen += 1;
        let x = Array1::from(c.counterexample.unwrap());
        assert!(inst.contains(x.view(), 1e-9));
        let logits = inst.network.forward(x.view()).unwrap().logits;
        assert!(inst.spec.value(logits.view()) < 0.0);
        assert!(c.upper < 0.0);
    }
    assert!(seen >= 1);
}

#[test]
fn pruned_domains_hold_nonnegative_minimum() {
    // any half-space of a root split whose bound is positive must have a
    // nonnegative exact minimum
    for (_, inst) in toy::sweep(20, 12) {
        let bounds = root_bounds(&inst);
        for id in bounds.unstable() {
            for phase in [Phase::Active, Phase::Inactive] {
                let splits = SplitSet::new().with(id, phase);
                let lb = optimize_relaxation(&inst, &bounds, &splits, None, OptimizeConfig::default()).result.lb;
                if lb <= 0.0 || !lb.is_finite() {
                    continue;
                }
                // the global minimiser either lies in the other half or is
                // itself nonnegative
                let g = oracle::global_min(&inst, 20).unwrap();
                let fwd = inst.network.forward(g.x_star.view()).unwrap();
                let in_half = (fwd.preacts[id.layer][id.index] > 0.0) == phase.is_active();
                assert!(!in_half || g.f_star >= -1e-7);
            }
        }
    }
}

#[test]
fn pgd_never_beats_oracle() {
    let mut nlp_wins = 0;
    let cases = toy::sweep(20, 20);
    for (_, inst) in &cases {
        let f = oracle::global_min(inst, 20).unwrap().f_star;
        let (pgd, x) = oracle::pgd_upper_bound(inst, &PgdConfig::default()).unwrap();
        assert!(inst.contains(x.view(), 1e-9));
        assert!(f <= pgd + 1e-9);
        let b = root_bounds(inst);
        let p = build_problem(inst, &b, &SplitSet::new()).unwrap();
        let s = mpcc::solve(&p, None, &SolveOptions::default()).unwrap();
        assert!(f <= s.objective + 1e-6);
        if s.objective <= pgd + 1e-6 * (1.0 + pgd.abs()) {
            nlp_wins += 1;
        }
    }
    println!("NLP at least as tight as PGD on {nlp_wins}/{}", cases.len());
}
