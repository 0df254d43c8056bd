//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ccver_core::bab::{case_metrics, aggregate, median, verify, Certificate, Termination, Verdict, VerifyConfig};
use ccver_core::model::toy;
use ccver_core::mpcc::{self, build_problem, make_warm_start, with_eps_comp, SolveOptions, SolveStatus, VarKey};
use ccver_core::oracle;
use ccver_core::propagate::{ibp_bounds, optimize_relaxation, root_bounds, OptimizeConfig, Phase};
use ccver_core::{SplitSet, VerificationInstance};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn monotone(c: &Certificate) -> bool {
    c.history.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        b.lower >= a.lower - 1e-9 && b.upper <= a.upper + 1e-9 && b.upper - b.lower <= a.upper - a.lower + 1e-9
    })
}

fn worked_example(r: &mut Report, certs: &mut Vec<Certificate>) {
    let t = Instant::now();
    let mut inst = toy::scalar_example_instance();
    inst.epsilon = 0.01;
    let c = verify(&inst, &VerifyConfig::default()).expect("verify");
    let g = oracle::global_min(&inst, oracle::DEFAULT_PATTERN_CAP).expect("oracle");
    let elapsed = t.elapsed();
    let x = c.counterexample.clone().unwrap_or_default();
    let pass = c.verdict == Verdict::Unsafe
        && x.len() == 1
        && (x[0] + 1.0).abs() <= 1e-4
        && c.upper <= -2.9 + 1e-4
        && (g.f_star + 2.9).abs() <= 1e-8
        && elapsed < Duration::from_secs(1);
    r.check(
        "two-neuron example end to end",
        pass,
        format!(
            "verdict {:?}, counterexample {:?}, upper {:.9}, oracle {:.12}, {:.3}s",
            c.verdict,
            x,
            c.upper,
            g.f_star,
            elapsed.as_secs_f64()
        ),
    );
    certs.push(c);
}

struct SweepCase {
    f_star: f64,
    upper: f64,
    status: SolveStatus,
}

fn sweep_checks(r: &mut Report, certs: &mut Vec<Certificate>) -> Vec<(u64, VerificationInstance)> {
    let t = Instant::now();
    let cases = toy::sweep(100, 20);
    let mut rows = Vec::new();
    let (mut ub_ok, mut lb_ok, mut bab_ok) = (0, 0, 0);
    let mut worst = String::new();
    for (seed, inst) in &cases {
        let f = oracle::global_min(inst, 20).expect("oracle").f_star;
        let bounds = root_bounds(inst);
        let problem = build_problem(inst, &bounds, &SplitSet::new()).expect("problem");
        let sol = mpcc::solve(&problem, None, &SolveOptions::default()).expect("solve");
        let lb = optimize_relaxation(inst, &bounds, &SplitSet::new(), None, OptimizeConfig::default()).result.lb;
        let mut bab_inst = inst.clone();
        bab_inst.epsilon = 1e-3;
        let c = verify(&bab_inst, &VerifyConfig::default()).expect("verify");
        ub_ok += usize::from(f <= sol.objective + 1e-6);
        lb_ok += usize::from(lb <= f + 1e-6);
        let in_bracket = c.lower - 1e-6 <= f && f <= c.upper + 1e-6;
        bab_ok += usize::from(in_bracket);
        if !in_bracket && worst.is_empty() {
            worst = format!(", first miss seed {seed}: {f} not in [{}, {}]", c.lower, c.upper);
        }
        rows.push(SweepCase {
            f_star: f,
            upper: sol.objective,
            status: sol.status,
        });
        certs.push(c);
    }
    let elapsed = t.elapsed();
    let n = cases.len();
    r.check(
        "soundness sandwich",
        ub_ok == n && lb_ok == n && bab_ok == n && elapsed < Duration::from_secs(300),
        format!(
            "f*<=ub {ub_ok}/{n}, lb<=f* {lb_ok}/{n}, BaB bracket {bab_ok}/{n}, {:.1}s{worst}",
            elapsed.as_secs_f64()
        ),
    );

    let metrics = aggregate(
        rows.iter()
            .map(|c| case_metrics((c.status != SolveStatus::Infeasible).then_some(c.upper), Some(c.f_star)))
            .collect(),
    );
    let med = metrics.median_rel_err.unwrap_or(f64::INFINITY);
    r.check(
        "NLP upper bound tightness",
        med <= 1e-2 && metrics.upper_rate == 100.0,
        format!(
            "median relative error {med:.3e}, mean {:.3e}, upper-bound rate {:.0}%",
            metrics.mean_rel_err.unwrap_or(f64::NAN),
            metrics.upper_rate
        ),
    );
    cases
}

fn softening(r: &mut Report, cases: &[(u64, VerificationInstance)]) {
    let mut worst = (0.0f64, 0u64);
    for (seed, inst) in cases {
        let bounds = root_bounds(inst);
        let base = build_problem(inst, &bounds, &SplitSet::new()).expect("problem");
        let tight = mpcc::solve(&with_eps_comp(&base, 1e-8), None, &SolveOptions::default()).expect("solve");
        let loose = mpcc::solve(&with_eps_comp(&base, 1e-5), None, &SolveOptions::default()).expect("solve");
        let d = (tight.objective - loose.objective).abs();
        if d > worst.0 {
            worst = (d, *seed);
        }
    }
    r.check(
        "softening insensitivity",
        worst.0 <= 1e-4,
        format!("max |ub(1e-8) - ub(1e-5)| = {:.3e} (seed {}) over {} fixtures", worst.0, worst.1, cases.len()),
    );
}

fn warm_start(r: &mut Report, cases: &[(u64, VerificationInstance)]) {
    let opts = SolveOptions {
        restarts: 0,
        polish: false,
        ..SolveOptions::default()
    };
    let mut warm = Vec::new();
    let mut cold = Vec::new();
    for (_, inst) in cases.iter().take(30) {
        let bounds = root_bounds(inst);
        let parent = build_problem(inst, &bounds, &SplitSet::new()).expect("problem");
        let psol = mpcc::solve(&parent, None, &opts).expect("solve");
        for id in bounds.unstable().into_iter().take(4) {
            for phase in [Phase::Active, Phase::Inactive] {
                let child = build_problem(inst, &bounds, &SplitSet::new().with(id, phase)).expect("problem");
                let Some(ws) = make_warm_start(&psol, &parent, &child) else {
                    continue;
                };
                warm.push(mpcc::solve(&child, Some(&ws), &opts).expect("solve").ipm_iterations as f64);
                cold.push(mpcc::solve(&child, None, &opts).expect("solve").ipm_iterations as f64);
            }
        }
    }
    let (mw, mc) = (median(&warm).unwrap_or(f64::NAN), median(&cold).unwrap_or(f64::NAN));
    r.check(
        "warm-start speedup",
        warm.len() >= 50 && mw <= 0.7 * mc,
        format!("{} child re-solves, median iterations warm {mw} vs cold {mc} (ratio {:.3})", warm.len(), mw / mc),
    );
}

fn aligned_branching(r: &mut Report, certs: &mut Vec<Certificate>) {
    let budget = 30;
    let mut rows = Vec::new();
    let mut violations = 0;
    for seed in 0..400u64 {
        if rows.len() >= 10 {
            break;
        }
        let mut inst = toy::random_instance(&[2, 8, 8, 2], 0.4, seed);
        if ibp_bounds(&inst.network, inst.x0.view(), inst.delta).unstable().len() > 20 {
            continue;
        }
        inst.epsilon = 1e-6;
        inst.t_max = budget;
        inst.lambda = 0.0;
        let base = verify(&inst, &VerifyConfig::default()).expect("verify");
        if base.termination != Termination::RoundLimit {
            continue;
        }
        inst.lambda = 0.1;
        let aligned = verify(&inst, &VerifyConfig::default()).expect("verify");
        let f = oracle::global_min(&inst, 20).expect("oracle").f_star;
        for c in [&base, &aligned] {
            if !(c.lower - 1e-6 <= f && f <= c.upper + 1e-6) {
                violations += 1;
            }
        }
        rows.push((seed, f, base.lower, aligned.lower));
        certs.push(base);
        certs.push(aligned);
    }
    println!("  seed        f*   lower(0)   lower(0.1)");
    for (seed, f, l0, l1) in &rows {
        println!("  {seed:>4} {f:>9.5} {l0:>10.5} {l1:>12.5}");
    }
    let wins = rows.iter().filter(|(_, _, l0, l1)| *l1 >= *l0 - 1e-9).count();
    let pass = rows.len() >= 10 && wins as f64 >= 0.6 * rows.len() as f64 && violations == 0;
    r.check(
        "pattern-aligned branching",
        pass,
        format!(
            "lambda 0.1 lower bound >= lambda 0 on {wins}/{} instances at {budget} rounds, {violations} soundness violations",
            rows.len()
        ),
    );
}

fn monotone_histories(r: &mut Report, certs: &[Certificate]) {
    let bad = certs.iter().filter(|c| !monotone(c)).count();
    r.check(
        "monotone certificates",
        bad == 0 && !certs.is_empty(),
        format!("{bad} of {} histories not monotone", certs.len()),
    );
}

/// Forward pass written out with plain loops.
fn preactivations(inst: &VerificationInstance, x: &Array1<f64>) -> (Vec<Vec<f64>>, f64) {
    let layers = inst.network.layers();
    let mut h: Vec<f64> = x.to_vec();
    let mut pre = Vec::new();
    for (k, layer) in layers.iter().enumerate() {
        let (rows, cols) = layer.weights.dim();
        let mut z = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = layer.bias[i];
            for j in 0..cols {
                acc += layer.weights[[i, j]] * h[j];
            }
            z[i] = acc;
        }
        if k + 1 < layers.len() {
            h = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
        } else {
            h = z;
        }
    }
    let f = inst.spec.value(Array1::from(h).view());
    (pre, f)
}

fn exact_reformulation(r: &mut Report, cases: &[(u64, VerificationInstance)]) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut bad = 0;
    let total = 1000;
    for t in 0..total {
        let inst = &cases[t % cases.len()].1;
        let bounds = root_bounds(inst);
        let x: Array1<f64> = inst.x0.mapv(|c| c + inst.delta * rng.gen_range(-1.0..=1.0));
        let (pre, f) = preactivations(inst, &x);
        // fix some unstable neurons to the phase they take at x
        let mut splits = SplitSet::new();
        for id in bounds.unstable() {
            if rng.gen_bool(0.3) {
                splits.insert(id, Phase::from_bit(pre[id.layer][id.index] > 0.0));
            }
        }
        let problem = build_problem(inst, &bounds, &splits).expect("problem");
        let mut v = vec![0.0; problem.num_vars()];
        for (i, key) in problem.vars.iter().enumerate() {
            v[i] = match *key {
                VarKey::X(j) => x[j],
                VarKey::Z(n) => pre[n.layer][n.index],
                VarKey::P(n) => pre[n.layer][n.index].max(0.0),
                VarKey::Q(n) => (-pre[n.layer][n.index]).max(0.0),
            };
        }
        let violation = problem.nlp.max_violation(&v);
        let decoded = problem.decode_input(&v);
        let value = problem.nlp_objective(&v);
        let err = (value - f).abs() / (1.0 + f.abs());
        worst = worst.max(err);
        if err > 1e-5 || violation > 1e-9 || decoded != x {
            bad += 1;
        }
    }
    r.check(
        "exact reformulation",
        bad == 0,
        format!("{bad}/{total} assignments disagree, worst scaled error {worst:.3e}"),
    );
}

fn main() -> ExitCode {
    let mut r = Report { failed: 0 };
    let mut certs = Vec::new();
    worked_example(&mut r, &mut certs);
    let cases = sweep_checks(&mut r, &mut certs);
    softening(&mut r, &cases);
    warm_start(&mut r, &cases);
    aligned_branching(&mut r, &mut certs);
    monotone_histories(&mut r, &certs);
    exact_reformulation(&mut r, &cases);
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", r.failed);
        ExitCode::FAILURE
    }
}
