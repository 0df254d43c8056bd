//! Branch and bound over neuron phases.
//!
//! Lower bounds come from backward propagation with optimized slopes and
//! split multipliers; upper bounds from the complementarity program, which
//! is re-solved every `tau_max` bound computations on the domain being
//! processed. The global lower bound is the minimum over all unresolved
//! and pruned domains, so it stays sound when one child is much looser
//! than another.

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::branch::{
    base_scores, pattern_aligned_scores, select_branch, unsplit_unstable, DomainQueue, NlpPattern, DEFAULT_FSB_CANDIDATES,
};
use crate::error::{Error, Result};
use crate::model::VerificationInstance;
use crate::mpcc::{self, build_problem, make_warm_start_along, MpccProblem, MpccSolution, SolveOptions, SolveStatus};
use crate::propagate::{
    crown_lower_bound, optimize_relaxation, root_bounds, BoundResult, LayerBounds, Multipliers, OptimizeConfig, Phase,
    SplitSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Safe,
    Unsafe,
    Gap,
}

/// Why the search loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Decided before branching.
    Root,
    /// Bracket narrower than epsilon, or a signed verdict.
    Converged,
    /// Every domain was resolved.
    Exhausted,
    RoundLimit,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
    pub counterexample: Option<Vec<f64>>,
    pub rounds: usize,
    pub nlp_solves: usize,
    /// Pattern-fixed linear programs solved at fully split domains.
    pub lp_solves: usize,
    pub bound_evaluations: usize,
    pub domains_pruned: usize,
    /// At least one NLP or region solve returned a primal-feasible point.
    pub feasible_upper: bool,
    pub termination: Termination,
    pub tau_max: usize,
    pub time_s: f64,
    pub history: Vec<HistoryEntry>,
}

impl Certificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

/// A node of the search tree.
#[derive(Debug, Clone)]
pub struct Domain {
    pub splits: SplitSet,
    pub lower: f64,
    /// Value of the nearest solved ancestor unless solved here.
    pub upper: f64,
    pub depth: usize,
    pub insertion_seq: u64,
    bound: BoundResult,
    multipliers: Multipliers,
    warm: Option<Arc<Incumbent>>,
}

#[derive(Debug)]
struct Incumbent {
    problem: MpccProblem,
    solution: MpccSolution,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub timeout: Duration,
    pub solve: SolveOptions,
    pub optimize: OptimizeConfig,
    pub fsb_candidates: usize,
    /// Replace `tau_max` by the ratio of measured NLP and bound costs at
    /// the root. Makes runs timing dependent.
    pub calibrate_tau: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            timeout: Duration::from_secs(600),
            solve: SolveOptions::default(),
            optimize: OptimizeConfig::default(),
            fsb_candidates: DEFAULT_FSB_CANDIDATES,
            calibrate_tau: false,
        }
    }
}

struct Run<'a> {
    inst: &'a VerificationInstance,
    cfg: &'a VerifyConfig,
    bounds: LayerBounds,
    start: Instant,
    upper: f64,
    counterexample: Array1<f64>,
    history: Vec<HistoryEntry>,
    nlp_solves: usize,
    lp_solves: usize,
    bound_evaluations: usize,
    pruned: usize,
    feasible_upper: bool,
    tau_max: usize,
    /// Smallest lower bound among domains taken out of the queue without
    /// being branched (pruned safe, or fully split).
    settled: f64,
}

impl Run<'_> {
    fn solve_opts(&self) -> SolveOptions {
        SolveOptions {
            seed: self.cfg.seed,
            ..self.cfg.solve
        }
    }

    /// Records a freshly computed feasible value. Only strict improvements
    /// move the global upper bound.
    fn offer_upper(&mut self, value: f64, x: &Array1<f64>, feasible: bool) {
        self.feasible_upper |= feasible;
        if value < self.upper {
            self.upper = value;
            self.counterexample = x.clone();
        }
    }

    fn global_lower(&self, queue: &DomainQueue<Domain>) -> f64 {
        queue.min_lower().unwrap_or(f64::INFINITY).min(self.settled)
    }

    fn finish(self, lower: f64, rounds: usize, termination: Termination) -> Result<Certificate> {
        let mut verdict = if lower > 0.0 {
            Verdict::Safe
        } else if self.upper < 0.0 {
            Verdict::Unsafe
        } else {
            Verdict::Gap
        };
        let mut counterexample = None;
        if verdict == Verdict::Unsafe {
            // re-check by a plain forward pass
            let v = self.inst.spec_value(self.counterexample.view())?;
            if v < 0.0 && self.inst.contains(self.counterexample.view(), 1e-9) {
                counterexample = Some(self.counterexample.to_vec());
            } else {
                tracing::warn!(value = v, "counterexample failed the re-check");
                verdict = Verdict::Gap;
            }
        }
        Ok(Certificate {
            verdict,
            lower,
            upper: self.upper,
            gap: self.upper - lower,
            counterexample,
            rounds,
            nlp_solves: self.nlp_solves,
            lp_solves: self.lp_solves,
            bound_evaluations: self.bound_evaluations,
            domains_pruned: self.pruned,
            feasible_upper: self.feasible_upper,
            termination,
            tau_max: self.tau_max,
            time_s: self.start.elapsed().as_secs_f64(),
            history: self.history,
        })
    }
}

/// Runs branch and bound with the instance's tolerances.
pub fn verify(inst: &VerificationInstance, cfg: &VerifyConfig) -> Result<Certificate> {
    inst.validate()?;
    let start = Instant::now();
    let bounds = root_bounds(inst);
    let root_splits = SplitSet::new();
    let t_bound = Instant::now();
    let root = optimize_relaxation(inst, &bounds, &root_splits, None, cfg.optimize);
    let bound_cost = t_bound.elapsed();
    let f0 = inst.spec_value(inst.x0.view())?;
    let mut run = Run {
        inst,
        cfg,
        bounds,
        start,
        upper: f0,
        counterexample: inst.x0.clone(),
        history: Vec::new(),
        nlp_solves: 0,
        lp_solves: 0,
        bound_evaluations: 1,
        pruned: 0,
        feasible_upper: false,
        tau_max: inst.tau_max,
        settled: f64::INFINITY,
    };
    let root_lower = root.result.lb;
    if root_lower > 0.0 {
        run.history.push(HistoryEntry {
            round: 0,
            lower: root_lower,
            upper: run.upper,
        });
        return run.finish(root_lower, 0, Termination::Root);
    }

    let t_nlp = Instant::now();
    let problem = build_problem(inst, &run.bounds, &root_splits)?;
    let sol = mpcc::solve(&problem, None, &run.solve_opts())?;
    let nlp_cost = t_nlp.elapsed();
    run.nlp_solves += 1;
    run.offer_upper(sol.objective, &sol.x_star, sol.status != SolveStatus::Infeasible);
    if cfg.calibrate_tau {
        let ratio = nlp_cost.as_secs_f64() / bound_cost.as_secs_f64().max(1e-9);
        run.tau_max = (ratio.ceil() as usize).max(1);
        tracing::debug!(tau_max = run.tau_max, "calibrated re-solve interval");
    }
    let mut a_nlp = NlpPattern::from_solution(&problem, &sol);
    let root_upper = sol.objective;
    let incumbent = Arc::new(Incumbent { problem, solution: sol });
    run.history.push(HistoryEntry {
        round: 0,
        lower: root_lower,
        upper: run.upper,
    });
    if run.upper < 0.0 {
        return run.finish(root_lower, 0, Termination::Root);
    }

    let mut queue = DomainQueue::new();
    let seq = queue.next_seq();
    queue.push(
        root_lower,
        Domain {
            splits: root_splits,
            lower: root_lower,
            upper: root_upper,
            depth: 0,
            insertion_seq: seq,
            bound: root.result,
            multipliers: root.multipliers,
            warm: Some(incumbent),
        },
    );

    let unstable = run.bounds.unstable();
    let mut tau = 0usize;
    let mut rounds = 0usize;
    let termination = loop {
        let lower = run.global_lower(&queue);
        if lower > 0.0 || run.upper - lower <= inst.epsilon {
            break Termination::Converged;
        }
        if queue.is_empty() {
            break Termination::Exhausted;
        }
        if rounds >= inst.t_max {
            break Termination::RoundLimit;
        }
        if start.elapsed() >= cfg.timeout {
            break Termination::Timeout;
        }
        rounds += 1;
        let (_, dom) = queue.select_domain().expect("queue is nonempty");

        let scored = base_scores(inst, &run.bounds, &dom.splits, &dom.bound, Some(&dom.multipliers.beta), cfg.fsb_candidates)?;
        let aligned = pattern_aligned_scores(&scored.scores, &dom.splits, &a_nlp, inst.lambda);
        let pick = select_branch(&aligned).ok_or(Error::NoUnstableNeurons)?;
        let neuron = pick.neuron;
        let first = if inst.lambda > 0.0 {
            a_nlp.get(neuron).unwrap_or(Phase::Active)
        } else {
            Phase::Active
        };
        let fsb = &scored.children[&neuron];

        // with a positive weight the child that follows the NLP pattern is
        // queued first, so it is popped first among equal bounds
        for phase in [first, first.flip()] {
            let splits = dom.splits.with(neuron, phase);
            let quick = fsb.get(phase);
            let opt = optimize_relaxation(inst, &run.bounds, &splits, Some(&dom.multipliers), cfg.optimize);
            run.bound_evaluations += 1;
            tau += 1;
            let (mut bound, mut multipliers) = if opt.result.lb >= quick.lb {
                (opt.result, opt.multipliers)
            } else {
                (quick.clone(), Multipliers::initial(&run.bounds))
            };
            if bound.is_infeasible() {
                run.pruned += 1;
                continue;
            }
            let leaf = unsplit_unstable(&run.bounds, &splits).is_empty();
            let mut fresh: Option<f64> = None;
            if leaf {
                let pattern: Vec<bool> = unstable.iter().map(|&id| splits.get(id).is_some_and(Phase::is_active)).collect();
                if let Some(lp) = mpcc::solve_region(inst, &run.bounds, &unstable, &pattern, &cfg.solve.ipm)? {
                    run.lp_solves += 1;
                    let mut betas = Multipliers::initial(&run.bounds).beta;
                    for (id, d) in unstable.iter().zip(&lp.sign_duals) {
                        betas[id.layer][id.index] = *d;
                    }
                    let exact = crown_lower_bound(inst, &run.bounds, &splits, Some(&betas));
                    run.bound_evaluations += 1;
                    if exact.lb > bound.lb {
                        multipliers.beta = betas;
                        bound = exact;
                    }
                    run.offer_upper(lp.value, &lp.x, lp.status != SolveStatus::Infeasible);
                    fresh = Some(lp.value);
                }
            }
            let mut warm = dom.warm.clone();
            if tau > run.tau_max {
                tau = 0;
                let child_problem = build_problem(inst, &run.bounds, &splits)?;
                let start_point = match &dom.warm {
                    Some(anc) => make_warm_start_along(&anc.solution, &anc.problem, &child_problem)?,
                    None => None,
                };
                let sol = mpcc::solve(&child_problem, start_point.as_ref(), &run.solve_opts())?;
                run.nlp_solves += 1;
                run.offer_upper(sol.objective, &sol.x_star, sol.status != SolveStatus::Infeasible);
                fresh = Some(fresh.map_or(sol.objective, |f| f.min(sol.objective)));
                a_nlp = NlpPattern::from_solution(&child_problem, &sol);
                warm = Some(Arc::new(Incumbent {
                    problem: child_problem,
                    solution: sol,
                }));
            }
            // a child never covers more inputs than its parent
            let lower = bound.lb.max(dom.lower);
            if fresh.is_some_and(|u| u < 0.0) {
                let lower = run.global_lower(&queue).min(dom.lower);
                run.history.push(HistoryEntry {
                    round: rounds,
                    lower,
                    upper: run.upper,
                });
                return run.finish(lower, rounds, Termination::Converged);
            }
            if lower > 0.0 {
                run.pruned += 1;
                run.settled = run.settled.min(lower);
                continue;
            }
            if leaf {
                run.settled = run.settled.min(lower);
                continue;
            }
            let seq = queue.next_seq();
            queue.push(
                lower,
                Domain {
                    splits,
                    lower,
                    upper: fresh.unwrap_or(dom.upper),
                    depth: dom.depth + 1,
                    insertion_seq: seq,
                    bound,
                    multipliers,
                    warm,
                },
            );
        }
        run.history.push(HistoryEntry {
            round: rounds,
            lower: run.global_lower(&queue),
            upper: run.upper,
        });
    };
    let lower = run.global_lower(&queue);
    run.finish(lower, rounds, termination)
}

/// Errors of one case against a reference minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub upper: Option<f64>,
    pub reference: Option<f64>,
    pub abs_err: Option<f64>,
    /// `abs_err / |reference|`, absent when the reference is zero.
    pub rel_err: Option<f64>,
}

pub fn case_metrics(upper: Option<f64>, reference: Option<f64>) -> CaseMetrics {
    let abs_err = match (upper, reference) {
        (Some(u), Some(r)) => Some((u - r).abs()),
        _ => None,
    };
    let rel_err = match (abs_err, reference) {
        (Some(a), Some(r)) if r != 0.0 => Some(a / r.abs()),
        _ => None,
    };
    CaseMetrics {
        upper,
        reference,
        abs_err,
        rel_err,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cases: Vec<CaseMetrics>,
    pub mean_abs_err: Option<f64>,
    pub mean_rel_err: Option<f64>,
    pub median_rel_err: Option<f64>,
    /// Percentage of cases with an upper bound.
    pub upper_rate: f64,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

/// Aggregates per-case errors. Cases without a reference are left out of
/// the error means but count towards the upper-bound rate.
pub fn aggregate(cases: Vec<CaseMetrics>) -> Metrics {
    let abs: Vec<f64> = cases.iter().filter_map(|c| c.abs_err).collect();
    let rel: Vec<f64> = cases.iter().filter_map(|c| c.rel_err).collect();
    let produced = cases.iter().filter(|c| c.upper.is_some()).count();
    let upper_rate = if cases.is_empty() {
        0.0
    } else {
        100.0 * produced as f64 / cases.len() as f64
    };
    Metrics {
        mean_abs_err: mean(&abs),
        mean_rel_err: mean(&rel),
        median_rel_err: median(&rel),
        upper_rate,
        cases,
    }
}

/// Metrics of a set of certificates against oracle minima, case by case.
pub fn compute_metrics(certificates: &[Certificate], oracle: &[Option<f64>]) -> Result<Metrics> {
    if certificates.len() != oracle.len() {
        return Err(Error::Instance(format!(
            "{} certificates but {} reference values",
            certificates.len(),
            oracle.len()
        )));
    }
    let cases = certificates
        .iter()
        .zip(oracle)
        .map(|(c, &r)| case_metrics(c.feasible_upper.then_some(c.upper), r))
        .collect();
    Ok(aggregate(cases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy, Norm, Specification};
    use crate::oracle;
    use ndarray::array;

    fn monotone(c: &Certificate) -> bool {
        c.history.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            b.lower >= a.lower - 1e-9 && b.upper <= a.upper + 1e-9 && b.upper - b.lower <= a.upper - a.lower + 1e-9
        })
    }

    #[test]
    fn example_is_unsafe_at_root() {
        let mut inst = toy::scalar_example_instance();
        inst.epsilon = 0.01;
        let c = verify(&inst, &VerifyConfig::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Unsafe);
        assert_eq!(c.rounds, 0);
        assert!(c.upper <= -2.9 + 1e-4);
        let x = c.counterexample.unwrap();
        assert!((x[0] + 1.0).abs() <= 1e-4);
        assert!(inst.spec_value(array![x[0]].view()).unwrap() < 0.0);
    }

    #[test]
    fn point_domain_is_safe() {
        let net = Arc::new(toy::scalar_example());
        let inst = VerificationInstance::new(net, array![0.9], 0.0, Norm::Inf, Specification::scalar(0)).unwrap();
        assert!(inst.spec_value(inst.x0.view()).unwrap() > 0.0);
        let c = verify(&inst, &VerifyConfig::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Safe);
        assert_eq!(c.rounds, 0);
        assert_eq!(c.termination, Termination::Root);
    }

    #[test]
    fn brackets_oracle_on_small_sweep() {
        for (_, inst) in toy::sweep(8, 20) {
            let f = oracle::global_min(&inst, 20).unwrap().f_star;
            let c = verify(&inst, &VerifyConfig::default()).unwrap();
            assert!(c.lower <= f + 1e-6 && f <= c.upper + 1e-6, "{f} not in [{}, {}]", c.lower, c.upper);
            assert!(monotone(&c));
            match c.verdict {
                Verdict::Safe => assert!(f > 0.0),
                Verdict::Unsafe => assert!(f < 0.0),
                Verdict::Gap => assert!((c.gap - (c.upper - c.lower)).abs() < 1e-15),
            }
        }
    }

    #[test]
    fn branching_closes_the_gap() {
        // tiny tau so the NLP is re-solved inside the loop as well
        let (_, mut inst) = toy::sweep(4, 20).pop().unwrap();
        inst.tau_max = 1;
        inst.epsilon = 1e-4;
        let c = verify(&inst, &VerifyConfig::default()).unwrap();
        let f = oracle::global_min(&inst, 20).unwrap().f_star;
        assert!(c.lower <= f + 1e-6 && f <= c.upper + 1e-6);
        assert!(monotone(&c));
        if c.verdict == Verdict::Gap {
            assert!(c.gap <= 1e-4 || c.termination != Termination::Converged);
        }
    }

    #[test]
    fn deterministic() {
        let (_, inst) = toy::sweep(3, 20).pop().unwrap();
        let a = verify(&inst, &VerifyConfig::default()).unwrap();
        let b = verify(&inst, &VerifyConfig::default()).unwrap();
        assert_eq!(a.verdict, b.verdict);
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.lower, b.lower);
        assert_eq!(a.upper, b.upper);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn round_limit_gives_gap() {
        let inst = toy::random_instance(&[2, 8, 8, 2], 0.2, 5);
        let mut inst = inst;
        inst.t_max = 1;
        inst.epsilon = 1e-12;
        let c = verify(&inst, &VerifyConfig::default()).unwrap();
        assert!(c.rounds <= 1);
        assert!(c.lower <= c.upper);
    }

    #[test]
    fn certificate_json_fields() {
        let inst = toy::scalar_example_instance();
        let c = verify(&inst, &VerifyConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        for key in ["verdict", "lower", "upper", "gap", "counterexample", "rounds", "nlp_solves", "time_s", "history"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["verdict"], "unsafe");
        assert_eq!(v["history"][0]["round"], 0);
    }

    #[test]
    fn metrics_arithmetic() {
        let m = case_metrics(Some(-2.8999), Some(-2.9));
        assert!((m.abs_err.unwrap() - 1e-4).abs() < 1e-12);
        assert!((m.rel_err.unwrap() - 3.448e-5).abs() < 1e-8);
        let exact = case_metrics(Some(1.5), Some(1.5));
        assert_eq!(exact.abs_err, Some(0.0));
        assert_eq!(exact.rel_err, Some(0.0));
        assert_eq!(case_metrics(Some(0.1), Some(0.0)).rel_err, None);
        let agg = aggregate(vec![m, exact, case_metrics(Some(1.0), None), case_metrics(None, Some(1.0))]);
        assert_eq!(agg.upper_rate, 75.0);
        assert_eq!(agg.cases.len(), 4);
        assert!((agg.mean_abs_err.unwrap() - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn metrics_length_mismatch() {
        assert!(compute_metrics(&[], &[Some(1.0)]).is_err());
    }
}
