//! Activation-exact nonlinear program for a domain.
//!
//! Every hidden neuron has a pre-activation variable `z`. A neuron that is
//! unstable at the root gets a pair `p, q >= 0` with `z = p - q` and
//! post-activation `p`; while unsplit, the pair carries the softened
//! complementarity `p * q <= eps_comp`. Splitting fixes the pair with linear
//! relations instead (active: `q = 0`, so `p = z >= 0`; inactive: `p = 0`, so
//! `z = -q <= 0`). Stable neurons are inlined as identity or zero.
//!
//! The variable layout depends only on the network and the root unstable
//! set, so every domain of a branch-and-bound run shares it and iterates can
//! be carried from a parent to its children.
//!
//! The reported upper bound is always the network re-evaluated at the
//! returned input, which lies in the perturbation set, so it is sound no
//! matter how the interior-point solve ended.

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipm::{self, EqRow, IneqKind, Inequality, IpmOptions, IpmStatus, Iterate, Nlp};
use crate::model::{NeuronId, Norm, VerificationInstance};
use crate::propagate::{LayerBounds, Phase, SplitSet};

/// Interiority push for warm starts.
pub const WARM_PUSH: f64 = 1e-4;

/// Below this width a variable is treated as fixed.
const FIXED_WIDTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKey {
    X(usize),
    Z(NeuronId),
    P(NeuronId),
    Q(NeuronId),
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarKey::X(i) => write!(f, "x[{i}]"),
            VarKey::Z(n) => write!(f, "z[{}][{}]", n.layer, n.index),
            VarKey::P(n) => write!(f, "p[{}][{}]", n.layer, n.index),
            VarKey::Q(n) => write!(f, "q[{}][{}]", n.layer, n.index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKey {
    /// `z - W zhat = b` for one neuron.
    Layer(NeuronId),
    /// `z - p + q = 0`.
    Pair(NeuronId),
    /// `q = 0` (active split) or `p = 0` (inactive split).
    Fix(NeuronId),
    /// `x_i = x0_i` when the radius is zero.
    InputFix(usize),
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowKey::Layer(n) => write!(f, "layer{n}"),
            RowKey::Pair(n) => write!(f, "pair{n}"),
            RowKey::Fix(n) => write!(f, "fix{n}"),
            RowKey::InputFix(i) => write!(f, "input_fix({i})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IneqKey {
    Comp(NeuronId),
    Ball,
}

#[derive(Debug, Clone)]
pub struct MpccProblem {
    pub inst: VerificationInstance,
    pub splits: SplitSet,
    /// Frozen root bounds the problem was built from.
    pub bounds: LayerBounds,
    /// Root unstable neurons in (layer, index) order; each owns a `p, q` pair.
    pub unstable: Vec<NeuronId>,
    pub vars: Vec<VarKey>,
    pub rows: Vec<RowKey>,
    pub ineq_keys: Vec<IneqKey>,
    pub nlp: Nlp,
    var_index: HashMap<VarKey, usize>,
}

fn widen(v: f64) -> f64 {
    1e-7 * v.abs().max(1.0)
}

/// Builds the program for the domain given by `splits` under frozen root
/// bounds.
pub fn build_problem(inst: &VerificationInstance, bounds: &LayerBounds, splits: &SplitSet) -> Result<MpccProblem> {
    build_with_comp(inst, bounds, splits, inst.eps_comp)
}

fn build_with_comp(inst: &VerificationInstance, bounds: &LayerBounds, splits: &SplitSet, eps_comp: f64) -> Result<MpccProblem> {
    let net = &inst.network;
    if bounds.num_layers() != net.num_hidden() {
        return Err(Error::Instance(format!(
            "bounds cover {} hidden layers, network has {}",
            bounds.num_layers(),
            net.num_hidden()
        )));
    }
    for (id, _) in splits.iter() {
        if id.layer >= bounds.num_layers() || id.index >= bounds.lower[id.layer].len() || !bounds.is_unstable(id) {
            return Err(Error::StableSplit {
                layer: id.layer,
                index: id.index,
            });
        }
    }
    let unstable = bounds.unstable();
    let d = net.input_dim();

    let mut vars = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let (xl, xu) = inst.input_box();
    for i in 0..d {
        vars.push(VarKey::X(i));
        if inst.delta <= FIXED_WIDTH {
            lower.push(f64::NEG_INFINITY);
            upper.push(f64::INFINITY);
        } else {
            lower.push(xl[i]);
            upper.push(xu[i]);
        }
    }
    for (k, w) in net.hidden_widths().into_iter().enumerate() {
        for j in 0..w {
            let id = NeuronId::new(k, j);
            let (l, u) = bounds.split_interval(id, splits);
            vars.push(VarKey::Z(id));
            let (mut lo, mut hi) = (l - widen(l), u + widen(u));
            match splits.get(id) {
                Some(Phase::Active) => lo = 0.0,
                Some(Phase::Inactive) => hi = 0.0,
                None => {}
            }
            if hi - lo <= FIXED_WIDTH {
                lo = f64::NEG_INFINITY;
                hi = f64::INFINITY;
            }
            lower.push(lo);
            upper.push(hi);
        }
    }
    for &id in &unstable {
        let (l, u) = (bounds.lower[id.layer][id.index], bounds.upper[id.layer][id.index]);
        for (key, cap) in [(VarKey::P(id), u), (VarKey::Q(id), -l)] {
            vars.push(key);
            if splits.get(id).is_some() {
                lower.push(f64::NEG_INFINITY);
                upper.push(f64::INFINITY);
            } else {
                lower.push(0.0);
                upper.push(cap + widen(cap));
            }
        }
    }
    let var_index: HashMap<VarKey, usize> = vars.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let is_unstable: std::collections::HashSet<NeuronId> = unstable.iter().copied().collect();

    // post-activation of a neuron as a sparse term, or None when inlined as zero
    let post = |id: NeuronId| -> Option<usize> {
        if is_unstable.contains(&id) {
            Some(var_index[&VarKey::P(id)])
        } else if bounds.lower[id.layer][id.index] >= 0.0 {
            Some(var_index[&VarKey::Z(id)])
        } else {
            None
        }
    };

    let mut rows = Vec::new();
    let mut eq = Vec::new();
    if inst.delta <= FIXED_WIDTH {
        for i in 0..d {
            rows.push(RowKey::InputFix(i));
            eq.push(EqRow {
                coeffs: vec![(i, 1.0)],
                rhs: inst.x0[i],
            });
        }
    }
    let layers = net.layers();
    for (k, layer) in layers[..net.num_hidden()].iter().enumerate() {
        for j in 0..layer.out_dim() {
            let id = NeuronId::new(k, j);
            let mut coeffs = vec![(var_index[&VarKey::Z(id)], 1.0)];
            for (c, &w) in layer.weights.row(j).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = if k == 0 { Some(c) } else { post(NeuronId::new(k - 1, c)) };
                if let Some(v) = src {
                    coeffs.push((v, -w));
                }
            }
            rows.push(RowKey::Layer(id));
            eq.push(EqRow {
                coeffs,
                rhs: layer.bias[j],
            });
        }
    }
    let mut ineq = Vec::new();
    let mut ineq_keys = Vec::new();
    for &id in &unstable {
        let (z, p, q) = (var_index[&VarKey::Z(id)], var_index[&VarKey::P(id)], var_index[&VarKey::Q(id)]);
        rows.push(RowKey::Pair(id));
        eq.push(EqRow {
            coeffs: vec![(z, 1.0), (p, -1.0), (q, 1.0)],
            rhs: 0.0,
        });
        match splits.get(id) {
            Some(phase) => {
                rows.push(RowKey::Fix(id));
                eq.push(EqRow {
                    coeffs: vec![(if phase.is_active() { q } else { p }, 1.0)],
                    rhs: 0.0,
                });
            }
            None => {
                ineq_keys.push(IneqKey::Comp(id));
                ineq.push(Inequality {
                    kind: IneqKind::Bilinear { p, q },
                    bound: eps_comp,
                });
            }
        }
    }
    if inst.norm == Norm::Two && inst.delta > FIXED_WIDTH {
        ineq_keys.push(IneqKey::Ball);
        ineq.push(Inequality {
            kind: IneqKind::Ball {
                vars: (0..d).collect(),
                center: inst.x0.to_vec(),
            },
            bound: inst.delta * inst.delta,
        });
    }

    // objective c . (W_L zhat + b_L)
    let c = inst.objective();
    let out = net.output_layer();
    let mut cost = vec![0.0; vars.len()];
    let last = net.num_hidden() - 1;
    for c_idx in 0..out.in_dim() {
        let w: f64 = (0..out.out_dim()).map(|o| c[o] * out.weights[[o, c_idx]]).sum();
        if let Some(v) = post(NeuronId::new(last, c_idx)) {
            cost[v] += w;
        }
    }
    let cost_const = c.dot(&out.bias);

    Ok(MpccProblem {
        inst: inst.clone(),
        splits: splits.clone(),
        bounds: bounds.clone(),
        unstable,
        vars,
        rows,
        ineq_keys,
        nlp: Nlp {
            cost,
            cost_const,
            eq,
            lower,
            upper,
            ineq,
        },
        var_index,
    })
}

impl MpccProblem {
    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_complementarity(&self) -> usize {
        self.ineq_keys.iter().filter(|k| matches!(k, IneqKey::Comp(_))).count()
    }

    pub fn var(&self, key: VarKey) -> Option<usize> {
        self.var_index.get(&key).copied()
    }

    /// Objective as a sparse linear form over named variables plus constant.
    pub fn objective_terms(&self) -> (Vec<(VarKey, f64)>, f64) {
        let terms = self
            .nlp
            .cost
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, c)| (self.vars[i], *c))
            .collect();
        (terms, self.nlp.cost_const)
    }

    /// Exact assignment induced by an input: forward pass for `z`, and
    /// `p = max(z, 0)`, `q = max(-z, 0)`. Feasible whenever `x` is in the
    /// perturbation set and the activation pattern respects the splits.
    pub fn assignment(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        let fwd = self.inst.network.forward(x)?;
        let mut v = vec![0.0; self.num_vars()];
        for (i, key) in self.vars.iter().enumerate() {
            v[i] = match *key {
                VarKey::X(j) => x[j],
                VarKey::Z(n) => fwd.preacts[n.layer][n.index],
                VarKey::P(n) => fwd.preacts[n.layer][n.index].max(0.0),
                VarKey::Q(n) => (-fwd.preacts[n.layer][n.index]).max(0.0),
            };
        }
        Ok(v)
    }

    /// Input part of a variable vector.
    pub fn decode_input(&self, v: &[f64]) -> Array1<f64> {
        v[..self.inst.network.input_dim()].iter().copied().collect()
    }

    pub fn nlp_objective(&self, v: &[f64]) -> f64 {
        self.nlp.objective(v)
    }

    /// Problem as JSON for cross-checking with external solvers: named
    /// variables with bounds, equality rows as `[row, col, value]` triples,
    /// inequalities and the objective.
    pub fn debug_json(&self) -> serde_json::Value {
        let bound = |b: f64| if b.is_finite() { serde_json::json!(b) } else { serde_json::Value::Null };
        let variables: Vec<_> = self
            .vars
            .iter()
            .enumerate()
            .map(|(i, k)| serde_json::json!({"name": k.to_string(), "lower": bound(self.nlp.lower[i]), "upper": bound(self.nlp.upper[i])}))
            .collect();
        let mut triples = Vec::new();
        for (r, row) in self.nlp.eq.iter().enumerate() {
            for &(c, a) in &row.coeffs {
                triples.push(serde_json::json!([r, c, a]));
            }
        }
        let rows: Vec<_> = self
            .rows
            .iter()
            .zip(&self.nlp.eq)
            .map(|(k, r)| serde_json::json!({"name": k.to_string(), "rhs": r.rhs}))
            .collect();
        let ineqs: Vec<_> = self
            .nlp
            .ineq
            .iter()
            .map(|g| match &g.kind {
                IneqKind::Bilinear { p, q } => serde_json::json!({"kind": "bilinear", "vars": [p, q], "bound": g.bound}),
                IneqKind::Ball { vars, center } => {
                    serde_json::json!({"kind": "ball", "vars": vars, "center": center, "bound": g.bound})
                }
            })
            .collect();
        let objective: Vec<_> = self
            .nlp
            .cost
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, c)| serde_json::json!([i, c]))
            .collect();
        serde_json::json!({
            "variables": variables,
            "equalities": rows,
            "constraints": triples,
            "inequalities": ineqs,
            "objective": {"terms": objective, "constant": self.nlp.cost_const},
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    MaxIter,
    Infeasible,
}

/// Neurons by complementarity outcome: `active` (only p away from zero),
/// `inactive` (only q), `undecided` (both or neither).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub active: Vec<usize>,
    pub inactive: Vec<usize>,
    pub undecided: Vec<usize>,
    pub pattern: Vec<bool>,
}

/// Classifies pairs by which side is above `tol`. Undecided neurons take
/// the phase of the larger side, ties going to inactive.
pub fn classify_partition(p: &[f64], q: &[f64], tol: f64) -> Partition {
    let mut out = Partition::default();
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj > tol && qj <= tol {
            out.active.push(j);
            out.pattern.push(true);
        } else if qj > tol && pj <= tol {
            out.inactive.push(j);
            out.pattern.push(false);
        } else {
            out.undecided.push(j);
            out.pattern.push(pj - qj > 0.0);
        }
    }
    out
}

/// Default classification tolerance `1e-5 * max(1, max |p|, |q|)`.
pub fn default_tolerance(p: &[f64], q: &[f64]) -> f64 {
    let scale = p.iter().chain(q).fold(1.0f64, |m, v| m.max(v.abs()));
    1e-5 * scale
}

#[derive(Debug, Clone)]
pub struct MpccSolution {
    /// Input in the perturbation set.
    pub x_star: Array1<f64>,
    /// Network value at `x_star`: a sound upper bound on the minimum.
    pub objective: f64,
    /// Objective of the program at the returned iterate.
    pub nlp_objective: f64,
    /// Per root unstable neuron, in `MpccProblem::unstable` order.
    pub p_star: Vec<f64>,
    pub q_star: Vec<f64>,
    /// Phase per root unstable neuron.
    pub pattern: Vec<bool>,
    /// Over unsplit unstable neurons, as `NeuronId`s.
    pub partition_active: Vec<NeuronId>,
    pub partition_inactive: Vec<NeuronId>,
    pub partition_undecided: Vec<NeuronId>,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub primal_infeasibility: f64,
    pub ipm_iterations: usize,
    /// Iterations summed over all starts.
    pub total_iterations: usize,
    /// Final primal-dual state, used for warm starts.
    pub iterate: Iterate,
    /// Whether the value came from the pattern-fixed linear program.
    pub polished: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub ipm: IpmOptions,
    /// Random restarts after the start at the nominal point.
    pub restarts: usize,
    pub seed: u64,
    /// Follow up with the linear program over the region of the best point.
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            ipm: IpmOptions::default(),
            restarts: 2,
            seed: 0,
            polish: true,
        }
    }
}

/// Warm iterate for a child problem.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub iterate: Iterate,
    pub mu0: f64,
}

fn status_of(r: &ipm::IpmResult) -> SolveStatus {
    match r.status {
        IpmStatus::Converged => SolveStatus::Solved,
        _ if r.primal_infeasibility <= 1e-6 => SolveStatus::MaxIter,
        _ => SolveStatus::Infeasible,
    }
}

fn finish(problem: &MpccProblem, r: ipm::IpmResult, total_iterations: usize) -> Result<MpccSolution> {
    let v = &r.iterate.v;
    let mut x = problem.decode_input(v);
    problem.inst.project(&mut x);
    let objective = problem.inst.spec_value(x.view())?;
    let p_star: Vec<f64> = problem.unstable.iter().map(|&id| v[problem.var_index[&VarKey::P(id)]]).collect();
    let q_star: Vec<f64> = problem.unstable.iter().map(|&id| v[problem.var_index[&VarKey::Q(id)]]).collect();
    let part = classify_partition(&p_star, &q_star, default_tolerance(&p_star, &q_star));
    let unsplit = |j: &usize| problem.splits.get(problem.unstable[*j]).is_none();
    let ids = |set: &[usize]| set.iter().filter(|j| unsplit(j)).map(|&j| problem.unstable[j]).collect::<Vec<_>>();
    Ok(MpccSolution {
        x_star: x,
        objective,
        nlp_objective: problem.nlp.objective(v),
        partition_active: ids(&part.active),
        partition_inactive: ids(&part.inactive),
        partition_undecided: ids(&part.undecided),
        pattern: part.pattern,
        p_star,
        q_star,
        status: status_of(&r),
        kkt_residual: r.kkt_error,
        primal_infeasibility: r.primal_infeasibility,
        ipm_iterations: r.iterations,
        total_iterations,
        iterate: r.iterate,
        polished: false,
    })
}

fn random_input(inst: &VerificationInstance, rng: &mut ChaCha8Rng) -> Array1<f64> {
    match inst.norm {
        Norm::Inf => inst.x0.mapv(|c| c + inst.delta * rng.gen_range(-1.0..=1.0)),
        Norm::Two => {
            let dir: Array1<f64> = (0..inst.x0.len()).map(|_| StandardNormal.sample(rng)).collect();
            let n = dir.dot(&dir).sqrt().max(1e-300);
            let r = inst.delta * rng.gen::<f64>().powf(1.0 / inst.x0.len() as f64);
            &inst.x0 + &(dir * (r / n))
        }
    }
}

fn solve_from(problem: &MpccProblem, x: &Array1<f64>, opts: &IpmOptions) -> Result<ipm::IpmResult> {
    let guess = problem.assignment(x.view())?;
    let start = ipm::cold_start(&problem.nlp, &guess, opts);
    Ok(ipm::solve(&problem.nlp, start, opts.mu_init, opts))
}

/// Solves the program. With a warm start a single solve is run from it;
/// otherwise one start from the nominal point plus `opts.restarts` random
/// starts, keeping the lowest network value.
pub fn solve(problem: &MpccProblem, warm: Option<&WarmStart>, opts: &SolveOptions) -> Result<MpccSolution> {
    let mut best: Option<MpccSolution> = None;
    let mut total = 0;
    let mut consider = |cand: MpccSolution, total: usize| {
        let better = match &best {
            None => true,
            Some(b) => cand.objective < b.objective,
        };
        if better {
            best = Some(MpccSolution {
                total_iterations: total,
                ..cand
            });
        } else if let Some(b) = best.as_mut() {
            b.total_iterations = total;
        }
    };
    if let Some(w) = warm {
        let r = ipm::solve(&problem.nlp, w.iterate.clone(), w.mu0, &opts.ipm);
        total += r.iterations;
        consider(finish(problem, r, total)?, total);
    } else {
        let r = solve_from(problem, &problem.inst.x0, &opts.ipm)?;
        total += r.iterations;
        consider(finish(problem, r, total)?, total);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.restarts {
            if problem.inst.delta <= FIXED_WIDTH {
                break;
            }
            let x = random_input(&problem.inst, &mut rng);
            let r = solve_from(problem, &x, &opts.ipm)?;
            total += r.iterations;
            consider(finish(problem, r, total)?, total);
        }
    }
    let mut sol = best.expect("at least one start");
    if opts.polish {
        polish(problem, &mut sol, &opts.ipm)?;
    }
    Ok(sol)
}

/// Replaces the returned point by the optimum of the linear program over
/// the activation region containing it, when that is lower.
fn polish(problem: &MpccProblem, sol: &mut MpccSolution, opts: &IpmOptions) -> Result<()> {
    let fwd = problem.inst.network.forward(sol.x_star.view())?;
    let pattern: Vec<bool> = problem.unstable.iter().map(|id| fwd.preacts[id.layer][id.index] > 0.0).collect();
    if let Some(lp) = region_lp(&problem.inst, &problem.bounds, &problem.unstable, &pattern, opts, Some(&sol.x_star))? {
        if lp.value < sol.objective {
            sol.objective = lp.value;
            sol.x_star = lp.x;
            sol.polished = true;
        }
    }
    Ok(())
}

/// Optimum of the pattern-fixed linear program.
#[derive(Debug, Clone)]
pub struct RegionSolution {
    /// Network value at `x` (sound upper bound).
    pub value: f64,
    pub x: Array1<f64>,
    pub lp_objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Multipliers of the split sign bounds `z >= 0` (active) or `z <= 0`
    /// (inactive), per neuron of the pattern, nonnegative.
    pub sign_duals: Vec<f64>,
}

fn region_lp(
    inst: &VerificationInstance,
    bounds: &LayerBounds,
    neurons: &[NeuronId],
    pattern: &[bool],
    opts: &IpmOptions,
    guess: Option<&Array1<f64>>,
) -> Result<Option<RegionSolution>> {
    let splits = SplitSet::from_pairs(neurons.iter().zip(pattern).map(|(&id, &a)| (id, Phase::from_bit(a))));
    let problem = build_problem(inst, bounds, &splits)?;
    let x = guess.cloned().unwrap_or_else(|| inst.x0.clone());
    let r = solve_from(&problem, &x, opts)?;
    let status = status_of(&r);
    if status == SolveStatus::Infeasible {
        return Ok(None);
    }
    let v = &r.iterate.v;
    let mut xs = problem.decode_input(v);
    inst.project(&mut xs);
    let value = inst.spec_value(xs.view())?;
    let sign_duals = neurons
        .iter()
        .zip(pattern)
        .map(|(&id, &a)| {
            let z = problem.var_index[&VarKey::Z(id)];
            if a {
                r.iterate.z_lo[z]
            } else {
                r.iterate.z_hi[z]
            }
        })
        .collect();
    Ok(Some(RegionSolution {
        value,
        x: xs,
        lp_objective: problem.nlp.objective(v),
        status,
        iterations: r.iterations,
        sign_duals,
    }))
}

/// Minimizes the specification over the inputs whose root unstable neurons
/// follow `pattern` (in `bounds.unstable()` order). `None` when the region
/// is empty.
pub fn region_lp_polish(inst: &VerificationInstance, bounds: &LayerBounds, pattern: &[bool]) -> Result<Option<RegionSolution>> {
    let unstable = bounds.unstable();
    if pattern.len() != unstable.len() {
        return Err(Error::PatternLength {
            expected: unstable.len(),
            got: pattern.len(),
        });
    }
    region_lp(inst, bounds, &unstable, pattern, &IpmOptions::default(), None)
}

/// Pattern-fixed linear program over an arbitrary set of neurons, which
/// must all be unstable in `bounds`.
pub fn solve_region(
    inst: &VerificationInstance,
    bounds: &LayerBounds,
    neurons: &[NeuronId],
    pattern: &[bool],
    opts: &IpmOptions,
) -> Result<Option<RegionSolution>> {
    region_lp(inst, bounds, neurons, pattern, opts, None)
}

/// Carries a parent solution over to a child problem that fixes one more
/// neuron. Returns `None` (cold start) when the problems differ otherwise.
pub fn make_warm_start(parent: &MpccSolution, parent_problem: &MpccProblem, child: &MpccProblem) -> Option<WarmStart> {
    warm_from(&parent.iterate, parent_problem, child)
}

/// Like [`make_warm_start`] for a descendant that fixes any number of
/// further neurons: the splits are applied one at a time in (layer, index)
/// order. `None` when `child` does not refine the parent domain.
pub fn make_warm_start_along(parent: &MpccSolution, parent_problem: &MpccProblem, child: &MpccProblem) -> Result<Option<WarmStart>> {
    let refines = parent_problem.splits.iter().all(|(id, ph)| child.splits.get(id) == Some(ph));
    if parent_problem.vars != child.vars || !refines {
        return Ok(None);
    }
    let extra: Vec<(NeuronId, Phase)> = child.splits.iter().filter(|(id, _)| parent_problem.splits.get(*id).is_none()).collect();
    if extra.len() <= 1 {
        return Ok(make_warm_start(parent, parent_problem, child));
    }
    let mut prev = parent_problem.clone();
    let mut iterate = parent.iterate.clone();
    let mut out = None;
    for (i, &(id, ph)) in extra.iter().enumerate() {
        let next = if i + 1 == extra.len() {
            child.clone()
        } else {
            build_problem(&child.inst, &child.bounds, &prev.splits.with(id, ph))?
        };
        let Some(ws) = warm_from(&iterate, &prev, &next) else {
            return Ok(None);
        };
        iterate = ws.iterate.clone();
        out = Some(ws);
        prev = next;
    }
    Ok(out)
}

fn warm_from(src: &Iterate, parent_problem: &MpccProblem, child: &MpccProblem) -> Option<WarmStart> {
    if parent_problem.vars != child.vars {
        tracing::debug!("warm start: variable layouts differ, cold start");
        return None;
    }
    let new: Vec<(NeuronId, Phase)> = child
        .splits
        .iter()
        .filter(|(id, ph)| parent_problem.splits.get(*id) != Some(*ph))
        .collect();
    let dropped = parent_problem.splits.iter().any(|(id, _)| child.splits.get(id).is_none());
    if new.len() > 1 || dropped {
        tracing::debug!("warm start: more than one split differs, cold start");
        return None;
    }
    if new.is_empty() && parent_problem.nlp == child.nlp {
        // same problem: restart exactly where the parent stopped
        let mu0 = ipm::average_complementarity(&child.nlp, src).max(IpmOptions::default().mu_min);
        return Some(WarmStart {
            iterate: src.clone(),
            mu0,
        });
    }

    let nlp = &child.nlp;
    let k = WARM_PUSH;
    let mut v = src.v.clone();
    for &(id, phase) in &new {
        let z = child.var_index[&VarKey::Z(id)];
        let p = child.var_index[&VarKey::P(id)];
        let q = child.var_index[&VarKey::Q(id)];
        if phase.is_active() {
            v[q] = 0.0;
            v[p] = v[z].max(k);
            v[z] = v[p];
        } else {
            v[p] = 0.0;
            v[q] = (-v[z]).max(k);
            v[z] = -v[q];
        }
    }
    for i in 0..v.len() {
        let (lo, hi) = (nlp.lower[i], nlp.upper[i]);
        let room = if lo.is_finite() && hi.is_finite() { 0.5 * (hi - lo) } else { f64::INFINITY };
        let push = k.min(room);
        if lo.is_finite() {
            v[i] = v[i].max(lo + push);
        }
        if hi.is_finite() {
            v[i] = v[i].min(hi - push);
        }
    }
    let clip = |z: f64, present: bool| if present { z.max(k) } else { 0.0 };
    let z_lo = (0..v.len()).map(|i| clip(src.z_lo[i], nlp.lower[i].is_finite())).collect();
    let z_hi = (0..v.len()).map(|i| clip(src.z_hi[i], nlp.upper[i].is_finite())).collect();

    let parent_rows: HashMap<RowKey, usize> = parent_problem.rows.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let y_eq = child
        .rows
        .iter()
        .map(|r| parent_rows.get(r).map_or(k, |&i| src.y_eq[i]))
        .collect();
    let parent_ineq: HashMap<IneqKey, usize> = parent_problem.ineq_keys.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let mut s = Vec::with_capacity(child.ineq_keys.len());
    let mut y_in = Vec::with_capacity(child.ineq_keys.len());
    let mut z_s = Vec::with_capacity(child.ineq_keys.len());
    for (key, g) in child.ineq_keys.iter().zip(&nlp.ineq) {
        let bound = g.bound;
        let (sv, yv, zv) = match parent_ineq.get(key) {
            Some(&i) => (src.s[i], src.y_in[i], src.z_s[i]),
            None => (g.value(&v), k, k),
        };
        s.push(sv.min(bound - k.min(bound.abs().max(1e-12) * 0.5)));
        y_in.push(yv);
        z_s.push(zv.max(k));
    }
    let iterate = Iterate {
        v,
        s,
        y_eq,
        y_in,
        z_lo,
        z_hi,
        z_s,
    };
    let opts = IpmOptions::default();
    let mu0 = ipm::average_complementarity(nlp, &iterate).clamp(opts.mu_min, opts.mu_init);
    Some(WarmStart { iterate, mu0 })
}

/// Problem with a different softening constant, same everything else.
pub fn with_eps_comp(problem: &MpccProblem, eps_comp: f64) -> MpccProblem {
    let mut out = problem.clone();
    for g in &mut out.nlp.ineq {
        if matches!(g.kind, IneqKind::Bilinear { .. }) {
            g.bound = eps_comp;
        }
    }
    out.inst.eps_comp = eps_comp;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy;
    use crate::propagate::root_bounds;
    use ndarray::array;

    fn example() -> (VerificationInstance, LayerBounds) {
        let inst = toy::scalar_example_instance();
        let b = root_bounds(&inst);
        (inst, b)
    }

    #[test]
    fn example_formulation() {
        let (inst, b) = example();
        let prob = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let names: Vec<String> = prob.vars.iter().map(|v| v.to_string()).collect();
        assert_eq!(names, ["x[0]", "z[0][0]", "z[0][1]", "p[0][0]", "q[0][0]", "p[0][1]", "q[0][1]"]);
        assert_eq!(prob.num_complementarity(), 2);
        let (terms, c0) = prob.objective_terms();
        assert_eq!(terms, vec![(VarKey::P(NeuronId::new(0, 0)), 1.0), (VarKey::P(NeuronId::new(0, 1)), -2.0)]);
        assert!((c0 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn example_cold_solve() {
        let (inst, b) = example();
        let prob = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let opts = SolveOptions {
            polish: false,
            ..Default::default()
        };
        let sol = solve(&prob, None, &opts).unwrap();
        assert!((sol.objective + 2.9).abs() < 1e-5, "{sol:?}");
        assert!((sol.x_star[0] + 1.0).abs() < 1e-5);
        assert_eq!(sol.status, SolveStatus::Solved);
        assert!(sol.kkt_residual <= 1e-7);
        assert!((sol.nlp_objective - sol.objective).abs() < 1e-5);
        // z1 = -3 inactive, z2 = 1.5 active
        assert_eq!(sol.pattern, vec![false, true]);
        assert_eq!(sol.partition_inactive, vec![NeuronId::new(0, 0)]);
        assert_eq!(sol.partition_active, vec![NeuronId::new(0, 1)]);
        assert!(sol.partition_undecided.is_empty());
    }

    #[test]
    fn all_split_is_linear() {
        let (inst, b) = example();
        let splits = SplitSet::from_pairs([
            (NeuronId::new(0, 0), Phase::Inactive),
            (NeuronId::new(0, 1), Phase::Active),
        ]);
        let prob = build_problem(&inst, &b, &splits).unwrap();
        assert_eq!(prob.num_complementarity(), 0);
        assert!(prob.nlp.ineq.is_empty());
    }

    #[test]
    fn stable_split_rejected() {
        let inst = toy::random_instance(&[2, 8, 8, 2], 0.05, 1);
        let b = root_bounds(&inst);
        let stable = (0..8).map(|j| NeuronId::new(0, j)).find(|&id| !b.is_unstable(id)).unwrap();
        let err = build_problem(&inst, &b, &SplitSet::from_pairs([(stable, Phase::Active)])).unwrap_err();
        assert!(matches!(err, Error::StableSplit { layer: 0, index } if index == stable.index));
    }

    #[test]
    fn point_domain() {
        let mut inst = toy::scalar_example_instance();
        inst.x0 = array![0.3];
        inst.delta = 0.0;
        let b = root_bounds(&inst);
        let prob = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let sol = solve(&prob, None, &SolveOptions::default()).unwrap();
        assert_eq!(sol.objective, inst.spec_value(inst.x0.view()).unwrap());
        assert_eq!(sol.x_star, inst.x0);
    }

    #[test]
    fn partition_examples() {
        let p = classify_partition(&[1.0, 0.0], &[0.0, 2.0], 1e-5);
        assert_eq!((p.active, p.inactive, p.undecided, p.pattern), (vec![0], vec![1], vec![], vec![true, false]));
        let p = classify_partition(&[1e-6], &[1e-6], 1e-5);
        assert_eq!(p.undecided, vec![0]);
        assert_eq!(p.pattern, vec![false]);
        let p = classify_partition(&[2e-5], &[0.0], 1e-5);
        assert_eq!(p.active, vec![0]);
        let p = classify_partition(&[3.0], &[1.0], 1e-5);
        assert_eq!((p.undecided, p.pattern), (vec![0], vec![true]));
    }

    #[test]
    fn region_examples() {
        let (inst, b) = example();
        let r = region_lp_polish(&inst, &b, &[false, true]).unwrap().unwrap();
        assert!((r.value + 2.9).abs() < 1e-6);
        assert!((r.x[0] + 1.0).abs() < 1e-6);
        let r = region_lp_polish(&inst, &b, &[true, false]).unwrap().unwrap();
        assert!((r.value - 0.1).abs() < 1e-5, "{r:?}");
        assert!((r.x[0] - 0.5).abs() < 1e-5);
        // both active only at the single point x = 0.5
        if let Some(r) = region_lp_polish(&inst, &b, &[true, true]).unwrap() {
            assert!((r.value - 0.1).abs() < 1e-4, "{r:?}");
        }
        assert!(matches!(
            region_lp_polish(&inst, &b, &[true]),
            Err(Error::PatternLength { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn warm_start_projection() {
        let (inst, b) = example();
        let parent = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let sol = solve(&parent, None, &SolveOptions::default()).unwrap();
        let id = NeuronId::new(0, 0);
        let child = build_problem(&inst, &b, &SplitSet::new().with(id, Phase::Inactive)).unwrap();
        let warm = make_warm_start(&sol, &parent, &child).unwrap();
        let v = &warm.iterate.v;
        let (z, p, q) = (child.var(VarKey::Z(id)).unwrap(), child.var(VarKey::P(id)).unwrap(), child.var(VarKey::Q(id)).unwrap());
        let z_parent = sol.iterate.v[z];
        assert_eq!(v[p], 0.0);
        assert!((v[q] - (-z_parent).max(WARM_PUSH)).abs() < 1e-12);
        assert!((v[z] + v[q]).abs() <= 2.0 * WARM_PUSH);
        let r = solve(&child, Some(&warm), &SolveOptions::default()).unwrap();
        assert!((r.objective + 2.9).abs() < 1e-5);
    }

    #[test]
    fn identical_resolve_is_immediate() {
        let (inst, b) = example();
        let prob = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let sol = solve(&prob, None, &SolveOptions::default()).unwrap();
        let warm = make_warm_start(&sol, &prob, &prob).unwrap();
        let again = solve(&prob, Some(&warm), &SolveOptions::default()).unwrap();
        assert!(again.ipm_iterations <= 2, "{}", again.ipm_iterations);
    }

    #[test]
    fn mismatched_structure_goes_cold() {
        let (inst, b) = example();
        let parent = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let sol = solve(&parent, None, &SolveOptions::default()).unwrap();
        let both = SplitSet::from_pairs([
            (NeuronId::new(0, 0), Phase::Inactive),
            (NeuronId::new(0, 1), Phase::Active),
        ]);
        let child = build_problem(&inst, &b, &both).unwrap();
        assert!(make_warm_start(&sol, &parent, &child).is_none());
        let warm = make_warm_start_along(&sol, &parent, &child).unwrap().unwrap();
        let v = &warm.iterate.v;
        assert_eq!(v[child.var(VarKey::P(NeuronId::new(0, 0))).unwrap()], 0.0);
        assert_eq!(v[child.var(VarKey::Q(NeuronId::new(0, 1))).unwrap()], 0.0);
        let r = solve(&child, Some(&warm), &SolveOptions::default()).unwrap();
        assert_ne!(r.status, SolveStatus::Infeasible);
        // a domain that does not refine the parent
        let other = build_problem(&inst, &b, &SplitSet::new().with(NeuronId::new(0, 0), Phase::Active)).unwrap();
        let osol = solve(&other, None, &SolveOptions::default()).unwrap();
        assert!(make_warm_start_along(&osol, &other, &child).unwrap().is_none());
    }

    #[test]
    fn exact_assignments_are_feasible() {
        let inst = toy::random_instance(&[2, 8, 8, 2], 0.2, 3);
        let b = root_bounds(&inst);
        let prob = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let x = random_input(&inst, &mut rng);
            let v = prob.assignment(x.view()).unwrap();
            assert!(prob.nlp.max_violation(&v) < 1e-9);
            let f = inst.spec_value(x.view()).unwrap();
            assert!((prob.nlp_objective(&v) - f).abs() <= 1e-9 * (1.0 + f.abs()));
        }
    }

    #[test]
    fn debug_json_shape() {
        let (inst, b) = example();
        let prob = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let j = prob.debug_json();
        assert_eq!(j["variables"].as_array().unwrap().len(), 7);
        assert_eq!(j["inequalities"].as_array().unwrap().len(), 2);
        assert_eq!(j["objective"]["constant"], 0.1);
    }

    #[test]
    fn l2_ball() {
        let mut inst = toy::random_instance(&[2, 8, 8, 2], 0.2, 5);
        inst.norm = Norm::Two;
        let b = root_bounds(&inst);
        let prob = build_problem(&inst, &b, &SplitSet::new()).unwrap();
        let sol = solve(&prob, None, &SolveOptions::default()).unwrap();
        assert!(inst.contains(sol.x_star.view(), 1e-9));
        assert!(sol.objective <= inst.spec_value(inst.x0.view()).unwrap() + 1e-9);
    }
}
