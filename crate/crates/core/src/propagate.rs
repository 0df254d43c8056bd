//! Certified lower bounds: interval propagation for pre-activation bounds and
//! backward linear propagation (CROWN style) for the specification, with
//! optional split constraints enforced through nonnegative multipliers.
//!
//! The l2 ball is handled through its enclosing box everywhere in this
//! module, which is sound but looser than the ball itself.
//!
//! Intermediate bounds are computed once for the root domain. A split only
//! tightens the split neuron's own interval (`l >= 0` for active, `u <= 0`
//! for inactive); its sign constraint on the input is enforced by the
//! multipliers `beta`.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::model::{NeuronId, ReluNetwork, VerificationInstance};

/// Phase of a split neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Active,
    Inactive,
}

impl Phase {
    pub fn from_bit(active: bool) -> Self {
        if active {
            Phase::Active
        } else {
            Phase::Inactive
        }
    }

    pub fn is_active(self) -> bool {
        self == Phase::Active
    }

    pub fn flip(self) -> Self {
        match self {
            Phase::Active => Phase::Inactive,
            Phase::Inactive => Phase::Active,
        }
    }

    /// Sign `s` such that the split constraint reads `s * z >= 0`.
    fn sign(self) -> f64 {
        match self {
            Phase::Active => 1.0,
            Phase::Inactive => -1.0,
        }
    }
}

/// Per-layer certified pre-activation intervals of the hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<Array1<f64>>,
    pub upper: Vec<Array1<f64>>,
}

impl LayerBounds {
    pub fn num_layers(&self) -> usize {
        self.lower.len()
    }

    pub fn is_unstable(&self, id: NeuronId) -> bool {
        self.lower[id.layer][id.index] < 0.0 && self.upper[id.layer][id.index] > 0.0
    }

    /// Unstable neurons in (layer, index) order.
    pub fn unstable(&self) -> Vec<NeuronId> {
        let mut out = Vec::new();
        for (k, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            for j in 0..lo.len() {
                if lo[j] < 0.0 && hi[j] > 0.0 {
                    out.push(NeuronId::new(k, j));
                }
            }
        }
        out
    }

    /// Elementwise intersection with another sound bound.
    pub fn intersect(&self, other: &LayerBounds) -> LayerBounds {
        let lower = self
            .lower
            .iter()
            .zip(&other.lower)
            .map(|(a, b)| ndarray::Zip::from(a).and(b).map_collect(|&x, &y| x.max(y)))
            .collect();
        let upper = self
            .upper
            .iter()
            .zip(&other.upper)
            .map(|(a, b)| ndarray::Zip::from(a).and(b).map_collect(|&x, &y| x.min(y)))
            .collect();
        LayerBounds { lower, upper }
    }

    /// Interval of one neuron after applying its split, if any.
    pub fn split_interval(&self, id: NeuronId, splits: &SplitSet) -> (f64, f64) {
        let (l, u) = (self.lower[id.layer][id.index], self.upper[id.layer][id.index]);
        match splits.get(id) {
            Some(Phase::Active) => (l.max(0.0), u),
            Some(Phase::Inactive) => (l, u.min(0.0)),
            None => (l, u),
        }
    }
}

/// Partial phase assignment of unstable neurons.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SplitSet {
    assignments: BTreeMap<NeuronId, Phase>,
}

impl SplitSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (NeuronId, Phase)>) -> Self {
        Self {
            assignments: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, id: NeuronId) -> Option<Phase> {
        self.assignments.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, Phase)> + '_ {
        self.assignments.iter().map(|(k, v)| (*k, *v))
    }

    pub fn with(&self, id: NeuronId, phase: Phase) -> Self {
        let mut next = self.clone();
        next.assignments.insert(id, phase);
        next
    }

    pub fn insert(&mut self, id: NeuronId, phase: Phase) {
        self.assignments.insert(id, phase);
    }
}

/// Affine minorant `coeffs . x + offset` of the specification over a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBound {
    pub coeffs: Array1<f64>,
    pub offset: f64,
}

impl LinearBound {
    pub fn eval(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.coeffs.dot(&x) + self.offset
    }

    /// Minimum over the box `|x - x0|_inf <= delta`.
    pub fn min_over_box(&self, x0: ArrayView1<'_, f64>, delta: f64) -> f64 {
        self.coeffs.dot(&x0) - delta * self.coeffs.iter().map(|a| a.abs()).sum::<f64>() + self.offset
    }
}

/// Outcome of bounding one domain.
#[derive(Debug, Clone)]
pub struct BoundResult {
    /// Certified lower bound; `+inf` when the split set is infeasible.
    pub lb: f64,
    pub linear: Option<LinearBound>,
    /// Backward coefficient on each hidden post-activation (empty when
    /// pruned).
    pub lambda: Vec<Array1<f64>>,
}

impl BoundResult {
    fn infeasible() -> Self {
        Self {
            lb: f64::INFINITY,
            linear: None,
            lambda: Vec::new(),
        }
    }

    pub fn is_infeasible(&self) -> bool {
        self.lb == f64::INFINITY
    }
}

/// Relaxation slopes of unstable neurons and split multipliers, stored
/// densely per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub alpha: Vec<Array1<f64>>,
    pub beta: Vec<Array1<f64>>,
}

impl Multipliers {
    /// Adaptive initial slopes: `alpha = 1` if `u >= -l`, else `0`.
    pub fn initial(bounds: &LayerBounds) -> Self {
        let alpha = bounds
            .lower
            .iter()
            .zip(&bounds.upper)
            .map(|(lo, hi)| ndarray::Zip::from(lo).and(hi).map_collect(|&l, &u| if u >= -l { 1.0 } else { 0.0 }))
            .collect();
        let beta = bounds.lower.iter().map(|lo| Array1::zeros(lo.len())).collect();
        Self { alpha, beta }
    }
}

/// Interval bounds on every hidden pre-activation. The l2 ball is replaced by
/// its enclosing box.
pub fn ibp_bounds(network: &ReluNetwork, x0: ArrayView1<'_, f64>, delta: f64) -> LayerBounds {
    let mut mid = x0.to_owned();
    let mut rad = Array1::from_elem(x0.len(), delta);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for layer in &network.layers()[..network.num_hidden()] {
        let zmid = layer.weights.dot(&mid) + &layer.bias;
        let zrad = layer.weights.mapv(f64::abs).dot(&rad);
        let lo = &zmid - &zrad;
        let hi = &zmid + &zrad;
        let hlo = lo.mapv(|v| v.max(0.0));
        let hhi = hi.mapv(|v| v.max(0.0));
        mid = (&hlo + &hhi) * 0.5;
        rad = (&hhi - &hlo) * 0.5;
        lower.push(lo);
        upper.push(hi);
    }
    LayerBounds { lower, upper }
}

/// Root intermediate bounds: interval bounds tightened layer by layer with
/// backward linear propagation.
pub fn root_bounds(inst: &VerificationInstance) -> LayerBounds {
    let net = &*inst.network;
    let ibp = ibp_bounds(net, inst.x0.view(), inst.delta);
    if inst.delta == 0.0 {
        return ibp;
    }
    let mut bounds = LayerBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for k in 0..net.num_hidden() {
        let layer = &net.layers()[k];
        let n = layer.out_dim();
        let mut lo = ibp.lower[k].clone();
        let mut hi = ibp.upper[k].clone();
        if k > 0 {
            let mult = Multipliers::initial(&bounds);
            let splits = SplitSet::new();
            for j in 0..n {
                let row = layer.weights.row(j).to_owned();
                let b = layer.bias[j];
                let (l, _) = backward(net, inst, &bounds, &splits, &mult, k, row.clone(), b);
                let (nu, _) = backward(net, inst, &bounds, &splits, &mult, k, -row, -b);
                lo[j] = lo[j].max(l);
                hi[j] = hi[j].min(-nu);
            }
        }
        bounds.lower.push(lo);
        bounds.upper.push(hi);
    }
    bounds
}

/// Output of one backward pass.
struct Tape {
    /// Coefficients on hidden post-activations, per layer.
    lambda: Vec<Array1<f64>>,
    linear: LinearBound,
}

/// Backward propagation of the linear form `lam . hidden[layers-1] + offset`
/// through the first `layers` hidden layers. Returns the lower bound over
/// the input box and the tape.
#[allow(clippy::too_many_arguments)]
fn backward(
    net: &ReluNetwork,
    inst: &VerificationInstance,
    bounds: &LayerBounds,
    splits: &SplitSet,
    mult: &Multipliers,
    layers: usize,
    mut lam: Array1<f64>,
    mut offset: f64,
) -> (f64, Tape) {
    let mut lambda = vec![Array1::zeros(0); layers];
    for k in (0..layers).rev() {
        let n = lam.len();
        let mut a = Array1::zeros(n);
        for j in 0..n {
            let id = NeuronId::new(k, j);
            let (l, u) = bounds.split_interval(id, splits);
            let lj = lam[j];
            let (coef, extra) = relax(lj, l, u, mult.alpha[k][j]);
            offset += extra;
            a[j] = coef;
            if let Some(phase) = splits.get(id) {
                // Lagrangian term -beta * s * z for the constraint s * z >= 0.
                a[j] -= phase.sign() * mult.beta[k][j];
            }
        }
        let layer = &net.layers()[k];
        offset += a.dot(&layer.bias);
        lambda[k] = lam;
        lam = layer.weights.t().dot(&a);
    }
    let linear = LinearBound { coeffs: lam, offset };
    let lb = linear.min_over_box(inst.x0.view(), inst.delta);
    (lb, Tape { lambda, linear })
}

/// Coefficient on `z` and constant contributed by relaxing `lam * relu(z)`
/// from below with `z` in `[l, u]`.
fn relax(lam: f64, l: f64, u: f64, alpha: f64) -> (f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0)
    } else if l >= 0.0 {
        (lam, 0.0)
    } else if lam >= 0.0 {
        (lam * alpha, 0.0)
    } else {
        let slope = u / (u - l);
        (lam * slope, -lam * slope * l)
    }
}

/// Derivative of the relaxed coefficient/constant pair with respect to `lam`
/// and `alpha`, used by the reverse pass.
fn relax_partials(lam: f64, l: f64, u: f64, alpha: f64) -> (f64, f64, f64) {
    // (d coef/d lam, d extra/d lam, d coef/d alpha)
    if u <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if l >= 0.0 {
        (1.0, 0.0, 0.0)
    } else if lam >= 0.0 {
        (alpha, 0.0, lam)
    } else {
        let slope = u / (u - l);
        (slope, -slope * l, 0.0)
    }
}

fn has_crossing(bounds: &LayerBounds, splits: &SplitSet) -> bool {
    splits.iter().any(|(id, _)| {
        let (l, u) = bounds.split_interval(id, splits);
        l > u
    })
}

fn objective_start(inst: &VerificationInstance) -> (Array1<f64>, f64) {
    let out = inst.network.output_layer();
    let c = inst.objective();
    (out.weights.t().dot(&c), c.dot(&out.bias))
}

/// Interval bound on the specification using the (split-tightened) hidden
/// intervals of the last hidden layer.
pub fn ibp_objective_bound(inst: &VerificationInstance, bounds: &LayerBounds, splits: &SplitSet) -> f64 {
    let (lam, offset) = objective_start(inst);
    let k = bounds.num_layers() - 1;
    let mut lb = offset;
    for (j, &c) in lam.iter().enumerate() {
        let (l, u) = bounds.split_interval(NeuronId::new(k, j), splits);
        let (hl, hu) = (l.max(0.0), u.max(0.0));
        lb += (c * hl).min(c * hu);
    }
    lb
}

fn bound_with(inst: &VerificationInstance, bounds: &LayerBounds, splits: &SplitSet, mult: &Multipliers) -> (f64, Tape) {
    let net = &*inst.network;
    let (lam, offset) = objective_start(inst);
    backward(net, inst, bounds, splits, mult, net.num_hidden(), lam, offset)
}

/// Backward-propagation lower bound on the specification over the input set
/// restricted by `splits`. `betas`, when given, are the multipliers of the
/// split sign constraints (negative entries are clipped to zero).
pub fn crown_lower_bound(
    inst: &VerificationInstance,
    bounds: &LayerBounds,
    splits: &SplitSet,
    betas: Option<&[Array1<f64>]>,
) -> BoundResult {
    if has_crossing(bounds, splits) {
        return BoundResult::infeasible();
    }
    let mut mult = Multipliers::initial(bounds);
    if let Some(b) = betas {
        for (dst, src) in mult.beta.iter_mut().zip(b) {
            dst.assign(&src.mapv(|v| v.max(0.0)));
        }
    }
    finish(inst, bounds, splits, &mult)
}

fn finish(inst: &VerificationInstance, bounds: &LayerBounds, splits: &SplitSet, mult: &Multipliers) -> BoundResult {
    let (lb, tape) = bound_with(inst, bounds, splits, mult);
    let lb = lb.max(ibp_objective_bound(inst, bounds, splits));
    BoundResult {
        lb,
        linear: Some(tape.linear),
        lambda: tape.lambda,
    }
}

/// Gradient of the backward bound with respect to `alpha` and `beta`.
fn gradient(
    inst: &VerificationInstance,
    bounds: &LayerBounds,
    splits: &SplitSet,
    mult: &Multipliers,
    tape: &Tape,
) -> Multipliers {
    let net = &*inst.network;
    let mut galpha: Vec<Array1<f64>> = mult.alpha.iter().map(|a| Array1::zeros(a.len())).collect();
    let mut gbeta: Vec<Array1<f64>> = mult.beta.iter().map(|a| Array1::zeros(a.len())).collect();
    // d lb / d coeffs over the input box.
    let mut g_lam: Array1<f64> = ndarray::Zip::from(&tape.linear.coeffs)
        .and(&inst.x0)
        .map_collect(|&a, &x| x - inst.delta * if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 });
    for k in 0..net.num_hidden() {
        let layer = &net.layers()[k];
        let g_a = layer.weights.dot(&g_lam) + &layer.bias;
        let lam = &tape.lambda[k];
        let mut next = Array1::zeros(lam.len());
        for j in 0..lam.len() {
            let id = NeuronId::new(k, j);
            let (l, u) = bounds.split_interval(id, splits);
            let (dcoef, dextra, dalpha) = relax_partials(lam[j], l, u, mult.alpha[k][j]);
            galpha[k][j] = g_a[j] * dalpha;
            if let Some(phase) = splits.get(id) {
                gbeta[k][j] = -g_a[j] * phase.sign();
            }
            next[j] = g_a[j] * dcoef + dextra;
        }
        g_lam = next;
    }
    Multipliers {
        alpha: galpha,
        beta: gbeta,
    }
}

/// Settings for projected-gradient optimization of the relaxation.
#[derive(Debug, Clone, Copy)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub step: f64,
    pub decay: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iters: 20,
            step: 0.1,
            decay: 0.98,
        }
    }
}

/// Best bound found while optimizing slopes and multipliers.
#[derive(Debug, Clone)]
pub struct OptimizedBound {
    pub result: BoundResult,
    pub multipliers: Multipliers,
    /// Bound at the starting multipliers.
    pub initial_lb: f64,
}

/// Projected gradient ascent on `alpha in [0, 1]` and `beta >= 0`, with
/// Adam-normalized steps of size `step * decay^t`. The returned bound is the
/// best over all iterates, so it never falls below the starting value.
pub fn optimize_relaxation(
    inst: &VerificationInstance,
    bounds: &LayerBounds,
    splits: &SplitSet,
    start: Option<&Multipliers>,
    cfg: OptimizeConfig,
) -> OptimizedBound {
    if has_crossing(bounds, splits) {
        return OptimizedBound {
            result: BoundResult::infeasible(),
            multipliers: Multipliers::initial(bounds),
            initial_lb: f64::INFINITY,
        };
    }
    let mut mult = start.cloned().unwrap_or_else(|| Multipliers::initial(bounds));
    project(&mut mult, splits);
    let ibp = ibp_objective_bound(inst, bounds, splits);
    let (lb0, mut tape) = bound_with(inst, bounds, splits, &mult);
    let mut best = (lb0, mult.clone(), tape.linear.clone(), tape.lambda.clone());

    let (b1, b2, eps) = (0.9, 0.999, 1e-12);
    let zeros = |m: &Multipliers| Multipliers {
        alpha: m.alpha.iter().map(|a| Array1::zeros(a.len())).collect(),
        beta: m.beta.iter().map(|a| Array1::zeros(a.len())).collect(),
    };
    let mut m1 = zeros(&mult);
    let mut m2 = zeros(&mult);
    let mut lr = cfg.step;
    for t in 1..=cfg.iters {
        let g = gradient(inst, bounds, splits, &mult, &tape);
        let finite = g
            .alpha
            .iter()
            .chain(&g.beta)
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            break;
        }
        let bc1 = 1.0 - f64::powi(b1, t as i32);
        let bc2 = 1.0 - f64::powi(b2, t as i32);
        let groups = mult
            .alpha
            .iter_mut()
            .zip(&g.alpha)
            .zip(m1.alpha.iter_mut().zip(m2.alpha.iter_mut()))
            .chain(
                mult.beta
                    .iter_mut()
                    .zip(&g.beta)
                    .zip(m1.beta.iter_mut().zip(m2.beta.iter_mut())),
            );
        for ((p, gp), (mp, vp)) in groups {
            for i in 0..p.len() {
                mp[i] = b1 * mp[i] + (1.0 - b1) * gp[i];
                vp[i] = b2 * vp[i] + (1.0 - b2) * gp[i] * gp[i];
                p[i] += lr * (mp[i] / bc1) / ((vp[i] / bc2).sqrt() + eps);
            }
        }
        project(&mut mult, splits);
        lr *= cfg.decay;
        let (lb, next) = bound_with(inst, bounds, splits, &mult);
        tape = next;
        if lb > best.0 {
            best = (lb, mult.clone(), tape.linear.clone(), tape.lambda.clone());
        }
    }
    let (lb, multipliers, linear, lambda) = best;
    OptimizedBound {
        result: BoundResult {
            lb: lb.max(ibp),
            linear: Some(linear),
            lambda,
        },
        multipliers,
        initial_lb: lb0.max(ibp),
    }
}

fn project(mult: &mut Multipliers, splits: &SplitSet) {
    for (k, (a, b)) in mult.alpha.iter_mut().zip(mult.beta.iter_mut()).enumerate() {
        for j in 0..a.len() {
            a[j] = a[j].clamp(0.0, 1.0);
            let id = NeuronId::new(k, j);
            b[j] = if splits.get(id).is_some() { b[j].max(0.0) } else { 0.0 };
        }
    }
}
