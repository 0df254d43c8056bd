//! Reference values for testing: the exact minimum by enumerating the
//! activation regions of the unstable neurons, and a projected gradient
//! attack.
//!
//! The enumeration is deliberately independent of the interior-point code.
//! Each region is a polyhedron in the input space; regions are explored
//! depth first in (layer, index) order of the neurons left unstable by
//! interval propagation, pruning a branch as soon as its sign constraints
//! are infeasible. Regions are closed (`z >= 0` / `z <= 0`), so faces belong
//! to both neighbours. LPs are solved with the simplex implementation of
//! `minilp`.

use minilp::{ComparisonOp, OptimizationDirection, Problem, Solution, Variable};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{NeuronId, Norm, VerificationInstance};
use crate::propagate::{ibp_bounds, LayerBounds};

pub const DEFAULT_PATTERN_CAP: usize = 20;

#[derive(Debug, Clone)]
pub struct GlobalMin {
    pub f_star: f64,
    pub x_star: Array1<f64>,
    /// Full-pattern LPs solved (feasible leaves of the enumeration).
    pub regions_solved: usize,
    /// Neurons enumerated over.
    pub unstable: Vec<NeuronId>,
}

#[derive(Debug, Clone)]
pub struct PatternRegion {
    /// `None` when the region is empty.
    pub value: Option<f64>,
    pub x: Option<Array1<f64>>,
}

impl PatternRegion {
    pub fn is_feasible(&self) -> bool {
        self.value.is_some()
    }
}

/// Affine form `a x + c` of one layer's pre-activations.
#[derive(Clone)]
struct Affine {
    a: Array2<f64>,
    c: Array1<f64>,
}

struct Enumerator<'a> {
    inst: &'a VerificationInstance,
    bounds: LayerBounds,
    vars: Vec<Variable>,
    /// Constraints collected along the current branch, replayed at leaves.
    path: Vec<(Vec<(Variable, f64)>, ComparisonOp, f64)>,
    best: Option<(f64, Array1<f64>)>,
    regions: usize,
}

fn input_lp(inst: &VerificationInstance) -> Result<(Problem, Vec<Variable>)> {
    if inst.norm == Norm::Two {
        return Err(Error::Unsupported("exact enumeration supports only the l-inf ball"));
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars = inst
        .x0
        .iter()
        .map(|&c| lp.add_var(0.0, (c - inst.delta, c + inst.delta)))
        .collect();
    Ok((lp, vars))
}

fn first_affine(inst: &VerificationInstance) -> Affine {
    let l = &inst.network.layers()[0];
    Affine {
        a: l.weights.clone(),
        c: l.bias.clone(),
    }
}

/// Affine form of layer `k + 1` given the mask of layer `k`.
fn next_affine(inst: &VerificationInstance, k: usize, cur: &Affine, mask: &[bool]) -> Affine {
    let l = &inst.network.layers()[k + 1];
    let mut a = cur.a.clone();
    let mut c = cur.c.clone();
    for (j, &on) in mask.iter().enumerate() {
        if !on {
            a.row_mut(j).fill(0.0);
            c[j] = 0.0;
        }
    }
    Affine {
        a: l.weights.dot(&a),
        c: l.weights.dot(&c) + &l.bias,
    }
}

fn row_expr(vars: &[Variable], aff: &Affine, j: usize) -> Vec<(Variable, f64)> {
    vars.iter().zip(aff.a.row(j).iter()).map(|(&v, &a)| (v, a)).collect()
}

fn sign_constraint(aff: &Affine, vars: &[Variable], j: usize, active: bool) -> (Vec<(Variable, f64)>, ComparisonOp, f64) {
    let op = if active { ComparisonOp::Ge } else { ComparisonOp::Le };
    (row_expr(vars, aff, j), op, -aff.c[j])
}

impl Enumerator<'_> {
    fn stable_mask(&self, k: usize) -> Vec<bool> {
        self.bounds.lower[k].iter().map(|&l| l >= 0.0).collect()
    }

    fn leaf(&mut self, aff_out: &Affine) -> Result<()> {
        // objective c . (A x + c0) over the region
        let spec = self.inst.objective();
        let obj = spec.dot(&aff_out.a);
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<Variable> = self
            .inst
            .x0
            .iter()
            .zip(obj.iter())
            .map(|(&c, &o)| lp.add_var(o, (c - self.inst.delta, c + self.inst.delta)))
            .collect();
        for (expr, op, rhs) in &self.path {
            let e: Vec<(Variable, f64)> = expr.iter().map(|(v, a)| (vars[v.idx()], *a)).collect();
            lp.add_constraint(e.as_slice(), *op, *rhs);
        }
        let sol = match lp.solve() {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        self.regions += 1;
        let mut x: Array1<f64> = vars.iter().map(|&v| sol[v]).collect();
        self.inst.project(&mut x);
        let value = self.inst.spec_value(x.view())?;
        if self.best.as_ref().is_none_or(|(b, _)| value < *b) {
            self.best = Some((value, x));
        }
        Ok(())
    }

    /// Decides neuron `j` of layer `k` (skipping stable ones) given the
    /// current branch, then recurses.
    fn descend(&mut self, k: usize, j: usize, aff: &Affine, mask: &mut Vec<bool>, feas: &Solution) -> Result<()> {
        let net = &self.inst.network;
        if j == mask.len() {
            let next = next_affine(self.inst, k, aff, mask);
            if k + 1 == net.num_hidden() {
                return self.leaf(&next);
            }
            let mut m = self.stable_mask(k + 1);
            return self.descend(k + 1, 0, &next, &mut m, feas);
        }
        let id = NeuronId::new(k, j);
        if !self.bounds.is_unstable(id) {
            return self.descend(k, j + 1, aff, mask, feas);
        }
        for active in [false, true] {
            let (expr, op, rhs) = sign_constraint(aff, &self.vars, j, active);
            let Ok(child) = feas.clone().add_constraint(expr.as_slice(), op, rhs) else {
                continue;
            };
            mask[j] = active;
            self.path.push((expr, op, rhs));
            self.descend(k, j + 1, aff, mask, &child)?;
            self.path.pop();
        }
        mask[j] = false;
        Ok(())
    }
}

/// Exact minimum of the specification over an l-inf ball. Refuses when more
/// than `pattern_cap` neurons are unstable under interval bounds.
pub fn global_min(inst: &VerificationInstance, pattern_cap: usize) -> Result<GlobalMin> {
    let (base, vars) = input_lp(inst)?;
    let bounds = ibp_bounds(&inst.network, inst.x0.view(), inst.delta);
    let unstable = bounds.unstable();
    if unstable.len() > pattern_cap {
        return Err(Error::PatternCap {
            count: unstable.len(),
            cap: pattern_cap,
        });
    }
    let root = base.solve().map_err(|e| Error::Instance(format!("input box LP failed: {e}")))?;
    let mut en = Enumerator {
        inst,
        bounds,
        vars,
        path: Vec::new(),
        best: None,
        regions: 0,
    };
    let aff = first_affine(inst);
    let mut mask = en.stable_mask(0);
    en.descend(0, 0, &aff, &mut mask, &root)?;
    let (f_star, x_star) = en.best.ok_or_else(|| Error::Instance("no feasible activation region".into()))?;
    Ok(GlobalMin {
        f_star,
        x_star,
        regions_solved: en.regions,
        unstable,
    })
}

/// Minimum over the closed region where the interval-unstable neurons (in
/// (layer, index) order) follow `pattern`.
pub fn solve_pattern_lp(inst: &VerificationInstance, pattern: &[bool]) -> Result<PatternRegion> {
    if inst.norm == Norm::Two {
        return Err(Error::Unsupported("exact enumeration supports only the l-inf ball"));
    }
    let bounds = ibp_bounds(&inst.network, inst.x0.view(), inst.delta);
    let unstable = bounds.unstable();
    if pattern.len() != unstable.len() {
        return Err(Error::PatternLength {
            expected: unstable.len(),
            got: pattern.len(),
        });
    }
    // sign rows (a, c, active) meaning a.x + c >= 0 or <= 0
    let mut rows = Vec::new();
    let mut aff = first_affine(inst);
    let mut bits = pattern.iter();
    for k in 0..inst.network.num_hidden() {
        let mut mask: Vec<bool> = bounds.lower[k].iter().map(|&l| l >= 0.0).collect();
        for (j, m) in mask.iter_mut().enumerate() {
            if bounds.is_unstable(NeuronId::new(k, j)) {
                *m = *bits.next().expect("length checked");
                rows.push((aff.a.row(j).to_owned(), aff.c[j], *m));
            }
        }
        aff = next_affine(inst, k, &aff, &mask);
    }
    let obj = inst.objective().dot(&aff.a);
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Variable> = inst
        .x0
        .iter()
        .zip(obj.iter())
        .map(|(&c, &o)| lp.add_var(o, (c - inst.delta, c + inst.delta)))
        .collect();
    for (a, c, active) in rows {
        let e: Vec<(Variable, f64)> = vars.iter().copied().zip(a.iter().copied()).collect();
        let op = if active { ComparisonOp::Ge } else { ComparisonOp::Le };
        lp.add_constraint(e.as_slice(), op, -c);
    }
    match lp.solve() {
        Ok(sol) => {
            let mut x: Array1<f64> = vars.iter().map(|&v| sol[v]).collect();
            inst.project(&mut x);
            Ok(PatternRegion {
                value: Some(inst.spec_value(x.view())?),
                x: Some(x),
            })
        }
        Err(_) => Ok(PatternRegion { value: None, x: None }),
    }
}

/// Gradient of the specification in the input, taking ReLU'(0) = 0.
pub fn input_gradient(inst: &VerificationInstance, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let net = &inst.network;
    let fwd = net.forward(x)?;
    let mut g = inst.objective().dot(&net.output_layer().weights);
    for k in (0..net.num_hidden()).rev() {
        for (gj, &on) in g.iter_mut().zip(fwd.pattern[k].iter()) {
            if !on {
                *gj = 0.0;
            }
        }
        g = g.dot(&net.layers()[k].weights);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy)]
pub struct PgdConfig {
    pub steps: usize,
    pub restarts: usize,
    /// Defaults to `2.5 * delta / steps`.
    pub step_size: Option<f64>,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            restarts: 5,
            step_size: None,
            seed: 0,
        }
    }
}

/// Projected gradient descent on the specification. The first run starts
/// at `x0`, the others at uniform random points of the perturbation set.
/// Returns the exact value at the best point visited.
pub fn pgd_upper_bound(inst: &VerificationInstance, cfg: &PgdConfig) -> Result<(f64, Array1<f64>)> {
    if cfg.steps == 0 || cfg.restarts == 0 {
        return Err(Error::Instance("pgd needs at least one step and one restart".into()));
    }
    let eta = cfg.step_size.unwrap_or(2.5 * inst.delta / cfg.steps as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (inst.spec_value(inst.x0.view())?, inst.x0.clone());
    for r in 0..cfg.restarts {
        let mut x = if r == 0 {
            inst.x0.clone()
        } else {
            match inst.norm {
                Norm::Inf => inst.x0.mapv(|c| c + inst.delta * rng.gen_range(-1.0..=1.0)),
                Norm::Two => {
                    let d: Array1<f64> = (0..inst.x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = d.dot(&d).sqrt().max(1e-300);
                    let rad = inst.delta * rng.gen::<f64>().powf(1.0 / inst.x0.len() as f64);
                    &inst.x0 + &(d * (rad / n))
                }
            }
        };
        for _ in 0..cfg.steps {
            let g = input_gradient(inst, x.view())?;
            match inst.norm {
                Norm::Inf => x.zip_mut_with(&g, |xi, &gi| *xi -= eta * gi.signum() * (gi != 0.0) as u8 as f64),
                Norm::Two => {
                    let n = g.dot(&g).sqrt();
                    if n > 0.0 {
                        x.scaled_add(-eta / n, &g);
                    }
                }
            }
            inst.project(&mut x);
            let v = inst.spec_value(x.view())?;
            if v < best.0 {
                best = (v, x.clone());
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy;
    use ndarray::array;

    #[test]
    fn example_minimum() {
        let inst = toy::scalar_example_instance();
        let g = global_min(&inst, DEFAULT_PATTERN_CAP).unwrap();
        assert!((g.f_star + 2.9).abs() < 1e-8, "{}", g.f_star);
        assert!((g.x_star[0] + 1.0).abs() < 1e-8);
        assert!(g.regions_solved <= 4);
    }

    #[test]
    fn example_regions() {
        let inst = toy::scalar_example_instance();
        let r = solve_pattern_lp(&inst, &[false, true]).unwrap();
        assert!((r.value.unwrap() + 2.9).abs() < 1e-9);
        let r = solve_pattern_lp(&inst, &[true, false]).unwrap();
        assert!((r.value.unwrap() - 0.1).abs() < 1e-9);
        // both off only at x = 0.5
        let r = solve_pattern_lp(&inst, &[false, false]).unwrap();
        assert!((r.value.unwrap() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn contradictory_pattern() {
        use crate::model::{Layer, ReluNetwork, Specification};
        use std::sync::Arc;
        // z1 = x, z2 = x - 1: z1 <= 0 and z2 >= 0 cannot hold together
        let net = ReluNetwork::new(vec![
            Layer::new(array![[1.0], [1.0]], array![0.0, -1.0]),
            Layer::new(array![[1.0, 1.0]], array![0.0]),
        ])
        .unwrap();
        let inst = VerificationInstance::new(Arc::new(net), array![0.0], 2.0, Norm::Inf, Specification::scalar(0)).unwrap();
        assert!(!solve_pattern_lp(&inst, &[false, true]).unwrap().is_feasible());
        assert!(solve_pattern_lp(&inst, &[true, false]).unwrap().is_feasible());
    }

    #[test]
    fn point_and_affine() {
        let mut inst = toy::random_instance(&[2, 8, 8, 2], 0.1, 2);
        inst.delta = 0.0;
        let g = global_min(&inst, DEFAULT_PATTERN_CAP).unwrap();
        assert_eq!(g.f_star, inst.spec_value(inst.x0.view()).unwrap());
        assert_eq!(g.regions_solved, 1);
    }

    #[test]
    fn cap_and_norm_refused() {
        let inst = toy::random_instance(&[2, 8, 8, 2], 1.0, 2);
        let n = ibp_bounds(&inst.network, inst.x0.view(), inst.delta).unstable().len();
        assert!(matches!(global_min(&inst, n - 1), Err(Error::PatternCap { count, .. }) if count == n));
        let mut l2 = inst.clone();
        l2.norm = Norm::Two;
        assert!(matches!(global_min(&l2, 64), Err(Error::Unsupported(_))));
    }

    #[test]
    fn below_every_sample() {
        for seed in 0..5 {
            let inst = toy::random_instance(&[2, 8, 8, 2], 0.2, seed);
            let g = global_min(&inst, DEFAULT_PATTERN_CAP).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..10_000 {
                let x = inst.x0.mapv(|c| c + inst.delta * rng.gen_range(-1.0..=1.0));
                assert!(g.f_star <= inst.spec_value(x.view()).unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn matches_grid_search() {
        // 1-D: the example network
        let inst = toy::scalar_example_instance();
        let g = global_min(&inst, DEFAULT_PATTERN_CAP).unwrap();
        let grid = (0..=100_000)
            .map(|i| -1.0 + 2.0 * i as f64 / 100_000.0)
            .map(|x| inst.spec_value(array![x].view()).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!((grid - g.f_star).abs() < 1e-4);
        // 2-D: coarse grid, then a fine grid around the best cell
        for seed in 0..3 {
            let inst = toy::random_instance(&[2, 8, 8, 2], 0.2, seed);
            let g = global_min(&inst, DEFAULT_PATTERN_CAP).unwrap();
            let f = |a: f64, b: f64| inst.spec_value(array![a, b].view()).unwrap();
            let n = 400;
            let h = 2.0 * inst.delta / n as f64;
            let (mut best, mut at) = (f64::INFINITY, (0.0, 0.0));
            for i in 0..=n {
                for j in 0..=n {
                    let (a, b) = (inst.x0[0] - inst.delta + i as f64 * h, inst.x0[1] - inst.delta + j as f64 * h);
                    let v = f(a, b);
                    if v < best {
                        best = v;
                        at = (a, b);
                    }
                }
            }
            let m = 400;
            for i in 0..=m {
                for j in 0..=m {
                    let a = (at.0 - h + 2.0 * h * i as f64 / m as f64).clamp(inst.x0[0] - inst.delta, inst.x0[0] + inst.delta);
                    let b = (at.1 - h + 2.0 * h * j as f64 / m as f64).clamp(inst.x0[1] - inst.delta, inst.x0[1] + inst.delta);
                    best = best.min(f(a, b));
                }
            }
            assert!(g.f_star <= best + 1e-9);
            assert!(best - g.f_star < 1e-4, "seed {seed}: grid {best} exact {}", g.f_star);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let inst = toy::random_instance(&[3, 6, 5, 3], 0.3, 4);
        let x = inst.x0.clone();
        let g = input_gradient(&inst, x.view()).unwrap();
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += 1e-7;
            let fd = (inst.spec_value(xp.view()).unwrap() - inst.spec_value(x.view()).unwrap()) / 1e-7;
            assert!((fd - g[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn pgd_example_and_ordering() {
        let inst = toy::scalar_example_instance();
        for seed in 0..3 {
            let (v, x) = pgd_upper_bound(
                &inst,
                &PgdConfig {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!((v + 2.9).abs() < 1e-9);
            assert!((x[0] + 1.0).abs() < 1e-9);
        }
        let one = PgdConfig {
            steps: 1,
            restarts: 1,
            ..Default::default()
        };
        let inst = toy::random_instance(&[2, 8, 8, 2], 0.1, 8);
        let (v, _) = pgd_upper_bound(&inst, &one).unwrap();
        assert!(v <= inst.spec_value(inst.x0.view()).unwrap());
        let g = global_min(&inst, DEFAULT_PATTERN_CAP).unwrap();
        let (v, x) = pgd_upper_bound(&inst, &PgdConfig::default()).unwrap();
        assert!(g.f_star <= v + 1e-12);
        assert!(inst.contains(x.view(), 1e-12));
        assert!(pgd_upper_bound(&inst, &PgdConfig { steps: 0, ..one }).is_err());
    }
}
