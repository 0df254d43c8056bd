//! Primal-dual interior-point method for
//!
//! ```text
//!   min  c.v + c0
//!   s.t. A v = b
//!        lo <= v <= hi           (entries may be infinite)
//!        d_k(v) <= r_k           (bilinear p*q, or squared distance to a centre)
//! ```
//!
//! Each inequality gets a slack `s_k = d_k(v)` with the barrier on `r_k - s_k`.
//! Newton steps solve the condensed KKT system with a dense Bunch-Kaufman
//! factorization, regularizing the Hessian block until the inertia is
//! `(n, m, 0)`. Step acceptance uses an l1 exact-penalty merit function on
//! the barrier objective; the barrier parameter follows the monotone
//! Fiacco-McCormick rule.

use crate::linalg::Ldlt;

/// Smooth inequality `d(v) <= bound`.
#[derive(Debug, Clone, PartialEq)]
pub enum IneqKind {
    /// `v[p] * v[q]`
    Bilinear { p: usize, q: usize },
    /// `sum_i (v[vars_i] - center_i)^2`
    Ball { vars: Vec<usize>, center: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inequality {
    pub kind: IneqKind,
    pub bound: f64,
}

impl Inequality {
    pub fn value(&self, v: &[f64]) -> f64 {
        match &self.kind {
            IneqKind::Bilinear { p, q } => v[*p] * v[*q],
            IneqKind::Ball { vars, center } => vars.iter().zip(center).map(|(&i, c)| (v[i] - c).powi(2)).sum(),
        }
    }

    /// Sparse gradient.
    fn gradient(&self, v: &[f64]) -> Vec<(usize, f64)> {
        match &self.kind {
            IneqKind::Bilinear { p, q } => vec![(*p, v[*q]), (*q, v[*p])],
            IneqKind::Ball { vars, center } => vars.iter().zip(center).map(|(&i, c)| (i, 2.0 * (v[i] - c))).collect(),
        }
    }
}

/// Sparse equality row `coeffs . v = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl EqRow {
    pub fn residual(&self, v: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, a)| a * v[i]).sum::<f64>() - self.rhs
    }
}

/// Problem data. Bounds with `lo == -inf` / `hi == inf` are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Nlp {
    pub cost: Vec<f64>,
    pub cost_const: f64,
    pub eq: Vec<EqRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub ineq: Vec<Inequality>,
}

impl Nlp {
    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn objective(&self, v: &[f64]) -> f64 {
        self.cost.iter().zip(v).map(|(c, x)| c * x).sum::<f64>() + self.cost_const
    }

    /// Largest violation of equalities, bounds and inequalities at `v`.
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        let eq = self.eq.iter().map(|r| r.residual(v).abs()).fold(0.0, f64::max);
        let bnd = (0..v.len())
            .map(|i| (self.lower[i] - v[i]).max(v[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max);
        let ineq = self.ineq.iter().map(|g| (g.value(v) - g.bound).max(0.0)).fold(0.0, f64::max);
        eq.max(bnd).max(ineq)
    }
}

/// Full primal-dual state. Bound multipliers are zero where the bound is
/// absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub v: Vec<f64>,
    /// Inequality slacks, `s_k = d_k(v)` at feasibility.
    pub s: Vec<f64>,
    pub y_eq: Vec<f64>,
    pub y_in: Vec<f64>,
    pub z_lo: Vec<f64>,
    pub z_hi: Vec<f64>,
    /// Multipliers of `s_k <= bound_k`.
    pub z_s: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct IpmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_factor: f64,
    pub kappa_eps: f64,
    pub tau: f64,
    pub bound_push: f64,
    pub reg_start: f64,
    pub reg_growth: f64,
    /// Bilinear rows are relaxed to `d(v) <= max(bound, comp_relax * mu)`
    /// while the barrier parameter is large; 0 disables.
    pub comp_relax: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 300,
            mu_init: 0.1,
            mu_min: 1e-9,
            mu_factor: 0.2,
            kappa_eps: 10.0,
            tau: 0.995,
            bound_push: 1e-2,
            reg_start: 1e-8,
            reg_growth: 10.0,
            comp_relax: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpmStatus {
    Converged,
    MaxIter,
    /// Line search or inertia correction broke down.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub iterate: Iterate,
    pub status: IpmStatus,
    pub iterations: usize,
    /// Scaled KKT error at `mu = 0`.
    pub kkt_error: f64,
    pub primal_infeasibility: f64,
    pub mu: f64,
}

const KAPPA_SIGMA: f64 = 1e10;
const S_MAX: f64 = 100.0;

/// Cold starting point: the given primal guess pushed into the interior of
/// its bounds, unit bound multipliers, zero equality multipliers.
pub fn cold_start(nlp: &Nlp, guess: &[f64], opts: &IpmOptions) -> Iterate {
    let n = nlp.num_vars();
    let mut v = guess.to_vec();
    for i in 0..n {
        let (lo, hi) = (nlp.lower[i], nlp.upper[i]);
        let mut p_lo = opts.bound_push * lo.abs().max(1.0);
        let mut p_hi = opts.bound_push * hi.abs().max(1.0);
        if lo.is_finite() && hi.is_finite() {
            p_lo = p_lo.min(opts.bound_push * (hi - lo));
            p_hi = p_hi.min(opts.bound_push * (hi - lo));
        }
        if lo.is_finite() {
            v[i] = v[i].max(lo + p_lo);
        }
        if hi.is_finite() {
            v[i] = v[i].min(hi - p_hi);
        }
    }
    let s = nlp
        .ineq
        .iter()
        .map(|g| g.value(&v).min(g.bound - opts.bound_push * g.bound.abs().max(1.0)))
        .collect();
    let z_lo = nlp.lower.iter().map(|l| if l.is_finite() { 1.0 } else { 0.0 }).collect();
    let z_hi = nlp.upper.iter().map(|u| if u.is_finite() { 1.0 } else { 0.0 }).collect();
    Iterate {
        v,
        s,
        y_eq: vec![0.0; nlp.eq.len()],
        y_in: vec![1.0; nlp.ineq.len()],
        z_lo,
        z_hi,
        z_s: vec![1.0; nlp.ineq.len()],
    }
}

/// Average complementarity product of an iterate.
pub fn average_complementarity(nlp: &Nlp, it: &Iterate) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..nlp.num_vars() {
        if nlp.lower[i].is_finite() {
            sum += (it.v[i] - nlp.lower[i]) * it.z_lo[i];
            count += 1;
        }
        if nlp.upper[i].is_finite() {
            sum += (nlp.upper[i] - it.v[i]) * it.z_hi[i];
            count += 1;
        }
    }
    for (k, g) in nlp.ineq.iter().enumerate() {
        sum += (g.bound - it.s[k]) * it.z_s[k];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

struct Residuals {
    /// Gradient of the Lagrangian in `v`.
    dual: Vec<f64>,
    /// Gradient of the Lagrangian in `s`.
    dual_s: Vec<f64>,
    eq: Vec<f64>,
    ineq: Vec<f64>,
}

fn residuals(nlp: &Nlp, it: &Iterate) -> Residuals {
    let n = nlp.num_vars();
    let mut dual = nlp.cost.clone();
    for (r, row) in nlp.eq.iter().enumerate() {
        for &(i, a) in &row.coeffs {
            dual[i] += a * it.y_eq[r];
        }
    }
    for (k, g) in nlp.ineq.iter().enumerate() {
        for (i, d) in g.gradient(&it.v) {
            dual[i] += d * it.y_in[k];
        }
    }
    for i in 0..n {
        dual[i] += it.z_hi[i] - it.z_lo[i];
    }
    let dual_s = (0..nlp.ineq.len()).map(|k| it.z_s[k] - it.y_in[k]).collect();
    let eq = nlp.eq.iter().map(|r| r.residual(&it.v)).collect();
    let ineq = nlp.ineq.iter().enumerate().map(|(k, g)| g.value(&it.v) - it.s[k]).collect();
    Residuals {
        dual,
        dual_s,
        eq,
        ineq,
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Scaled optimality error for barrier parameter `mu` (IPOPT's `E_mu`).
fn kkt_error(nlp: &Nlp, it: &Iterate, res: &Residuals, rb: &[f64], mu: f64) -> f64 {
    let n = nlp.num_vars();
    let mut z_sum = 0.0;
    let mut z_cnt = 0usize;
    let mut compl = 0.0f64;
    for i in 0..n {
        if nlp.lower[i].is_finite() {
            z_sum += it.z_lo[i].abs();
            z_cnt += 1;
            compl = compl.max(((it.v[i] - nlp.lower[i]) * it.z_lo[i] - mu).abs());
        }
        if nlp.upper[i].is_finite() {
            z_sum += it.z_hi[i].abs();
            z_cnt += 1;
            compl = compl.max(((nlp.upper[i] - it.v[i]) * it.z_hi[i] - mu).abs());
        }
    }
    for k in 0..nlp.ineq.len() {
        z_sum += it.z_s[k].abs();
        z_cnt += 1;
        compl = compl.max(((rb[k] - it.s[k]) * it.z_s[k] - mu).abs());
    }
    let y_sum: f64 = it.y_eq.iter().chain(&it.y_in).map(|y| y.abs()).sum();
    let m = it.y_eq.len() + it.y_in.len();
    let s_d = (S_MAX.max((y_sum + z_sum) / (m + z_cnt).max(1) as f64)) / S_MAX;
    let s_c = (S_MAX.max(z_sum / z_cnt.max(1) as f64)) / S_MAX;
    let dual = inf_norm(&res.dual).max(inf_norm(&res.dual_s)) / s_d;
    let primal = inf_norm(&res.eq).max(inf_norm(&res.ineq));
    dual.max(primal).max(compl / s_c)
}

fn primal_inf(res: &Residuals) -> f64 {
    inf_norm(&res.eq).max(inf_norm(&res.ineq))
}

fn merit(nlp: &Nlp, it: &Iterate, rb: &[f64], mu: f64, rho: f64) -> f64 {
    let mut barrier = nlp.objective(&it.v);
    for i in 0..nlp.num_vars() {
        if nlp.lower[i].is_finite() {
            barrier -= mu * (it.v[i] - nlp.lower[i]).ln();
        }
        if nlp.upper[i].is_finite() {
            barrier -= mu * (nlp.upper[i] - it.v[i]).ln();
        }
    }
    let mut theta = 0.0;
    for (k, g) in nlp.ineq.iter().enumerate() {
        barrier -= mu * (rb[k] - it.s[k]).ln();
        theta += (g.value(&it.v) - it.s[k]).abs();
    }
    theta += nlp.eq.iter().map(|r| r.residual(&it.v).abs()).sum::<f64>();
    barrier + rho * theta
}

struct Step {
    dv: Vec<f64>,
    ds: Vec<f64>,
    dy_eq: Vec<f64>,
    dy_in: Vec<f64>,
    dz_lo: Vec<f64>,
    dz_hi: Vec<f64>,
    dz_s: Vec<f64>,
    /// `d^T H d` with the regularized primal-dual Hessian.
    curvature: f64,
}

/// Regularization remembered across iterations.
struct Regularization {
    last: f64,
}

fn newton_step(
    nlp: &Nlp,
    it: &Iterate,
    res: &Residuals,
    rb: &[f64],
    mu: f64,
    opts: &IpmOptions,
    reg: &mut Regularization,
) -> Option<Step> {
    let n = nlp.num_vars();
    let m = nlp.eq.len();
    let t = n + m;

    let mut sigma = vec![0.0; n];
    let mut rhs_v: Vec<f64> = res.dual.clone();
    for i in 0..n {
        // rhs uses the barrier gradient, i.e. z replaced by mu / slack
        if nlp.lower[i].is_finite() {
            let sl = it.v[i] - nlp.lower[i];
            sigma[i] += it.z_lo[i] / sl;
            rhs_v[i] += it.z_lo[i] - mu / sl;
        }
        if nlp.upper[i].is_finite() {
            let su = nlp.upper[i] - it.v[i];
            sigma[i] += it.z_hi[i] / su;
            rhs_v[i] -= it.z_hi[i] - mu / su;
        }
    }
    let n_in = nlp.ineq.len();
    let mut sigma_s = vec![0.0; n_in];
    let mut r_s = vec![0.0; n_in];
    let grads: Vec<Vec<(usize, f64)>> = nlp.ineq.iter().map(|g| g.gradient(&it.v)).collect();
    for k in 0..n_in {
        let sv = rb[k] - it.s[k];
        sigma_s[k] = it.z_s[k] / sv;
        // s-stationarity of the barrier problem: -y_in + mu / (bound - s)
        r_s[k] = -it.y_in[k] + mu / sv;
        let w = sigma_s[k] * res.ineq[k] + r_s[k];
        for &(i, d) in &grads[k] {
            rhs_v[i] += d * w;
        }
    }

    let mut base = vec![0.0; t * t];
    for i in 0..n {
        base[i * t + i] = sigma[i];
    }
    for (k, g) in nlp.ineq.iter().enumerate() {
        match &g.kind {
            IneqKind::Bilinear { p, q } => {
                base[p * t + q] += it.y_in[k];
                base[q * t + p] += it.y_in[k];
            }
            IneqKind::Ball { vars, .. } => {
                for &i in vars {
                    base[i * t + i] += 2.0 * it.y_in[k];
                }
            }
        }
        for &(i, di) in &grads[k] {
            for &(j, dj) in &grads[k] {
                base[i * t + j] += sigma_s[k] * di * dj;
            }
        }
    }
    for (r, row) in nlp.eq.iter().enumerate() {
        for &(i, a) in &row.coeffs {
            base[(n + r) * t + i] += a;
            base[i * t + n + r] += a;
        }
    }

    let mut rhs = vec![0.0; t];
    for i in 0..n {
        rhs[i] = -rhs_v[i];
    }
    for r in 0..m {
        rhs[n + r] = -res.eq[r];
    }

    let mut delta_w = 0.0;
    let mut delta_c = 0.0;
    let mut tries = 0;
    let (fact, kkt) = loop {
        let mut kkt = base.clone();
        for i in 0..n {
            kkt[i * t + i] += delta_w;
        }
        for r in 0..m {
            kkt[(n + r) * t + n + r] -= delta_c;
        }
        let f = Ldlt::factor(kkt.clone(), t);
        let inr = f.inertia();
        if inr.positive == n && inr.negative == m && inr.zero == 0 {
            if delta_w > 0.0 {
                reg.last = delta_w;
            }
            break (f, kkt);
        }
        if inr.zero > 0 && delta_c == 0.0 {
            delta_c = 1e-8 * mu.powf(0.25);
        }
        delta_w = if delta_w == 0.0 {
            if reg.last == 0.0 {
                opts.reg_start
            } else {
                (reg.last / 3.0).max(1e-20)
            }
        } else {
            delta_w * opts.reg_growth
        };
        tries += 1;
        if delta_w > 1e40 || tries > 80 {
            return None;
        }
    };

    let mut sol = fact.solve(&rhs);
    // one round of iterative refinement
    let mut resid = rhs.clone();
    for i in 0..t {
        let row = &kkt[i * t..(i + 1) * t];
        resid[i] -= row.iter().zip(&sol).map(|(a, x)| a * x).sum::<f64>();
    }
    let corr = fact.solve(&resid);
    for i in 0..t {
        sol[i] += corr[i];
    }
    if sol.iter().any(|x| !x.is_finite()) {
        return None;
    }

    let dv = sol[..n].to_vec();
    let dy_eq = sol[n..].to_vec();
    let mut ds = vec![0.0; n_in];
    let mut dy_in = vec![0.0; n_in];
    let mut dz_s = vec![0.0; n_in];
    for k in 0..n_in {
        let jd: f64 = grads[k].iter().map(|&(i, d)| d * dv[i]).sum();
        ds[k] = jd + res.ineq[k];
        dy_in[k] = sigma_s[k] * ds[k] + r_s[k];
        let sv = rb[k] - it.s[k];
        dz_s[k] = mu / sv - it.z_s[k] + sigma_s[k] * ds[k];
    }
    let mut dz_lo = vec![0.0; n];
    let mut dz_hi = vec![0.0; n];
    for i in 0..n {
        if nlp.lower[i].is_finite() {
            let sl = it.v[i] - nlp.lower[i];
            dz_lo[i] = mu / sl - it.z_lo[i] - it.z_lo[i] / sl * dv[i];
        }
        if nlp.upper[i].is_finite() {
            let su = nlp.upper[i] - it.v[i];
            dz_hi[i] = mu / su - it.z_hi[i] + it.z_hi[i] / su * dv[i];
        }
    }

    let mut curvature = 0.0;
    for i in 0..n {
        let row = &base[i * t..i * t + n];
        let hv: f64 = row.iter().zip(&dv).map(|(a, x)| a * x).sum::<f64>() + delta_w * dv[i];
        curvature += dv[i] * hv;
    }
    // the J^T Sigma_s J part is already in `base`; remove it and add the
    // slack-space form Sigma_s ds^2 instead
    for k in 0..n_in {
        let jd: f64 = grads[k].iter().map(|&(i, d)| d * dv[i]).sum();
        curvature += sigma_s[k] * (ds[k] * ds[k] - jd * jd);
    }

    Some(Step {
        dv,
        ds,
        dy_eq,
        dy_in,
        dz_lo,
        dz_hi,
        dz_s,
        curvature,
    })
}

fn max_step(values: impl Iterator<Item = (f64, f64)>, tau: f64) -> f64 {
    // values: (slack, rate of decrease of slack); slack must stay >= (1 - tau) slack
    let mut alpha: f64 = 1.0;
    for (slack, dec) in values {
        if dec > 0.0 {
            alpha = alpha.min(tau * slack / dec);
        }
    }
    alpha
}

/// Runs the interior-point iteration from `start` with initial barrier `mu0`.
pub fn solve(nlp: &Nlp, start: Iterate, mu0: f64, opts: &IpmOptions) -> IpmResult {
    let n = nlp.num_vars();
    let mut it = start;
    let mut mu = mu0.clamp(opts.mu_min, 1e3);
    let mut rho: f64 = 1.0;
    let mut reg = Regularization { last: 0.0 };
    let mut iterations = 0;
    let mut status = IpmStatus::MaxIter;
    let mut failures = 0;
    let relaxed = |mu: f64| -> Vec<f64> {
        nlp.ineq
            .iter()
            .map(|g| match g.kind {
                IneqKind::Bilinear { .. } if opts.comp_relax > 0.0 => g.bound.max(opts.comp_relax * mu),
                _ => g.bound,
            })
            .collect()
    };
    let mut rb = relaxed(mu);
    for k in 0..rb.len() {
        if it.s[k] >= rb[k] {
            it.s[k] = rb[k] - opts.bound_push * rb[k].abs().max(1e-12);
        }
    }

    loop {
        let mut res = residuals(nlp, &it);
        let exact = rb.iter().zip(&nlp.ineq).all(|(r, g)| *r == g.bound);
        let err0 = kkt_error(nlp, &it, &res, &rb, 0.0);
        if exact && err0 <= opts.tol && primal_inf(&res) <= opts.tol {
            status = IpmStatus::Converged;
            break;
        }
        let mu_before = mu;
        while mu > opts.mu_min && kkt_error(nlp, &it, &res, &rb, mu) <= opts.kappa_eps * mu {
            mu = (opts.mu_factor * mu).max(opts.mu_min);
        }
        if mu < mu_before {
            // tighten relaxed rows, keeping slacks strictly inside
            let next = relaxed(mu);
            for k in 0..rb.len() {
                if next[k] < rb[k] && it.s[k] >= next[k] {
                    let gap = (rb[k] - it.s[k]).min(0.5 * next[k].abs().max(1e-12));
                    it.s[k] = next[k] - gap;
                }
            }
            rb = next;
            res = residuals(nlp, &it);
        }
        if iterations >= opts.max_iter {
            break;
        }
        let Some(step) = newton_step(nlp, &it, &res, &rb, mu, opts, &mut reg) else {
            status = IpmStatus::Stalled;
            break;
        };

        let alpha_max = max_step(
            (0..n)
                .filter(|&i| nlp.lower[i].is_finite())
                .map(|i| (it.v[i] - nlp.lower[i], -step.dv[i]))
                .chain((0..n).filter(|&i| nlp.upper[i].is_finite()).map(|i| (nlp.upper[i] - it.v[i], step.dv[i])))
                .chain((0..nlp.ineq.len()).map(|k| (rb[k] - it.s[k], step.ds[k]))),
            opts.tau,
        );
        let alpha_dual = max_step(
            (0..n)
                .filter(|&i| nlp.lower[i].is_finite())
                .map(|i| (it.z_lo[i], -step.dz_lo[i]))
                .chain((0..n).filter(|&i| nlp.upper[i].is_finite()).map(|i| (it.z_hi[i], -step.dz_hi[i])))
                .chain((0..nlp.ineq.len()).map(|k| (it.z_s[k], -step.dz_s[k]))),
            opts.tau,
        );

        // penalty parameter so that the step is a descent direction
        let theta: f64 = res.eq.iter().chain(&res.ineq).map(|r| r.abs()).sum();
        let mut grad_dot = 0.0;
        for i in 0..n {
            let mut g = nlp.cost[i];
            if nlp.lower[i].is_finite() {
                g -= mu / (it.v[i] - nlp.lower[i]);
            }
            if nlp.upper[i].is_finite() {
                g += mu / (nlp.upper[i] - it.v[i]);
            }
            grad_dot += g * step.dv[i];
        }
        for k in 0..nlp.ineq.len() {
            grad_dot += mu / (rb[k] - it.s[k]) * step.ds[k];
        }
        if theta > 0.0 {
            let needed = (grad_dot + 0.5 * step.curvature.max(0.0)) / (0.9 * theta);
            if rho < needed {
                rho = needed + 1.0;
            }
        }
        let slope = grad_dot - rho * theta;
        let phi0 = merit(nlp, &it, &rb, mu, rho);
        tracing::trace!(iterations, mu, err0, alpha_max, alpha_dual, rho, slope, "ipm step");

        let mut alpha = alpha_max;
        let mut trial;
        let mut accepted = false;
        loop {
            trial = it.clone();
            for i in 0..n {
                trial.v[i] += alpha * step.dv[i];
            }
            for k in 0..nlp.ineq.len() {
                trial.s[k] += alpha * step.ds[k];
            }
            let phi = merit(nlp, &trial, &rb, mu, rho);
            if phi.is_finite() && phi <= phi0 + 1e-4 * alpha * slope.min(0.0) + 1e-12 * phi0.abs().max(1.0) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                break;
            }
        }
        if !accepted {
            failures += 1;
            if failures > 8 {
                status = IpmStatus::Stalled;
                break;
            }
            // take a short step anyway to escape
            alpha = (alpha_max * 1e-3).max(1e-10);
            trial = it.clone();
            for i in 0..n {
                trial.v[i] += alpha * step.dv[i];
            }
            for k in 0..nlp.ineq.len() {
                trial.s[k] += alpha * step.ds[k];
            }
        } else {
            failures = 0;
        }
        for r in 0..nlp.eq.len() {
            trial.y_eq[r] += alpha * step.dy_eq[r];
        }
        for k in 0..nlp.ineq.len() {
            trial.y_in[k] += alpha * step.dy_in[k];
            trial.z_s[k] += alpha_dual * step.dz_s[k];
            let sv = rb[k] - trial.s[k];
            trial.z_s[k] = trial.z_s[k].clamp(mu / (KAPPA_SIGMA * sv), KAPPA_SIGMA * mu / sv);
        }
        for i in 0..n {
            if nlp.lower[i].is_finite() {
                trial.z_lo[i] += alpha_dual * step.dz_lo[i];
                let sl = trial.v[i] - nlp.lower[i];
                trial.z_lo[i] = trial.z_lo[i].clamp(mu / (KAPPA_SIGMA * sl), KAPPA_SIGMA * mu / sl);
            }
            if nlp.upper[i].is_finite() {
                trial.z_hi[i] += alpha_dual * step.dz_hi[i];
                let su = nlp.upper[i] - trial.v[i];
                trial.z_hi[i] = trial.z_hi[i].clamp(mu / (KAPPA_SIGMA * su), KAPPA_SIGMA * mu / su);
            }
        }
        it = trial;
        iterations += 1;
    }

    let res = residuals(nlp, &it);
    IpmResult {
        kkt_error: kkt_error(nlp, &it, &res, &rb, 0.0),
        primal_infeasibility: primal_inf(&res),
        iterate: it,
        status,
        iterations,
        mu,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(nlp: &Nlp, guess: &[f64]) -> IpmResult {
        let opts = IpmOptions::default();
        solve(nlp, cold_start(nlp, guess, &opts), opts.mu_init, &opts)
    }

    #[test]
    fn box_lp() {
        // min x - 2y, 0 <= x,y <= 1, x + y = 1  -> (0, 1), value -2
        let nlp = Nlp {
            cost: vec![1.0, -2.0],
            cost_const: 0.0,
            eq: vec![EqRow {
                coeffs: vec![(0, 1.0), (1, 1.0)],
                rhs: 1.0,
            }],
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            ineq: vec![],
        };
        let r = run(&nlp, &[0.5, 0.5]);
        assert_eq!(r.status, IpmStatus::Converged);
        assert!((nlp.objective(&r.iterate.v) + 2.0).abs() < 1e-6);
        assert!(r.kkt_error <= 1e-7);
    }

    #[test]
    fn ball_constraint() {
        // min x + y over the unit disc -> -sqrt(2)
        let nlp = Nlp {
            cost: vec![1.0, 1.0],
            cost_const: 0.0,
            eq: vec![],
            lower: vec![f64::NEG_INFINITY; 2],
            upper: vec![f64::INFINITY; 2],
            ineq: vec![Inequality {
                kind: IneqKind::Ball {
                    vars: vec![0, 1],
                    center: vec![0.0, 0.0],
                },
                bound: 1.0,
            }],
        };
        let r = run(&nlp, &[0.0, 0.0]);
        assert_eq!(r.status, IpmStatus::Converged);
        assert!((nlp.objective(&r.iterate.v) + 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn bilinear_complementarity() {
        // relu of z = x with x in [-1, 1], minimise -p - 0.5 x
        // v = (x, p, q), x = p - q, p*q <= eps
        let nlp = Nlp {
            cost: vec![-0.5, -1.0, 0.0],
            cost_const: 0.0,
            eq: vec![EqRow {
                coeffs: vec![(0, 1.0), (1, -1.0), (2, 1.0)],
                rhs: 0.0,
            }],
            lower: vec![-1.0, 0.0, 0.0],
            upper: vec![1.0, 1.0, 1.0],
            ineq: vec![Inequality {
                kind: IneqKind::Bilinear { p: 1, q: 2 },
                bound: 1e-6,
            }],
        };
        let r = run(&nlp, &[0.0, 0.0, 0.0]);
        assert_eq!(r.status, IpmStatus::Converged, "{r:?}");
        let v = &r.iterate.v;
        // -relu(x) - 0.5 x is minimised at x = 1: value -1.5
        assert!((v[0] - 1.0).abs() < 1e-4, "{v:?}");
        assert!(v[1] * v[2] <= 1e-6 + 1e-9);
    }
}
