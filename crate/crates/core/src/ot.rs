//! Entropy-regularized optimal transport between weighted point clouds.
//!
//! All Sinkhorn updates run in the log domain:
//!
//! ```text
//! f_i = -ε · LSE_j( ln b_j + (g_j - C_ij) / ε )
//! g_j = -ε · LSE_i( ln a_i + (f_i - C_ij) / ε )
//! ```
//!
//! and the regularized value is the dual objective `<a, f> + <b, g>`.
//!
//! With annealing enabled, ε follows the geometric grid `target / s^k`
//! (`s` = scaling factor, 0.5 by default) starting from the first grid point
//! at or above `max(C)`, with a fixed number of iterations per stage. Using a
//! grid anchored at the target keeps the schedule piecewise constant in the
//! data, so the differentiable path sees the same schedule under small
//! perturbations of the points.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::assignment::{self, CostMatrix};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Weighted empirical measure: `n` points in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    n: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("point cloud rows must share a non-zero dimension"));
        }
        if weights.len() != n {
            return Err(Error::invalid(format!("{} weights for {n} points", weights.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        let flat: Vec<f64> = points.into_iter().flatten().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        Ok(Self {
            points: flat,
            n,
            dim,
            weights,
        })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Points as an `n × d` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.dim], self.points.clone()).expect("consistent shape")
    }

    /// The same cloud with every point shifted by `offset`.
    pub fn translated(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, v) in out.points.iter_mut().enumerate() {
            *v += offset[i % self.dim];
        }
        out
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.n as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-12)
    }
}

/// `C[i, j] = ||a_i - b_j||^p`, row-major `n × m`.
pub fn cost_matrix(a: &PointCloud, b: &PointCloud, p: u32) -> Result<Vec<f64>> {
    if a.dim != b.dim {
        return Err(Error::invalid(format!(
            "cost between dimensions {} and {}",
            a.dim, b.dim
        )));
    }
    if !matches!(p, 1 | 2) {
        return Err(Error::invalid(format!("cost exponent {p} not in {{1, 2}}")));
    }
    let mut c = Vec::with_capacity(a.n * b.n);
    for i in 0..a.n {
        for j in 0..b.n {
            let sq: f64 = a
                .point(i)
                .iter()
                .zip(b.point(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            c.push(if p == 2 { sq } else { sq.sqrt() });
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Cap on total iterations, annealing stages included.
    pub max_iters: usize,
    /// Tolerance on the max absolute marginal violation.
    pub tolerance: f64,
    pub annealing: bool,
    pub scaling: f64,
    pub stage_iters: usize,
    /// Iterations at the target ε on the differentiable path.
    pub unroll_iters: usize,
    pub cost_exponent: u32,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tolerance: 1e-9,
            annealing: true,
            scaling: 0.5,
            stage_iters: 10,
            unroll_iters: 50,
            cost_exponent: 2,
        }
    }
}

/// Converged (or not) dual solution of one regularized problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Debiased value, filled in by [`sinkhorn_divergence_full`].
    pub divergence: Option<f64>,
    /// Regularized transport value.
    pub cost: f64,
    pub potentials_f: Vec<f64>,
    pub potentials_g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
    pub epsilon_schedule: Vec<f64>,
}

/// Annealing stages strictly above `target`, largest first.
pub fn epsilon_schedule(max_cost: f64, target: f64, cfg: &SinkhornConfig) -> Vec<f64> {
    if !cfg.annealing || max_cost <= target || !(cfg.scaling > 0.0 && cfg.scaling < 1.0) {
        return Vec::new();
    }
    let ratio = 1.0 / cfg.scaling;
    let stages = ((max_cost / target).ln() / ratio.ln()).ceil() as i32;
    (1..=stages).rev().map(|k| target * ratio.powi(k)).collect()
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

struct Dual<'a> {
    c: &'a [f64],
    n: usize,
    m: usize,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    symmetric: bool,
}

fn ln_weights(w: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|x| if *x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect()
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Dual<'_> {
    fn update_f(&self, f: &mut [f64], g: &[f64], eps: f64) {
        for (i, fi) in f.iter_mut().enumerate() {
            let row = &self.c[i * self.m..(i + 1) * self.m];
            *fi = -eps * lse((0..self.m).map(|j| self.log_b[j] + (g[j] - row[j]) / eps));
        }
    }

    fn update_g(&self, f: &[f64], g: &mut [f64], eps: f64) {
        for (j, gj) in g.iter_mut().enumerate() {
            let it = (0..self.n).map(|i| self.log_a[i] + (f[i] - self.c[i * self.m + j]) / eps);
            *gj = -eps * lse(it);
        }
    }

    fn step(&self, f: &mut [f64], g: &mut [f64], eps: f64) {
        if self.symmetric {
            self.averaged_step(f, g, eps);
        } else {
            self.update_f(f, g, eps);
            self.update_g(f, g, eps);
        }
    }

    /// Self-problems oscillate under alternating updates, so both potentials
    /// move halfway toward their images under the previous pair.
    fn averaged_step(&self, f: &mut [f64], g: &mut [f64], eps: f64) {
        let f_new: Vec<f64> = (0..self.n)
            .map(|i| {
                let row = &self.c[i * self.m..(i + 1) * self.m];
                -eps * lse((0..self.m).map(|j| self.log_b[j] + (g[j] - row[j]) / eps))
            })
            .collect();
        let g_new: Vec<f64> = (0..self.m)
            .map(|j| {
                -eps * lse((0..self.n).map(|i| self.log_a[i] + (f[i] - self.c[i * self.m + j]) / eps))
            })
            .collect();
        for (fi, t) in f.iter_mut().zip(f_new) {
            *fi = 0.5 * (*fi + t);
        }
        for (gj, t) in g.iter_mut().zip(g_new) {
            *gj = 0.5 * (*gj + t);
        }
    }

    fn marginal_error(&self, f: &[f64], g: &[f64], eps: f64) -> f64 {
        let mut rows = vec![0.0; self.n];
        let mut cols = vec![0.0; self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                let p = (self.log_a[i] + self.log_b[j] + (f[i] + g[j] - self.c[i * self.m + j]) / eps)
                    .exp();
                rows[i] += p;
                cols[j] += p;
            }
        }
        let ra = rows
            .iter()
            .zip(&self.log_a)
            .map(|(r, la)| (r - la.exp()).abs());
        let cb = cols
            .iter()
            .zip(&self.log_b)
            .map(|(c, lb)| (c - lb.exp()).abs());
        ra.chain(cb).fold(0.0, f64::max)
    }
}

/// Regularized OT between `a` and `b` by log-domain Sinkhorn.
///
/// Non-convergence within `max_iters` is reported through
/// [`SinkhornResult::converged`], not as an error.
pub fn sinkhorn(
    a: &PointCloud,
    b: &PointCloud,
    epsilon: f64,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    check_epsilon(epsilon)?;
    let c = cost_matrix(a, b, cfg.cost_exponent)?;
    let dual = Dual {
        c: &c,
        n: a.n,
        m: b.n,
        log_a: ln_weights(&a.weights),
        log_b: ln_weights(&b.weights),
        symmetric: a == b,
    };
    let max_cost = c.iter().copied().fold(0.0, f64::max);
    let stages = epsilon_schedule(max_cost, epsilon, cfg);
    let mut f = vec![0.0; a.n];
    let mut g = vec![0.0; b.n];
    let mut iterations = 0;

    'stages: for &eps in &stages {
        for _ in 0..cfg.stage_iters {
            if iterations >= cfg.max_iters {
                break 'stages;
            }
            dual.step(&mut f, &mut g, eps);
            iterations += 1;
        }
    }

    let mut err = f64::INFINITY;
    while iterations < cfg.max_iters {
        dual.step(&mut f, &mut g, epsilon);
        iterations += 1;
        err = dual.marginal_error(&f, &g, epsilon);
        if err < cfg.tolerance {
            break;
        }
    }

    let cost = dot(&a.weights, &f) + dot(&b.weights, &g);
    let mut schedule = stages;
    schedule.push(epsilon);
    Ok(SinkhornResult {
        divergence: None,
        cost,
        potentials_f: f,
        potentials_g: g,
        iterations,
        converged: err < cfg.tolerance,
        marginal_error: err,
        epsilon_schedule: schedule,
    })
}

fn dot(w: &[f64], v: &[f64]) -> f64 {
    w.iter()
        .zip(v)
        .filter(|(wi, _)| **wi > 0.0)
        .map(|(wi, vi)| wi * vi)
        .sum()
}

/// Debiased divergence together with the cross-term solution.
pub fn sinkhorn_divergence_full(
    a: &PointCloud,
    b: &PointCloud,
    epsilon: f64,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let mut ab = sinkhorn(a, b, epsilon, cfg)?;
    let aa = sinkhorn(a, a, epsilon, cfg)?;
    let bb = sinkhorn(b, b, epsilon, cfg)?;
    ab.divergence = Some(ab.cost - 0.5 * (aa.cost + bb.cost));
    ab.converged = ab.converged && aa.converged && bb.converged;
    ab.marginal_error = ab.marginal_error.max(aa.marginal_error).max(bb.marginal_error);
    Ok(ab)
}

/// `S̃(a, b) - ½ (S̃(a, a) + S̃(b, b))`.
pub fn sinkhorn_divergence(
    a: &PointCloud,
    b: &PointCloud,
    epsilon: f64,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    let r = sinkhorn_divergence_full(a, b, epsilon, cfg)?;
    if !r.converged {
        warn!(
            "sinkhorn divergence not converged (marginal error {:.3e})",
            r.marginal_error
        );
    }
    Ok(r.divergence.expect("set above"))
}

/// Nonnegative coupling matrix, row-major `n × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub plan: Vec<f64>,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.plan[i * self.cols..(i + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j)).sum())
            .collect()
    }
}

/// `plan_ij = a_i b_j exp((f_i + g_j - C_ij) / ε)` from a converged result.
pub fn transport_plan(
    result: &SinkhornResult,
    a: &PointCloud,
    b: &PointCloud,
    epsilon: f64,
    cost_exponent: u32,
) -> Result<TransportPlan> {
    if !result.converged {
        return Err(Error::NotConverged(format!(
            "cannot form a plan, marginal error {:.3e}",
            result.marginal_error
        )));
    }
    check_epsilon(epsilon)?;
    if result.potentials_f.len() != a.n || result.potentials_g.len() != b.n {
        return Err(Error::invalid("potentials do not match the clouds"));
    }
    let c = cost_matrix(a, b, cost_exponent)?;
    let mut plan = Vec::with_capacity(a.n * b.n);
    for i in 0..a.n {
        for j in 0..b.n {
            let e = (result.potentials_f[i] + result.potentials_g[j] - c[i * b.n + j]) / epsilon;
            plan.push(a.weights[i] * b.weights[j] * e.exp());
        }
    }
    Ok(TransportPlan {
        rows: a.n,
        cols: b.n,
        plan,
    })
}

/// Exact OT for equal-size uniform clouds: optimal assignment cost / n.
pub fn exact_ot(a: &PointCloud, b: &PointCloud, p: u32) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::invalid(format!(
            "exact OT oracle needs equal sizes, got {} and {}",
            a.n, b.n
        )));
    }
    if !a.is_uniform() || !b.is_uniform() {
        return Err(Error::invalid("exact OT oracle needs uniform weights"));
    }
    if a.n > 64 {
        return Err(Error::invalid("exact OT oracle limited to n <= 64"));
    }
    let c = cost_matrix(a, b, p)?;
    let sol = assignment::solve(&CostMatrix::new(a.n, c)?);
    Ok(sol.total_cost / a.n as f64)
}

/// Convergence summary of a differentiable unroll.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollInfo {
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
}

/// `n × m` squared-Euclidean cost between the rows of `x` and `y` on the graph.
pub fn graph_cost_matrix(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (xs, ys) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(Error::ShapeMismatch {
            op: "cost_matrix",
            lhs: xs,
            rhs: ys,
        });
    }
    let xr = g.reshape(x, &[xs[0], 1, xs[1]])?;
    let yr = g.reshape(y, &[1, ys[0], ys[1]])?;
    let diff = g.sub(xr, yr)?;
    let sq = g.mul(diff, diff)?;
    g.sum_axis(sq, 2)
}

/// Regularized OT value on the graph by a fixed-length unrolled iteration.
///
/// Differentiating the returned var differentiates through every iteration.
pub fn graph_sinkhorn(
    g: &mut Graph,
    x: Var,
    y: Var,
    wa: &[f64],
    wb: &[f64],
    epsilon: f64,
    cfg: &SinkhornConfig,
) -> Result<(Var, UnrollInfo)> {
    check_epsilon(epsilon)?;
    let c = graph_cost_matrix(g, x, y)?;
    let (n, m) = (g.shape(c)[0], g.shape(c)[1]);
    if wa.len() != n || wb.len() != m {
        return Err(Error::invalid("weight lengths do not match the clouds"));
    }
    let max_cost = g.value(c).data().iter().copied().fold(0.0, f64::max);
    let mut schedule = epsilon_schedule(max_cost, epsilon, cfg)
        .into_iter()
        .flat_map(|e| std::iter::repeat_n(e, cfg.stage_iters))
        .collect::<Vec<_>>();
    schedule.extend(std::iter::repeat_n(epsilon, cfg.unroll_iters.max(1)));

    let log_a = g.constant(Tensor::new(vec![n, 1], ln_weights(wa))?)?;
    let log_b = g.constant(Tensor::vector(ln_weights(wb)))?;
    let mut f = g.constant(Tensor::zeros(vec![n]))?;
    let mut gp = g.constant(Tensor::zeros(vec![m]))?;
    let symmetric = wa == wb && g.value(x) == g.value(y);
    for &eps in &schedule {
        let t = g.sub(gp, c)?;
        let t = g.scale(t, 1.0 / eps)?;
        let t = g.add(t, log_b)?;
        let l = g.logsumexp(t, 1)?;
        let image = g.scale(l, -eps)?;
        if symmetric {
            // f and g coincide on a self-problem.
            let sum = g.add(f, image)?;
            f = g.scale(sum, 0.5)?;
            gp = f;
            continue;
        }
        f = image;

        let fc = g.reshape(f, &[n, 1])?;
        let t = g.sub(fc, c)?;
        let t = g.scale(t, 1.0 / eps)?;
        let t = g.add(t, log_a)?;
        let l = g.logsumexp(t, 0)?;
        gp = g.scale(l, -eps)?;
    }

    let dual = Dual {
        c: g.value(c).data(),
        n,
        m,
        log_a: ln_weights(wa),
        log_b: ln_weights(wb),
        symmetric,
    };
    let err = dual.marginal_error(g.value(f).data(), g.value(gp).data(), epsilon);
    let info = UnrollInfo {
        iterations: schedule.len(),
        marginal_error: err,
        converged: err < cfg.tolerance,
    };

    let wa_t = g.constant(Tensor::vector(wa.to_vec()))?;
    let wb_t = g.constant(Tensor::vector(wb.to_vec()))?;
    let af = g.mul(wa_t, f)?;
    let bg = g.mul(wb_t, gp)?;
    let sa = g.sum(af)?;
    let sb = g.sum(bg)?;
    let value = g.add(sa, sb)?;
    Ok((value, info))
}

/// Debiased Sinkhorn divergence on the graph between uniform clouds given as
/// `n × d` and `m × d` vars.
pub fn graph_sinkhorn_divergence(
    g: &mut Graph,
    x: Var,
    y: Var,
    epsilon: f64,
    cfg: &SinkhornConfig,
) -> Result<(Var, UnrollInfo)> {
    let n = g.shape(x)[0];
    let m = g.shape(y)[0];
    let wa = vec![1.0 / n as f64; n];
    let wb = vec![1.0 / m as f64; m];
    let (xy, i1) = graph_sinkhorn(g, x, y, &wa, &wb, epsilon, cfg)?;
    let (xx, i2) = graph_sinkhorn(g, x, x, &wa, &wa, epsilon, cfg)?;
    let (yy, i3) = graph_sinkhorn(g, y, y, &wb, &wb, epsilon, cfg)?;
    let selfs = g.add(xx, yy)?;
    let half = g.scale(selfs, -0.5)?;
    let value = g.add(xy, half)?;
    let marginal_error = i1.marginal_error.max(i2.marginal_error).max(i3.marginal_error);
    Ok((
        value,
        UnrollInfo {
            iterations: i1.iterations,
            marginal_error,
            converged: i1.converged && i2.converged && i3.converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::brute;
    use crate::autodiff::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointCloud {
        PointCloud::uniform(
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::uniform(vec![]).is_err());
        assert!(PointCloud::new(vec![vec![0.0]], vec![0.5]).is_err());
        assert!(PointCloud::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(PointCloud::new(vec![vec![0.0], vec![1.0]], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn cost_matrix_examples() {
        let p = PointCloud::uniform(vec![vec![1.0, 2.0]]).unwrap();
        assert_eq!(cost_matrix(&p, &p, 2).unwrap(), vec![0.0]);
        let a = PointCloud::uniform(vec![vec![0.0, 0.0]]).unwrap();
        let b = PointCloud::uniform(vec![vec![3.0, 4.0]]).unwrap();
        assert_eq!(cost_matrix(&a, &b, 2).unwrap(), vec![25.0]);
        assert_eq!(cost_matrix(&a, &b, 1).unwrap(), vec![5.0]);
        assert!(cost_matrix(&a, &b, 3).is_err());
        let c = PointCloud::uniform(vec![vec![0.0]]).unwrap();
        assert!(cost_matrix(&a, &c, 2).is_err());
    }

    #[test]
    fn cost_matrix_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = cloud(&mut rng, 3, 2);
        let b = cloud(&mut rng, 4, 2);
        let c = cost_matrix(&a, &b, 2).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let dx = a.point(i)[0] - b.point(j)[0];
                let dy = a.point(i)[1] - b.point(j)[1];
                assert!((c[i * 4 + j] - (dx * dx + dy * dy)).abs() < 1e-15);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(a.to_tensor()).unwrap();
        let y = g.constant(b.to_tensor()).unwrap();
        let gc = graph_cost_matrix(&mut g, x, y).unwrap();
        assert!(g.value(gc).data().iter().zip(&c).all(|(p, q)| (p - q).abs() < 1e-15));
    }

    #[test]
    fn dirac_pair_is_forced() {
        let a = PointCloud::uniform(vec![vec![0.0, 0.0]]).unwrap();
        let b = PointCloud::uniform(vec![vec![3.0, 4.0]]).unwrap();
        let cfg = SinkhornConfig::default();
        let r = sinkhorn(&a, &b, 0.1, &cfg).unwrap();
        assert!(r.converged);
        assert!((r.cost - 25.0).abs() < 1e-9);
        let d = sinkhorn_divergence(&a, &b, 0.1, &cfg).unwrap();
        assert!((d - 25.0).abs() < 1e-9);
        let plan = transport_plan(&r, &a, &b, 0.1, 2).unwrap();
        assert!((plan.plan[0] - 1.0).abs() < 1e-9);
        assert!((exact_ot(&a, &b, 2).unwrap() - 25.0).abs() < 1e-12);
        assert!((exact_ot(&a, &b, 1).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn self_divergence_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = cloud(&mut rng, 6, 3);
        let cfg = SinkhornConfig::default();
        let r = sinkhorn(&a, &a, 0.05, &cfg).unwrap();
        assert!(r.cost.is_finite());
        assert!(sinkhorn_divergence(&a, &a, 0.05, &cfg).unwrap().abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let a = PointCloud::uniform(vec![vec![0.0]]).unwrap();
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn(&a, &a, 0.0, &cfg).is_err());
        assert!(sinkhorn(&a, &a, -1.0, &cfg).is_err());
    }

    #[test]
    fn small_epsilon_matches_assignment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cloud(&mut rng, 4, 2);
        let b = cloud(&mut rng, 4, 2);
        let cfg = SinkhornConfig {
            max_iters: 5000,
            ..Default::default()
        };
        let r = sinkhorn(&a, &b, 1e-3, &cfg).unwrap();
        let exact = exact_ot(&a, &b, 2).unwrap();
        assert!((r.cost - exact).abs() <= 0.01 * exact, "{} vs {exact}", r.cost);
    }

    #[test]
    fn divergence_approaches_exact_as_epsilon_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = cloud(&mut rng, 6, 2);
        let b = cloud(&mut rng, 6, 2);
        let exact = exact_ot(&a, &b, 2).unwrap();
        let cfg = SinkhornConfig {
            max_iters: 20_000,
            ..Default::default()
        };
        let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&e| (sinkhorn_divergence(&a, &b, e, &cfg).unwrap() - exact).abs())
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn plans_have_the_right_marginals() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let a = PointCloud::uniform(pts).unwrap();
        let cfg = SinkhornConfig::default();
        let r = sinkhorn(&a, &a, 0.05, &cfg).unwrap();
        let plan = transport_plan(&r, &a, &a, 0.05, 2).unwrap();
        assert!(plan.get(0, 1) < 1e-3 && plan.get(1, 0) < 1e-3);
        assert!((plan.get(0, 0) - 0.5).abs() < 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cloud(&mut rng, 3, 2);
        let b = cloud(&mut rng, 3, 2);
        let long = SinkhornConfig {
            max_iters: 20_000,
            tolerance: 1e-6,
            ..Default::default()
        };
        let r = sinkhorn(&a, &b, 0.1, &long).unwrap();
        let plan = transport_plan(&r, &a, &b, 0.1, 2).unwrap();
        for s in plan.row_sums().into_iter().chain(plan.col_sums()) {
            assert!((s - 1.0 / 3.0).abs() <= 1e-6);
        }
        assert!(plan.plan.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn unconverged_plan_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(&mut rng, 5, 2);
        let b = cloud(&mut rng, 5, 2);
        let cfg = SinkhornConfig {
            max_iters: 1,
            annealing: false,
            ..Default::default()
        };
        let r = sinkhorn(&a, &b, 1e-3, &cfg).unwrap();
        assert!(!r.converged);
        assert!(matches!(
            transport_plan(&r, &a, &b, 1e-3, 2),
            Err(Error::NotConverged(_))
        ));
    }

    /// Oracle: minimum over all 120 permutations for n = 5.
    #[test]
    fn exact_ot_matches_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = cloud(&mut rng, 5, 3);
        let b = cloud(&mut rng, 5, 3);
        let c = cost_matrix(&a, &b, 2).unwrap();
        let best = brute::min_over_permutations(5, |p| {
            p.iter().enumerate().map(|(i, &j)| c[i * 5 + j]).sum::<f64>() / 5.0
        });
        assert!((exact_ot(&a, &b, 2).unwrap() - best).abs() < 1e-12);
        assert_eq!(exact_ot(&a, &a, 2).unwrap(), 0.0);
        let small = cloud(&mut rng, 4, 3);
        assert!(exact_ot(&a, &small, 2).is_err());
        let skew = PointCloud::new(vec![vec![0.0; 3]; 2], vec![0.3, 0.7]).unwrap();
        let even = cloud(&mut rng, 2, 3);
        assert!(exact_ot(&skew, &even, 2).is_err());
    }

    #[test]
    fn annealing_does_not_change_the_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = cloud(&mut rng, 7, 2);
        let b = cloud(&mut rng, 5, 2);
        let on = SinkhornConfig {
            max_iters: 20_000,
            ..Default::default()
        };
        let off = SinkhornConfig {
            annealing: false,
            ..on.clone()
        };
        let x = sinkhorn(&a, &b, 0.02, &on).unwrap();
        let y = sinkhorn(&a, &b, 0.02, &off).unwrap();
        assert!(x.converged && y.converged);
        assert!((x.cost - y.cost).abs() < 1e-6);
        assert!(x.epsilon_schedule.len() > 1);
        assert_eq!(y.epsilon_schedule, vec![0.02]);
        assert!(x.epsilon_schedule[0] >= cost_matrix(&a, &b, 2).unwrap().iter().copied().fold(0.0, f64::max));
    }

    #[test]
    fn graph_path_agrees_with_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = cloud(&mut rng, 5, 2);
        let b = cloud(&mut rng, 4, 2);
        let cfg = SinkhornConfig {
            unroll_iters: 400,
            max_iters: 10_000,
            ..Default::default()
        };
        let plain = sinkhorn_divergence(&a, &b, 0.2, &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(a.to_tensor()).unwrap();
        let y = g.constant(b.to_tensor()).unwrap();
        let (v, info) = graph_sinkhorn_divergence(&mut g, x, y, 0.2, &cfg).unwrap();
        assert!(info.converged, "{info:?}");
        assert!((g.value(v).item().unwrap() - plain).abs() < 1e-8);
    }

    #[test]
    fn divergence_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = cloud(&mut rng, 4, 2);
        let b = cloud(&mut rng, 4, 2);
        let cfg = SinkhornConfig::default();
        let f = |g: &mut Graph, v: &[Var]| {
            graph_sinkhorn_divergence(g, v[0], v[1], 0.1, &cfg).map(|(d, _)| d)
        };
        let report = gradcheck(f, &[a.to_tensor(), b.to_tensor()], 1e-4, 1e-4);
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn divergence_properties(seed in 0u64..10_000, n in 1usize..7, m in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, n, 2);
            let b = cloud(&mut rng, m, 2);
            let cfg = SinkhornConfig { max_iters: 20_000, ..Default::default() };
            let ab = sinkhorn_divergence(&a, &b, 0.2, &cfg).unwrap();
            let ba = sinkhorn_divergence(&b, &a, 0.2, &cfg).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab >= -1e-9);
            let shift = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let moved = sinkhorn_divergence(&a.translated(&shift), &b.translated(&shift), 0.2, &cfg).unwrap();
            prop_assert!((moved - ab).abs() < 1e-8);
        }
    }
}
