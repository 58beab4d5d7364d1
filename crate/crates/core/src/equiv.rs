//! Norm penalties versus inflated training points for linear least squares,
//! the matching of their hyperparameters, the robust logistic objective, and
//! the spectral-norm variant for vector targets.

use crate::linalg::{dot, dual_exponent, lambda_max, pnorm, svd, LinalgError, Matrix, Vector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EquivError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("search range does not bracket the target: {0}")]
    Range(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Stationarity tolerance for every solve.
pub const SOLVE_TOL: f64 = 1e-10;
pub const MAX_SOLVE_ITERS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub p: f64,
    /// Dual exponent of `p`.
    pub q: f64,
    pub m: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl RegConfig {
    pub fn new(p: f64, m: f64) -> Result<Self, EquivError> {
        let q = dual_exponent(p)?;
        if !(m >= 1.0) || !m.is_finite() {
            return Err(EquivError::InvalidConfig(format!("power m = {m} must be at least 1")));
        }
        Ok(RegConfig { p, q, m, lambda: 0.0, epsilon: 0.0 })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn check(&self) -> Result<(), EquivError> {
        if !(self.lambda >= 0.0 && self.epsilon >= 0.0) || !self.lambda.is_finite() || !self.epsilon.is_finite() {
            return Err(EquivError::InvalidConfig(format!("need finite λ, ε ≥ 0, got {}, {}", self.lambda, self.epsilon)));
        }
        let q = dual_exponent(self.p)?;
        if q != self.q {
            return Err(EquivError::InvalidConfig(format!("q = {} is not dual to p = {}", self.q, self.p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub w: Vector,
    pub objective: f64,
    pub iterations: usize,
    /// Norm of the proximal gradient mapping at `w`.
    pub stationarity: f64,
    pub converged: bool,
}

fn check_data(x: &[Vector], y: &[f64]) -> Result<usize, EquivError> {
    if x.len() != y.len() {
        return Err(EquivError::Shape(format!("{} points but {} targets", x.len(), y.len())));
    }
    let n = x.first().map_or(0, Vec::len);
    if n == 0 || x.iter().any(|p| p.len() != n) {
        return Err(EquivError::Shape("points must be nonempty and share a dimension".into()));
    }
    Ok(n)
}

/// `Σ(y_i − wᵀx_i)²`.
pub fn residual_sum(w: &[f64], x: &[Vector], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(xi, yi)| (yi - dot(w, xi)).powi(2)).sum()
}

fn residual_grad(w: &[f64], x: &[Vector], y: &[f64]) -> Vector {
    let mut g = vec![0.0; w.len()];
    for (xi, yi) in x.iter().zip(y) {
        let r = dot(w, xi) - yi;
        for (gk, xk) in g.iter_mut().zip(xi) {
            *gk += 2.0 * r * xk;
        }
    }
    g
}

fn norm_pow(w: &[f64], p: f64, m: f64) -> f64 {
    pnorm(w, p).expect("exponent checked").powf(m)
}

/// `Σ(y_i − wᵀx_i)² + λ‖w‖_p^m`.
pub fn regularized_objective(w: &[f64], x: &[Vector], y: &[f64], cfg: &RegConfig) -> f64 {
    residual_sum(w, x, y) + cfg.lambda * norm_pow(w, cfg.p, cfg.m)
}

/// Closed-form extremes of `wᵀ(x + d)` over `‖d‖_q ≤ ε`: `wᵀx ∓ ε‖w‖_p`.
pub fn inner_values(w: &[f64], x: &[f64], epsilon: f64, q: f64) -> Result<(f64, f64), EquivError> {
    let p = dual_exponent(q)?;
    let c = dot(w, x);
    let r = epsilon * pnorm(w, p)?;
    Ok((c - r, c + r))
}

/// The inflated objective with its inner problems evaluated exactly:
/// `Σ ½(y_i − min_d wᵀ(x_i+d))² + ½(y_i − max_d wᵀ(x_i+d))²`, which equals
/// `Σ(y_i − wᵀx_i)² + N ε²‖w‖_p²` for `N` points.
pub fn inflated_objective_direct(w: &[f64], x: &[Vector], y: &[f64], epsilon: f64, q: f64) -> Result<f64, EquivError> {
    let mut total = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let (lo, hi) = inner_values(w, xi, epsilon, q)?;
        total += 0.5 * (yi - lo).powi(2) + 0.5 * (yi - hi).powi(2);
    }
    Ok(total)
}

/// `Σ(y_i − wᵀx_i)² + ε²‖w‖_p²`, the form solved by [`solve_inflated`].
pub fn reduced_objective(w: &[f64], x: &[Vector], y: &[f64], epsilon: f64, p: f64) -> f64 {
    residual_sum(w, x, y) + epsilon * epsilon * norm_pow(w, p, 2.0)
}

/// Euclidean projection onto `{‖u‖₁ ≤ r}`.
fn project_l1_ball(v: &[f64], r: f64) -> Vector {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= r {
        return v.to_vec();
    }
    if r <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - r) / (j + 1) as f64;
        if uj > t {
            theta = t;
        }
    }
    v.iter().map(|x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// `prox_{τ‖·‖_p}` for `p ∈ {1, 2, ∞}`.
fn shrink(v: &[f64], tau: f64, p: f64) -> Vector {
    if p == 1.0 {
        v.iter().map(|x| x.signum() * (x.abs() - tau).max(0.0)).collect()
    } else if p == 2.0 {
        let n = crate::linalg::norm2(v);
        let s = if n > 0.0 { (1.0 - tau / n).max(0.0) } else { 0.0 };
        v.iter().map(|x| s * x).collect()
    } else {
        let proj = project_l1_ball(v, tau);
        v.iter().zip(&proj).map(|(a, b)| a - b).collect()
    }
}

/// `prox_{c‖·‖_p^m}(v)`.
fn prox_norm_power(v: &[f64], c: f64, p: f64, m: f64) -> Vector {
    if c == 0.0 {
        return v.to_vec();
    }
    if p == 1.0 || p == 2.0 || p.is_infinite() {
        if m == 1.0 {
            return shrink(v, c, p);
        }
        // shrink at the level τ = c·m·‖u‖_p^{m−1} of the result u
        let q = dual_exponent(p).expect("p checked");
        let hi = pnorm(v, q).expect("q valid");
        let tau = bisect_root(0.0, hi, |tau| tau - c * m * pnorm(&shrink(v, tau, p), p).expect("p valid").powf(m - 1.0));
        return shrink(v, tau, p);
    }
    if m == 1.0 && pnorm(v, dual_exponent(p).expect("p checked")).expect("q valid") <= c {
        return vec![0.0; v.len()];
    }
    // coordinates solve a + κ a^{p−1} = |v_i| with κ = c·m·s^{m−p}, s = ‖u‖_p
    let coords = |s: f64| -> Vector {
        let kappa = c * m * s.powf(m - p);
        v.iter().map(|&vi| vi.signum() * scalar_root(vi.abs(), kappa, p)).collect()
    };
    let hi = pnorm(v, p).expect("p valid");
    let s = bisect_root(0.0, hi, |s| if s == 0.0 { -1.0 } else { s - pnorm(&coords(s), p).expect("p valid") });
    coords(s)
}

/// Root of the nondecreasing `f` on `[lo, hi]` with `f(lo) ≤ 0 ≤ f(hi)`.
fn bisect_root<F: Fn(f64) -> f64>(mut lo: f64, mut hi: f64, f: F) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `a ≥ 0` with `a + κ a^{p−1} = r`, by Newton steps safeguarded by bisection.
fn scalar_root(r: f64, kappa: f64, p: f64) -> f64 {
    if r == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, r);
    let mut a = r;
    for _ in 0..100 {
        let g = a + kappa * a.powf(p - 1.0) - r;
        if g > 0.0 {
            hi = a;
        } else {
            lo = a;
        }
        let dg = 1.0 + kappa * (p - 1.0) * a.powf(p - 2.0);
        let mut next = a - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - a).abs() <= 1e-16 * r || hi - lo <= 1e-16 * r {
            return next;
        }
        a = next;
    }
    a
}

fn smoothness(x: &[Vector], n: usize) -> Result<f64, EquivError> {
    let mut xtx = Matrix::zeros(n, n);
    for xi in x {
        for a in 0..n {
            for b in 0..n {
                xtx[(a, b)] += xi[a] * xi[b];
            }
        }
    }
    Ok((2.0 * lambda_max(&xtx)?).max(1e-12))
}

/// Minimizes `Σ(y_i − wᵀx_i)² + λ‖w‖_p^m`.
pub fn solve_regularized(x: &[Vector], y: &[f64], cfg: &RegConfig) -> Result<Solution, EquivError> {
    cfg.check()?;
    let n = check_data(x, y)?;
    penalized(x, y, n, cfg.p, cfg.m, cfg.lambda)
}

/// Minimizes the reduced inflated objective `Σ(y_i − wᵀx_i)² + ε²‖w‖_p²`.
pub fn solve_inflated(x: &[Vector], y: &[f64], cfg: &RegConfig) -> Result<Solution, EquivError> {
    cfg.check()?;
    let n = check_data(x, y)?;
    penalized(x, y, n, cfg.p, 2.0, cfg.epsilon * cfg.epsilon)
}

fn penalized(x: &[Vector], y: &[f64], n: usize, p: f64, m: f64, lambda: f64) -> Result<Solution, EquivError> {
    let obj = |w: &[f64]| residual_sum(w, x, y) + lambda * norm_pow(w, p, m);
    let lip = smoothness(x, n)?;
    if m == 1.0 && lambda > 0.0 {
        // zero is optimal iff the smooth gradient lies in the dual ball
        let g0 = residual_grad(&vec![0.0; n], x, y);
        if pnorm(&g0, dual_exponent(p)?)? <= lambda {
            let w = vec![0.0; n];
            return Ok(Solution { objective: obj(&w), w, iterations: 0, stationarity: 0.0, converged: true });
        }
    }
    Ok(proximal(x, y, n, lip, &obj, |v, t| prox_norm_power(v, t * lambda, p, m)))
}

/// Accelerated proximal gradient with gradient-based restarts.
fn proximal<F, P>(x: &[Vector], y: &[f64], n: usize, lip: f64, obj: &F, prox: P) -> Solution
where
    F: Fn(&[f64]) -> f64,
    P: Fn(&[f64], f64) -> Vector,
{
    let t = 1.0 / lip;
    let mut w = vec![0.0; n];
    let mut z = w.clone();
    let mut theta: f64 = 1.0;
    let mut stationarity = f64::INFINITY;
    for it in 1..=MAX_SOLVE_ITERS {
        let g = residual_grad(&z, x, y);
        let step: Vector = z.iter().zip(&g).map(|(a, b)| a - t * b).collect();
        let w_next = prox(&step, t);
        // stationarity is measured at the plain (unaccelerated) step from w_next
        let gw = residual_grad(&w_next, x, y);
        let plain = prox(&w_next.iter().zip(&gw).map(|(a, b)| a - t * b).collect::<Vector>(), t);
        stationarity = w_next.iter().zip(&plain).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / t;
        if stationarity <= SOLVE_TOL {
            return Solution { objective: obj(&w_next), w: w_next, iterations: it, stationarity, converged: true };
        }
        let restart: f64 = z.iter().zip(&w_next).zip(&w).map(|((zi, a), b)| (zi - a) * (a - b)).sum();
        if restart > 0.0 {
            theta = 1.0;
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        z = w_next.iter().zip(&w).map(|(a, b)| a + beta * (a - b)).collect();
        w = w_next;
        theta = theta_next;
    }
    Solution { objective: obj(&w), w, iterations: MAX_SOLVE_ITERS, stationarity, converged: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub p: f64,
    pub m: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub w_regularized: Vector,
    pub w_inflated: Vector,
    /// `‖w_reg − w_inf‖₂ / (1 + ‖w_inf‖₂)`.
    pub residual: f64,
}

fn equivalence(x: &[Vector], y: &[f64], p: f64, m: f64, epsilon: f64, lambda: f64) -> Result<Equivalence, EquivError> {
    let cfg = RegConfig::new(p, m)?.with_lambda(lambda).with_epsilon(epsilon);
    let wr = solve_regularized(x, y, &cfg)?.w;
    let wi = solve_inflated(x, y, &cfg)?.w;
    let diff: Vector = wr.iter().zip(&wi).map(|(a, b)| a - b).collect();
    let residual = crate::linalg::norm2(&diff) / (1.0 + crate::linalg::norm2(&wi));
    Ok(Equivalence { p, m, epsilon, lambda, w_regularized: wr, w_inflated: wi, residual })
}

/// Relative tolerance on `‖w‖_p` when matching the two problems.
pub const MATCH_TOL: f64 = 1e-8;

/// Bisects a monotone nonincreasing `norm(h)` for `norm(h) = target`.
fn bisect_norm<F>(target: f64, mut norm: F, what: &str) -> Result<f64, EquivError>
where
    F: FnMut(f64) -> Result<f64, EquivError>,
{
    let mut hi = 1.0;
    let mut n_hi = norm(hi)?;
    let mut doublings = 0;
    while n_hi > target {
        hi *= 2.0;
        n_hi = norm(hi)?;
        doublings += 1;
        if doublings > 200 {
            return Err(EquivError::Range(format!("{what} up to {hi:e} leaves ‖w‖_p = {n_hi:e} above {target:e}")));
        }
    }
    let mut lo = 0.0;
    let n_lo = norm(lo)?;
    if n_lo < target * (1.0 - MATCH_TOL) {
        return Err(EquivError::Range(format!("unpenalized ‖w‖_p = {n_lo:e} is already below {target:e}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let nm = norm(mid)?;
        if (nm - target).abs() <= MATCH_TOL * target.max(1e-300) {
            return Ok(mid);
        }
        if nm > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Penalty weight whose regularized solution equals the inflated solution.
pub fn equivalent_lambda(epsilon: f64, p: f64, m: f64, x: &[Vector], y: &[f64]) -> Result<Equivalence, EquivError> {
    RegConfig::new(p, m)?.with_epsilon(epsilon).check()?;
    check_data(x, y)?;
    if epsilon == 0.0 {
        return equivalence(x, y, p, m, 0.0, 0.0);
    }
    if p == 2.0 && m == 2.0 {
        return equivalence(x, y, p, m, epsilon, epsilon * epsilon);
    }
    let cfg = RegConfig::new(p, m)?.with_epsilon(epsilon);
    let target = pnorm(&solve_inflated(x, y, &cfg)?.w, p)?;
    if target == 0.0 {
        return Err(EquivError::Range("inflated solution is zero; every large λ matches".into()));
    }
    let lambda = bisect_norm(target, |l| Ok(pnorm(&solve_regularized(x, y, &cfg.with_lambda(l))?.w, p)?), "λ")?;
    equivalence(x, y, p, m, epsilon, lambda)
}

/// Inflation radius whose inflated solution equals the regularized solution.
pub fn equivalent_epsilon(lambda: f64, p: f64, m: f64, x: &[Vector], y: &[f64]) -> Result<Equivalence, EquivError> {
    RegConfig::new(p, m)?.with_lambda(lambda).check()?;
    check_data(x, y)?;
    if lambda == 0.0 {
        return equivalence(x, y, p, m, 0.0, 0.0);
    }
    if p == 2.0 && m == 2.0 {
        return equivalence(x, y, p, m, lambda.sqrt(), lambda);
    }
    let cfg = RegConfig::new(p, m)?.with_lambda(lambda);
    let target = pnorm(&solve_regularized(x, y, &cfg)?.w, p)?;
    if target == 0.0 {
        return Err(EquivError::Range("regularized solution is zero; every large ε matches".into()));
    }
    let epsilon = bisect_norm(target, |e| Ok(pnorm(&solve_inflated(x, y, &cfg.with_epsilon(e))?.w, p)?), "ε")?;
    equivalence(x, y, p, m, epsilon, lambda)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic loss with every point replaced by the two extremes of its
/// `‖d‖_q ≤ ε` ball, each weighted ½.
pub fn robust_logistic_objective(a: &[Vector], b: &[Vector], w: &[f64], epsilon: f64, q: f64) -> Result<f64, EquivError> {
    let p = dual_exponent(q)?;
    let r = epsilon * pnorm(w, p)?;
    let pos: f64 = a.iter().map(|x| dot(w, x)).map(|s| 0.5 * (softplus(-s - r) + softplus(-s + r))).sum();
    let neg: f64 = b.iter().map(|x| dot(w, x)).map(|s| 0.5 * (softplus(s + r) + softplus(s - r))).sum();
    Ok(pos + neg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticScan {
    pub epsilon: f64,
    pub q: f64,
    pub scales: Vec<f64>,
    pub values: Vec<f64>,
    /// `min(min_a ⟨u,a⟩, −max_b ⟨u,b⟩)/‖u‖_p` for the scanned direction `u`.
    pub direction_margin: f64,
    pub strictly_decreasing: bool,
    pub min_value: f64,
}

pub fn robust_logistic_scan(a: &[Vector], b: &[Vector], epsilon: f64, q: f64, direction: &[f64], scales: &[f64]) -> Result<LogisticScan, EquivError> {
    let p = dual_exponent(q)?;
    if a.iter().chain(b).any(|x| x.len() != direction.len()) {
        return Err(EquivError::Shape("direction dimension does not match points".into()));
    }
    let values: Vec<f64> = scales
        .iter()
        .map(|&s| {
            let w: Vector = direction.iter().map(|u| s * u).collect();
            robust_logistic_objective(a, b, &w, epsilon, q)
        })
        .collect::<Result<_, _>>()?;
    let up = pnorm(direction, p)?;
    let lo_a = a.iter().map(|x| dot(direction, x)).fold(f64::INFINITY, f64::min);
    let lo_b = b.iter().map(|x| -dot(direction, x)).fold(f64::INFINITY, f64::min);
    let direction_margin = lo_a.min(lo_b) / up;
    let strictly_decreasing = values.windows(2).all(|v| v[1] < v[0]);
    let min_value = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(LogisticScan { epsilon, q, scales: scales.to_vec(), values, direction_margin, strictly_decreasing, min_value })
}

// ---------------------------------------------------------------------------
// Vector targets with a spectral-norm penalty

/// `Σ‖y_i − W x_i‖² + λ‖W‖₂²`.
pub fn spectral_objective(w: &Matrix, x: &[Vector], y: &[Vector], lambda: f64) -> Result<f64, EquivError> {
    let mut total = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let r = w.matvec(xi)?;
        total += r.iter().zip(yi).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
    }
    let s1 = crate::linalg::spectral_norm(w);
    Ok(total + lambda * s1 * s1)
}

/// `Σ‖y_i − W(x_i + d_i)‖² + ‖y_i − W(x_i − d_i)‖²` with `d_i = ε v₁`, the
/// worst-case ℓ2 disturbance along the top right singular vector.
pub fn inflated_spectral_objective(w: &Matrix, x: &[Vector], y: &[Vector], epsilon: f64) -> Result<f64, EquivError> {
    let dec = svd(w);
    let d: Vector = dec.v.col(0).iter().map(|v| epsilon * v).collect();
    let mut total = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        for s in [1.0, -1.0] {
            let xp: Vector = xi.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            let r = w.matvec(&xp)?;
            total += r.iter().zip(yi).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
        }
    }
    Ok(total)
}

/// `prox` of `c·σ₁²`: clips the top singular values at the level `τ` with
/// `Σ_{s_i > τ}(s_i − τ) = 2cτ`.
fn prox_spectral(v: &Matrix, c: f64) -> Matrix {
    let dec = svd(v);
    let s = &dec.sigma;
    let excess = |tau: f64| s.iter().map(|&si| (si - tau).max(0.0)).sum::<f64>() - 2.0 * c * tau;
    let (mut lo, mut hi) = (0.0, s.first().copied().unwrap_or(0.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let (rows, cols) = v.shape();
    let mut out = Matrix::zeros(rows, cols);
    for (k, &sk) in s.iter().enumerate() {
        let sk = sk.min(tau);
        if sk == 0.0 {
            continue;
        }
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] += sk * dec.u[(i, k)] * dec.v[(j, k)];
            }
        }
    }
    out
}

/// Minimizes [`spectral_objective`] by proximal gradient.
pub fn solve_spectral(x: &[Vector], y: &[Vector], lambda: f64) -> Result<(Matrix, Solution), EquivError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(EquivError::Shape("need matching, nonempty inputs and targets".into()));
    }
    let n = x[0].len();
    let m = y[0].len();
    if x.iter().any(|v| v.len() != n) || y.iter().any(|v| v.len() != m) {
        return Err(EquivError::Shape("ragged inputs or targets".into()));
    }
    if !(lambda >= 0.0) {
        return Err(EquivError::InvalidConfig(format!("λ = {lambda} must be nonnegative")));
    }
    let t = 1.0 / smoothness(x, n)?;
    let grad = |w: &Matrix| -> Result<Matrix, EquivError> {
        let mut g = Matrix::zeros(m, n);
        for (xi, yi) in x.iter().zip(y) {
            let r = w.matvec(xi)?;
            for a in 0..m {
                for b in 0..n {
                    g[(a, b)] += 2.0 * (r[a] - yi[a]) * xi[b];
                }
            }
        }
        Ok(g)
    };
    let step = |w: &Matrix| -> Result<Matrix, EquivError> {
        let g = grad(w)?;
        let data = w.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a - t * b).collect();
        Ok(prox_spectral(&Matrix::from_vec(m, n, data)?, t * lambda))
    };
    let mut w = Matrix::zeros(m, n);
    let mut stationarity = f64::INFINITY;
    for it in 1..=MAX_SOLVE_ITERS {
        let next = step(&w)?;
        stationarity = next.as_slice().iter().zip(w.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / t;
        w = next;
        if stationarity <= SOLVE_TOL {
            let objective = spectral_objective(&w, x, y, lambda)?;
            let sol = Solution { w: w.as_slice().to_vec(), objective, iterations: it, stationarity, converged: true };
            return Ok((w, sol));
        }
    }
    let objective = spectral_objective(&w, x, y, lambda)?;
    let sol = Solution { w: w.as_slice().to_vec(), objective, iterations: MAX_SOLVE_ITERS, stationarity, converged: false };
    Ok((w, sol))
}

/// Penalty weight matching the inflated spectral problem with `N` points:
/// half its objective is the penalized objective at `λ = N ε²`.
pub fn spectral_equivalent_lambda(epsilon: f64, n_points: usize) -> f64 {
    n_points as f64 * epsilon * epsilon
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, count: usize) -> (Vec<Vector>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vector> = (0..count).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = (0..count).map(|_| rng.random_range(-2.0..2.0)).collect();
        (x, y)
    }

    /// `(XᵀX + λI)⁻¹Xᵀy` by Gaussian elimination.
    fn ridge(x: &[Vector], y: &[f64], lambda: f64) -> Vector {
        let n = x[0].len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for (xi, yi) in x.iter().zip(y) {
            for r in 0..n {
                for c in 0..n {
                    a[r][c] += xi[r] * xi[c];
                }
                a[r][n] += xi[r] * yi;
            }
        }
        for r in 0..n {
            a[r][r] += lambda;
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|r| a[r][n] / a[r][r]).collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let d: Vector = a.iter().zip(b).map(|(x, y)| x - y).collect();
        crate::linalg::norm2(&d) / (1.0 + crate::linalg::norm2(b))
    }

    #[test]
    fn zero_penalty_is_least_squares() {
        let (x, y) = random_instance(1, 3, 12);
        let ls = ridge(&x, &y, 0.0);
        let w = solve_regularized(&x, &y, &RegConfig::new(1.0, 1.0).unwrap()).unwrap();
        assert!(w.converged && rel(&w.w, &ls) < 1e-9);
        let w = solve_inflated(&x, &y, &RegConfig::new(3.0, 2.0).unwrap()).unwrap();
        assert!(rel(&w.w, &ls) < 1e-9);
    }

    #[test]
    fn ridge_closed_form() {
        let (x, y) = random_instance(2, 4, 15);
        let cfg = RegConfig::new(2.0, 2.0).unwrap().with_lambda(0.7);
        let w = solve_regularized(&x, &y, &cfg).unwrap();
        assert!(rel(&w.w, &ridge(&x, &y, 0.7)) < 1e-6);
    }

    #[test]
    fn huge_penalty_shrinks_to_zero() {
        let (x, y) = random_instance(3, 3, 10);
        for (p, m) in [(1.0, 1.0), (2.0, 2.0), (f64::INFINITY, 1.0), (3.0, 2.0), (1.5, 1.5)] {
            let cfg = RegConfig::new(p, m).unwrap().with_lambda(1e8);
            let w = solve_regularized(&x, &y, &cfg).unwrap();
            assert!(crate::linalg::norm2(&w.w) <= 1e-3, "p={p} m={m}: {:?}", w.w);
        }
    }

    #[test]
    fn inner_values_example() {
        let (lo, hi) = inner_values(&[1.0, -2.0], &[0.0, 0.0], 1.0, f64::INFINITY).unwrap();
        assert_eq!((lo, hi), (-3.0, 3.0));
    }

    #[test]
    fn inflated_basis_example() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cfg = RegConfig::new(2.0, 2.0).unwrap().with_epsilon(1.0);
        let w = solve_inflated(&x, &[1.0, 2.0], &cfg).unwrap();
        assert!((w.w[0] - 0.5).abs() < 1e-9 && (w.w[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn direct_objective_carries_point_count() {
        let (x, y) = random_instance(4, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in [1.0, 2.0, 3.0, f64::INFINITY] {
            let q = dual_exponent(p).unwrap();
            let w: Vector = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps = 0.3;
            let direct = inflated_objective_direct(&w, &x, &y, eps / 3.0, q).unwrap();
            let reduced = reduced_objective(&w, &x, &y, eps, p);
            assert!((direct - reduced).abs() < 1e-12 * reduced.max(1.0));
        }
    }

    #[test]
    fn equivalence_examples() {
        let (x, y) = random_instance(6, 2, 10);
        assert_eq!(equivalent_lambda(0.0, 1.0, 1.0, &x, &y).unwrap().lambda, 0.0);
        let e = equivalent_lambda(0.5, 2.0, 2.0, &x, &y).unwrap();
        assert_eq!(e.lambda, 0.25);
        assert!(e.residual <= 1e-6);
    }

    #[test]
    fn equivalent_lambda_general_norms() {
        for (seed, p, m) in [(7, 1.0, 1.0), (8, 3.0, 1.5), (9, f64::INFINITY, 2.0), (10, 1.0, 3.0)] {
            let (x, y) = random_instance(seed, 3, 12);
            let e = equivalent_lambda(0.4, p, m, &x, &y).unwrap();
            // independent re-solve at the returned λ
            let again = solve_regularized(&x, &y, &RegConfig::new(p, m).unwrap().with_lambda(e.lambda)).unwrap();
            assert!(rel(&again.w, &e.w_inflated) <= 1e-5, "p={p} m={m}: {}", rel(&again.w, &e.w_inflated));
            // stationarity of both problems pins λ = 2ε²‖w‖_p^{2−m}/m
            let nw = pnorm(&e.w_inflated, p).unwrap();
            let closed = 2.0 * 0.16 * nw.powf(2.0 - m) / m;
            assert!((e.lambda - closed).abs() <= 1e-5 * closed, "p={p} m={m}: {} vs {closed}", e.lambda);
        }
    }

    #[test]
    fn equivalent_epsilon_round_trip() {
        let (x, y) = random_instance(11, 3, 12);
        let e = equivalent_epsilon(0.3, 1.0, 1.0, &x, &y).unwrap();
        assert!(e.residual <= 1e-5);
        let e2 = equivalent_epsilon(0.09, 2.0, 2.0, &x, &y).unwrap();
        assert!((e2.epsilon - 0.3).abs() < 1e-15);
    }

    #[test]
    fn logistic_scan_examples() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![-1.0, 0.0]];
        let zero = robust_logistic_objective(&a, &b, &[0.0, 0.0], 0.7, 2.0).unwrap();
        assert!((zero - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let s = robust_logistic_scan(&a, &b, 0.5, 2.0, &[1.0, 0.0], &[1.0, 10.0, 100.0]).unwrap();
        assert!(s.strictly_decreasing && s.values[2] <= 1e-20);
        assert_eq!(s.direction_margin, 1.0);
        let s = robust_logistic_scan(&a, &b, 1.5, 2.0, &[1.0, 0.0], &[1.0, 10.0, 100.0]).unwrap();
        assert!(s.values[2] > 10.0 && !s.strictly_decreasing);
    }

    #[test]
    fn spectral_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<Vector> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vector> = (0..10).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let eps = 0.2;
        let lam = spectral_equivalent_lambda(eps, x.len());
        for _ in 0..20 {
            let w = Matrix::from_vec(2, 3, (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let inflated = inflated_spectral_objective(&w, &x, &y, eps).unwrap();
            let pen = spectral_objective(&w, &x, &y, lam).unwrap();
            assert!((inflated - 2.0 * pen).abs() < 1e-10 * pen);
        }
        let (w, sol) = solve_spectral(&x, &y, lam).unwrap();
        assert!(sol.converged);
        for _ in 0..100 {
            let probe = Matrix::from_vec(2, 3, w.as_slice().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect()).unwrap();
            assert!(spectral_objective(&probe, &x, &y, lam).unwrap() >= sol.objective - 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn inflated_matches_ridge(seed in 0u64..100_000, n in 1usize..=5, count in 1usize..=20, eps in 0.0f64..2.0) {
            let (x, y) = random_instance(seed, n, count);
            let cfg = RegConfig::new(2.0, 2.0).unwrap().with_epsilon(eps);
            let w = solve_inflated(&x, &y, &cfg).unwrap();
            let r = ridge(&x, &y, eps * eps);
            let d: Vector = w.w.iter().zip(&r).map(|(a, b)| a - b).collect();
            prop_assert!(crate::linalg::norm2(&d) <= 1e-6 * (1.0 + crate::linalg::norm2(&w.w)));
        }

        #[test]
        fn reduction_identity(seed in 0u64..100_000, n in 1usize..=4, eps in 0.0f64..2.0, pi in 0usize..4) {
            let p = [1.0, 1.5, 2.0, f64::INFINITY][pi];
            let q = dual_exponent(p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vector = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vector = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (lo, _) = inner_values(&w, &x, eps, q).unwrap();
            let mut best = f64::INFINITY;
            for _ in 0..10_000 {
                let d: Vector = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let nd = pnorm(&d, q).unwrap();
                if nd == 0.0 { continue; }
                let s = eps * rng.random_range(0.0..1.0f64).powf(0.1) / nd;
                let xd: Vector = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                best = best.min(dot(&w, &xd));
            }
            prop_assert!(best >= lo - 1e-6);
            // the dual-norm aligned perturbation attains the closed form
            let wp = pnorm(&w, p).unwrap();
            prop_assume!(wp > 0.0);
            let d: Vector = if p.is_infinite() {
                let j = (0..n).max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs())).unwrap();
                (0..n).map(|k| if k == j { -eps * w[j].signum() } else { 0.0 }).collect()
            } else {
                w.iter().map(|&v| -eps * v.signum() * (v.abs() / wp).powf(p - 1.0)).collect()
            };
            prop_assert!(pnorm(&d, q).unwrap() <= eps * (1.0 + 1e-12) + 1e-15);
            let xd: Vector = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            prop_assert!((dot(&w, &xd) - lo).abs() <= 1e-12 * (1.0 + lo.abs()));
        }

        #[test]
        fn lambda_nondecreasing_in_epsilon(seed in 0u64..1000, e1 in 0.05f64..1.0, de in 0.0f64..1.0) {
            let (x, y) = random_instance(seed, 2, 8);
            let l1 = equivalent_lambda(e1, 1.0, 1.0, &x, &y);
            let l2 = equivalent_lambda(e1 + de, 1.0, 1.0, &x, &y);
            if let (Ok(a), Ok(b)) = (l1, l2) {
                prop_assert!(b.lambda >= a.lambda * (1.0 - 1e-6));
            }
        }

        #[test]
        fn regularized_beats_probes(seed in 0u64..100_000, pi in 0usize..5, lam in 0.0f64..3.0) {
            let (p, m) = [(1.0, 1.0), (2.0, 2.0), (f64::INFINITY, 1.0), (3.0, 2.0), (1.5, 1.0)][pi];
            let (x, y) = random_instance(seed, 3, 10);
            let cfg = RegConfig::new(p, m).unwrap().with_lambda(lam);
            let sol = solve_regularized(&x, &y, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..100 {
                let probe: Vector = sol.w.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
                prop_assert!(regularized_objective(&probe, &x, &y, &cfg) >= sol.objective - 1e-9);
            }
        }
    }
}
