//! Bound evaluators and diagnostics: the Lipschitz bound of a converged
//! squared-error two-layer net and its stability operators, the hard-margin
//! SVM oracle with the cross-entropy margin bounds, the support-vector
//! Lipschitz bound for two-layer directions, rank profiles of linear
//! networks, and convergence in direction.

use crate::data_io::Dataset;
use crate::linalg::{dot, lambda_min, norm2, sub, sym_eig, LinalgError, Matrix, Vector, RANK_TOL};
use crate::net::{NetError, Network};
use crate::optim::{batch_gradient, regression_targets, Loss, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("sets are not linearly separable")]
    NotSeparable,
    #[error("classifier does not separate the data: {0}")]
    NotSeparating(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parameter norm grew only {growth:.3}x; no directional divergence")]
    NoDirectionalDivergence { growth: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
}

/// Relative tolerance used to identify support vectors.
pub const SUPPORT_TOL: f64 = 1e-3;
pub const SVM_MAX_ITERS: usize = 100_000;
pub const SVM_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Lipschitz bound for converged squared-error nets

/// `n·√(2/(δλ))·(2μ‖b‖∞/λ + √(|2/δ − ‖b‖∞²|/λ))`.
pub fn thm1_formula(n_active: usize, delta: f64, lambda: f64, mu: f64, b_inf: f64) -> f64 {
    let lead = n_active as f64 * (2.0 / (delta * lambda)).sqrt();
    lead * (2.0 * mu * b_inf / lambda + ((2.0 / delta - b_inf * b_inf).abs() / lambda).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm1Report {
    pub delta: f64,
    /// Smallest eigenvalue over nodes of `Σ_{i∈ℐ_k} x_i x_iᵀ`.
    pub lambda_min: f64,
    /// Largest `‖Σ_{i∈ℐ_k} x_i‖₂` over nodes.
    pub mu_max: f64,
    pub b_inf: f64,
    pub n_active_max: usize,
    pub n_active_exact: bool,
    /// Number of training points activating each node (strict inequality).
    pub node_counts: Vec<usize>,
    pub bound: Option<f64>,
    pub undefined_reason: Option<String>,
}

pub fn thm1_bound(net: &Network, ds: &Dataset, delta: f64) -> Result<Thm1Report, BoundsError> {
    if !(delta > 0.0) {
        return Err(BoundsError::InvalidInput(format!("step size {delta} must be positive")));
    }
    let (v, b) = net.two_layer_hidden()?;
    if ds.dim() != v.cols() {
        return Err(BoundsError::InvalidInput("data dimension does not match network".into()));
    }
    let n = v.cols();
    let mut lambda = f64::INFINITY;
    let mut mu: f64 = 0.0;
    let mut counts = Vec::with_capacity(v.rows());
    for k in 0..v.rows() {
        let mut cov = Matrix::zeros(n, n);
        let mut sum = vec![0.0; n];
        let mut count = 0;
        for x in &ds.points {
            if dot(v.row(k), x) + b[k] > 0.0 {
                count += 1;
                for p in 0..n {
                    sum[p] += x[p];
                    for q in 0..n {
                        cov[(p, q)] += x[p] * x[q];
                    }
                }
            }
        }
        counts.push(count);
        let lam = if count == 0 { 0.0 } else { lambda_min(&cov)?.max(0.0) };
        lambda = lambda.min(lam);
        mu = mu.max(norm2(&sum));
    }
    let b_inf = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (n_active, exact) = n_active_max(net, &ds.points)?;
    let empty: Vec<usize> = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(k, _)| k).collect();
    let (bound, reason) = if !empty.is_empty() {
        (None, Some(format!("nodes {empty:?} are activated by no training point")))
    } else if !(lambda > 0.0) {
        (None, Some("activating points of some node do not span the input space".into()))
    } else {
        (Some(thm1_formula(n_active, delta, lambda, mu, b_inf)), None)
    };
    Ok(Thm1Report {
        delta,
        lambda_min: lambda,
        mu_max: mu,
        b_inf,
        n_active_max: n_active,
        n_active_exact: exact,
        node_counts: counts,
        bound,
        undefined_reason: reason,
    })
}

fn active_count(v: &Matrix, b: &[f64], x: &[f64]) -> usize {
    (0..v.rows()).filter(|&k| dot(v.row(k), x) + b[k] > 0.0).count()
}

/// Largest number of hidden nodes a single input can activate. Exact for
/// inputs of dimension at most two (hyperplane arrangement); otherwise a
/// lower bound from random probes and `extra` points, flagged inexact.
pub fn n_active_max(net: &Network, extra: &[Vector]) -> Result<(usize, bool), BoundsError> {
    let (v, b) = net.two_layer_hidden()?;
    let count = |x: &[f64]| active_count(v, b, x);
    let mut best = extra.iter().filter(|x| x.len() == v.cols()).map(|x| count(x)).max().unwrap_or(0);
    match v.cols() {
        0 => Ok((b.iter().filter(|&&x| x > 0.0).count(), true)),
        1 => {
            let mut cuts: Vec<f64> = (0..v.rows()).filter(|&k| v[(k, 0)] != 0.0).map(|k| -b[k] / v[(k, 0)]).collect();
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            let mut probes = Vec::new();
            match (cuts.first(), cuts.last()) {
                (Some(&lo), Some(&hi)) => {
                    probes.push(lo - 1.0 - lo.abs());
                    probes.push(hi + 1.0 + hi.abs());
                    probes.extend(cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
                }
                _ => probes.push(0.0),
            }
            best = best.max(probes.iter().map(|&t| count(&[t])).max().unwrap_or(0));
            Ok((best, true))
        }
        2 => Ok((best.max(arrangement_max_2d(v, b)), true)),
        n => {
            let scale = (0..v.rows())
                .filter_map(|k| {
                    let nv = norm2(v.row(k));
                    (nv > 0.0).then(|| b[k].abs() / nv)
                })
                .chain(extra.iter().map(|x| norm2(x)))
                .fold(1.0f64, f64::max)
                * 3.0;
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut x = vec![0.0; n];
            for _ in 0..100_000 {
                x.iter_mut().for_each(|t| *t = rng.random_range(-scale..scale));
                best = best.max(count(&x));
            }
            Ok((best, false))
        }
    }
}

fn arrangement_max_2d(v: &Matrix, b: &[f64]) -> usize {
    arrangement_samples_2d(v, b).iter().map(|x| active_count(v, b, x)).max().unwrap_or(0)
}

/// One point in every open face of the line arrangement `{V_k x + b_k = 0}`
/// in the plane (possibly several per face): both sides of every edge
/// midpoint, since every face borders some edge.
pub fn arrangement_samples_2d(v: &Matrix, b: &[f64]) -> Vec<Vector> {
    let lines: Vec<usize> = (0..v.rows()).filter(|&k| norm2(v.row(k)) > 0.0).collect();
    if lines.is_empty() {
        return vec![vec![0.0, 0.0]];
    }
    let mut out = Vec::new();
    for &k in &lines {
        let nk = v.row(k);
        let nn = nk[0] * nk[0] + nk[1] * nk[1];
        let p0 = [-b[k] * nk[0] / nn, -b[k] * nk[1] / nn];
        let dir = [-nk[1], nk[0]];
        let unit_n = [nk[0] / nn.sqrt(), nk[1] / nn.sqrt()];
        let mut ts: Vec<f64> = Vec::new();
        for &l in &lines {
            if l == k {
                continue;
            }
            let nl = v.row(l);
            let denom = nl[0] * dir[0] + nl[1] * dir[1];
            if denom.abs() > 1e-300 {
                ts.push(-(nl[0] * p0[0] + nl[1] * p0[1] + b[l]) / denom);
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let mut params = Vec::new();
        match (ts.first(), ts.last()) {
            (Some(&lo), Some(&hi)) => {
                params.push(lo - 1.0 - lo.abs());
                params.push(hi + 1.0 + hi.abs());
                params.extend(ts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            }
            _ => params.push(0.0),
        }
        for t in params {
            let m = [p0[0] + t * dir[0], p0[1] + t * dir[1]];
            let mut eta = f64::INFINITY;
            for &l in &lines {
                let nl = v.row(l);
                let d = (nl[0] * m[0] + nl[1] * m[1] + b[l]).abs() / norm2(nl);
                if d > 1e-12 * (1.0 + norm2(&m)) {
                    eta = eta.min(d);
                }
            }
            let eta = if eta.is_finite() { 0.5 * eta } else { 1.0 };
            for s in [1.0, -1.0] {
                out.push(vec![m[0] + s * eta * unit_n[0], m[1] + s * eta * unit_n[1]]);
            }
        }
    }
    out
}

/// Input-space margin `Δ / (2ℒ)` of the midpoint-threshold classifier.
pub fn corollary1_margin(gap: f64, lipschitz: f64) -> Result<f64, BoundsError> {
    if !(gap > 0.0) || !(lipschitz > 0.0) {
        return Err(BoundsError::InvalidInput(format!("need positive gap and constant, got {gap}, {lipschitz}")));
    }
    Ok(gap / (2.0 * lipschitz))
}

// ---------------------------------------------------------------------------
// Stability operators at a squared-error equilibrium

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub delta: f64,
    pub lambda_f1: f64,
    pub lambda_f4: f64,
    pub grad_norm: f64,
    pub warning: Option<String>,
}

/// Gradient norm at which a squared-error run counts as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-8;

/// `f₁(ΔW) = δ ΔW Σ a_i a_iᵀ` with `a_i = (V̂x_i + b)₊`.
pub fn apply_f1(net: &Network, ds: &Dataset, delta: f64, dw: &Matrix) -> Result<Matrix, BoundsError> {
    let (v, b) = net.two_layer_hidden()?;
    let mut out = Matrix::zeros(dw.rows(), dw.cols());
    for x in &ds.points {
        let a: Vector = (0..v.rows()).map(|k| (dot(v.row(k), x) + b[k]).max(0.0)).collect();
        let dwa = dw.matvec(&a)?;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out[(r, c)] += delta * dwa[r] * a[c];
            }
        }
    }
    Ok(out)
}

/// `f₄(ΔV) = δ Σ G_i ŴᵀŴ G_i ΔV x_i x_iᵀ`.
pub fn apply_f4(net: &Network, ds: &Dataset, delta: f64, dv: &Matrix) -> Result<Matrix, BoundsError> {
    let (v, b) = net.two_layer_hidden()?;
    let w = net.two_layer_output()?;
    let mut out = Matrix::zeros(dv.rows(), dv.cols());
    for x in &ds.points {
        let g: Vec<f64> = (0..v.rows()).map(|k| if dot(v.row(k), x) + b[k] > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut u = dv.matvec(x)?;
        u.iter_mut().zip(&g).for_each(|(a, gk)| *a *= gk);
        let wu = w.matvec(&u)?;
        let mut s = w.tr_matvec(&wu)?;
        s.iter_mut().zip(&g).for_each(|(a, gk)| *a *= gk);
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out[(r, c)] += delta * s[r] * x[c];
            }
        }
    }
    Ok(out)
}

/// Largest eigenvalue of a self-adjoint positive semidefinite operator on
/// `rows × cols` matrices, by power iteration.
fn power_iteration<F>(rows: usize, cols: usize, op: F) -> Result<f64, BoundsError>
where
    F: Fn(&Matrix) -> Result<Matrix, BoundsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e);
    let data = (0..rows * cols).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut x = Matrix::from_vec(rows, cols, data)?;
    let nx = x.frobenius_norm();
    x = x.scale(1.0 / nx);
    let mut lam = 0.0;
    for _ in 0..5000 {
        let y = op(&x)?;
        let ny = y.frobenius_norm();
        if ny == 0.0 {
            return Ok(0.0);
        }
        let rq: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
        x = y.scale(1.0 / ny);
        if (rq - lam).abs() <= 1e-13 * rq.abs() {
            return Ok(rq);
        }
        lam = rq;
    }
    Ok(lam)
}

pub fn stability_check(net: &Network, ds: &Dataset, delta: f64) -> Result<StabilityReport, BoundsError> {
    if !(delta > 0.0) {
        return Err(BoundsError::InvalidInput("step size must be positive".into()));
    }
    let (v, _) = net.two_layer_hidden()?;
    let w = net.two_layer_output()?;
    let lambda_f1 = power_iteration(w.rows(), w.cols(), |m| apply_f1(net, ds, delta, m))?;
    let lambda_f4 = power_iteration(v.rows(), v.cols(), |m| apply_f4(net, ds, delta, m))?;
    let targets = regression_targets(net, ds, (1.0, 0.0))?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (_, g) = batch_gradient(net, ds, &targets, Loss::SquaredError, 0.0, &idx)?;
    let grad_norm = norm2(&g);
    let warning = (grad_norm > EQUILIBRIUM_TOL).then(|| format!("gradient norm {grad_norm:.3e} exceeds {EQUILIBRIUM_TOL:e}; not at equilibrium"));
    Ok(StabilityReport { delta, lambda_f1, lambda_f4, grad_norm, warning })
}

// ---------------------------------------------------------------------------
// Hard-margin SVM via nearest points of two convex hulls

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmSolution {
    pub gamma_opt: f64,
    pub w: Vector,
    pub b: f64,
    /// Convex weights of the nearest hull points.
    pub alpha: Vector,
    pub beta: Vector,
    pub iterations: usize,
    /// Largest violation of `⟨w, a_i − b_j⟩ ≥ 2`.
    pub constraint_violation: f64,
    /// Largest `weight × slack` over both sets.
    pub slackness_residual: f64,
}

fn check_sets(a: &[Vector], b: &[Vector]) -> Result<usize, BoundsError> {
    if a.is_empty() || b.is_empty() {
        return Err(BoundsError::InvalidInput("both sets must be nonempty".into()));
    }
    let n = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != n) {
        return Err(BoundsError::InvalidInput("points must share a dimension".into()));
    }
    Ok(n)
}

fn combo(points: &[Vector], weights: &[f64], n: usize) -> Vector {
    let mut out = vec![0.0; n];
    for (p, &w) in points.iter().zip(weights) {
        if w != 0.0 {
            for (o, x) in out.iter_mut().zip(p) {
                *o += w * x;
            }
        }
    }
    out
}

/// Nearest points `p ∈ conv(a)`, `q ∈ conv(b)` by pairwise mass transfer
/// (MDM), followed by an exact solve on the detected active sets.
/// Returns the convex weights and the iteration count.
fn nearest_hull_points(a: &[Vector], b: &[Vector], n: usize) -> (Vector, Vector, usize) {
    let mut alpha = vec![0.0; a.len()];
    let mut beta = vec![0.0; b.len()];
    alpha[0] = 1.0;
    beta[0] = 1.0;
    let mut z = sub(&a[0], &b[0]);
    let mut iters = 0;
    while iters < SVM_MAX_ITERS {
        iters += 1;
        let za: Vec<f64> = a.iter().map(|p| dot(&z, p)).collect();
        let zb: Vec<f64> = b.iter().map(|p| dot(&z, p)).collect();
        let (imin, _) = argmin(&za, |_| true);
        let (imax, _) = argmax(&za, |i| alpha[i] > 0.0);
        let (jmax, _) = argmax(&zb, |_| true);
        let (jmin, _) = argmin(&zb, |j| beta[j] > 0.0);
        let gap_a = za[imax] - za[imin];
        let gap_b = zb[jmax] - zb[jmin];
        let zz = dot(&z, &z);
        let duality = zz - (za[imin] - zb[jmax]);
        if duality <= SVM_TOL * zz.max(1e-300) || zz == 0.0 {
            break;
        }
        let (d, cap, side_a) = if gap_a >= gap_b { (sub(&a[imin], &a[imax]), alpha[imax], true) } else { (sub(&b[jmin], &b[jmax]), beta[jmin], false) };
        let dd = dot(&d, &d);
        if dd == 0.0 {
            break;
        }
        let t = (-dot(&z, &d) / dd).clamp(0.0, cap);
        if t == 0.0 {
            break;
        }
        for (zi, di) in z.iter_mut().zip(&d) {
            *zi += t * di;
        }
        if side_a {
            alpha[imax] -= t;
            alpha[imin] += t;
        } else {
            beta[jmin] -= t;
            beta[jmax] += t;
        }
    }
    if let Some((pa, pb)) = polish(a, b, &alpha, &beta, n) {
        let znew = sub(&combo(a, &pa, n), &combo(b, &pb, n));
        let gap = |z: &Vector| {
            let zz = dot(z, z);
            let lo = a.iter().map(|p| dot(z, p)).fold(f64::INFINITY, f64::min);
            let hi = b.iter().map(|p| dot(z, p)).fold(f64::NEG_INFINITY, f64::max);
            zz - (lo - hi)
        };
        if gap(&znew).abs() <= gap(&z).abs() {
            return (pa, pb, iters);
        }
    }
    (alpha, beta, iters)
}

fn argmin(v: &[f64], ok: impl Fn(usize) -> bool) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if ok(i) && (best.0 == usize::MAX || x < best.1) {
            best = (i, x);
        }
    }
    best
}

fn argmax(v: &[f64], ok: impl Fn(usize) -> bool) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if ok(i) && (best.0 == usize::MAX || x > best.1) {
            best = (i, x);
        }
    }
    best
}

/// Exact solve of the nearest-point problem restricted to the active sets,
/// then a few active-set corrections: drop the most negative weight, or add
/// the most violating point, and solve again.
fn polish(a: &[Vector], b: &[Vector], alpha: &[f64], beta: &[f64], n: usize) -> Option<(Vector, Vector)> {
    let z = sub(&combo(a, alpha, n), &combo(b, beta, n));
    let zz = dot(&z, &z);
    if zz == 0.0 {
        return None;
    }
    let za: Vec<f64> = a.iter().map(|p| dot(&z, p)).collect();
    let zb: Vec<f64> = b.iter().map(|p| dot(&z, p)).collect();
    let lo = za.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = zb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-6 * zz;
    let mut sa: Vec<usize> = (0..a.len()).filter(|&i| za[i] - lo <= tol).collect();
    let mut sb: Vec<usize> = (0..b.len()).filter(|&j| hi - zb[j] <= tol).collect();
    for _ in 0..POLISH_ROUNDS {
        let coef = active_solve(a, b, &sa, &sb)?;
        let (neg, worst) = coef.iter().enumerate().fold((usize::MAX, -1e-12), |acc, (k, &c)| if c < acc.1 { (k, c) } else { acc });
        if worst < -1e-12 {
            if neg < sa.len() {
                sa.remove(neg);
            } else {
                sb.remove(neg - sa.len());
            }
            if sa.is_empty() || sb.is_empty() {
                return None;
            }
            continue;
        }
        let mut pa = vec![0.0; a.len()];
        let mut pb = vec![0.0; b.len()];
        for (idx, &i) in sa.iter().enumerate() {
            pa[i] = coef[idx].max(0.0);
        }
        for (idx, &j) in sb.iter().enumerate() {
            pb[j] = coef[sa.len() + idx].max(0.0);
        }
        let z = sub(&combo(a, &pa, n), &combo(b, &pb, n));
        let zz = dot(&z, &z);
        let level_a = sa.iter().map(|&i| dot(&z, &a[i])).fold(f64::INFINITY, f64::min);
        let level_b = sb.iter().map(|&j| dot(&z, &b[j])).fold(f64::NEG_INFINITY, f64::max);
        let va = (0..a.len()).map(|i| (i, level_a - dot(&z, &a[i]))).fold((usize::MAX, 0.0), |m, v| if v.1 > m.1 { v } else { m });
        let vb = (0..b.len()).map(|j| (j, dot(&z, &b[j]) - level_b)).fold((usize::MAX, 0.0), |m, v| if v.1 > m.1 { v } else { m });
        let limit = 1e-13 * zz.max(1e-300);
        if va.1 <= limit && vb.1 <= limit {
            return Some((pa, pb));
        }
        if va.1 >= vb.1 {
            sa.push(va.0);
        } else {
            sb.push(vb.0);
        }
    }
    None
}

const POLISH_ROUNDS: usize = 50;

/// Weights on `a[sa]` then `b[sb]` minimizing the distance between their
/// affine hulls, each side summing to one.
fn active_solve(a: &[Vector], b: &[Vector], sa: &[usize], sb: &[usize]) -> Option<Vector> {
    let pts: Vec<(&Vector, f64)> = sa.iter().map(|&i| (&a[i], 1.0)).chain(sb.iter().map(|&j| (&b[j], -1.0))).collect();
    let k = pts.len();
    let dim = k + 2;
    let mut m = vec![vec![0.0; dim + 1]; dim];
    for r in 0..k {
        for c in 0..k {
            m[r][c] = pts[r].1 * pts[c].1 * dot(pts[r].0, pts[c].0);
        }
        let col = if r < sa.len() { k } else { k + 1 };
        m[r][col] = -1.0;
        m[col][r] = 1.0;
    }
    m[k][dim] = 1.0;
    m[k + 1][dim] = 1.0;
    let sol = gauss_solve(m)?;
    Some(sol[..k].to_vec())
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn gauss_solve(mut m: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = m.len();
    let scale = m.iter().flat_map(|r| r[..n].iter()).fold(0.0f64, |s, x| s.max(x.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Some(x)
}

/// Maximum-margin separating hyperplane `⟨w, x⟩ + b = 0` with
/// `⟨w, a⟩ + b ≥ 1` on `a` and `≤ −1` on `b`.
pub fn svm_hard_margin(a: &[Vector], b: &[Vector]) -> Result<SvmSolution, BoundsError> {
    let n = check_sets(a, b)?;
    let (alpha, beta, iterations) = nearest_hull_points(a, b, n);
    let p = combo(a, &alpha, n);
    let q = combo(b, &beta, n);
    let z = sub(&p, &q);
    let zz = dot(&z, &z);
    let scale = a.iter().chain(b).map(|x| dot(x, x)).fold(1.0f64, f64::max);
    let lo = a.iter().map(|x| dot(&z, x)).fold(f64::INFINITY, f64::min);
    let hi = b.iter().map(|x| dot(&z, x)).fold(f64::NEG_INFINITY, f64::max);
    if zz <= 1e-20 * scale || lo <= hi {
        return Err(BoundsError::NotSeparable);
    }
    let w: Vector = z.iter().map(|x| 2.0 * x / zz).collect();
    let mid: Vector = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
    let bias = -dot(&w, &mid);
    let fa: Vec<f64> = a.iter().map(|x| dot(&w, x) + bias).collect();
    let fb: Vec<f64> = b.iter().map(|x| dot(&w, x) + bias).collect();
    let min_a = fa.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_b = fb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let constraint_violation = (2.0 - (min_a - max_b)).max(0.0);
    let slack_a = alpha.iter().zip(&fa).map(|(c, f)| c * (f - 1.0).abs());
    let slack_b = beta.iter().zip(&fb).map(|(c, f)| c * (f + 1.0).abs());
    let slackness_residual = slack_a.chain(slack_b).fold(0.0f64, f64::max);
    Ok(SvmSolution { gamma_opt: zz.sqrt() / 2.0, w, b: bias, alpha, beta, iterations, constraint_violation, slackness_residual })
}

/// Minimum-norm `z` with `⟨z, x̃⟩ ≥ 1` on `a` and `≤ −1` on `b`, where
/// `x̃ = (x, 1)`: the limit direction of logistic regression with a bias.
/// Returns `(w, B)`.
pub fn svm_augmented(a: &[Vector], b: &[Vector]) -> Result<(Vector, f64), BoundsError> {
    let n = check_sets(a, b)?;
    let mut pts: Vec<Vector> = a.iter().map(|x| x.iter().cloned().chain([1.0]).collect()).collect();
    pts.extend(b.iter().map(|x| x.iter().map(|v| -v).chain([-1.0]).collect()));
    let origin = vec![vec![0.0; n + 1]];
    let (alpha, _, _) = nearest_hull_points(&pts, &origin, n + 1);
    let p = combo(&pts, &alpha, n + 1);
    let pp = dot(&p, &p);
    let lo = pts.iter().map(|x| dot(&p, x)).fold(f64::INFINITY, f64::min);
    if pp <= 1e-20 || lo <= 0.0 {
        return Err(BoundsError::NotSeparable);
    }
    let z: Vector = p.iter().map(|x| x / pp).collect();
    Ok((z[..n].to_vec(), z[n]))
}

// ---------------------------------------------------------------------------
// Cross-entropy margin bounds for linear classifiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginBoundKind {
    /// Supports lie on a common affine subspace.
    Subspace,
    /// Supports lie on opposite closed sides of hyperplanes.
    OneSided,
    /// Neither condition holds, or `B = 0` in the one-sided case.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginAnalysis {
    /// Weight vector scaled so that the class gap in `⟨w̄, x⟩` is 2.
    pub w_bar: Vector,
    pub bias: f64,
    pub support_pos: Vec<usize>,
    pub support_neg: Vec<usize>,
    pub directions: Vec<Vector>,
    pub offsets: Vec<f64>,
    /// Largest `|⟨r_k, x_s⟩ − Δ_k|` over supports (subspace case).
    pub subspace_residual: f64,
    pub gamma_opt: f64,
    pub kind: MarginBoundKind,
    pub bound: Option<f64>,
    /// `1/‖w̄‖`.
    pub achieved_margin: f64,
    /// `min_i y_i(⟨w̄, x_i⟩ + B)/‖w̄‖`, the margin of the given boundary.
    pub geometric_margin: f64,
}

pub fn thm2_bound(w: &[f64], b: f64, ds: &Dataset) -> Result<MarginAnalysis, BoundsError> {
    let (pos, neg) = (ds.positives(), ds.negatives());
    if pos.is_empty() || neg.is_empty() || pos.len() + neg.len() != ds.len() {
        return Err(BoundsError::InvalidInput("need a binary ±1 dataset with both classes".into()));
    }
    if w.len() != ds.dim() {
        return Err(BoundsError::InvalidInput("weight dimension does not match data".into()));
    }
    let proj: Vec<f64> = ds.points.iter().map(|x| dot(w, x)).collect();
    let min_pos = pos.iter().map(|&i| proj[i]).fold(f64::INFINITY, f64::min);
    let max_neg = neg.iter().map(|&j| proj[j]).fold(f64::NEG_INFINITY, f64::max);
    if !(min_pos + b > 0.0 && max_neg + b < 0.0) {
        return Err(BoundsError::NotSeparating(format!("min positive score {}, max negative score {}", min_pos + b, max_neg + b)));
    }
    let s = 2.0 / (min_pos - max_neg);
    let w_bar: Vector = w.iter().map(|x| s * x).collect();
    let bias = s * b;
    let tol = SUPPORT_TOL * 2.0;
    let support_pos: Vec<usize> = pos.iter().copied().filter(|&i| s * (proj[i] - min_pos) <= tol).collect();
    let support_neg: Vec<usize> = neg.iter().copied().filter(|&j| s * (max_neg - proj[j]) <= tol).collect();
    let (a, bset) = ds.class_points();
    let gamma_opt = svm_hard_margin(&a, &bset)?.gamma_opt;
    let nw = norm2(&w_bar);
    let geometric_margin = ds
        .points
        .iter()
        .zip(&ds.labels)
        .map(|(x, &l)| l as f64 * (dot(&w_bar, x) + bias))
        .fold(f64::INFINITY, f64::min)
        / nw;

    let supports: Vec<&Vector> = support_pos.iter().chain(&support_neg).map(|&i| &ds.points[i]).collect();
    let n = ds.dim();
    let mean: Vector = (0..n).map(|c| supports.iter().map(|x| x[c]).sum::<f64>() / supports.len() as f64).collect();
    let mut gram = Matrix::zeros(n, n);
    for x in &supports {
        let d = sub(x, &mean);
        for p in 0..n {
            for q in 0..n {
                gram[(p, q)] += d[p] * d[q];
            }
        }
    }
    let eig = sym_eig(&gram)?;
    let s1 = eig.values[0].max(0.0).sqrt();
    let mut directions = Vec::new();
    let mut offsets = Vec::new();
    let mut residual: f64 = 0.0;
    for k in 0..n {
        if eig.values[k].max(0.0).sqrt() <= RANK_TOL * s1 {
            let r = eig.vectors.col(k);
            let delta = dot(&r, &mean);
            for x in &supports {
                residual = residual.max((dot(&r, x) - delta).abs());
            }
            directions.push(r);
            offsets.push(delta);
        }
    }
    let (kind, bound) = if !directions.is_empty() {
        let sum: f64 = offsets.iter().map(|d| d * d).sum();
        (MarginBoundKind::Subspace, Some(1.0 / (1.0 / (gamma_opt * gamma_opt) + bias * bias * sum).sqrt()))
    } else {
        residual = 0.0;
        for k in 0..n {
            let r = eig.vectors.col(k);
            if let Some((r, delta)) = one_sided_offset(&r, &support_pos, &support_neg, ds, bias) {
                directions.push(r);
                offsets.push(delta);
            }
        }
        let sum: f64 = offsets.iter().map(|d| d * d).sum();
        if sum > 0.0 && bias != 0.0 {
            (MarginBoundKind::OneSided, Some(1.0 / (bias * bias * sum).sqrt()))
        } else {
            (MarginBoundKind::None, None)
        }
    };
    Ok(MarginAnalysis {
        w_bar,
        bias,
        support_pos,
        support_neg,
        directions,
        offsets,
        subspace_residual: residual,
        gamma_opt,
        kind,
        bound,
        achieved_margin: 1.0 / nw,
        geometric_margin,
    })
}

/// Best `Δ` for direction `±r` with `⟨r, x_i⟩ ≥ Δ ≥ ⟨r, x_j⟩` on supports
/// and `BΔ > 0`.
fn one_sided_offset(r: &[f64], sp: &[usize], sn: &[usize], ds: &Dataset, bias: f64) -> Option<(Vector, f64)> {
    let mut best: Option<(Vector, f64)> = None;
    for sign in [1.0, -1.0] {
        let rr: Vector = r.iter().map(|x| sign * x).collect();
        let hi = sp.iter().map(|&i| dot(&rr, &ds.points[i])).fold(f64::INFINITY, f64::min);
        let lo = sn.iter().map(|&j| dot(&rr, &ds.points[j])).fold(f64::NEG_INFINITY, f64::max);
        if lo > hi {
            continue;
        }
        let delta = if bias > 0.0 && hi > 0.0 {
            hi
        } else if bias < 0.0 && lo < 0.0 {
            lo
        } else {
            continue;
        };
        if best.as_ref().is_none_or(|b| delta.abs() > b.1.abs()) {
            best = Some((rr, delta));
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Support-vector Lipschitz bound for two-layer cross-entropy directions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm3Report {
    /// Factor applied to every parameter so that `min_i y_i g(x_i) = 1`.
    pub scale: f64,
    /// `min_i y_i g(x_i) − 1` after scaling.
    pub scaling_residual: f64,
    pub supports: Vec<usize>,
    pub n_sup_max: usize,
    pub n_sup_exact: bool,
    pub n_node_min: Option<usize>,
    pub n_node_exact: bool,
    pub lambda_min: f64,
    pub bound: Option<f64>,
    pub void_reason: Option<String>,
}

/// Evaluates the bound for the direction network `x ↦ w̄ᵀ(V̄x + b̄)₊`. The
/// network is rescaled internally; the scaled copy is returned alongside.
pub fn thm3_bound(net: &Network, ds: &Dataset) -> Result<(Thm3Report, Network), BoundsError> {
    let (v, _) = net.two_layer_hidden()?;
    if net.output_dim() != 1 {
        return Err(BoundsError::InvalidInput("scalar output required".into()));
    }
    if !ds.is_binary() || ds.dim() != v.cols() {
        return Err(BoundsError::InvalidInput("need ±1 labels matching the input dimension".into()));
    }
    let margins: Vec<f64> = ds.points.iter().zip(&ds.labels).map(|(x, &l)| Ok(l as f64 * net.score(x)?)).collect::<Result<_, NetError>>()?;
    let c = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(c > 0.0) {
        return Err(BoundsError::NotSeparating(format!("smallest functional margin {c}")));
    }
    let scale = 1.0 / c.sqrt();
    let mut scaled = net.clone();
    scaled.scale_params(scale);
    let margins: Vec<f64> = margins.iter().map(|m| m / c).collect();
    let scaling_residual = margins.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let supports: Vec<usize> = (0..ds.len()).filter(|&i| margins[i] <= 1.0 + SUPPORT_TOL).collect();
    let (v, b) = scaled.two_layer_hidden()?;
    let r = v.rows();
    let node_sets: Vec<Vec<usize>> = (0..r)
        .map(|k| supports.iter().copied().filter(|&s| dot(v.row(k), &ds.points[s]) + b[k] > 0.0).collect())
        .collect();
    let n_sup_max = node_sets.iter().map(Vec::len).max().unwrap_or(0);
    let (n_node_min, n_node_exact) = min_cover(&node_sets, &supports);
    let mut lambda = f64::INFINITY;
    for set in node_sets.iter().filter(|s| !s.is_empty()) {
        let cols: Vec<Vector> = set.iter().map(|&s| ds.points[s].iter().map(|x| ds.labels[s] as f64 * x).collect()).collect();
        let mut g = Matrix::zeros(cols.len(), cols.len());
        for p in 0..cols.len() {
            for q in 0..cols.len() {
                g[(p, q)] = dot(&cols[p], &cols[q]);
            }
        }
        lambda = lambda.min(lambda_min(&g)?.max(0.0));
    }
    if !lambda.is_finite() {
        lambda = 0.0;
    }
    // Eigenvalues of a rank-deficient Gram matrix come back at rounding level.
    let gram_scale = supports.iter().map(|&s| dot(&ds.points[s], &ds.points[s])).fold(0.0f64, f64::max);
    let lambda_void = lambda <= 1e-12 * gram_scale.max(1e-300);
    let (bound, void_reason) = match n_node_min {
        None => (None, Some("some support vector activates no hidden node".to_string())),
        Some(_) if lambda_void => (None, Some("support vectors activating a node are linearly dependent".to_string())),
        Some(nn) => (Some(nn as f64 * (n_sup_max as f64).sqrt() / lambda.sqrt()), None),
    };
    let report = Thm3Report {
        scale,
        scaling_residual,
        supports,
        n_sup_max,
        n_sup_exact: true,
        n_node_min,
        n_node_exact,
        lambda_min: lambda,
        bound,
        void_reason,
    };
    Ok((report, scaled))
}

/// Exact minimum set cover up to this many nodes, greedy beyond.
pub const EXACT_COVER_MAX_NODES: usize = 20;

/// Fewest node sets whose union holds every support; `None` if impossible.
fn min_cover(sets: &[Vec<usize>], supports: &[usize]) -> (Option<usize>, bool) {
    if supports.is_empty() {
        return (Some(0), true);
    }
    let words = supports.len().div_ceil(64);
    let pos = |s: usize| supports.iter().position(|&x| x == s).expect("support index");
    let masks: Vec<Vec<u64>> = sets
        .iter()
        .map(|set| {
            let mut m = vec![0u64; words];
            for &s in set {
                let p = pos(s);
                m[p / 64] |= 1 << (p % 64);
            }
            m
        })
        .collect();
    let mut full = vec![u64::MAX; words];
    if supports.len() % 64 != 0 {
        full[words - 1] = (1u64 << (supports.len() % 64)) - 1;
    }
    let union_all = masks.iter().fold(vec![0u64; words], |mut acc, m| {
        acc.iter_mut().zip(m).for_each(|(a, b)| *a |= b);
        acc
    });
    if union_all != full {
        return (None, true);
    }
    let r = sets.len();
    if r <= EXACT_COVER_MAX_NODES {
        for size in 1..=r {
            let mut comb: u64 = (1u64 << size) - 1;
            while comb < (1u64 << r) {
                let mut acc = vec![0u64; words];
                for k in 0..r {
                    if comb >> k & 1 == 1 {
                        acc.iter_mut().zip(&masks[k]).for_each(|(a, b)| *a |= b);
                    }
                }
                if acc == full {
                    return (Some(size), true);
                }
                // next combination with the same popcount
                let c = comb & comb.wrapping_neg();
                let rr = comb + c;
                comb = (((rr ^ comb) >> 2) / c) | rr;
            }
        }
        unreachable!("the union of all sets covers");
    }
    let mut covered = vec![0u64; words];
    let mut used = 0;
    while covered != full {
        let gain = |m: &Vec<u64>| m.iter().zip(&covered).map(|(a, c)| (a & !c).count_ones()).sum::<u32>();
        let best = masks.iter().max_by_key(|m| gain(m)).expect("nonempty");
        covered.iter_mut().zip(best).for_each(|(c, b)| *c |= b);
        used += 1;
    }
    (Some(used), false)
}

// ---------------------------------------------------------------------------
// Rank diagnostics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub singular_values: Vector,
    pub rank: usize,
    /// `σ₂/σ₁`, zero for rank ≤ 1 shapes.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub layers: Vec<LayerRank>,
}

/// Singular values below this fraction of `σ₁` are reported as zero; the
/// Gram-based values carry absolute error near `√ε·σ₁`.
pub const SIGMA_FLOOR: f64 = 1e-7;

pub fn rank_profile(matrices: &[Matrix]) -> Result<RankProfile, BoundsError> {
    let layers = matrices
        .iter()
        .map(|m| {
            let mut s = crate::linalg::singular_values(m);
            let s1 = s.first().copied().unwrap_or(0.0);
            s.iter_mut().filter(|x| **x <= SIGMA_FLOOR * s1).for_each(|x| *x = 0.0);
            let rank = crate::linalg::numerical_rank(&s, RANK_TOL);
            let ratio = match (s.first(), s.get(1)) {
                (Some(&s1), Some(&s2)) if s1 > 0.0 => s2 / s1,
                _ => 0.0,
            };
            LayerRank { singular_values: s, rank, ratio }
        })
        .collect();
    Ok(RankProfile { layers })
}

// ---------------------------------------------------------------------------
// Convergence in direction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub converged: bool,
    /// Last snapshot divided by its norm, in flat parameter order.
    pub direction: Vector,
    /// Largest change between successive normalized snapshots in the window.
    pub recent_change: f64,
    /// Final norm over the first nonzero norm.
    pub growth: f64,
}

/// Successive logged directions compared over this many snapshots.
pub const DIRECTION_WINDOW: usize = 10;
pub const DIRECTION_TOL: f64 = 1e-4;
pub const DIRECTION_MIN_GROWTH: f64 = 10.0;

fn normalized(p: &[f64]) -> Vector {
    let n = norm2(p);
    p.iter().map(|x| x / n).collect()
}

fn direction_stats(t: &Trajectory) -> Option<(f64, f64, Vector)> {
    let snaps: Vec<&Vec<f64>> = t.snapshots.iter().filter_map(|s| s.params.as_ref()).collect();
    let first = t.snapshots.iter().map(|s| s.param_norm).find(|&n| n > 0.0)?;
    let last = snaps.last()?;
    let growth = norm2(last) / first;
    let start = snaps.len().saturating_sub(DIRECTION_WINDOW);
    let dirs: Vec<Vector> = snaps[start..].iter().filter(|p| norm2(p) > 0.0).map(|p| normalized(p)).collect();
    let change = if dirs.len() < DIRECTION_WINDOW {
        f64::INFINITY
    } else {
        dirs.windows(2).map(|w| norm2(&sub(&w[1], &w[0]))).fold(0.0, f64::max)
    };
    Some((growth, change, normalized(last)))
}

/// Whether the logged directions have stabilised to within `tol` while the
/// norm grew by at least [`DIRECTION_MIN_GROWTH`].
pub fn direction_stabilized(t: &Trajectory, tol: f64) -> bool {
    matches!(direction_stats(t), Some((g, c, _)) if g >= DIRECTION_MIN_GROWTH && c <= tol)
}

/// Requires snapshots with recorded parameters.
pub fn direction_convergence(t: &Trajectory) -> Result<DirectionReport, BoundsError> {
    let (growth, change, direction) =
        direction_stats(t).ok_or_else(|| BoundsError::InvalidInput("trajectory holds no nonzero parameter snapshots".into()))?;
    if growth < DIRECTION_MIN_GROWTH {
        return Err(BoundsError::NoDirectionalDivergence { growth });
    }
    Ok(DirectionReport { converged: change <= DIRECTION_TOL, direction, recent_change: change, growth })
}
