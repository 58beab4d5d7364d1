//! Losses, gradient-descent trainers, the persistent-excitation trainer and
//! its inner extremization.
//!
//! Full-batch objectives are sums over samples. The squared error carries a
//! factor ½; the excitation update of [`pe_train`] does not, so with all
//! radii zero it coincides with [`sgd_train`] at four times the learning
//! rate.

use crate::data_io::Dataset;
use crate::linalg::{norm2, Vector};
use crate::net::{NetError, Network, Perturbation, PerturbationSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SquaredError,
    CrossEntropy,
}

/// `½‖pred − target‖²` and its gradient in `pred`.
pub fn squared_error(pred: &[f64], target: &[f64]) -> Result<(f64, Vector), OptimError> {
    if pred.len() != target.len() {
        return Err(OptimError::Shape(format!("prediction has {} entries, target {}", pred.len(), target.len())));
    }
    let r: Vector = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let v = 0.5 * r.iter().map(|x| x * x).sum::<f64>();
    Ok((v, r))
}

/// `log(1 + exp(-class·score))` and its derivative in `score`.
pub fn logistic_loss(score: f64, class: f64) -> (f64, f64) {
    let m = class * score;
    let value = if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
    // σ(−m) computed without overflow
    let s = if m > 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    };
    (value, -class * s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Step size δ (learning rate η).
    pub step_size: f64,
    /// Momentum γ in `Δ ← γΔ + (1−γ)g`.
    pub momentum: f64,
    pub max_iters: usize,
    /// Samples per stochastic step; 0 means full batch in [`gd_train`].
    pub batch_size: usize,
    /// Stop once the full-batch gradient norm falls to this value.
    pub grad_tol: f64,
    pub seed: u64,
    /// Coefficient μ of the penalty `μ Σ‖W_j‖²` on weights (not biases).
    pub weight_decay: f64,
    pub log_every: usize,
    /// Sign-gradient steps used by the inner extremization.
    pub inner_steps: usize,
    /// Regression targets for labels `+1` and `-1`.
    pub targets: (f64, f64),
    /// Keep full parameter vectors in the trajectory.
    pub record_params: bool,
    /// Optional stop once logged directions stabilise (cross-entropy runs).
    pub direction_tol: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 1e-2,
            momentum: 0.0,
            max_iters: 10_000,
            batch_size: 0,
            grad_tol: 1e-10,
            seed: 0,
            weight_decay: 0.0,
            log_every: 100,
            inner_steps: 20,
            targets: (1.0, 0.0),
            record_params: false,
            direction_tol: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("step size {} must be positive", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::InvalidConfig(format!("momentum {} must lie in [0,1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::InvalidConfig("weight decay must be nonnegative".into()));
        }
        if self.log_every == 0 {
            return Err(OptimError::InvalidConfig("log interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub loss: f64,
    pub param_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Vector>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    /// `iteration,loss,param_norm` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,param_norm\n");
        for r in &self.snapshots {
            s.push_str(&format!("{},{:.16e},{:.16e}\n", r.iteration, r.loss, r.param_norm));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: Network,
    pub trajectory: Trajectory,
    pub iterations: usize,
    /// Gradient tolerance (or direction criterion) reached before `max_iters`.
    pub converged: bool,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

/// Per-sample regression targets for a squared-error fit.
pub fn regression_targets(net: &Network, ds: &Dataset, pair: (f64, f64)) -> Result<Vec<Vector>, OptimError> {
    if let Some(t) = &ds.targets {
        if t.iter().any(|v| v.len() != net.output_dim()) {
            return Err(OptimError::Shape("target dimension does not match network output".into()));
        }
        return Ok(t.clone());
    }
    if net.output_dim() == 1 {
        if !ds.is_binary() {
            return Err(OptimError::Shape("scalar network needs ±1 labels or explicit targets".into()));
        }
        return Ok(ds.labels.iter().map(|&l| vec![if l == 1 { pair.0 } else { pair.1 }]).collect());
    }
    let m = net.output_dim() + 1;
    let codes = target_codes(m)?;
    ds.labels
        .iter()
        .map(|&l| {
            usize::try_from(l)
                .ok()
                .and_then(|k| codes.codes.get(k).cloned())
                .ok_or_else(|| OptimError::Shape(format!("label {l} outside 0..{m}")))
        })
        .collect()
}

fn check_data(net: &Network, ds: &Dataset) -> Result<(), OptimError> {
    if ds.is_empty() {
        return Err(OptimError::Shape("empty dataset".into()));
    }
    if ds.dim() != net.input_dim() {
        return Err(OptimError::Shape(format!("data dimension {} != network input {}", ds.dim(), net.input_dim())));
    }
    Ok(())
}

/// Per-sample loss and upstream gradient at the network output.
fn sample_loss(loss: Loss, out: &[f64], target: &[f64], label: i64) -> Result<(f64, Vector), OptimError> {
    match loss {
        Loss::SquaredError => squared_error(out, target),
        Loss::CrossEntropy => {
            if out.len() != 1 {
                return Err(OptimError::Shape("cross entropy needs a scalar output".into()));
            }
            let (v, g) = logistic_loss(out[0], label as f64);
            Ok((v, vec![g]))
        }
    }
}

fn decay_terms(net: &Network, mu: f64) -> (f64, Vector) {
    let mut pen = 0.0;
    let mut grad = Vec::with_capacity(net.num_params());
    for l in net.layers() {
        for &w in l.weights() {
            pen += w * w;
            grad.push(2.0 * mu * w);
        }
        grad.extend(std::iter::repeat(0.0).take(l.bias.len()));
    }
    (mu * pen, grad)
}

const PARALLEL_MIN_SAMPLES: usize = 256;

/// Summed loss and gradient over `idx`, plus the weight penalty.
pub fn batch_gradient(
    net: &Network,
    ds: &Dataset,
    targets: &[Vector],
    loss: Loss,
    weight_decay: f64,
    idx: &[usize],
) -> Result<(f64, Vector), OptimError> {
    let one = |i: usize| -> Result<(f64, Vector), OptimError> {
        let out = net.predict(&ds.points[i])?;
        let (v, up) = sample_loss(loss, &out, &targets[i], ds.labels[i])?;
        let (_, g) = net.gradients(&ds.points[i], None, &up)?;
        Ok((v, g.flat_params()))
    };
    let parts: Vec<Result<(f64, Vector), OptimError>> = if idx.len() >= PARALLEL_MIN_SAMPLES {
        idx.par_iter().map(|&i| one(i)).collect()
    } else {
        idx.iter().map(|&i| one(i)).collect()
    };
    let mut total = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for p in parts {
        let (v, g) = p?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if weight_decay > 0.0 {
        let (pen, pg) = decay_terms(net, weight_decay);
        total += pen;
        for (a, b) in grad.iter_mut().zip(&pg) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Full-batch objective value.
pub fn objective(net: &Network, ds: &Dataset, loss: Loss, cfg: &TrainConfig) -> Result<f64, OptimError> {
    let targets = match loss {
        Loss::SquaredError => regression_targets(net, ds, cfg.targets)?,
        Loss::CrossEntropy => vec![vec![]; ds.len()],
    };
    let mut total = 0.0;
    for i in 0..ds.len() {
        let out = net.predict(&ds.points[i])?;
        total += sample_loss(loss, &out, &targets[i], ds.labels[i])?.0;
    }
    if cfg.weight_decay > 0.0 {
        total += decay_terms(net, cfg.weight_decay).0;
    }
    Ok(total)
}

fn snapshot(net: &Network, iteration: usize, loss: f64, record: bool) -> Snapshot {
    let p = net.params();
    Snapshot { iteration, loss, param_norm: norm2(&p), params: record.then_some(p) }
}

/// Full-batch (or minibatch, if `batch_size > 0`) gradient descent with
/// optional momentum `Δ ← γΔ + (1−γ)g, θ ← θ − δΔ`.
pub fn gd_train(net: &Network, ds: &Dataset, loss: Loss, cfg: &TrainConfig) -> Result<TrainResult, OptimError> {
    cfg.validate()?;
    check_data(net, ds)?;
    if loss == Loss::CrossEntropy && !ds.is_binary() {
        return Err(OptimError::Shape("cross entropy needs ±1 labels".into()));
    }
    let targets = match loss {
        Loss::SquaredError => regression_targets(net, ds, cfg.targets)?,
        Loss::CrossEntropy => vec![vec![]; ds.len()],
    };
    let mut net = net.clone();
    let n = ds.len();
    let full: Vec<usize> = (0..n).collect();
    let stochastic = cfg.batch_size > 0 && cfg.batch_size < n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; net.num_params()];
    let mut traj = Trajectory::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut converged = false;
    let mut last = (f64::NAN, f64::NAN);
    let mut it = 0;
    while it <= cfg.max_iters {
        let idx: &[usize] = if stochastic {
            batch.clear();
            batch.extend((0..cfg.batch_size).map(|_| rng.random_range(0..n)));
            &batch
        } else {
            &full
        };
        let (value, grad) = batch_gradient(&net, ds, &targets, loss, cfg.weight_decay, idx)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::Divergence { iteration: it });
        }
        let gnorm = norm2(&grad);
        last = (value, gnorm);
        let done = !stochastic && gnorm <= cfg.grad_tol;
        if it % cfg.log_every == 0 || done || it == cfg.max_iters {
            traj.snapshots.push(snapshot(&net, it, value, cfg.record_params));
            if let Some(tol) = cfg.direction_tol {
                if crate::bounds::direction_stabilized(&traj, tol) {
                    converged = true;
                    break;
                }
            }
        }
        if done {
            converged = true;
            break;
        }
        if it == cfg.max_iters {
            break;
        }
        step(&mut net, &mut velocity, &grad, cfg);
        if !net.is_finite() {
            return Err(OptimError::Divergence { iteration: it + 1 });
        }
        it += 1;
    }
    Ok(TrainResult { net, trajectory: traj, iterations: it, converged, final_loss: last.0, final_grad_norm: last.1 })
}

fn step(net: &mut Network, velocity: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
    let g = cfg.momentum;
    for (v, &d) in velocity.iter_mut().zip(grad) {
        *v = g * *v + (1.0 - g) * d;
    }
    net.add_scaled(-cfg.step_size, velocity);
}

/// Momentum SGD on the summed (½-convention) loss, drawing `batch_size`
/// (at least one) indices per step. Uses the same index stream as
/// [`pe_train`].
pub fn sgd_train(net: &Network, ds: &Dataset, loss: Loss, cfg: &TrainConfig) -> Result<TrainResult, OptimError> {
    cfg.validate()?;
    check_data(net, ds)?;
    let targets = match loss {
        Loss::SquaredError => regression_targets(net, ds, cfg.targets)?,
        Loss::CrossEntropy => vec![vec![]; ds.len()],
    };
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; net.num_params()];
    let mut traj = Trajectory::default();
    let bs = cfg.batch_size.max(1);
    let mut idx = Vec::with_capacity(bs);
    for it in 0..cfg.max_iters {
        idx.clear();
        idx.extend((0..bs).map(|_| rng.random_range(0..ds.len())));
        let (_, mut grad) = batch_gradient(&net, ds, &targets, loss, cfg.weight_decay, &idx)?;
        if bs > 1 {
            let inv = 1.0 / bs as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::Divergence { iteration: it });
        }
        if it % cfg.log_every == 0 {
            let value = objective(&net, ds, loss, cfg)?;
            traj.snapshots.push(snapshot(&net, it, value, cfg.record_params));
        }
        step(&mut net, &mut velocity, &grad, cfg);
        if !net.is_finite() {
            return Err(OptimError::Divergence { iteration: it + 1 });
        }
    }
    let value = objective(&net, ds, loss, cfg)?;
    traj.snapshots.push(snapshot(&net, cfg.max_iters, value, cfg.record_params));
    Ok(TrainResult { net, trajectory: traj, iterations: cfg.max_iters, converged: false, final_loss: value, final_grad_norm: f64::NAN })
}

// ---------------------------------------------------------------------------
// Inner extremization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extremum {
    pub d: Perturbation,
    /// `uᵀ f(x; d)` at the returned `d`.
    pub value: f64,
}

/// Excitation pair `(d₁, d₂)` of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationPair {
    pub d_max: Extremum,
    pub d_min: Extremum,
}

/// Projected sign-gradient search for the extremum of `f(x; d)` over the
/// ℓ∞ boxes of `set`, starting from `d = 0` with step `2 r_j / steps`.
/// Returns the best iterate seen, so the value is never worse than `f(x; 0)`.
pub fn inner_extremize(net: &Network, x: &[f64], set: &PerturbationSet, dir: Direction, steps: usize) -> Result<Extremum, OptimError> {
    if net.output_dim() != 1 {
        return Err(OptimError::Shape("inner extremization needs a scalar output".into()));
    }
    extremize_projection(net, x, set, &[1.0], dir, steps, None)
}

/// Extremizes `uᵀ f(x; d)`; `warm` is an extra feasible candidate.
pub fn extremize_projection(
    net: &Network,
    x: &[f64],
    set: &PerturbationSet,
    u: &[f64],
    dir: Direction,
    steps: usize,
    warm: Option<&Perturbation>,
) -> Result<Extremum, OptimError> {
    set.check(net)?;
    let sign = match dir {
        Direction::Max => 1.0,
        Direction::Min => -1.0,
    };
    let dot = |o: &[f64]| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
    let mut d = net.zero_perturbation();
    if set.is_zero() || steps == 0 {
        let value = dot(&net.predict(x)?);
        return Ok(Extremum { d, value });
    }
    let better = |a: f64, b: f64| sign * a > sign * b;
    let mut best: Option<Extremum> = None;
    if let Some(w) = warm {
        if set.contains(w) {
            let value = dot(&net.forward_perturbed(x, w)?);
            best = Some(Extremum { d: w.clone(), value });
        }
    }
    let scale = 2.0 / steps as f64;
    for k in 0..=steps {
        let (out, g) = net.gradients(x, Some(&d), u)?;
        let value = dot(&out);
        if best.as_ref().is_none_or(|b| better(value, b.value)) {
            best = Some(Extremum { d: d.clone(), value });
        }
        if k == steps {
            break;
        }
        for ((dj, gj), &r) in d.iter_mut().zip(&g.perturbations).zip(&set.radii) {
            if r == 0.0 {
                continue;
            }
            let s = scale * r;
            for (v, &gv) in dj.iter_mut().zip(gj) {
                let dirn = sign * gv;
                if dirn > 0.0 {
                    *v = (*v + s).min(r);
                } else if dirn < 0.0 {
                    *v = (*v - s).max(-r);
                }
            }
        }
    }
    Ok(best.expect("at least one iterate"))
}

pub fn excitation_pair(net: &Network, x: &[f64], set: &PerturbationSet, steps: usize) -> Result<ExcitationPair, OptimError> {
    Ok(ExcitationPair {
        d_max: inner_extremize(net, x, set, Direction::Max, steps)?,
        d_min: inner_extremize(net, x, set, Direction::Min, steps)?,
    })
}

/// Persistent-excitation training. Each step draws `batch_size` (at least
/// one) samples; per sample it finds `d₁ = argmax f(x; d)` and
/// `d₂ = argmin f(x; d)` and differentiates
/// `(f(x; d₁) − y)² + (f(x; d₂) − y)²`. Batch gradients are averaged.
pub fn pe_train(net: &Network, ds: &Dataset, set: &PerturbationSet, cfg: &TrainConfig) -> Result<TrainResult, OptimError> {
    cfg.validate()?;
    check_data(net, ds)?;
    set.check(net)?;
    if net.output_dim() != 1 {
        return Err(OptimError::Shape("use pe_train_multiclass for vector outputs".into()));
    }
    let targets = regression_targets(net, ds, cfg.targets)?;
    let plain = TrainConfig { weight_decay: 0.0, ..cfg.clone() };
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; net.num_params()];
    let mut traj = Trajectory::default();
    let bs = cfg.batch_size.max(1);
    let mut idx = Vec::with_capacity(bs);
    for it in 0..cfg.max_iters {
        idx.clear();
        idx.extend((0..bs).map(|_| rng.random_range(0..ds.len())));
        let mut grad = vec![0.0; net.num_params()];
        for &i in &idx {
            let x = &ds.points[i];
            let y = targets[i][0];
            for dir in [Direction::Max, Direction::Min] {
                let e = inner_extremize(&net, x, set, dir, cfg.inner_steps)?;
                let (_, g) = net.gradients(x, Some(&e.d), &[2.0 * (e.value - y)])?;
                for (a, b) in grad.iter_mut().zip(g.flat_params()) {
                    *a += b;
                }
            }
        }
        if bs > 1 {
            let inv = 1.0 / bs as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::Divergence { iteration: it });
        }
        if it % cfg.log_every == 0 {
            let value = objective(&net, ds, Loss::SquaredError, &plain)?;
            traj.snapshots.push(snapshot(&net, it, value, cfg.record_params));
        }
        step(&mut net, &mut velocity, &grad, cfg);
        if !net.is_finite() {
            return Err(OptimError::Divergence { iteration: it + 1 });
        }
    }
    let value = objective(&net, ds, Loss::SquaredError, &plain)?;
    traj.snapshots.push(snapshot(&net, cfg.max_iters, value, cfg.record_params));
    Ok(TrainResult { net, trajectory: traj, iterations: cfg.max_iters, converged: false, final_loss: value, final_grad_norm: f64::NAN })
}

// ---------------------------------------------------------------------------
// Multi-class targets and excitation

/// `m` class codes in `ℝ^{m−1}`: a centred regular simplex with unit edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCode {
    pub codes: Vec<Vector>,
}

/// Helmert construction: coordinate `k` of code `i` is the `i`-th entry of
/// `(−1,…,−1,k,0,…,0)/√(2k(k+1))` (with `k` copies of −1).
pub fn target_codes(m: usize) -> Result<TargetCode, OptimError> {
    if m < 2 {
        return Err(OptimError::InvalidConfig(format!("need at least two classes, got {m}")));
    }
    let codes = (0..m)
        .map(|i| {
            (1..m)
                .map(|k| {
                    let s = 1.0 / ((2 * k * (k + 1)) as f64).sqrt();
                    if i < k {
                        -s
                    } else if i == k {
                        k as f64 * s
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(TargetCode { codes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct McExcitation {
    pub v: Vector,
    pub d_max: Perturbation,
    pub d_min: Perturbation,
    /// `vᵀ(f(x; d) − f(x))` after each half-round of the winning start.
    pub history: Vec<f64>,
    /// No probe moved the output; `v` fell back to `e₁`.
    pub tie: bool,
}

/// Alternating maximization of `vᵀ(f(x; d) − f(x))` over unit `v` and
/// feasible `d`, restarted from each `±e_k`.
pub fn mc_excitation(net: &Network, x: &[f64], set: &PerturbationSet, rounds: usize, inner_steps: usize) -> Result<McExcitation, OptimError> {
    let m = net.output_dim();
    if m < 2 {
        return Err(OptimError::Shape("multi-class excitation needs output dim ≥ 2".into()));
    }
    set.check(net)?;
    let f0 = net.predict(x)?;
    let e1: Vector = (0..m).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
    let tie = || McExcitation { v: e1.clone(), d_max: net.zero_perturbation(), d_min: net.zero_perturbation(), history: vec![0.0], tie: true };
    if set.is_zero() {
        return Ok(tie());
    }
    let mut best: Option<(f64, Vector, Perturbation, Vec<f64>)> = None;
    for start in 0..2 * m {
        let mut v = vec![0.0; m];
        v[start % m] = if start < m { 1.0 } else { -1.0 };
        let mut d: Option<Perturbation> = None;
        let mut history = Vec::new();
        for _ in 0..rounds.max(1) {
            let e = extremize_projection(net, x, set, &v, Direction::Max, inner_steps, d.as_ref())?;
            history.push(e.value - crate::linalg::dot(&v, &f0));
            let out = net.forward_perturbed(x, &e.d)?;
            let diff: Vector = out.iter().zip(&f0).map(|(a, b)| a - b).collect();
            let nd = norm2(&diff);
            d = Some(e.d);
            if nd == 0.0 {
                break;
            }
            v = diff.iter().map(|t| t / nd).collect();
            history.push(nd);
        }
        let value = *history.last().expect("one round");
        if best.as_ref().is_none_or(|b| value > b.0) {
            best = Some((value, v, d.expect("one round"), history));
        }
    }
    let (value, v, d_max, history) = best.expect("starts exist");
    if !(value > 0.0) {
        return Ok(tie());
    }
    let d_min = extremize_projection(net, x, set, &v, Direction::Min, inner_steps, None)?.d;
    Ok(McExcitation { v, d_max, d_min, history, tie: false })
}

/// Multi-class excitation training on simplex target codes: each step uses
/// the pair from [`mc_excitation`] and differentiates
/// `‖f(x; d₁) − z‖² + ‖f(x; d₂) − z‖²`.
pub fn pe_train_multiclass(net: &Network, ds: &Dataset, set: &PerturbationSet, rounds: usize, cfg: &TrainConfig) -> Result<TrainResult, OptimError> {
    cfg.validate()?;
    check_data(net, ds)?;
    set.check(net)?;
    let targets = regression_targets(net, ds, cfg.targets)?;
    let plain = TrainConfig { weight_decay: 0.0, ..cfg.clone() };
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; net.num_params()];
    let mut traj = Trajectory::default();
    let bs = cfg.batch_size.max(1);
    for it in 0..cfg.max_iters {
        let mut grad = vec![0.0; net.num_params()];
        for _ in 0..bs {
            let i = rng.random_range(0..ds.len());
            let x = &ds.points[i];
            let ex = mc_excitation(&net, x, set, rounds, cfg.inner_steps)?;
            for d in [&ex.d_max, &ex.d_min] {
                let out = net.forward_perturbed(x, d)?;
                let up: Vector = out.iter().zip(&targets[i]).map(|(o, z)| 2.0 * (o - z)).collect();
                let (_, g) = net.gradients(x, Some(d), &up)?;
                for (a, b) in grad.iter_mut().zip(g.flat_params()) {
                    *a += b;
                }
            }
        }
        if bs > 1 {
            let inv = 1.0 / bs as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::Divergence { iteration: it });
        }
        if it % cfg.log_every == 0 {
            let value = objective(&net, ds, Loss::SquaredError, &plain)?;
            traj.snapshots.push(snapshot(&net, it, value, cfg.record_params));
        }
        step(&mut net, &mut velocity, &grad, cfg);
        if !net.is_finite() {
            return Err(OptimError::Divergence { iteration: it + 1 });
        }
    }
    let value = objective(&net, ds, Loss::SquaredError, &plain)?;
    traj.snapshots.push(snapshot(&net, cfg.max_iters, value, cfg.record_params));
    Ok(TrainResult { net, trajectory: traj, iterations: cfg.max_iters, converged: false, final_loss: value, final_grad_norm: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate, DatasetKind};
    use crate::linalg::{lambda_max, Matrix};
    use crate::net::{Activation, Layer};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn linear_net(w: &[f64], bias: Option<f64>) -> Network {
        let m = Matrix::from_vec(1, w.len(), w.to_vec()).unwrap();
        let layer = match bias {
            Some(b) => Layer::dense(m, vec![b], Activation::Identity).unwrap(),
            None => Layer::dense_unbiased(m, Activation::Identity).unwrap(),
        };
        Network::new(vec![layer]).unwrap()
    }

    #[test]
    fn squared_error_examples() {
        assert_eq!(squared_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(squared_error(&[2.0], &[0.0]).unwrap().0, 2.0);
        assert!(squared_error(&[1.0], &[1.0, 2.0]).is_err());
        let p = [0.3, -1.2, 2.5];
        let t = [1.0, 0.5, -0.5];
        let (_, g) = squared_error(&p, &t).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut a = p;
            a[k] += h;
            let mut b = p;
            b[k] -= h;
            let num = (squared_error(&a, &t).unwrap().0 - squared_error(&b, &t).unwrap().0) / (2.0 * h);
            assert!((num - g[k]).abs() <= 1e-7 * g[k].abs().max(1.0));
        }
    }

    #[test]
    fn logistic_examples() {
        assert!((logistic_loss(0.0, 1.0).0 - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(50.0, 1.0).0 <= 1e-20);
        let (v, g) = logistic_loss(1e4, -1.0);
        assert!((v - 1e4).abs() < 1e-9 && (g - 1.0).abs() < 1e-15);
        let (v, g) = logistic_loss(-1e4, -1.0);
        assert!(v == 0.0 && g.is_finite());
        for &(s, c) in &[(0.3, 1.0), (-2.0, 1.0), (1.7, -1.0), (-0.1, -1.0)] {
            let h = 1e-6;
            let num = (logistic_loss(s + h, c).0 - logistic_loss(s - h, c).0) / (2.0 * h);
            let g = logistic_loss(s, c).1;
            assert!((num - g).abs() < 1e-8);
            let sig = 1.0 / (1.0 + (c * s as f64).exp());
            assert!((g + c * sig).abs() < 1e-15);
        }
    }

    #[test]
    fn one_point_one_step() {
        let net = linear_net(&[0.0], None);
        let mut ds = Dataset::new("one", vec![vec![1.0]], vec![1]).unwrap();
        ds.targets = Some(vec![vec![1.0]]);
        let cfg = TrainConfig { step_size: 1.0, max_iters: 5, ..Default::default() };
        let r = gd_train(&net, &ds, Loss::SquaredError, &cfg).unwrap();
        assert_eq!(r.net.layers()[0].weights(), &[1.0]);
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
    }

    fn regression_set() -> Dataset {
        let pts = vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.8, -1.1], vec![1.5, 1.5]];
        let mut ds = Dataset::new("ls", pts, vec![1, 1, 1, 1]).unwrap();
        ds.targets = Some(vec![vec![1.0], vec![-1.0], vec![0.5], vec![2.0]]);
        ds
    }

    #[test]
    fn step_above_stability_limit_diverges() {
        let ds = regression_set();
        let mut s = Matrix::zeros(2, 2);
        for p in &ds.points {
            let o = Matrix::outer(p, p);
            for i in 0..2 {
                for j in 0..2 {
                    s[(i, j)] += o[(i, j)];
                }
            }
        }
        let lmax = lambda_max(&s).unwrap();
        let net = linear_net(&[0.1, -0.2], None);
        let bad = TrainConfig { step_size: 2.2 / lmax, max_iters: 100_000, ..Default::default() };
        assert!(matches!(gd_train(&net, &ds, Loss::SquaredError, &bad), Err(OptimError::Divergence { .. })));
        let good = TrainConfig { step_size: 1.8 / lmax, max_iters: 100_000, ..Default::default() };
        let r = gd_train(&net, &ds, Loss::SquaredError, &good).unwrap();
        assert!(r.converged);
    }

    #[test]
    fn logistic_on_separable_data_grows() {
        let ds = generate(&DatasetKind::from_name("blobs").unwrap(), 3).unwrap();
        let net = linear_net(&[0.0, 0.0], Some(0.0));
        let cfg = TrainConfig { step_size: 0.1, max_iters: 20_000, log_every: 1000, ..Default::default() };
        let r = gd_train(&net, &ds, Loss::CrossEntropy, &cfg).unwrap();
        let s = &r.trajectory.snapshots;
        assert!(s.last().unwrap().loss < 1e-2 * s[0].loss);
        for w in s[2..].windows(2) {
            assert!(w[1].param_norm > w[0].param_norm);
            assert!(w[1].loss < w[0].loss);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let net = linear_net(&[0.0], None);
        let ds = Dataset::new("one", vec![vec![1.0]], vec![1]).unwrap();
        for cfg in [
            TrainConfig { step_size: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ] {
            assert!(matches!(gd_train(&net, &ds, Loss::SquaredError, &cfg), Err(OptimError::InvalidConfig(_))));
        }
    }

    #[test]
    fn linear_inner_extremum_is_dual_corner() {
        let w = [0.7, -1.3, 0.2];
        let net = linear_net(&w, Some(0.4));
        let set = PerturbationSet::uniform(1, 0.1).unwrap();
        let x = [0.5, 0.5, -1.0];
        let e = inner_extremize(&net, &x, &set, Direction::Max, 20).unwrap();
        assert_eq!(e.d[0], vec![0.1, -0.1, 0.1]);
        let e = inner_extremize(&net, &x, &set, Direction::Min, 20).unwrap();
        assert_eq!(e.d[0], vec![-0.1, 0.1, -0.1]);
        let zero = PerturbationSet::uniform(1, 0.0).unwrap();
        let e = inner_extremize(&net, &x, &zero, Direction::Max, 20).unwrap();
        assert_eq!(e.d[0], vec![0.0; 3]);
    }

    #[test]
    fn relu_inner_extremum_near_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..3 {
            let net = Network::dense(&[2, 16, 1], Activation::Relu, Activation::Identity, seed).unwrap();
            let eps = 0.1;
            let set = PerturbationSet::uniform(2, eps).unwrap();
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let f0 = net.score(&x).unwrap();
            let (mut hi, mut lo) = (f0, f0);
            let mut eval = |d: &Perturbation| {
                let v = net.forward_perturbed(&x, d).unwrap()[0];
                hi = hi.max(v);
                lo = lo.min(v);
            };
            for mask in 0u32..(1 << 18) {
                let bit = |k: usize| if mask >> k & 1 == 1 { eps } else { -eps };
                let d = vec![(0..2).map(bit).collect(), (2..18).map(bit).collect()];
                eval(&d);
            }
            for _ in 0..10_000 {
                let d = vec![
                    (0..2).map(|_| rng.random_range(-eps..=eps)).collect(),
                    (0..16).map(|_| rng.random_range(-eps..=eps)).collect(),
                ];
                eval(&d);
            }
            let emax = inner_extremize(&net, &x, &set, Direction::Max, 20).unwrap();
            let emin = inner_extremize(&net, &x, &set, Direction::Min, 20).unwrap();
            assert!(set.contains(&emax.d) && set.contains(&emin.d));
            assert!(emax.value - f0 >= 0.98 * (hi - f0), "max {} vs {}", emax.value, hi);
            assert!(f0 - emin.value >= 0.98 * (f0 - lo), "min {} vs {}", emin.value, lo);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn inner_max_dominates_min(seed in 0u64..500, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, r in 0.0f64..0.3) {
            let net = Network::dense(&[2, 6, 4, 1], Activation::Relu, Activation::Identity, seed).unwrap();
            let set = PerturbationSet::uniform(3, r).unwrap();
            let hi = inner_extremize(&net, &[x0, x1], &set, Direction::Max, 10).unwrap();
            let lo = inner_extremize(&net, &[x0, x1], &set, Direction::Min, 10).unwrap();
            prop_assert!(hi.value >= lo.value);
            prop_assert!(set.contains(&hi.d) && set.contains(&lo.d));
        }
    }

    #[test]
    fn zero_radius_excitation_is_scaled_sgd() {
        let ds = generate(&DatasetKind::from_name("three_cluster").unwrap(), 1).unwrap();
        let net = Network::dense(&[2, 16, 1], Activation::Relu, Activation::Identity, 4).unwrap();
        let set = PerturbationSet::uniform(2, 0.0).unwrap();
        let cfg = TrainConfig { step_size: 0.01, momentum: 0.9, max_iters: 500, seed: 8, log_every: 50, ..Default::default() };
        let pe = pe_train(&net, &ds, &set, &cfg).unwrap();
        let sgd_cfg = TrainConfig { step_size: 0.04, ..cfg.clone() };
        let sgd = sgd_train(&net, &ds, Loss::SquaredError, &sgd_cfg).unwrap();
        assert_eq!(pe.net.params(), sgd.net.params());
        assert_eq!(pe.trajectory, sgd.trajectory);
    }

    #[test]
    fn plain_excitation_step_matches_hand_update() {
        // γ = 0, one step on a linear model: θ ← θ − η ∇[(f(x;d₁)−y)² + (f(x;d₂)−y)²]
        let net = linear_net(&[0.5, -1.0], Some(0.1));
        let ds = Dataset::new("p", vec![vec![1.0, 2.0]], vec![1]).unwrap();
        let eps = 0.2;
        let set = PerturbationSet::uniform(1, eps).unwrap();
        let cfg = TrainConfig { step_size: 0.05, max_iters: 1, ..Default::default() };
        let r = pe_train(&net, &ds, &set, &cfg).unwrap();
        let (w, b, x, y): ([f64; 2], f64, [f64; 2], f64) = ([0.5, -1.0], 0.1, [1.0, 2.0], 1.0);
        let mut theta = vec![w[0], w[1], b];
        let mut g = [0.0; 3];
        for s in [1.0, -1.0] {
            let u = [x[0] + s * eps * w[0].signum(), x[1] + s * eps * w[1].signum()];
            let f = w[0] * u[0] + w[1] * u[1] + b;
            g[0] += 2.0 * (f - y) * u[0];
            g[1] += 2.0 * (f - y) * u[1];
            g[2] += 2.0 * (f - y);
        }
        for k in 0..3 {
            theta[k] -= 0.05 * g[k];
        }
        for (a, b) in r.net.params().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate(&DatasetKind::from_name("blobs").unwrap(), 2).unwrap();
        let net = Network::dense(&[2, 8, 1], Activation::Relu, Activation::Identity, 1).unwrap();
        let set = PerturbationSet::uniform(2, 0.02).unwrap();
        let cfg = TrainConfig { step_size: 0.01, momentum: 0.5, max_iters: 200, seed: 3, ..Default::default() };
        let a = pe_train(&net, &ds, &set, &cfg).unwrap();
        let b = pe_train(&net, &ds, &set, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        let c = gd_train(&net, &ds, Loss::CrossEntropy, &cfg).unwrap();
        let d = gd_train(&net, &ds, Loss::CrossEntropy, &cfg).unwrap();
        assert_eq!(c.net, d.net);
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn target_code_geometry() {
        let c2 = target_codes(2).unwrap();
        assert_eq!(c2.codes, vec![vec![-0.5], vec![0.5]]);
        for m in 2..=7 {
            let c = target_codes(m).unwrap();
            assert_eq!(c.codes.len(), m);
            for i in 0..m {
                assert_eq!(c.codes[i].len(), m - 1);
                for j in 0..i {
                    assert!((dist(&c.codes[i], &c.codes[j]) - 1.0).abs() <= 1e-12);
                }
            }
            for k in 0..m - 1 {
                let s: f64 = c.codes.iter().map(|z| z[k]).sum();
                assert!(s.abs() <= 1e-12);
            }
        }
        let c3 = target_codes(3).unwrap();
        for z in &c3.codes {
            assert!((norm2(z) - 1.0 / 3f64.sqrt()).abs() <= 1e-12);
        }
        assert!(target_codes(1).is_err());
    }

    #[test]
    fn mc_excitation_tie_on_zero_set() {
        let net = Network::dense(&[2, 4, 3], Activation::Relu, Activation::Identity, 0).unwrap();
        let set = PerturbationSet::uniform(2, 0.0).unwrap();
        let r = mc_excitation(&net, &[0.1, 0.2], &set, 5, 10).unwrap();
        assert!(r.tie);
        assert_eq!(r.v, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.d_max, net.zero_perturbation());
        assert_eq!(r.d_min, net.zero_perturbation());
    }

    #[test]
    fn mc_excitation_linear_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let layer = Layer::dense(Matrix::from_vec(2, 2, w.clone()).unwrap(), vec![0.3, -0.2], Activation::Identity).unwrap();
            let net = Network::new(vec![layer]).unwrap();
            let eps = 0.25;
            let set = PerturbationSet::uniform(1, eps).unwrap();
            let r = mc_excitation(&net, &[0.4, -0.9], &set, 6, 20).unwrap();
            let mut best: f64 = 0.0;
            for a in 0..3600 {
                let t = a as f64 * std::f64::consts::PI / 1800.0;
                let v = [t.cos(), t.sin()];
                for s in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
                    let wd = [eps * (w[0] * s[0] + w[1] * s[1]), eps * (w[2] * s[0] + w[3] * s[1])];
                    best = best.max(v[0] * wd[0] + v[1] * wd[1]);
                }
            }
            let got = *r.history.last().unwrap();
            assert!((got - best).abs() <= 1e-5 * best.max(1.0), "{got} vs {best}");
            for h in r.history.windows(2) {
                assert!(h[1] >= h[0] - 1e-12);
            }
        }
    }

    #[test]
    fn mc_excitation_history_nondecreasing() {
        let set = PerturbationSet::uniform(3, 0.1).unwrap();
        for seed in 0..10 {
            let net = Network::dense(&[3, 8, 6, 3], Activation::LeakyRelu(0.01), Activation::Identity, seed).unwrap();
            let r = mc_excitation(&net, &[0.2, -0.4, 0.9], &set, 6, 10).unwrap();
            assert!(!r.tie);
            assert!((norm2(&r.v) - 1.0).abs() < 1e-12);
            for h in r.history.windows(2) {
                assert!(h[1] >= h[0] - 1e-12, "{:?}", r.history);
            }
        }
    }

    #[test]
    fn multiclass_training_reduces_code_error() {
        let ds = generate(
            &DatasetKind::Blobs(crate::data_io::BlobsParams {
                centers: vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.5]],
                per_class: 10,
                sigma: 0.1,
            }),
            0,
        )
        .unwrap();
        let net = Network::dense(&[2, 12, 2], Activation::Relu, Activation::Identity, 2).unwrap();
        let set = PerturbationSet::uniform(2, 0.01).unwrap();
        let cfg = TrainConfig { step_size: 0.02, momentum: 0.5, max_iters: 1500, log_every: 500, inner_steps: 5, ..Default::default() };
        let r = pe_train_multiclass(&net, &ds, &set, 2, &cfg).unwrap();
        let s = &r.trajectory.snapshots;
        assert!(s.last().unwrap().loss < 0.3 * s[0].loss);
    }

    #[test]
    fn norm_balance_drifts_little() {
        let ds = generate(&DatasetKind::from_name("blobs").unwrap(), 7).unwrap();
        let net = Network::two_layer(2, 6, 1, 7).unwrap();
        let balance = |n: &Network| {
            let (v, b) = n.two_layer_hidden().unwrap();
            let w = n.two_layer_output().unwrap();
            w.frobenius_norm().powi(2) - v.frobenius_norm().powi(2) - b.iter().map(|x| x * x).sum::<f64>()
        };
        let cfg = TrainConfig { step_size: 1e-4, max_iters: 10_000, grad_tol: 0.0, log_every: 10_000, ..Default::default() };
        let r = gd_train(&net, &ds, Loss::CrossEntropy, &cfg).unwrap();
        assert!((balance(&r.net) - balance(&net)).abs() <= 1e-3);
        assert!(r.net.param_norm() != net.param_norm());
    }
}
