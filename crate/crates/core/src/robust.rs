//! Robustness measurements for scalar-output classifiers: minimal ℓ∞
//! misclassifying radii by projected sign-gradient attacks, margin profiles,
//! decision-boundary rasters, and empirical Lipschitz constants.

use crate::data_io::Dataset;
use crate::linalg::{norm2, spectral_norm, Matrix, Vector};
use crate::net::{NetError, Network};
use crate::optim::Loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Network plus decision threshold: label `+1` iff `f(x) > threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub net: Network,
    pub threshold: f64,
}

/// Threshold used when the class scores overlap.
pub const FALLBACK_THRESHOLD: f64 = 0.5;

impl Classifier {
    pub fn sign(net: Network) -> Result<Self, RobustError> {
        Self::with_threshold(net, 0.0)
    }

    pub fn with_threshold(net: Network, threshold: f64) -> Result<Self, RobustError> {
        if net.output_dim() != 1 {
            return Err(RobustError::InvalidInput(format!("scalar output required, network has {}", net.output_dim())));
        }
        Ok(Classifier { net, threshold })
    }

    /// Midway between the lowest positive and the highest negative score,
    /// for squared-error fits with the positive class on the higher target.
    pub fn midpoint(net: Network, ds: &Dataset) -> Result<Self, RobustError> {
        let (lo, hi) = class_extremes(&net, ds)?;
        let t = if lo > hi { 0.5 * (lo + hi) } else { FALLBACK_THRESHOLD };
        Self::with_threshold(net, t)
    }

    /// Midpoint rule for squared error, sign rule for cross-entropy.
    pub fn for_loss(net: Network, ds: &Dataset, loss: Loss) -> Result<Self, RobustError> {
        match loss {
            Loss::SquaredError => Self::midpoint(net, ds),
            Loss::CrossEntropy => Self::sign(net),
        }
    }

    /// `f(x) − threshold`.
    pub fn margin_score(&self, x: &[f64]) -> Result<f64, RobustError> {
        Ok(self.net.score(x)? - self.threshold)
    }

    pub fn classify(&self, x: &[f64]) -> Result<i64, RobustError> {
        Ok(if self.margin_score(x)? > 0.0 { 1 } else { -1 })
    }

    /// `min_{+} f − max_{−} f`; positive iff the threshold separates the data.
    pub fn gap(&self, ds: &Dataset) -> Result<f64, RobustError> {
        let (lo, hi) = class_extremes(&self.net, ds)?;
        Ok(lo - hi)
    }
}

fn class_extremes(net: &Network, ds: &Dataset) -> Result<(f64, f64), RobustError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, &l) in ds.points.iter().zip(&ds.labels) {
        let s = net.score(x)?;
        match l {
            1 => lo = lo.min(s),
            -1 => hi = hi.max(s),
            other => return Err(RobustError::InvalidInput(format!("label {other} is not ±1"))),
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(RobustError::InvalidInput("both classes must be present".into()));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub eps_max: f64,
    pub pgd_steps: usize,
    pub bisect_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { eps_max: 0.1, pgd_steps: 40, bisect_iters: 12, restarts: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRadius {
    pub index: usize,
    pub label: i64,
    /// Smallest radius with a found flip; `eps_max` when none was found.
    pub radius: f64,
    pub flipped: bool,
    /// Already misclassified without perturbation.
    pub misclassified: bool,
}

/// Sign-gradient descent on `label·(f(x+d) − t)` over `‖d‖∞ ≤ eps`; returns
/// the first perturbation that changes the label.
fn attack(clf: &Classifier, x: &[f64], label: i64, eps: f64, cfg: &AttackConfig, warm: Option<&Vector>, rng: &mut ChaCha8Rng) -> Result<Option<Vector>, RobustError> {
    let n = x.len();
    let mut starts: Vec<Vector> = vec![vec![0.0; n]];
    if let Some(w) = warm {
        starts.push(w.iter().map(|v| v.clamp(-eps, eps)).collect());
    }
    for _ in 0..cfg.restarts {
        starts.push((0..n).map(|_| rng.random_range(-eps..=eps)).collect());
    }
    let step = 2.0 * eps / cfg.pgd_steps.max(1) as f64;
    let lf = label as f64;
    for mut d in starts {
        for k in 0..=cfg.pgd_steps {
            let xd: Vector = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            let (out, g) = clf.net.gradients(&xd, None, &[1.0])?;
            let flipped = if out[0] - clf.threshold > 0.0 { 1 } else { -1 } != label;
            if flipped {
                return Ok(Some(d));
            }
            if k == cfg.pgd_steps {
                break;
            }
            for (di, gi) in d.iter_mut().zip(&g.perturbations[0]) {
                let s = lf * gi;
                if s > 0.0 {
                    *di = (*di - step).max(-eps);
                } else if s < 0.0 {
                    *di = (*di + step).min(eps);
                }
            }
        }
    }
    Ok(None)
}

/// Smallest ℓ∞ radius in `[0, eps_max]` at which the attack flips the label,
/// to within `eps_max / 2^bisect_iters`.
pub fn pgd_min_radius(clf: &Classifier, x: &[f64], label: i64, cfg: &AttackConfig, rng: &mut ChaCha8Rng) -> Result<PointRadius, RobustError> {
    if !(cfg.eps_max >= 0.0) || !cfg.eps_max.is_finite() {
        return Err(RobustError::InvalidInput(format!("eps_max = {} must be finite and nonnegative", cfg.eps_max)));
    }
    if label != 1 && label != -1 {
        return Err(RobustError::InvalidInput(format!("label {label} is not ±1")));
    }
    if clf.classify(x)? != label {
        return Ok(PointRadius { index: 0, label, radius: 0.0, flipped: true, misclassified: true });
    }
    let Some(mut witness) = attack(clf, x, label, cfg.eps_max, cfg, None, rng)? else {
        return Ok(PointRadius { index: 0, label, radius: cfg.eps_max, flipped: false, misclassified: false });
    };
    let (mut lo, mut hi) = (0.0, cfg.eps_max);
    for _ in 0..cfg.bisect_iters {
        let mid = 0.5 * (lo + hi);
        match attack(clf, x, label, mid, cfg, Some(&witness), rng)? {
            Some(d) => {
                hi = mid;
                witness = d;
            }
            None => lo = mid,
        }
    }
    Ok(PointRadius { index: 0, label, radius: hi, flipped: true, misclassified: false })
}

/// Seed for a point's attack, derived from its coordinates so that results
/// do not depend on the point's position in the dataset.
fn point_seed(seed: u64, x: &[f64], label: i64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15 ^ (label as u64);
    for v in x {
        h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3).rotate_left(29);
    }
    h
}

pub const PROFILE_QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginProfile {
    pub eps_max: f64,
    /// In dataset order.
    pub records: Vec<PointRadius>,
    pub sorted_radii: Vec<f64>,
    /// `(level, radius)` pairs, linearly interpolated; unflipped points count
    /// at `eps_max`.
    pub quantiles: Vec<(f64, f64)>,
}

impl MarginProfile {
    /// Fraction of points misclassified within radius `eps`.
    pub fn misclassified_fraction(&self, eps: f64) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.flipped && r.radius <= eps).count() as f64 / self.records.len() as f64
    }

    pub fn median(&self) -> f64 {
        quantile(&self.sorted_radii, 0.5)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("point_index,label,min_radius,flipped\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.index, r.label, r.radius, r.flipped);
        }
        s
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = level.clamp(0.0, 1.0) * (n - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 < n {
                sorted[i] + frac * (sorted[i + 1] - sorted[i])
            } else {
                sorted[n - 1]
            }
        }
    }
}

pub fn margin_profile(clf: &Classifier, ds: &Dataset, cfg: &AttackConfig) -> Result<MarginProfile, RobustError> {
    let records: Vec<PointRadius> = ds
        .points
        .par_iter()
        .zip(ds.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &l))| {
            let mut rng = ChaCha8Rng::seed_from_u64(point_seed(cfg.seed, x, l));
            let mut r = pgd_min_radius(clf, x, l, cfg, &mut rng)?;
            r.index = i;
            Ok(r)
        })
        .collect::<Result<_, RobustError>>()?;
    let mut sorted_radii: Vec<f64> = records.iter().map(|r| r.radius).collect();
    sorted_radii.sort_by(f64::total_cmp);
    let quantiles = PROFILE_QUANTILES.iter().map(|&q| (q, quantile(&sorted_radii, q))).collect();
    Ok(MarginProfile { eps_max: cfg.eps_max, records, sorted_radii, quantiles })
}

/// Labels at cell centers of an `nx × ny` grid, row-major from `ymin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
    pub labels: Vec<i64>,
}

impl Raster {
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.xmin + (ix as f64 + 0.5) * (self.xmax - self.xmin) / self.nx as f64,
            self.ymin + (iy as f64 + 0.5) * (self.ymax - self.ymin) / self.ny as f64,
        ]
    }

    pub fn label(&self, ix: usize, iy: usize) -> i64 {
        self.labels[iy * self.nx + ix]
    }

    pub fn cell_diagonal(&self) -> f64 {
        ((self.xmax - self.xmin) / self.nx as f64).hypot((self.ymax - self.ymin) / self.ny as f64)
    }

    /// Cells with a 4-neighbour of a different label.
    pub fn boundary_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let l = self.label(ix, iy);
                let differs = (ix > 0 && self.label(ix - 1, iy) != l)
                    || (ix + 1 < self.nx && self.label(ix + 1, iy) != l)
                    || (iy > 0 && self.label(ix, iy - 1) != l)
                    || (iy + 1 < self.ny && self.label(ix, iy + 1) != l);
                if differs {
                    out.push((ix, iy));
                }
            }
        }
        out
    }

    /// Distance from each point to the nearest boundary-cell center;
    /// infinite when the raster holds a single label.
    pub fn grid_margins(&self, points: &[Vector]) -> Vec<f64> {
        let centers: Vec<[f64; 2]> = self.boundary_cells().into_iter().map(|(ix, iy)| self.cell_center(ix, iy)).collect();
        points
            .iter()
            .map(|p| centers.iter().map(|c| (p[0] - c[0]).hypot(p[1] - c[1])).fold(f64::INFINITY, f64::min))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("xmin,xmax,ymin,ymax,nx,ny\n");
        let _ = writeln!(s, "{},{},{},{},{},{}", self.xmin, self.xmax, self.ymin, self.ymax, self.nx, self.ny);
        for row in self.labels.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(i64::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// `bbox = [xmin, xmax, ymin, ymax]`.
pub fn boundary_raster(clf: &Classifier, bbox: [f64; 4], nx: usize, ny: usize) -> Result<Raster, RobustError> {
    if clf.net.input_dim() != 2 {
        return Err(RobustError::InvalidInput(format!("raster needs 2-D input, network takes {}", clf.net.input_dim())));
    }
    if nx == 0 || ny == 0 || !(bbox[1] > bbox[0]) || !(bbox[3] > bbox[2]) {
        return Err(RobustError::InvalidInput("empty grid or bounding box".into()));
    }
    let mut r = Raster { xmin: bbox[0], xmax: bbox[1], ymin: bbox[2], ymax: bbox[3], nx, ny, labels: Vec::new() };
    let labels: Vec<i64> = (0..nx * ny)
        .into_par_iter()
        .map(|k| clf.classify(&r.cell_center(k % nx, k / nx)))
        .collect::<Result<_, _>>()?;
    r.labels = labels;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRegion {
    pub lo: Vector,
    pub hi: Vector,
    /// Extra probes, typically the training points.
    pub points: Vec<Vector>,
}

impl ProbeRegion {
    /// Bounding box of the points, widened by `pad` times its extent.
    pub fn around(points: &[Vector], pad: f64) -> Result<Self, RobustError> {
        let n = points.first().map(Vec::len).ok_or_else(|| RobustError::InvalidInput("no points".into()))?;
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for p in points {
            for k in 0..n {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        for k in 0..n {
            let w = (hi[k] - lo[k]).max(1e-12) * pad;
            lo[k] -= w;
            hi[k] += w;
        }
        Ok(ProbeRegion { lo, hi, points: points.to_vec() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LipschitzMode {
    /// Largest Jacobian spectral norm over the linear regions met by a grid
    /// with `grid_per_dim` points per axis and the region's points.
    Exact { grid_per_dim: usize },
    /// Largest difference quotient over random point pairs.
    Sampling { pairs: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub regions: usize,
    /// Every linear region of the input space was visited.
    pub complete: bool,
}

/// Input-output Jacobian at `x`.
pub fn jacobian(net: &Network, x: &[f64]) -> Result<Matrix, RobustError> {
    let m = net.output_dim();
    let mut rows = Vec::with_capacity(m);
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        let (_, g) = net.gradients(x, None, &e)?;
        rows.push(g.perturbations[0].clone());
    }
    Ok(Matrix::from_rows(&rows).expect("rows share the input dimension"))
}

fn region_key(net: &Network, x: &[f64]) -> Result<Vec<bool>, RobustError> {
    let trace = net.forward(x)?;
    let mut key = Vec::new();
    for (layer, z) in net.layers().iter().zip(&trace.pre_activations) {
        if layer.activation != crate::net::Activation::Identity {
            key.extend(z.iter().map(|&v| v > 0.0));
        }
    }
    Ok(key)
}

pub const MAX_GRID_PROBES: usize = 4_000_000;

pub fn empirical_lipschitz(net: &Network, region: &ProbeRegion, mode: LipschitzMode) -> Result<LipschitzEstimate, RobustError> {
    let n = net.input_dim();
    if region.lo.len() != n || region.hi.len() != n || region.points.iter().any(|p| p.len() != n) {
        return Err(RobustError::InvalidInput("probe region dimension does not match network".into()));
    }
    match mode {
        LipschitzMode::Exact { grid_per_dim } => {
            let mut probes: Vec<Vector> = region.points.clone();
            let total = (grid_per_dim as f64).powi(n as i32);
            if grid_per_dim > 0 && total <= MAX_GRID_PROBES as f64 {
                for k in 0..grid_per_dim.pow(n as u32) {
                    let mut rem = k;
                    let p: Vector = (0..n)
                        .map(|j| {
                            let i = rem % grid_per_dim;
                            rem /= grid_per_dim;
                            region.lo[j] + (i as f64 + 0.5) * (region.hi[j] - region.lo[j]) / grid_per_dim as f64
                        })
                        .collect();
                    probes.push(p);
                }
            }
            let mut complete = false;
            if n == 2 && net.check_two_layer().is_ok() {
                let (v, b) = net.two_layer_hidden()?;
                probes.extend(crate::bounds::arrangement_samples_2d(v, b));
                complete = true;
            }
            let mut seen = HashSet::new();
            let mut value: f64 = 0.0;
            for p in &probes {
                if seen.insert(region_key(net, p)?) {
                    value = value.max(spectral_norm(&jacobian(net, p)?));
                }
            }
            Ok(LipschitzEstimate { value, regions: seen.len(), complete })
        }
        LipschitzMode::Sampling { pairs, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let diam = norm2(&crate::linalg::sub(&region.hi, &region.lo)).max(1e-12);
            let mut value: f64 = 0.0;
            let draw = |rng: &mut ChaCha8Rng| -> Vector { (0..n).map(|j| rng.random_range(region.lo[j]..=region.hi[j])).collect() };
            for k in 0..pairs {
                let a = draw(&mut rng);
                // alternate far pairs with short-range pairs
                let b: Vector = if k % 2 == 0 {
                    draw(&mut rng)
                } else {
                    let u: Vector = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let nu = norm2(&u).max(1e-300);
                    a.iter().zip(&u).map(|(x, d)| x + 1e-4 * diam * d / nu).collect()
                };
                let dx = norm2(&crate::linalg::sub(&a, &b));
                if dx == 0.0 {
                    continue;
                }
                let df = norm2(&crate::linalg::sub(&net.predict(&a)?, &net.predict(&b)?));
                value = value.max(df / dx);
            }
            Ok(LipschitzEstimate { value, regions: 0, complete: false })
        }
    }
}
