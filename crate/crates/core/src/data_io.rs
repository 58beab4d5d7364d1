//! Synthetic datasets, CIFAR-10 binary ingestion and CSV persistence.

use crate::linalg::Vector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("empty dataset file")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Provenance of a dataset: generator, parameters, seed, and any
/// analytically known quantities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
    /// Optimal hard-margin geometric margin when known in closed form.
    pub gamma_opt: Option<f64>,
    /// Unit normal `r` and offset `Δ` of an affine subspace holding the
    /// support vectors, when known.
    pub support_direction: Option<Vector>,
    pub support_offset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub points: Vec<Vector>,
    /// `±1` for binary problems, class indices otherwise.
    pub labels: Vec<i64>,
    pub targets: Option<Vec<Vector>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(name: impl Into<String>, points: Vec<Vector>, labels: Vec<i64>) -> Result<Self, DataError> {
        if points.len() != labels.len() {
            return Err(DataError::InvalidParams(format!("{} points but {} labels", points.len(), labels.len())));
        }
        if let Some(first) = points.first() {
            if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.len() != first.len()) {
                return Err(DataError::InvalidParams(format!("point {i} has dimension {}, expected {}", p.len(), first.len())));
            }
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidParams("non-finite feature".into()));
        }
        Ok(Dataset { name: name.into(), points, labels, targets: None, meta: DatasetMeta::default() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    /// Indices of class `+1` (the set ℐ).
    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == 1).collect()
    }

    /// Indices of class `-1` (the set 𝒥).
    pub fn negatives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == -1).collect()
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l == 1 || l == -1)
    }

    /// Points of class `+1` and `-1`.
    pub fn class_points(&self) -> (Vec<Vector>, Vec<Vector>) {
        let a = self.positives().into_iter().map(|i| self.points[i].clone()).collect();
        let b = self.negatives().into_iter().map(|i| self.points[i].clone()).collect();
        (a, b)
    }

    /// Scalar regression targets: `pos` for label `+1`, `neg` otherwise.
    pub fn binary_targets(&self, pos: f64, neg: f64) -> Vec<f64> {
        self.labels.iter().map(|&l| if l == 1 { pos } else { neg }).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            targets: self.targets.as_ref().map(|t| idx.iter().map(|&i| t[i].clone()).collect()),
            meta: self.meta.clone(),
        }
    }

    /// Seeded shuffle split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(DataError::InvalidParams(format!("test fraction {test_fraction} outside [0,1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }
}

// ---------------------------------------------------------------------------
// Generators

/// Two flank clusters (label `+1`) either side of a central cluster (label `-1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThreeClusterParams {
    pub flank: f64,
    pub sigma: f64,
    pub per_cluster: usize,
}

impl Default for ThreeClusterParams {
    fn default() -> Self {
        ThreeClusterParams { flank: 2.0, sigma: 0.3, per_cluster: 20 }
    }
}

/// Zero-mean data whose two support vectors share the line `x₂ = height`
/// but sit off-centre along `x₁`, so the bias carries part of the margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoorMarginParams {
    pub gap: f64,
    pub shift: f64,
    pub height: f64,
    pub bulk_per_class: usize,
    pub bulk_distance: f64,
    pub spread: f64,
}

impl Default for PoorMarginParams {
    fn default() -> Self {
        PoorMarginParams { gap: 1.0, shift: 1.5, height: 1.0, bulk_per_class: 10, bulk_distance: 2.0, spread: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobsParams {
    pub centers: Vec<Vector>,
    pub per_class: usize,
    pub sigma: f64,
}

impl Default for BlobsParams {
    fn default() -> Self {
        BlobsParams { centers: vec![vec![1.0, 0.0], vec![-1.0, 0.0]], per_class: 25, sigma: 0.1 }
    }
}

/// Uniform points in `[-1,1]^dim` labelled by a random hyperplane through
/// the origin, with a slab of half-width `margin` removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparableRandomParams {
    pub n: usize,
    pub dim: usize,
    pub margin: f64,
}

impl Default for SeparableRandomParams {
    fn default() -> Self {
        SeparableRandomParams { n: 40, dim: 2, margin: 0.1 }
    }
}

/// One support vector per class on the line `x₂ = delta`, at `x₁ = pos_x`
/// and `x₁ = -neg_x`, plus optional distant non-support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineSupportParams {
    pub delta: f64,
    pub pos_x: f64,
    pub neg_x: f64,
    pub extra_per_class: usize,
}

impl Default for AffineSupportParams {
    fn default() -> Self {
        AffineSupportParams { delta: 1.0, pos_x: 2.0, neg_x: 1.0, extra_per_class: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    ThreeCluster(ThreeClusterParams),
    PoorMarginPair(PoorMarginParams),
    Blobs(BlobsParams),
    SeparableRandom(SeparableRandomParams),
    AffineSupport(AffineSupportParams),
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::ThreeCluster(_) => "three_cluster",
            DatasetKind::PoorMarginPair(_) => "poor_margin_pair",
            DatasetKind::Blobs(_) => "blobs",
            DatasetKind::SeparableRandom(_) => "separable_random",
            DatasetKind::AffineSupport(_) => "affine_support",
        }
    }

    /// Default parameters for a kind given by name.
    pub fn from_name(name: &str) -> Result<Self, DataError> {
        Ok(match name {
            "three_cluster" => DatasetKind::ThreeCluster(Default::default()),
            "poor_margin_pair" => DatasetKind::PoorMarginPair(Default::default()),
            "blobs" => DatasetKind::Blobs(Default::default()),
            "separable_random" => DatasetKind::SeparableRandom(Default::default()),
            "affine_support" => DatasetKind::AffineSupport(Default::default()),
            other => return Err(DataError::InvalidParams(format!("unknown dataset kind {other:?}"))),
        })
    }
}

fn positive(name: &str, v: f64) -> Result<(), DataError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DataError::InvalidParams(format!("{name} must be positive, got {v}")))
    }
}

fn nonneg(name: &str, v: f64) -> Result<(), DataError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DataError::InvalidParams(format!("{name} must be nonnegative, got {v}")))
    }
}

fn normal(sigma: f64) -> Result<Normal<f64>, DataError> {
    Normal::new(0.0, sigma).map_err(|e| DataError::InvalidParams(e.to_string()))
}

pub fn generate(kind: &DatasetKind, seed: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta = DatasetMeta { kind: kind.name().into(), seed: Some(seed), params: serde_json::to_value(kind)?, ..Default::default() };
    let (points, labels) = match kind {
        DatasetKind::ThreeCluster(p) => {
            nonneg("sigma", p.sigma)?;
            positive("flank", p.flank)?;
            let nd = normal(p.sigma)?;
            let mut pts = Vec::new();
            let mut lab = Vec::new();
            for (cx, label) in [(-p.flank, 1), (0.0, -1), (p.flank, 1)] {
                for _ in 0..p.per_cluster {
                    pts.push(vec![cx + nd.sample(&mut rng), nd.sample(&mut rng)]);
                    lab.push(label);
                }
            }
            (pts, lab)
        }
        DatasetKind::PoorMarginPair(p) => {
            positive("gap", p.gap)?;
            positive("bulk_distance", p.bulk_distance)?;
            nonneg("spread", p.spread)?;
            let half = p.gap / 2.0;
            let mut pts = vec![vec![half + p.shift, p.height], vec![-half + p.shift, p.height]];
            let mut lab = vec![1, -1];
            for _ in 0..p.bulk_per_class {
                let dx = p.bulk_distance + rng.random_range(0.0..=p.spread);
                let y = rng.random_range(-p.spread..=p.spread);
                pts.push(vec![half + p.shift + dx, y]);
                lab.push(1);
                let dx = p.bulk_distance + rng.random_range(0.0..=p.spread);
                let y = rng.random_range(-p.spread..=p.spread);
                pts.push(vec![-half + p.shift - dx, y]);
                lab.push(-1);
            }
            let n = pts.len() as f64;
            let mean: Vec<f64> = (0..2).map(|k| pts.iter().map(|q| q[k]).sum::<f64>() / n).collect();
            for q in &mut pts {
                q[0] -= mean[0];
                q[1] -= mean[1];
            }
            meta.gamma_opt = Some(half);
            meta.support_direction = Some(vec![0.0, 1.0]);
            meta.support_offset = Some(p.height - mean[1]);
            (pts, lab)
        }
        DatasetKind::Blobs(p) => {
            nonneg("sigma", p.sigma)?;
            if p.centers.len() < 2 {
                return Err(DataError::InvalidParams("blobs need at least two centers".into()));
            }
            let dim = p.centers[0].len();
            if dim == 0 || p.centers.iter().any(|c| c.len() != dim) {
                return Err(DataError::InvalidParams("centers must share a positive dimension".into()));
            }
            let nd = normal(p.sigma)?;
            let binary = p.centers.len() == 2;
            let mut pts = Vec::new();
            let mut lab = Vec::new();
            for (k, c) in p.centers.iter().enumerate() {
                let label = if binary { if k == 0 { 1 } else { -1 } } else { k as i64 };
                for _ in 0..p.per_class {
                    pts.push(c.iter().map(|v| v + nd.sample(&mut rng)).collect());
                    lab.push(label);
                }
            }
            (pts, lab)
        }
        DatasetKind::SeparableRandom(p) => {
            nonneg("margin", p.margin)?;
            if p.dim == 0 || p.margin >= 1.0 {
                return Err(DataError::InvalidParams("need dim ≥ 1 and margin < 1".into()));
            }
            let nd = normal(1.0)?;
            let mut w: Vec<f64> = (0..p.dim).map(|_| nd.sample(&mut rng)).collect();
            let nw = crate::linalg::norm2(&w);
            w.iter_mut().for_each(|v| *v /= nw);
            let mut pts = Vec::with_capacity(p.n);
            let mut lab = Vec::with_capacity(p.n);
            let mut tries = 0usize;
            while pts.len() < p.n {
                tries += 1;
                if tries > 1000 * (p.n + 1) {
                    return Err(DataError::InvalidParams("margin too large to sample points".into()));
                }
                let x: Vec<f64> = (0..p.dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let s = crate::linalg::dot(&w, &x);
                if s.abs() < p.margin {
                    continue;
                }
                lab.push(if s > 0.0 { 1 } else { -1 });
                pts.push(x);
            }
            meta.support_direction = Some(w);
            (pts, lab)
        }
        DatasetKind::AffineSupport(p) => {
            positive("pos_x + neg_x", p.pos_x + p.neg_x)?;
            let mut pts = vec![vec![p.pos_x, p.delta], vec![-p.neg_x, p.delta]];
            let mut lab = vec![1, -1];
            for _ in 0..p.extra_per_class {
                pts.push(vec![p.pos_x + 2.0 + rng.random_range(0.0..1.0), p.delta + rng.random_range(-1.0..1.0)]);
                lab.push(1);
                pts.push(vec![-p.neg_x - 2.0 - rng.random_range(0.0..1.0), p.delta + rng.random_range(-1.0..1.0)]);
                lab.push(-1);
            }
            meta.gamma_opt = Some((p.pos_x + p.neg_x) / 2.0);
            meta.support_direction = Some(vec![0.0, 1.0]);
            meta.support_offset = Some(p.delta);
            (pts, lab)
        }
    };
    let mut ds = Dataset::new(kind.name(), points, labels)?;
    ds.meta = meta;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_AIRPLANE: u8 = 0;
pub const CIFAR_HORSE: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CifarCounts {
    pub total: usize,
    pub kept: usize,
    pub filtered: usize,
}

/// Decodes CIFAR-10 records from memory, keeping two classes.
/// Features are the three 32×32 channel planes scaled by 1/255.
pub fn decode_cifar_binary(bytes: &[u8], keep: (u8, u8), base_offset: u64) -> Result<(Vec<Vector>, Vec<i64>, CifarCounts), DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = base_offset + (bytes.len() - bytes.len() % CIFAR_RECORD) as u64;
        return Err(DataError::Format {
            offset,
            msg: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let total = bytes.len() / CIFAR_RECORD;
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(DataError::Format { offset: base_offset + (r * CIFAR_RECORD) as u64, msg: format!("label byte {label} > 9") });
        }
        let y = if label == keep.0 {
            1
        } else if label == keep.1 {
            -1
        } else {
            continue;
        };
        points.push(rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect());
        labels.push(y);
    }
    let kept = points.len();
    Ok((points, labels, CifarCounts { total, kept, filtered: total - kept }))
}

pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], keep: (u8, u8)) -> Result<(Dataset, CifarCounts), DataError> {
    if keep.0 > 9 || keep.1 > 9 || keep.0 == keep.1 {
        return Err(DataError::InvalidParams(format!("keep classes {keep:?} must be two distinct labels in 0..=9")));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut counts = CifarCounts { total: 0, kept: 0, filtered: 0 };
    for path in paths {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (p, l, c) = decode_cifar_binary(&bytes, keep, 0)?;
        points.extend(p);
        labels.extend(l);
        counts.total += c.total;
        counts.kept += c.kept;
        counts.filtered += c.filtered;
    }
    let mut ds = Dataset::new("cifar2", points, labels)?;
    ds.meta.kind = "cifar_binary".into();
    ds.meta.params = serde_json::json!({
        "keep": [keep.0, keep.1],
        "files": paths.iter().map(|p| p.as_ref().display().to_string()).collect::<Vec<_>>(),
        "counts": counts,
    });
    Ok((ds, counts))
}

/// Channel-averaged, block-averaged reduction of square images:
/// `channels × side × side` features become `(side/factor)²` grey values.
pub fn downscale_grey(ds: &Dataset, channels: usize, side: usize, factor: usize) -> Result<Dataset, DataError> {
    if factor == 0 || side % factor != 0 || ds.dim() != channels * side * side {
        return Err(DataError::InvalidParams(format!(
            "cannot reduce {}-dim points as {channels}×{side}×{side} by {factor}",
            ds.dim()
        )));
    }
    let out = side / factor;
    let norm = (channels * factor * factor) as f64;
    let points = ds
        .points
        .iter()
        .map(|p| {
            let mut g = vec![0.0; out * out];
            for c in 0..channels {
                for y in 0..side {
                    for x in 0..side {
                        g[(y / factor) * out + x / factor] += p[(c * side + y) * side + x];
                    }
                }
            }
            g.iter_mut().for_each(|v| *v /= norm);
            g
        })
        .collect();
    let mut res = Dataset::new(format!("{}_grey{}", ds.name, out * out), points, ds.labels.clone())?;
    res.meta = ds.meta.clone();
    Ok(res)
}

// ---------------------------------------------------------------------------
// CSV

/// Writes `x0,…,x{n-1},label` with 17 significant digits.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    write_csv_to(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv_to<W: std::io::Write>(ds: &Dataset, w: &mut csv::Writer<W>) -> Result<(), DataError> {
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (p, l) in ds.points.iter().zip(&ds.labels) {
        let mut row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
        row.push(l.to_string());
        w.write_record(&row)?;
    }
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut ds = read_csv_from(file)?;
    ds.name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    Ok(ds)
}

pub fn read_csv_from<R: Read>(reader: R) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(DataError::Empty),
        Some(h) => h?,
    };
    let width = header.len();
    let ok_header = width >= 1
        && header.get(width - 1) == Some("label")
        && (0..width - 1).all(|k| header.get(k) == Some(format!("x{k}").as_str()));
    if !ok_header {
        return Err(DataError::Parse { line: 1, msg: "expected header x0,…,x{n-1},label".into() });
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(DataError::Parse { line, msg: format!("{} fields, expected {width}", rec.len()) });
        }
        let mut p = Vec::with_capacity(width - 1);
        for k in 0..width - 1 {
            let cell = &rec[k];
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse { line, msg: format!("non-numeric cell {cell:?}") })?;
            if !v.is_finite() {
                return Err(DataError::Parse { line, msg: format!("non-finite cell {cell:?}") });
            }
            p.push(v);
        }
        let cell = &rec[width - 1];
        let l: i64 = cell.trim().parse().map_err(|_| DataError::Parse { line, msg: format!("bad label {cell:?}") })?;
        points.push(p);
        labels.push(l);
    }
    Dataset::new("dataset", points, labels)
}

/// Path of the metadata document written next to `path`.
pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_sidecar<T: Serialize>(path: impl AsRef<Path>, meta: &T) -> Result<PathBuf, DataError> {
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(meta)?)?;
    Ok(side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        for name in ["three_cluster", "poor_margin_pair", "blobs", "separable_random", "affine_support"] {
            let kind = DatasetKind::from_name(name).unwrap();
            let a = generate(&kind, 5).unwrap();
            let b = generate(&kind, 5).unwrap();
            assert_eq!(a, b, "{name}");
            let mut ba = csv::Writer::from_writer(Vec::new());
            let mut bb = csv::Writer::from_writer(Vec::new());
            write_csv_to(&a, &mut ba).unwrap();
            write_csv_to(&b, &mut bb).unwrap();
            assert_eq!(ba.into_inner().unwrap(), bb.into_inner().unwrap());
        }
    }

    #[test]
    fn affine_support_sits_on_its_line() {
        let ds = generate(&DatasetKind::AffineSupport(AffineSupportParams { extra_per_class: 3, ..Default::default() }), 1).unwrap();
        assert_eq!(ds.points[0], vec![2.0, 1.0]);
        assert_eq!(ds.points[1], vec![-1.0, 1.0]);
        assert_eq!(ds.meta.gamma_opt, Some(1.5));
    }

    #[test]
    fn poor_margin_pair_is_centered() {
        let ds = generate(&DatasetKind::from_name("poor_margin_pair").unwrap(), 3).unwrap();
        for k in 0..2 {
            let m: f64 = ds.points.iter().map(|p| p[k]).sum::<f64>() / ds.len() as f64;
            assert!(m.abs() < 1e-12);
        }
        assert_eq!(ds.points[0][1], ds.points[1][1]);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = DatasetKind::Blobs(BlobsParams { centers: vec![vec![0.0]], ..Default::default() });
        assert!(matches!(generate(&bad, 0), Err(DataError::InvalidParams(_))));
        let bad = DatasetKind::ThreeCluster(ThreeClusterParams { sigma: -1.0, ..Default::default() });
        assert!(generate(&bad, 0).is_err());
        assert!(DatasetKind::from_name("spiral").is_err());
    }

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn cifar_filter_and_scale() {
        let mut bytes = record(0, |_| 255);
        bytes.extend(record(3, |_| 0));
        let (p, l, c) = decode_cifar_binary(&bytes, (0, 7), 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(l, vec![1]);
        assert!(p[0].iter().all(|&v| v == 1.0));
        assert_eq!(c, CifarCounts { total: 2, kept: 1, filtered: 1 });
    }

    #[test]
    fn cifar_format_errors() {
        let mut bytes = record(0, |_| 1);
        bytes.extend([0u8; 10]);
        match decode_cifar_binary(&bytes, (0, 7), 0) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
        let mut bytes = record(7, |_| 1);
        bytes.extend(record(12, |_| 1));
        match decode_cifar_binary(&bytes, (0, 7), 0) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_matches_byte_decoder() {
        let mut bytes = Vec::new();
        let labels = [0u8, 7, 1, 7, 0, 9, 7, 2, 0, 0];
        for (r, &l) in labels.iter().enumerate() {
            bytes.extend(record(l, |i| ((i * 31 + r * 7) % 256) as u8));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &bytes).unwrap();
        let (ds, counts) = load_cifar_binary(&[&path], (CIFAR_AIRPLANE, CIFAR_HORSE)).unwrap();
        assert_eq!(counts.kept + counts.filtered, counts.total);
        let mut k = 0;
        for (r, &l) in labels.iter().enumerate() {
            if l != 0 && l != 7 {
                continue;
            }
            assert_eq!(ds.labels[k], if l == 0 { 1 } else { -1 });
            // red plane pixel (y=3, x=5) is byte 1 + 3*32 + 5; blue plane (y=0,x=0) is byte 1 + 2048
            let red = bytes[r * 3073 + 1 + 3 * 32 + 5];
            assert_eq!(ds.points[k][3 * 32 + 5], f64::from(red) / 255.0);
            let blue = bytes[r * 3073 + 1 + 2048];
            assert_eq!(ds.points[k][2048], f64::from(blue) / 255.0);
            k += 1;
        }
        assert_eq!(k, ds.len());
        assert!(ds.points.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn downscale_averages_blocks() {
        let p: Vec<f64> = (0..3 * 4 * 4).map(|i| (i % 16) as f64).collect();
        let ds = Dataset::new("t", vec![p], vec![1]).unwrap();
        let g = downscale_grey(&ds, 3, 4, 2).unwrap();
        assert_eq!(g.points[0], vec![2.5, 4.5, 10.5, 12.5]);
        assert!(downscale_grey(&ds, 3, 4, 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate(&DatasetKind::from_name("blobs").unwrap(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        write_csv(&ds, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.points, ds.points);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn csv_edge_cases() {
        assert!(matches!(read_csv_from("".as_bytes()), Err(DataError::Empty)));
        let ds = read_csv_from("x0,x1,label\n".as_bytes()).unwrap();
        assert!(ds.is_empty());
        match read_csv_from("x0,x1,label\n1,2,1\n3,1\n".as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match read_csv_from("x0,label\n1,1\nfoo,1\n".as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_partitions() {
        let ds = generate(&DatasetKind::from_name("blobs").unwrap(), 2).unwrap();
        let (tr, te) = ds.split(0.2, 4).unwrap();
        assert_eq!(tr.len() + te.len(), ds.len());
        assert_eq!(te.len(), 10);
    }
}
