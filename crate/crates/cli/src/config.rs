use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pexcite::data_io::{self, Dataset, DatasetKind, ThreeClusterParams};
use pexcite::net::{Activation, ConvNetSpec, Network, PerturbationSet};
use pexcite::optim::{Loss, TrainConfig};
use pexcite::robust::AttackConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything a run depends on. Values come from the defaults below, then
/// the config file, then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub loss: LossName,
    pub optimizer: Optimizer,
    pub data: DataSpec,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub perturb: PerturbSpec,
    pub attack: AttackConfig,
    pub raster: RasterSpec,
    pub equiv: EquivSpec,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            loss: LossName::Se,
            optimizer: Optimizer::Gd,
            data: DataSpec::default(),
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            perturb: PerturbSpec::default(),
            attack: AttackConfig::default(),
            raster: RasterSpec::default(),
            equiv: EquivSpec::default(),
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Se,
    Ce,
}

impl LossName {
    pub fn loss(self) -> Loss {
        match self {
            LossName::Se => Loss::SquaredError,
            LossName::Ce => Loss::CrossEntropy,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossName::Se => "se",
            LossName::Ce => "ce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    Sgd,
}

/// At most one source: a generator, a dataset CSV, or CIFAR-10 binary files.
/// With none given, the three-cluster generator at its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub generator: Option<DatasetKind>,
    pub csv: Option<PathBuf>,
    pub cifar: Option<CifarSpec>,
    /// Generator seed; the run seed when absent.
    pub seed: Option<u64>,
    /// Held-out share, split with the run seed.
    pub test_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            generator: None,
            csv: None,
            cifar: None,
            seed: None,
            test_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CifarSpec {
    pub files: Vec<PathBuf>,
    pub keep: (u8, u8),
    /// Grey block-average factor; 4 turns 32×32×3 into 64 features. 1 keeps raw pixels.
    pub downscale: usize,
    /// Use at most this many records after filtering (0 keeps all).
    pub limit: usize,
}

impl Default for CifarSpec {
    fn default() -> Self {
        CifarSpec { files: Vec::new(), keep: (0, 7), downscale: 4, limit: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    /// `x ↦ W (V x + b)_+`, input width taken from the data.
    TwoLayer { hidden: usize },
    /// Hidden widths between data input and a scalar output.
    Dense { hidden: Vec<usize>, activation: Activation, output_bias: bool },
    /// Bias-free linear chain with these hidden widths and a scalar output.
    LinearChain { hidden: Vec<usize> },
    Conv(ConvNetSpec),
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::TwoLayer { hidden: 16 }
    }
}

impl ArchSpec {
    pub fn build(&self, input: usize, seed: u64) -> Result<Network> {
        let widths = |hidden: &[usize]| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(1);
            s
        };
        Ok(match self {
            ArchSpec::TwoLayer { hidden } => Network::two_layer(input, *hidden, 1, seed)?,
            ArchSpec::Dense { hidden, activation, output_bias } => {
                Network::dense_with_bias(&widths(hidden), *activation, Activation::Identity, *output_bias, seed)?
            }
            ArchSpec::LinearChain { hidden } => Network::linear_chain(&widths(hidden), seed)?,
            ArchSpec::Conv(spec) => {
                let expect = spec.in_channels * spec.height * spec.width;
                if expect != input {
                    bail!("conv architecture expects {expect} inputs, data has {input}");
                }
                spec.build(seed)?
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbLayers {
    All,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    /// Radii swept by `pe-train` and `margins`; each applies to every perturbed layer.
    pub radii: Vec<f64>,
    pub layers: PerturbLayers,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec { radii: vec![0.0], layers: PerturbLayers::All }
    }
}

impl PerturbSpec {
    pub fn set(&self, net: &Network, radius: f64) -> Result<PerturbationSet> {
        let l = net.layers().len();
        Ok(match self.layers {
            PerturbLayers::All => PerturbationSet::uniform(l, radius)?,
            PerturbLayers::Input => PerturbationSet::input_only(l, radius)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterSpec {
    /// `[xmin, xmax, ymin, ymax]`; the padded data box when absent.
    pub bbox: Option<[f64; 4]>,
    pub pad: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for RasterSpec {
    fn default() -> Self {
        RasterSpec { bbox: None, pad: 1.0, nx: 200, ny: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivSpec {
    pub p: f64,
    pub m: f64,
    pub epsilons: Vec<f64>,
}

impl Default for EquivSpec {
    fn default() -> Self {
        EquivSpec { p: 2.0, m: 2.0, epsilons: (1..=10).map(|k| k as f64 / 10.0).collect() }
    }
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub radii: Option<Vec<f64>>,
    pub loss: Option<LossName>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        if let Some(r) = &ov.radii {
            cfg.perturb.radii = r.clone();
        }
        if let Some(l) = ov.loss {
            cfg.loss = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        let sources = [self.data.generator.is_some(), self.data.csv.is_some(), self.data.cifar.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 {
            bail!("data takes only one of generator, csv, cifar");
        }
        if let Some(p) = &self.data.csv {
            if !p.exists() {
                bail!("dataset file {} does not exist", p.display());
            }
        }
        if let Some(c) = &self.data.cifar {
            if c.files.is_empty() {
                bail!("cifar source lists no files");
            }
            if let Some(f) = c.files.iter().find(|f| !f.exists()) {
                bail!("cifar file {} does not exist", f.display());
            }
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            bail!("test_fraction {} outside [0,1)", self.data.test_fraction);
        }
        if self.perturb.radii.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            bail!("radii must be finite and nonnegative");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the resolved config, output directory excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let text = serde_json::to_string(&c)?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(format!("{digest:x}"))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig { seed, ..self.attack }
    }

    /// `(train, test)`; test is empty when `test_fraction` is 0.
    pub fn dataset(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let full = self.full_dataset(seed)?;
        Ok(full.split(self.data.test_fraction, seed)?)
    }

    pub fn full_dataset(&self, seed: u64) -> Result<Dataset> {
        let d = &self.data;
        if let Some(p) = &d.csv {
            return Ok(data_io::read_csv(p)?);
        }
        let Some(c) = &d.cifar else {
            let kind = d.generator.clone().unwrap_or(DatasetKind::ThreeCluster(ThreeClusterParams::default()));
            return Ok(data_io::generate(&kind, d.seed.unwrap_or(seed))?);
        };
        let (mut ds, _) = data_io::load_cifar_binary(&c.files, c.keep)?;
        if c.limit > 0 && ds.len() > c.limit {
            let idx: Vec<usize> = (0..c.limit).collect();
            ds = ds.subset(&idx);
        }
        if c.downscale > 1 {
            ds = data_io::downscale_grey(&ds, 3, 32, c.downscale)?;
        }
        Ok(ds)
    }
}

/// Parses `0.005,0.01,0.02`.
pub fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seeds = [3, 4]\nloss = \"ce\"\n[perturb]\nradii = [0.1]\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.loss, LossName::Ce);
        let ov = Overrides { seed: Some(9), radii: Some(vec![0.0, 0.02]), loss: Some(LossName::Se), ..Default::default() };
        let cfg = ExperimentConfig::load(Some(&path), &ov).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.perturb.radii, vec![0.0, 0.02]);
        assert_eq!(cfg.loss, LossName::Se);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out: "elsewhere".into(), ..a.clone() };
        let c = ExperimentConfig { seeds: vec![1], ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn generator_table_parses() {
        let text = "[data.generator]\nkind = \"blobs\"\nper_class = 7\n[arch]\ntype = \"linear_chain\"\nhidden = [3, 3]\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        match cfg.data.generator {
            Some(DatasetKind::Blobs(p)) => assert_eq!(p.per_class, 7),
            other => panic!("{other:?}"),
        }
        let net = cfg.arch.build(2, 0).unwrap();
        assert_eq!(net.layers().len(), 3);
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        for text in ["seeds = []\n", "bogus = 1\n", "[data]\ncsv = \"/nonexistent.csv\"\n", "[data]\ncsv = \"c.toml\"\n[data.generator]\nkind = \"blobs\"\n", "[train]\nstep_size = -1.0\n"] {
            std::fs::write(&path, text).unwrap();
            assert!(ExperimentConfig::load(Some(&path), &Overrides::default()).is_err(), "{text}");
        }
        assert!(ExperimentConfig::load(Some(&dir.path().join("missing.toml")), &Overrides::default()).is_err());
    }

    #[test]
    fn radius_list_parses() {
        assert_eq!(parse_list("0.005, 0.01,0.02").unwrap(), vec![0.005, 0.01, 0.02]);
        assert!(parse_list("0.1,x").is_err());
    }
}
