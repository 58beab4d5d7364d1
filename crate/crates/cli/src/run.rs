use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Output directory of one invocation, `<out>/<subcommand>-<hash prefix>`.
/// Artifacts inside carry the full config hash and their seed; timestamps
/// go only into the `run.meta.json` sidecar.
pub struct RunDir {
    pub dir: PathBuf,
    pub hash: String,
    pub subcommand: &'static str,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_hash: &'a str,
    seed: Option<u64>,
    result: &'a T,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_hash: &'a str,
    args: Vec<String>,
    started_unix: u64,
}

const HASH_PREFIX: usize = 16;

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, subcommand: &'static str) -> Result<Self> {
        let hash = cfg.hash()?;
        let dir = cfg.out.join(format!("{subcommand}-{}", &hash[..HASH_PREFIX]));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let run = RunDir { dir, hash, subcommand };
        run.write_raw("config.json", &serde_json::to_string_pretty(&Envelope {
            tool: "pexcite",
            version: VERSION,
            subcommand,
            config_hash: &run.hash,
            seed: None,
            result: cfg,
        })?)?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let meta = RunMeta {
            tool: "pexcite",
            version: VERSION,
            subcommand,
            config_hash: &run.hash,
            args: std::env::args().collect(),
            started_unix,
        };
        run.write_raw("run.meta.json", &serde_json::to_string_pretty(&meta)?)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_raw(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// JSON document wrapped with tool version, config hash and seed.
    pub fn write_json<T: Serialize>(&self, name: &str, seed: Option<u64>, value: &T) -> Result<PathBuf> {
        let env = Envelope { tool: "pexcite", version: VERSION, subcommand: self.subcommand, config_hash: &self.hash, seed, result: value };
        self.write_raw(name, &(serde_json::to_string_pretty(&env)? + "\n"))
    }

    /// Text artifact preceded by one `#` provenance line.
    pub fn write_tagged(&self, name: &str, seed: Option<u64>, body: &str) -> Result<PathBuf> {
        let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let head = format!("# pexcite {VERSION} {} config_hash={} seed={seed}\n", self.subcommand, self.hash);
        self.write_raw(name, &(head + body))
    }
}

pub fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

/// File-name tag for an excitation radius, e.g. `r0.02`.
pub fn radius_tag(r: f64) -> String {
    format!("r{r}")
}
