//! Run directory layout and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use memlab_core::training::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Success,
    Failed,
}

/// Seeds that feed a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub corpus: u64,
    pub sequences: u64,
    pub shuffle: u64,
    pub offsets: u64,
    pub pool: u64,
    pub sweep: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: Status,
    pub error: Option<String>,
    pub preset: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub software_version: String,
    pub parallel: bool,
    /// Completed stages, in order.
    pub stages: Vec<String>,
    /// Realized occurrences per injected sequence, keyed by arm.
    pub injection_counts: BTreeMap<String, Vec<usize>>,
    /// Share of stream examples replaced, keyed by arm.
    pub injected_fraction: BTreeMap<String, f64>,
    /// SHA-256 of every artifact, by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            status: Status::Running,
            error: None,
            preset: cfg.preset.clone(),
            config_hash: cfg.hash(),
            seeds: Seeds {
                init: cfg.init_seed,
                corpus: cfg.corpus.seed,
                sequences: cfg.injection.sequence_seed,
                shuffle: cfg.injection.shuffle_seed,
                offsets: cfg.injection.offset_seed,
                pool: cfg.analysis.pool_seed,
                sweep: cfg.sweep.seeds.clone(),
            },
            software_version: VERSION.into(),
            parallel: memlab_core::par::is_parallel(),
            stages: Vec::new(),
            injection_counts: BTreeMap::new(),
            injected_fraction: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// SHA-256 of the manifest's canonical JSON.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest encodes")))
    }
}

/// An open run directory.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Creates the layout and writes `config.json`. An existing manifest for
    /// the same config is resumed; a different config is an error.
    pub fn create(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.output_dir.clone();
        for sub in ["checkpoints", "reports", "plots"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        let mut manifest = Manifest::new(cfg);
        let mpath = root.join("manifest.json");
        if mpath.exists() {
            let old: Manifest = serde_json::from_slice(&fs::read(&mpath)?).context("reading manifest.json")?;
            anyhow::ensure!(
                old.config_hash == manifest.config_hash,
                "{} holds a run with config {} but this config hashes to {}; choose another output_dir",
                root.display(),
                old.config_hash,
                manifest.config_hash
            );
            manifest.artifacts = old.artifacts;
            manifest.stages = old.stages;
            manifest.injection_counts = old.injection_counts;
            manifest.injected_fraction = old.injected_fraction;
        }
        let mut run = Self { root, manifest };
        run.write_json("config.json", cfg)?;
        run.save_manifest()?;
        Ok(run)
    }

    /// Opens a run made earlier, returning its config.
    pub fn open(root: &Path) -> Result<(Self, ExperimentConfig)> {
        let cfg: ExperimentConfig = serde_json::from_slice(&fs::read(root.join("config.json")).with_context(|| {
            format!("{} has no config.json", root.display())
        })?)?;
        let manifest: Manifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?).context("reading manifest.json")?;
        Ok((Self { root: root.to_path_buf(), manifest }, cfg))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        // config.json names its own output directory; config_hash covers it
        if rel != "manifest.json" && rel != "config.json" {
            self.manifest.artifacts.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        }
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, v: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        serde_json::from_slice(&fs::read(&p).with_context(|| format!("missing {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))
    }

    pub fn save_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Result<()> {
        self.write_bytes(rel, &ck.to_bytes())
    }

    pub fn load_checkpoint(&self, rel: &str) -> Result<Checkpoint> {
        let p = self.path(rel);
        Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    pub fn stage_done(&mut self, stage: &str) -> Result<()> {
        if !self.manifest.stages.iter().any(|s| s == stage) {
            self.manifest.stages.push(stage.to_string());
        }
        self.save_manifest()
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.manifest.stages.iter().any(|s| s == stage)
    }

    pub fn finish(&mut self, outcome: &Result<()>) -> Result<()> {
        match outcome {
            Ok(()) => {
                self.manifest.status = Status::Success;
                self.manifest.error = None;
            }
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.save_manifest()
    }

    pub fn save_manifest(&mut self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        fs::write(self.path("manifest.json"), bytes)?;
        Ok(())
    }
}
