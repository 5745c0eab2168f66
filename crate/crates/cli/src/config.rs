//! Experiment configuration: one JSON document per run.
//!
//! A run starts from the defaults of its preset; a user file is deep-merged
//! over them and `--set a.b=value` overrides are applied last.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memlab_core::data::CorpusSpec;
use memlab_core::metrics::MeasureOptions;
use memlab_core::model::ModelConfig;
use memlab_core::unlearning::{AscentParams, Method, PruneParams, SparseParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const PRESETS: [&str; 6] = ["control-vs-treatment", "single-shot", "ckpt-sweep", "ood", "frozen-ablation", "unlearning"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub injection: InjectionConfig,
    pub training: TrainingConfig,
    pub analysis: AnalysisConfig,
    pub unlearning: UnlearningConfig,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
    /// Shared store of pretraining checkpoints, keyed by everything that
    /// determines them. `None` keeps pretraining inside the run directory.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub window: usize,
    pub random_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Original,
    Shuffled,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    /// Plain text, one sequence per line; overrides grammar sampling.
    pub sequences_file: Option<PathBuf>,
    pub n_sequences: usize,
    pub sequence_seed: u64,
    pub kind: SequenceKind,
    pub shuffle_seed: u64,
    /// Steps between occurrences of one sequence; 0 injects each once.
    pub period: usize,
    pub occurrences: usize,
    pub offset_seed: u64,
    /// Disjointness threshold against the corpus, in tokens. 0 skips the check.
    pub min_overlap_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Pretraining step the control and treatment runs continue from.
    pub start_step: usize,
    /// Defaults to `period * occurrences` (or `post_steps` for single-shot).
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask: String,
    /// Optimizer warm-up length `t`; the warm-up starts at `start_step - t`.
    pub warmup_steps: usize,
    /// Start from zero moments instead of a warmed or inherited state.
    pub fresh_optimizer: bool,
    pub checkpoint_every: usize,
    /// Measure the injected sequences every this many steps (0: final only).
    pub trace_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub measure: MeasureOptions,
    pub intervention_samples: usize,
    pub threshold: f64,
    pub dependency_steps: usize,
    /// At most this many sequences get a dependency profile.
    pub dependency_sequences: usize,
    pub trigger_len: usize,
    pub pool_size: usize,
    pub pool_seed: u64,
    pub cross: CrossConfig,
    pub stress: StressConfig,
    /// Stages run by `preset` after training.
    pub stages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossConfig {
    pub trigger_len: usize,
    pub n_max: usize,
    pub stride: usize,
    pub per_sequence: usize,
    pub reuse_floor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstituteSource {
    Grammar,
    Embedding,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressConfig {
    /// Position-family size; `None` scales 20 by prompt length / 50.
    pub t: Option<usize>,
    pub substitutions: usize,
    pub substitutes: SubstituteSource,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearningConfig {
    pub methods: Vec<Method>,
    /// Tasks as JSON; otherwise derived from memorized injected sequences.
    pub tasks_file: Option<PathBuf>,
    pub max_tasks: usize,
    pub prompt_len: usize,
    pub continuation_len: usize,
    pub retain_windows: usize,
    pub retain_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub batch_sizes: Vec<usize>,
    pub ages: Vec<usize>,
    pub seeds: Vec<u64>,
    pub masks: Vec<String>,
    /// Single-shot: steps trained (and measured) after the injection step.
    pub post_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "control-vs-treatment".into(),
            model: ModelConfig::default(),
            init_seed: 0,
            corpus: CorpusConfig { seed: 0, window: 96, random_fraction: 0.05 },
            pretrain: PretrainConfig { steps: 8000, batch_size: 2, lr: 1e-3, weight_decay: 0.01 },
            injection: InjectionConfig {
                sequences_file: None,
                n_sequences: 8,
                sequence_seed: 99,
                kind: SequenceKind::Both,
                shuffle_seed: 0,
                period: 50,
                occurrences: 30,
                offset_seed: 5,
                min_overlap_tokens: 32,
            },
            training: TrainingConfig {
                start_step: 8000,
                steps: None,
                batch_size: 1,
                lr: 1e-3,
                weight_decay: 0.01,
                mask: "all".into(),
                warmup_steps: 200,
                fresh_optimizer: false,
                checkpoint_every: 0,
                trace_every: 0,
            },
            analysis: AnalysisConfig {
                measure: MeasureOptions::default(),
                intervention_samples: 16,
                threshold: 0.1,
                dependency_steps: 8,
                dependency_sequences: 4,
                trigger_len: 32,
                pool_size: 64,
                pool_seed: 1,
                cross: CrossConfig { trigger_len: 24, n_max: 4, stride: 8, per_sequence: 3, reuse_floor: 0.1 },
                stress: StressConfig { t: None, substitutions: 10, substitutes: SubstituteSource::Grammar, seed: 0 },
                stages: vec!["measure".into()],
            },
            unlearning: UnlearningConfig {
                methods: default_methods(),
                tasks_file: None,
                max_tasks: 16,
                prompt_len: 16,
                continuation_len: 16,
                retain_windows: 32,
                retain_seed: 7,
            },
            sweep: SweepConfig {
                batch_sizes: vec![8, 32, 128],
                ages: vec![500, 2000, 8000],
                seeds: vec![0, 1, 2],
                masks: vec!["all".into(), "mlp_only".into(), "attention_only".into()],
                post_steps: 1,
            },
            output_dir: PathBuf::from("runs/default"),
            cache_dir: None,
        }
    }
}

fn default_methods() -> Vec<Method> {
    let ascent = AscentParams { steps: 10, lr: 3e-5, weight_decay: 1.0 };
    vec![
        Method::GradientAscent(ascent),
        Method::SparseFinetune(SparseParams { fraction: 0.001, ascent }),
        Method::NeuronPrune(PruneParams { fraction: 0.001, steps: 200, ..PruneParams::default() }),
    ]
}

impl ExperimentConfig {
    /// Defaults for a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self { preset: name.into(), output_dir: PathBuf::from("runs").join(name), ..Self::default() };
        match name {
            "control-vs-treatment" => {
                c.analysis.stages = vec!["measure".into(), "depend".into(), "cross".into()];
                c.training.trace_every = 250;
            }
            "single-shot" => {
                c.injection.kind = SequenceKind::Original;
                c.injection.period = 0;
                c.injection.occurrences = 1;
                c.training.fresh_optimizer = true;
                c.training.warmup_steps = 0;
            }
            "ckpt-sweep" => {
                c.injection.kind = SequenceKind::Original;
                c.injection.period = 20;
                c.injection.occurrences = 15;
            }
            "ood" => {
                c.injection.n_sequences = 20;
                c.injection.period = 250;
                c.injection.occurrences = 10;
            }
            "frozen-ablation" => {
                c.injection.kind = SequenceKind::Original;
                c.injection.period = 10;
                c.injection.occurrences = 30;
            }
            "unlearning" => {
                c.analysis.stages = vec!["measure".into(), "unlearn".into()];
                // heavier exposure so most sequences yield a full 32/32 task
                c.injection.period = 20;
                c.injection.occurrences = 40;
                c.unlearning.prompt_len = 32;
                c.unlearning.continuation_len = 32;
            }
            _ => bail!("unknown preset {name:?}; known: {}", PRESETS.join(", ")),
        }
        Ok(c)
    }

    /// Preset defaults, then `file` merged over them, then `sets`.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = Value::Null;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            doc = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        }
        let name = match (preset, doc.get("preset").and_then(Value::as_str)) {
            (Some(n), _) => n.to_string(),
            (None, Some(n)) => n.to_string(),
            (None, None) => "control-vs-treatment".into(),
        };
        let mut base = serde_json::to_value(Self::preset(&name)?)?;
        merge(&mut base, doc);
        base["preset"] = Value::String(name);
        for s in sets {
            set_path(&mut base, s)?;
        }
        let cfg: Self = serde_json::from_value(base).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !PRESETS.contains(&self.preset.as_str()) {
            bail!("unknown preset {:?}", self.preset);
        }
        if self.corpus.window < 16 || self.corpus.window > self.model.max_context {
            bail!("corpus window {} must lie in [16, max_context {}]", self.corpus.window, self.model.max_context);
        }
        if self.pretrain.batch_size == 0 || self.training.batch_size == 0 {
            bail!("batch sizes must be positive");
        }
        if self.training.lr <= 0.0 || self.pretrain.lr <= 0.0 {
            bail!("learning rates must be positive");
        }
        if self.training.warmup_steps > self.training.start_step {
            bail!("warmup_steps {} exceeds start_step {}", self.training.warmup_steps, self.training.start_step);
        }
        if self.injection.period > 0 && self.injection.occurrences == 0 {
            bail!("periodic injection needs at least one occurrence");
        }
        memlab_core::training::TrainableMask::by_name(&self.training.mask)?;
        for m in &self.sweep.masks {
            memlab_core::training::TrainableMask::by_name(m)?;
        }
        for s in &self.analysis.stages {
            if !["measure", "depend", "cross", "unlearn", "stress"].contains(&s.as_str()) {
                bail!("unknown analysis stage {s:?}");
            }
        }
        if let Some(f) = &self.injection.sequences_file {
            if !f.exists() {
                bail!("sequences file {} not found", f.display());
            }
        }
        if let Some(f) = &self.unlearning.tasks_file {
            if !f.exists() {
                bail!("tasks file {} not found", f.display());
            }
        }
        Ok(())
    }

    /// Continued-training steps per arm.
    pub fn treatment_steps(&self) -> usize {
        self.training.steps.unwrap_or(if self.injection.period == 0 {
            self.sweep.post_steps.max(1)
        } else {
            self.injection.period * self.injection.occurrences
        })
    }

    pub fn corpus_spec(&self, n_windows: usize) -> CorpusSpec {
        CorpusSpec { n_windows, window: self.corpus.window, seed: self.corpus.seed, random_fraction: self.corpus.random_fraction }
    }

    /// SHA-256 of the canonical JSON encoding, leaving out the output and
    /// cache locations (they do not affect results).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["output_dir"] = Value::Null;
        v["cache_dir"] = Value::Null;
        hash_json(&v)
    }

    /// Key of the pretraining trajectory: everything that determines it.
    pub fn pretrain_key(&self) -> String {
        hash_json(&serde_json::json!({
            "model": self.model,
            "init_seed": self.init_seed,
            "corpus": self.corpus,
            "pretrain": self.pretrain,
        }))
    }
}

fn hash_json(v: &Value) -> String {
    // serde_json maps are sorted, so the encoding is canonical
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json encodes")))
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (_, Value::Null) => {}
        (b, p) => *b = p,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string.
pub fn set_path(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').with_context(|| format!("override {assignment:?} is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*k) {
                    bail!("unknown config key {:?} in {path:?}", keys[..=i].join("."));
                }
                map.get_mut(*k).expect("checked")
            }
            Value::Array(items) => {
                let idx: usize = k.parse().with_context(|| format!("{k:?} is not an array index in {path:?}"))?;
                let n = items.len();
                items.get_mut(idx).with_context(|| format!("index {idx} out of range ({n}) in {path:?}"))?
            }
            Value::Null => bail!("{:?} is null; set the whole value with JSON", keys[..i].join(".")),
            _ => bail!("{:?} is not an object", keys[..i].join(".")),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves() {
        for p in PRESETS {
            let c = ExperimentConfig::resolve(Some(p), None, &[]).unwrap();
            assert_eq!(c.preset, p);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn dot_path_overrides() {
        let c = ExperimentConfig::resolve(
            Some("ood"),
            None,
            &["training.lr=0.005".into(), "analysis.measure.stride=4".into(), "output_dir=/tmp/x".into(), "sweep.ages.1=900".into()],
        )
        .unwrap();
        assert_eq!(c.training.lr, 0.005);
        assert_eq!(c.analysis.measure.stride, 4);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.sweep.ages, vec![500, 900, 8000]);
        assert!(ExperimentConfig::resolve(None, None, &["training.nope=1".into()]).is_err());
        assert!(ExperimentConfig::resolve(None, None, &["training.lr".into()]).is_err());
    }

    #[test]
    fn file_merges_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"preset": "frozen-ablation", "injection": {"period": 12}}"#).unwrap();
        let c = ExperimentConfig::resolve(None, Some(&f), &[]).unwrap();
        assert_eq!(c.preset, "frozen-ablation");
        assert_eq!(c.injection.period, 12);
        assert_eq!(c.injection.occurrences, 30);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.training.lr = 2e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.pretrain_key(), b.pretrain_key());
        let c = ExperimentConfig { output_dir: "elsewhere".into(), cache_dir: Some("c".into()), ..a.clone() };
        assert_eq!(a.hash(), c.hash());
    }
}
