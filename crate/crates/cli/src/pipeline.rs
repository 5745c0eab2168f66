//! Stages of an experiment and the presets that chain them.

use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, ensure, Context, Result};
use memlab_core::data::{
    build_stream, count_frequency, load_sequence_file, sample_grammar_sequences, save_sequence_file, shuffle_sequence,
    verify_disjoint, Corpus, DisjointReport, Injection, InjectionSchedule,
};
use memlab_core::interventions::{
    cross_model_scan, dependency_profile, select_examples, CrossModelResult, DependencyOptions, DependencyResult, LocationSet,
};
use memlab_core::metrics::{forced_match_len, mean_length, measure_all, MemorizationReport, TracePoint};
use memlab_core::stress_tests::{
    evaluate_suite, scaled_t, summarize, write_csv, EmbeddingNeighbors, GrammarTable, NoSubstitutes, SimilarTokens, StressRow,
    StressSuite, SuiteResult,
};
use memlab_core::tokens::{ByteTokenizer, TokenSeq};
use memlab_core::training::{
    train, warmup_optimizer_state, AdamW, Checkpoint, CheckpointKind, OptimizerState, Provenance, TrainOptions, TrainableMask,
};
use memlab_core::unlearning::{load_tasks, save_tasks, unlearn, UnlearnReport, UnlearnTask};
use memlab_core::LabError;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SequenceKind, SubstituteSource};
use crate::rundir::RunDir;

/// An injected sequence with a stable id (`orig-3`, `shuf-3`, `file-0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: String,
    pub seq: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub id: String,
    pub period: usize,
    pub offset: usize,
    pub corpus_frequency: usize,
    pub disjoint: Option<DisjointReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub steps: usize,
    pub batch_size: usize,
    pub injected_fraction: f64,
    pub realized_counts: Vec<usize>,
    pub sequences: Vec<InjectionRecord>,
}

/// Measurements of one arm, one entry per injected sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub step: u64,
    pub mean_length: f64,
    pub mean_perplexity: f64,
    pub losses: Vec<f64>,
    pub reports: Vec<MemorizationReport>,
}

fn lab(e: anyhow::Error) -> LabError {
    LabError::Invalid(format!("{e:#}"))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn mean_perplexity(reports: &[MemorizationReport]) -> f64 {
    mean(reports.iter().map(|r| r.perplexity))
}

/// Owns the config, run directory and lazily built shared data.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub run: RunDir,
    corpus: Option<Corpus>,
    pretrained: BTreeMap<usize, Checkpoint>,
    /// Write each arm's final checkpoint.
    save_arms: bool,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig, run: RunDir) -> Self {
        Self { cfg, run, corpus: None, pretrained: BTreeMap::new(), save_arms: true }
    }

    /// Checkpoint ages that arms continue from.
    fn start_ages(&self) -> Vec<usize> {
        if self.cfg.preset == "ckpt-sweep" {
            self.cfg.sweep.ages.clone()
        } else {
            vec![self.cfg.training.start_step]
        }
    }

    fn arm_batch_sizes(&self) -> Vec<usize> {
        if self.cfg.preset == "single-shot" {
            self.cfg.sweep.batch_sizes.clone()
        } else {
            vec![self.cfg.training.batch_size]
        }
    }

    /// Windows the run reads: pretraining plus every continued arm.
    pub fn corpus_windows(&self) -> usize {
        let bp = self.cfg.pretrain.batch_size;
        let max_age = self.start_ages().into_iter().max().unwrap_or(0);
        let max_b = self.arm_batch_sizes().into_iter().max().unwrap_or(1);
        let arms = max_age * bp + self.cfg.treatment_steps() * max_b;
        (self.cfg.pretrain.steps.max(max_age) * bp).max(arms)
    }

    pub fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            self.corpus = Some(Corpus::synthetic(&self.cfg.corpus_spec(self.corpus_windows()))?);
        }
        Ok(self.corpus.as_ref().expect("built above"))
    }

    pub fn hyper(&self) -> AdamW {
        AdamW { lr: self.cfg.training.lr, weight_decay: self.cfg.training.weight_decay, ..AdamW::default() }
    }

    // ---- injection set ----

    /// Injected sequences for sweep seed `shift` (0 for single runs).
    pub fn targets(&self, shift: u64) -> Result<Vec<Target>> {
        let inj = &self.cfg.injection;
        let w = self.cfg.corpus.window;
        let originals: Vec<Target> = match &inj.sequences_file {
            Some(p) => {
                let seqs = load_sequence_file(p, &ByteTokenizer)?;
                for (i, s) in seqs.iter().enumerate() {
                    ensure!(s.len() == w, "{} line {}: {} tokens, window is {w}", p.display(), i + 1, s.len());
                }
                seqs.into_iter().enumerate().map(|(i, seq)| Target { id: format!("file-{i}"), seq }).collect()
            }
            None => sample_grammar_sequences(inj.n_sequences, w, inj.sequence_seed.wrapping_add(shift))
                .into_iter()
                .enumerate()
                .map(|(i, seq)| Target { id: format!("orig-{i}"), seq })
                .collect(),
        };
        let shuffled = || -> Vec<Target> {
            originals
                .iter()
                .enumerate()
                .map(|(i, t)| Target {
                    id: t.id.replacen("orig", "shuf", 1).replacen("file", "shuf", 1),
                    seq: shuffle_sequence(&t.seq, inj.shuffle_seed.wrapping_add(i as u64)),
                })
                .collect()
        };
        Ok(match inj.kind {
            SequenceKind::Original => originals,
            SequenceKind::Shuffled => shuffled(),
            SequenceKind::Both => {
                let s = shuffled();
                originals.into_iter().chain(s).collect()
            }
        })
    }

    pub fn schedule(&self, targets: &[Target], shift: u64) -> Result<InjectionSchedule> {
        let seqs: Vec<TokenSeq> = targets.iter().map(|t| t.seq.clone()).collect();
        let w = self.cfg.corpus.window;
        Ok(if self.cfg.injection.period == 0 {
            InjectionSchedule::new(seqs.into_iter().enumerate().map(|(i, s)| Injection::once(s, i)).collect(), w)?
        } else {
            InjectionSchedule::uniform(seqs, self.cfg.injection.period, w, self.cfg.injection.offset_seed.wrapping_add(shift))?
        })
    }

    /// `inject`: writes the injected set, its schedule and corpus checks.
    pub fn inject(&mut self) -> Result<(Vec<Target>, InjectionSchedule)> {
        let targets = self.targets(0)?;
        let sched = self.schedule(&targets, 0)?;
        let steps = self.cfg.treatment_steps();
        sched.validate(steps)?;
        let min_overlap = self.cfg.injection.min_overlap_tokens;
        let corpus = self.corpus()?.clone();
        let checks: Vec<(usize, Option<DisjointReport>)> = memlab_core::par::map(&targets, |t| {
            (count_frequency(&t.seq, &corpus), (min_overlap > 0).then(|| verify_disjoint(&t.seq, &corpus, min_overlap)))
        });
        let records = targets
            .iter()
            .zip(sched.injections())
            .zip(checks)
            .map(|((t, inj), (f, d))| InjectionRecord {
                id: t.id.clone(),
                period: inj.period,
                offset: inj.offset,
                corpus_frequency: f,
                disjoint: d,
            })
            .collect();
        let report = InjectionReport {
            steps,
            batch_size: self.cfg.training.batch_size,
            injected_fraction: sched.injected_fraction(steps, self.cfg.training.batch_size),
            realized_counts: sched.realized_counts(steps),
            sequences: records,
        };
        let seq_path = self.run.path("reports/sequences.txt");
        let seqs: Vec<TokenSeq> = targets.iter().map(|t| t.seq.clone()).collect();
        if save_sequence_file(&seq_path, &seqs).is_ok() {
            let bytes = fs::read(&seq_path)?;
            self.run.write_bytes("reports/sequences.txt", &bytes)?;
        }
        self.run.write_json("reports/targets.json", &targets)?;
        self.run.write_json("reports/schedule.json", &sched)?;
        self.run.write_json("reports/injection.json", &report)?;
        self.run.stage_done("inject")?;
        Ok((targets, sched))
    }

    // ---- pretraining ----

    fn cache_dir(&self) -> Option<std::path::PathBuf> {
        self.cfg.cache_dir.as_ref().map(|d| d.join(format!("pretrain-{}", &self.cfg.pretrain_key()[..16])))
    }

    fn cached_steps(&self) -> Vec<usize> {
        let Some(dir) = self.cache_dir() else { return Vec::new() };
        let Ok(entries) = fs::read_dir(dir) else { return Vec::new() };
        let mut v: Vec<usize> = entries
            .filter_map(|e| e.ok()?.file_name().to_str()?.strip_prefix("step")?.strip_suffix(".ckpt")?.parse().ok())
            .collect();
        v.sort_unstable();
        v
    }

    /// Pretraining checkpoints at `steps`, from the cache when possible and
    /// otherwise trained from the nearest earlier one. Each is also written
    /// to `checkpoints/stepN.ckpt`.
    pub fn pretrained(&mut self, steps: &[usize]) -> Result<BTreeMap<usize, Checkpoint>> {
        let mut want: Vec<usize> = steps.to_vec();
        want.sort_unstable();
        want.dedup();
        let cache = self.cache_dir();
        let bp = self.cfg.pretrain.batch_size;
        let mut out = BTreeMap::new();
        for &s in &want {
            if let Some(ck) = self.pretrained.get(&s) {
                out.insert(s, ck.clone());
                continue;
            }
            let rel = format!("checkpoints/step{s}.ckpt");
            let ck = if self.run.exists(&rel) {
                self.run.load_checkpoint(&rel)?
            } else {
                let cached = self.cached_steps();
                let from_cache = cache.as_ref().filter(|_| cached.contains(&s)).map(|d| d.join(format!("step{s}.ckpt")));
                let ck = match from_cache {
                    Some(p) => Checkpoint::load(&p)?,
                    None => {
                        let mut start = self.pretrained.range(..s).next_back().map(|(_, c)| c.clone());
                        let best_cached = cached.iter().copied().filter(|&c| c < s).max();
                        if let (Some(c), Some(d)) = (best_cached, &cache) {
                            if start.as_ref().map_or(true, |ck| (ck.step as usize) < c) {
                                start = Some(Checkpoint::load(&d.join(format!("step{c}.ckpt")))?);
                            }
                        }
                        let start = match start {
                            Some(c) => c,
                            None => {
                                let hyper =
                                    AdamW { lr: self.cfg.pretrain.lr, weight_decay: self.cfg.pretrain.weight_decay, ..AdamW::default() };
                                let mut c = Checkpoint::init(self.cfg.model.clone(), self.cfg.init_seed, hyper)?;
                                c.provenance = Provenance { stream_id: self.stream_id(), schedule_id: None };
                                c
                            }
                        };
                        let from = start.step as usize;
                        let ck = if from == s {
                            start
                        } else {
                            let corpus = self.corpus()?;
                            let mut stream = build_stream(corpus, None, bp, from)?;
                            let opts = TrainOptions { steps: s - from, mask: TrainableMask::all(), checkpoint_every: 0 };
                            train(&start, &mut stream, &opts, &mut |_, _| Ok(()))?.checkpoint
                        };
                        if let Some(d) = &cache {
                            fs::create_dir_all(d)?;
                            // write-then-rename so concurrent readers never see a partial file
                            let tmp = d.join(format!("step{s}.ckpt.{}", std::process::id()));
                            ck.save(&tmp)?;
                            fs::rename(&tmp, d.join(format!("step{s}.ckpt")))?;
                        }
                        ck
                    }
                };
                self.run.save_checkpoint(&rel, &ck)?;
                ck
            };
            self.pretrained.insert(s, ck.clone());
            out.insert(s, ck);
        }
        self.run.save_manifest()?;
        Ok(out)
    }

    fn stream_id(&self) -> String {
        format!("synthetic:{}:{}:{}", self.cfg.corpus.seed, self.cfg.corpus.window, self.cfg.corpus.random_fraction)
    }

    /// Pretraining steps needed to start an arm at `age`.
    fn needed_for(&self, age: usize) -> Vec<usize> {
        let t = self.cfg.training.warmup_steps;
        if t > 0 && !self.cfg.training.fresh_optimizer {
            vec![age - t, age]
        } else {
            vec![age]
        }
    }

    /// Weights at `age` with the configured optimizer state: fresh, warmed up
    /// over the `t` steps before `age`, or inherited from pretraining.
    pub fn start_state(&mut self, age: usize) -> Result<Checkpoint> {
        ensure!(age <= self.cfg.pretrain.steps, "start age {age} beyond pretraining ({} steps)", self.cfg.pretrain.steps);
        ensure!(age >= self.cfg.training.warmup_steps, "start age {age} is shorter than the warm-up");
        self.corpus()?;
        let pre = self.pretrained(&self.needed_for(age))?;
        let mut ck = pre[&age].clone();
        let hyper = self.hyper();
        let t = self.cfg.training.warmup_steps;
        if self.cfg.training.fresh_optimizer {
            ck.optimizer = OptimizerState::fresh(hyper, ck.model.params());
        } else if t > 0 {
            let early = &pre[&(age - t)];
            let corpus = self.corpus.as_ref().expect("pretrained() built the corpus");
            let mut stream = build_stream(corpus, None, self.cfg.pretrain.batch_size, age - t)?;
            ck.optimizer = warmup_optimizer_state(early, &mut stream, t, hyper)?;
        } else {
            ck.optimizer.hyper = hyper;
        }
        Ok(ck)
    }

    /// Stream step (in units of `batch`) that lines up with pretraining step `age`.
    fn stream_start(&self, age: usize, batch: usize) -> Result<usize> {
        let examples = age * self.cfg.pretrain.batch_size;
        ensure!(
            examples % batch == 0,
            "{examples} pretraining examples are not a multiple of batch size {batch}; pick ages that align"
        );
        Ok(examples / batch)
    }

    // ---- continued training ----

    /// Trains one arm from `start` and measures `targets` at the end (and every
    /// `trace_every` steps). Checkpoints go to `checkpoints/<arm>/`.
    #[allow(clippy::too_many_arguments)]
    pub fn train_arm(
        &mut self,
        arm: &str,
        start: &Checkpoint,
        schedule: Option<&InjectionSchedule>,
        targets: &[Target],
        age: usize,
        batch: usize,
        steps: usize,
        mask: &TrainableMask,
    ) -> Result<(Checkpoint, ArmReport)> {
        let first = self.stream_start(age, batch)?;
        if self.corpus.is_none() {
            self.corpus()?;
        }
        let corpus = self.corpus.take().expect("built above");
        let result = self.train_arm_on(&corpus, arm, start, schedule, targets, first, batch, steps, mask);
        self.corpus = Some(corpus);
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn train_arm_on(
        &mut self,
        corpus: &Corpus,
        arm: &str,
        start: &Checkpoint,
        schedule: Option<&InjectionSchedule>,
        targets: &[Target],
        first: usize,
        batch: usize,
        steps: usize,
        mask: &TrainableMask,
    ) -> Result<(Checkpoint, ArmReport)> {
        if let Some(s) = schedule {
            s.validate(steps)?;
        }
        let mut stream = build_stream(corpus, schedule, batch, first)?;
        let mut start = start.clone();
        start.provenance = Provenance { stream_id: self.stream_id(), schedule_id: schedule.map(InjectionSchedule::id) };
        let (ce, te) = (self.cfg.training.checkpoint_every, self.cfg.training.trace_every);
        let every = match (ce, te) {
            (0, t) | (t, 0) => t,
            (a, b) => gcd(a, b),
        };
        let seqs: Vec<TokenSeq> = targets.iter().map(|t| t.seq.clone()).collect();
        let ids: Vec<String> = targets.iter().map(|t| t.id.clone()).collect();
        let measure = self.cfg.analysis.measure.clone();
        let base = start.step;
        let mut traces: Vec<Vec<TracePoint>> = vec![Vec::new(); targets.len()];
        let mut last: Option<(u64, Vec<MemorizationReport>)> = None;
        let occurrences = |local: usize, i: usize| match schedule {
            Some(s) => s.injections().get(i).map_or(0, |inj| inj.realized(local)),
            None => 0,
        };
        let run = &mut self.run;
        let mut sink = |kind: CheckpointKind, ck: &Checkpoint| -> memlab_core::Result<()> {
            let local = (ck.step - base) as usize;
            if kind == CheckpointKind::Diagnostic {
                return run.save_checkpoint(&format!("checkpoints/{arm}/diagnostic.ckpt"), ck).map_err(lab);
            }
            if ce > 0 && local % ce == 0 {
                run.save_checkpoint(&format!("checkpoints/{arm}/step{}.ckpt", ck.step), ck).map_err(lab)?;
            }
            if te > 0 && local % te == 0 {
                let reps = measure_all(&ck.model, &seqs, &ids, &measure)?;
                for (i, r) in reps.iter().enumerate() {
                    traces[i].push(TracePoint { step: ck.step, occurrences: occurrences(local, i), length: r.verbatim_mem_length, perplexity: r.perplexity });
                }
                last = Some((ck.step, reps));
            }
            Ok(())
        };
        let opts = TrainOptions { steps, mask: mask.clone(), checkpoint_every: every };
        let out = train(&start, &mut stream, &opts, &mut sink)?;
        let ck = out.checkpoint;
        if self.save_arms {
            self.run.save_checkpoint(&format!("checkpoints/{arm}/step{}.ckpt", ck.step), &ck)?;
        }
        let mut reports = match last {
            Some((s, reps)) if s == ck.step => reps,
            _ => measure_all(&ck.model, &seqs, &ids, &measure)?,
        };
        for (i, r) in reports.iter_mut().enumerate() {
            r.trace = std::mem::take(&mut traces[i]);
            if r.trace.last().map(|p| p.step) != Some(ck.step) {
                r.trace.push(TracePoint { step: ck.step, occurrences: occurrences(steps, i), length: r.verbatim_mem_length, perplexity: r.perplexity });
            }
        }
        if let Some(s) = schedule {
            self.run.manifest.injection_counts.insert(arm.to_string(), s.realized_counts(steps));
            self.run.manifest.injected_fraction.insert(arm.to_string(), s.injected_fraction(steps, batch));
        }
        let report = ArmReport {
            arm: arm.to_string(),
            step: ck.step,
            mean_length: mean_length(&reports),
            mean_perplexity: mean_perplexity(&reports),
            losses: out.losses,
            reports,
        };
        Ok((ck, report))
    }

    /// Measures `targets` on a model without training it.
    pub fn measure_model(&self, arm: &str, ck: &Checkpoint, targets: &[Target]) -> Result<ArmReport> {
        let seqs: Vec<TokenSeq> = targets.iter().map(|t| t.seq.clone()).collect();
        let ids: Vec<String> = targets.iter().map(|t| t.id.clone()).collect();
        let reports = measure_all(&ck.model, &seqs, &ids, &self.cfg.analysis.measure)?;
        Ok(ArmReport {
            arm: arm.into(),
            step: ck.step,
            mean_length: mean_length(&reports),
            mean_perplexity: mean_perplexity(&reports),
            losses: Vec::new(),
            reports,
        })
    }

    fn arm_path(arm: &str, step: u64) -> String {
        format!("checkpoints/{arm}/step{step}.ckpt")
    }

    fn final_step(&self) -> u64 {
        (self.cfg.training.start_step + self.cfg.treatment_steps()) as u64
    }

    /// `train`: control and treatment arms from the start checkpoint.
    pub fn train_pair(&mut self) -> Result<()> {
        let (targets, sched) = if self.run.exists("reports/targets.json") {
            (self.run.read_json("reports/targets.json")?, self.run.read_json("reports/schedule.json")?)
        } else {
            self.inject()?
        };
        let age = self.cfg.training.start_step;
        let start = self.start_state(age)?;
        self.run.save_checkpoint("checkpoints/start.ckpt", &start)?;
        let (b, steps) = (self.cfg.training.batch_size, self.cfg.treatment_steps());
        let mask = TrainableMask::by_name(&self.cfg.training.mask)?;
        let (_, control) = self.train_arm("control", &start, None, &targets, age, b, steps, &mask)?;
        self.run.write_json("reports/train_control.json", &control)?;
        let (_, treatment) = self.train_arm("treatment", &start, Some(&sched), &targets, age, b, steps, &mask)?;
        self.run.write_json("reports/train_treatment.json", &treatment)?;
        self.run.stage_done("train")
    }

    fn ensure_pair(&mut self) -> Result<(Vec<Target>, Checkpoint, Checkpoint, Checkpoint)> {
        let step = self.final_step();
        if !self.run.has_stage("train") || !self.run.exists(&Self::arm_path("treatment", step)) {
            self.train_pair()?;
        }
        let targets = self.run.read_json("reports/targets.json")?;
        Ok((
            targets,
            self.run.load_checkpoint("checkpoints/start.ckpt")?,
            self.run.load_checkpoint(&Self::arm_path("control", step))?,
            self.run.load_checkpoint(&Self::arm_path("treatment", step))?,
        ))
    }

    /// `measure`: memorization of every injected sequence before training
    /// and in both arms.
    pub fn measure(&mut self) -> Result<BTreeMap<String, ArmReport>> {
        let (targets, start, control, treatment) = self.ensure_pair()?;
        let mut out = BTreeMap::new();
        for (arm, ck) in [("start", &start), ("control", &control), ("treatment", &treatment)] {
            let mut r = self.measure_model(arm, ck, &targets)?;
            if arm != "start" {
                let trained: ArmReport = self.run.read_json(&format!("reports/train_{arm}.json"))?;
                r.losses = trained.losses;
                for (a, b) in r.reports.iter_mut().zip(trained.reports) {
                    a.trace = b.trace;
                }
            }
            self.run.write_json(&format!("reports/memorization_{arm}.json"), &r)?;
            out.insert(arm.to_string(), r);
        }
        let mut csv = String::from("arm,sequence,step,verbatim_mem_length,memorized,perplexity\n");
        for r in out.values() {
            for m in &r.reports {
                csv.push_str(&format!("{},{},{},{},{},{}\n", r.arm, m.sequence_id, r.step, m.verbatim_mem_length, m.memorized, m.perplexity));
            }
        }
        self.run.write_bytes("reports/memorization.csv", csv.as_bytes())?;
        self.run.stage_done("measure")?;
        Ok(out)
    }

    fn pool(&self) -> Result<Vec<TokenSeq>> {
        let spec = memlab_core::data::CorpusSpec { n_windows: self.cfg.analysis.pool_size, ..self.cfg.corpus_spec(0) };
        let spec = memlab_core::data::CorpusSpec { seed: self.cfg.analysis.pool_seed, ..spec };
        Ok(Corpus::synthetic(&spec)?.sequences().to_vec())
    }

    /// `depend`: trigger-dependency profiles on the treatment model.
    pub fn depend(&mut self) -> Result<Vec<DependencyRecord>> {
        let (targets, _, _, treatment) = self.ensure_pair()?;
        let a = &self.cfg.analysis;
        let (n, steps) = (a.trigger_len, a.dependency_steps);
        let opts = DependencyOptions { n_samples: a.intervention_samples, threshold: a.threshold, seed: a.pool_seed };
        let pool = self.pool()?;
        let mut out = Vec::new();
        for t in &targets {
            if out.len() >= a.dependency_sequences {
                break;
            }
            let x = t.seq.tokens();
            if x.len() < n + 1 {
                continue;
            }
            // first trigger whose continuation the model reproduces for `steps` tokens
            let mut found = None;
            for st in 0..x.len() - n {
                let m = forced_match_len(&treatment.model, &x[st..st + n], &x[st + n..])?;
                if m >= steps.max(1) {
                    found = Some(st);
                    break;
                }
            }
            let Some(st) = found else { continue };
            let profile = dependency_profile(&treatment.model, &x[st..st + n], &x[st + n..], steps, &pool, &opts)?;
            out.push(DependencyRecord { sequence_id: t.id.clone(), start: st, trigger: x[st..st + n].to_vec(), profile });
        }
        self.run.write_json("reports/dependency.json", &out)?;
        self.run.stage_done("depend")?;
        Ok(out)
    }

    /// `cross`: cross-model interventions between control and treatment.
    pub fn cross(&mut self) -> Result<CrossModelResult> {
        let (targets, _, control, treatment) = self.ensure_pair()?;
        let c = &self.cfg.analysis.cross;
        let seqs: Vec<TokenSeq> = targets.iter().map(|t| t.seq.clone()).collect();
        let examples = select_examples(&control.model, &treatment.model, &seqs, c.trigger_len, c.n_max, c.stride, c.per_sequence)?;
        let mut sets = LocationSet::all(self.cfg.model.n_layers);
        sets.dedup();
        let ns: Vec<usize> = (1..=c.n_max).collect();
        let result = cross_model_scan(&control.model, &treatment.model, &examples, &sets, &ns, c.reuse_floor)?;
        self.run.write_json("reports/cross.json", &result)?;
        self.run.stage_done("cross")?;
        Ok(result)
    }

    fn retain(&self) -> Result<Vec<TokenSeq>> {
        let u = &self.cfg.unlearning;
        let spec = memlab_core::data::CorpusSpec { n_windows: u.retain_windows, seed: u.retain_seed, ..self.cfg.corpus_spec(0) };
        Ok(Corpus::synthetic(&spec)?.sequences().to_vec())
    }

    /// Tasks from the tasks file or from memorized injected sequences: the
    /// first (prompt, continuation) window the treatment model reproduces.
    pub fn unlearn_tasks(&mut self, treatment: &Checkpoint, targets: &[Target]) -> Result<Vec<UnlearnTask>> {
        let u = self.cfg.unlearning.clone();
        let method = *u.methods.first().context("unlearning.methods is empty")?;
        let tasks = match &u.tasks_file {
            Some(p) => load_tasks(p)?,
            None => {
                let retain = self.retain()?;
                let (pl, cl) = (u.prompt_len, u.continuation_len);
                let mut tasks = Vec::new();
                for t in targets {
                    if tasks.len() >= u.max_tasks {
                        break;
                    }
                    let x = t.seq.tokens();
                    if x.len() < pl + cl {
                        continue;
                    }
                    for st in 0..=x.len() - pl - cl {
                        if forced_match_len(&treatment.model, &x[st..st + pl], &x[st + pl..st + pl + cl])? == cl {
                            tasks.push(UnlearnTask {
                                id: t.id.clone(),
                                prompt: t.seq.slice(st, st + pl),
                                continuation: t.seq.slice(st + pl, st + pl + cl),
                                method,
                                retain: retain.clone(),
                            });
                            break;
                        }
                    }
                }
                tasks
            }
        };
        save_tasks(&self.run.path("reports/unlearn_tasks.json"), &tasks)?;
        let bytes = fs::read(self.run.path("reports/unlearn_tasks.json"))?;
        self.run.write_bytes("reports/unlearn_tasks.json", &bytes)?;
        Ok(tasks)
    }

    fn provider(&self, model: &Checkpoint) -> Result<Box<dyn SimilarTokens>> {
        let s = &self.cfg.analysis.stress;
        Ok(match s.substitutes {
            SubstituteSource::Grammar => Box::new(GrammarTable::new(s.substitutions, s.seed)),
            SubstituteSource::Embedding => Box::new(EmbeddingNeighbors::over_lexicon(&model.model, s.substitutions)?),
            SubstituteSource::None => Box::new(NoSubstitutes),
        })
    }

    fn suites(&self, tasks: &[UnlearnTask], provider: &dyn SimilarTokens) -> Result<Vec<StressSuite>> {
        tasks
            .iter()
            .map(|t| {
                let n = t.prompt.len();
                let st = self.cfg.analysis.stress.t.unwrap_or_else(|| scaled_t(n));
                Ok(StressSuite::build(&t.id, &t.prompt, &t.continuation, st, provider)?)
            })
            .collect()
    }

    /// `stress`: stress suites on the treatment model, before any unlearning.
    pub fn stress(&mut self) -> Result<Vec<SuiteResult>> {
        let (targets, _, _, treatment) = self.ensure_pair()?;
        let tasks = self.unlearn_tasks(&treatment, &targets)?;
        let provider = self.provider(&treatment)?;
        let suites = self.suites(&tasks, provider.as_ref())?;
        let results: Vec<SuiteResult> = suites.iter().map(|s| evaluate_suite(&treatment.model, s)).collect::<Result<_, _>>()?;
        self.run.write_json("reports/stress_baseline.json", &results)?;
        self.run.stage_done("stress")?;
        Ok(results)
    }

    /// `unlearn`: every configured method on every task, then the stress
    /// suites on each unlearned model.
    pub fn unlearn(&mut self) -> Result<UnlearningSummary> {
        let (targets, _, _, treatment) = self.ensure_pair()?;
        let tasks = self.unlearn_tasks(&treatment, &targets)?;
        ensure!(!tasks.is_empty(), "no injected sequence is reproduced well enough to form an unlearning task");
        let provider = self.provider(&treatment)?;
        let suites = self.suites(&tasks, provider.as_ref())?;
        let baseline: Vec<SuiteResult> = suites.iter().map(|s| evaluate_suite(&treatment.model, s)).collect::<Result<_, _>>()?;
        let mut rows: Vec<StressRow> = baseline.iter().map(|r| StressRow::new("none", r)).collect();
        let mut reports = Vec::new();
        let mut results = Vec::new();
        for method in self.cfg.unlearning.methods.clone() {
            for (task, suite) in tasks.iter().zip(&suites) {
                let task = UnlearnTask { method, ..task.clone() };
                let outcome = unlearn(&treatment, &task)?;
                let r = evaluate_suite(&outcome.checkpoint.model, suite)?;
                rows.push(StressRow::new(method.name(), &r));
                reports.push(outcome.report);
                results.push(MethodSuite { method: method.name().into(), result: r });
            }
        }
        let mut csv = Vec::new();
        write_csv(&mut csv, &rows)?;
        self.run.write_bytes("reports/stress.csv", &csv)?;
        let table = summarize(&rows);
        let mut t2 = String::from("method,original,position,semantic\n");
        for m in self.cfg.unlearning.methods.iter().map(|m| m.name()) {
            if let Some(cells) = table.get(m) {
                let f = |(mu, sd): (f64, f64)| format!("{mu:.2} ± {sd:.2}");
                t2.push_str(&format!("{m},{},{},{}\n", f(cells[0]), f(cells[1]), f(cells[2])));
            }
        }
        self.run.write_bytes("reports/table2.csv", t2.as_bytes())?;
        let summary = UnlearningSummary { baseline, reports, results, rows };
        self.run.write_json("reports/unlearning.json", &summary)?;
        self.run.stage_done("unlearn")?;
        Ok(summary)
    }

    // ---- sweeps ----

    /// Single-shot sweep: each sequence injected once at the first step of its
    /// own run, for every batch size; lengths recorded after every step.
    pub fn single_shot(&mut self) -> Result<SingleShotReport> {
        let targets = self.inject()?.0;
        let age = self.cfg.training.start_step;
        let start = self.start_state(age)?;
        let post = self.cfg.sweep.post_steps.max(1);
        let mut rows = Vec::new();
        let saved = (self.cfg.training.trace_every, self.save_arms);
        self.cfg.training.trace_every = 1;
        self.save_arms = self.cfg.training.checkpoint_every > 0;
        let outcome = (|| -> Result<()> {
            for &b in &self.cfg.sweep.batch_sizes.clone() {
                let mut lengths = Vec::new();
                for t in &targets {
                    let sched = InjectionSchedule::new(vec![Injection::once(t.seq.clone(), 0)], self.cfg.corpus.window)?;
                    let arm = format!("b{b}/{}", t.id);
                    let (_, rep) =
                        self.train_arm(&arm, &start, Some(&sched), std::slice::from_ref(t), age, b, post, &TrainableMask::all())?;
                    lengths.push(rep.reports[0].trace.iter().map(|p| p.length).collect::<Vec<_>>());
                }
                let by_step: Vec<f64> = (0..post).map(|k| mean(lengths.iter().map(|l| l[k] as f64))).collect();
                rows.push(SingleShotRow { batch_size: b, length_after_injection: by_step[0], mean_by_step: by_step, lengths });
            }
            Ok(())
        })();
        (self.cfg.training.trace_every, self.save_arms) = saved;
        outcome?;
        let report = SingleShotReport { post_steps: post, rows };
        self.run.write_json("reports/single_shot.json", &report)?;
        self.run.stage_done("single-shot")?;
        Ok(report)
    }

    /// Checkpoint sweep: the same schedule continued from every age, per seed.
    pub fn ckpt_sweep(&mut self) -> Result<CkptSweepReport> {
        self.inject()?;
        let steps = self.cfg.treatment_steps();
        let b = self.cfg.training.batch_size;
        let mask = TrainableMask::by_name(&self.cfg.training.mask)?;
        let mut rows = Vec::new();
        for &seed in &self.cfg.sweep.seeds.clone() {
            let targets = self.targets(seed)?;
            let sched = self.schedule(&targets, seed)?;
            for &age in &self.cfg.sweep.ages.clone() {
                let start = self.start_state(age)?;
                let (_, rep) = self.train_arm(&format!("age{age}_seed{seed}"), &start, Some(&sched), &targets, age, b, steps, &mask)?;
                let before = self.measure_model("start", &start, &targets)?;
                rows.push(SweepRow {
                    seed,
                    age,
                    mean_length: rep.mean_length,
                    mean_length_before: before.mean_length,
                    lengths: rep.reports.iter().map(|r| r.verbatim_mem_length).collect(),
                    injected_fraction: sched.injected_fraction(steps, b),
                });
            }
        }
        let report = CkptSweepReport { ages: self.cfg.sweep.ages.clone(), seeds: self.cfg.sweep.seeds.clone(), rows };
        self.run.write_json("reports/ckpt_sweep.json", &report)?;
        self.run.stage_done("ckpt-sweep")?;
        Ok(report)
    }

    /// Frozen-component ablation: the treatment arm under every mask.
    pub fn frozen_ablation(&mut self) -> Result<AblationReport> {
        let (targets, sched) = self.inject()?;
        let age = self.cfg.training.start_step;
        let start = self.start_state(age)?;
        let (b, steps) = (self.cfg.training.batch_size, self.cfg.treatment_steps());
        let mut rows = Vec::new();
        for name in self.cfg.sweep.masks.clone() {
            let mask = TrainableMask::by_name(&name)?;
            let (_, rep) = self.train_arm(&name, &start, Some(&sched), &targets, age, b, steps, &mask)?;
            rows.push(AblationRow {
                mask: name,
                mean_length: rep.mean_length,
                lengths: rep.reports.iter().map(|r| r.verbatim_mem_length).collect(),
            });
        }
        let report = AblationReport { rows };
        self.run.write_json("reports/frozen_ablation.json", &report)?;
        self.run.stage_done("frozen-ablation")?;
        Ok(report)
    }

    /// Runs the configured preset end to end.
    pub fn run_preset(&mut self) -> Result<()> {
        match self.cfg.preset.as_str() {
            "single-shot" => {
                self.single_shot()?;
            }
            "ckpt-sweep" => {
                self.ckpt_sweep()?;
            }
            "frozen-ablation" => {
                self.frozen_ablation()?;
            }
            "control-vs-treatment" | "ood" | "unlearning" => {
                self.train_pair()?;
                for stage in self.cfg.analysis.stages.clone() {
                    self.run_stage(&stage)?;
                }
            }
            p => bail!("unknown preset {p:?}"),
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: &str) -> Result<()> {
        match stage {
            "inject" => drop(self.inject()?),
            "train" => self.train_pair()?,
            "measure" => drop(self.measure()?),
            "depend" => drop(self.depend()?),
            "cross" => drop(self.cross()?),
            "stress" => drop(self.stress()?),
            "unlearn" => drop(self.unlearn()?),
            s => bail!("unknown stage {s:?}"),
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyRecord {
    pub sequence_id: String,
    /// Trigger start offset within the sequence.
    pub start: usize,
    pub trigger: Vec<u32>,
    pub profile: Vec<DependencyResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSuite {
    pub method: String,
    pub result: SuiteResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearningSummary {
    /// Suites on the treatment model before unlearning.
    pub baseline: Vec<SuiteResult>,
    pub reports: Vec<UnlearnReport>,
    pub results: Vec<MethodSuite>,
    pub rows: Vec<StressRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleShotRow {
    pub batch_size: usize,
    /// Mean length measured right after the injection step.
    pub length_after_injection: f64,
    pub mean_by_step: Vec<f64>,
    /// `lengths[sequence][step after injection]`.
    pub lengths: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleShotReport {
    pub post_steps: usize,
    pub rows: Vec<SingleShotRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub age: usize,
    pub mean_length: f64,
    pub mean_length_before: f64,
    pub lengths: Vec<usize>,
    pub injected_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkptSweepReport {
    pub ages: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl CkptSweepReport {
    /// Mean length per age for one seed, in `ages` order.
    pub fn means(&self, seed: u64) -> Vec<f64> {
        self.ages
            .iter()
            .map(|&a| self.rows.iter().find(|r| r.seed == seed && r.age == a).map_or(f64::NAN, |r| r.mean_length))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub mean_length: f64,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean(&self, mask: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.mask == mask).map(|r| r.mean_length)
    }
}

/// Runs `cfg`; the manifest records success or the first error.
pub fn run(cfg: ExperimentConfig) -> Result<RunDir> {
    run_with(cfg, |lab| lab.run_preset())
}

/// Opens (or resumes) the run directory for `cfg`, executes `f`, renders the
/// report and marks the manifest.
pub fn run_with(cfg: ExperimentConfig, f: impl FnOnce(&mut Lab) -> Result<()>) -> Result<RunDir> {
    let run = RunDir::create(&cfg)?;
    let mut lab = Lab::new(cfg, run);
    let mut outcome = f(&mut lab);
    if outcome.is_ok() {
        outcome = crate::report::render(&mut lab.run, &lab.cfg).map(|_| ());
    } else {
        // partial results still get rendered
        let _ = crate::report::render(&mut lab.run, &lab.cfg);
    }
    lab.run.finish(&outcome)?;
    Ok(lab.run)
}
