//! Unlearning baselines: gradient ascent, sparse fine-tuning and MLP neuron
//! pruning, each applied to one (prompt, continuation) task.

use std::path::Path;

use memlab_tensor::{Gradients, ParamId, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::forced_match_len;
use crate::model::{block_index, forward_graph, GraphInputs, ModelConfig, TraceRequest, Transformer};
use crate::tokens::TokenSeq;
use crate::training::{adamw_step_masked, AdamW, Checkpoint, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentParams {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AscentParams {
    fn default() -> Self {
        Self { steps: 10, lr: 1e-5, weight_decay: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseParams {
    pub fraction: f64,
    #[serde(flatten)]
    pub ascent: AscentParams,
}

impl Default for SparseParams {
    fn default() -> Self {
        Self { fraction: 0.001, ascent: AscentParams::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneParams {
    pub fraction: f64,
    pub l1_penalty: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for PruneParams {
    fn default() -> Self {
        Self { fraction: 0.001, l1_penalty: 1000.0, steps: 1000, lr: 1e-2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    GradientAscent(AscentParams),
    SparseFinetune(SparseParams),
    NeuronPrune(PruneParams),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::GradientAscent(_) => "gradient_ascent",
            Method::SparseFinetune(_) => "sparse_finetune",
            Method::NeuronPrune(_) => "neuron_prune",
        }
    }
}

/// A memorized continuation to remove.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTask {
    pub id: String,
    pub prompt: TokenSeq,
    pub continuation: TokenSeq,
    pub method: Method,
    /// Corpus sample used to measure collateral damage.
    #[serde(default)]
    pub retain: Vec<TokenSeq>,
}

impl UnlearnTask {
    /// Errors unless greedy decoding from the prompt reproduces the whole
    /// continuation.
    pub fn validate(&self, model: &Transformer) -> Result<()> {
        if self.prompt.is_empty() || self.continuation.is_empty() {
            return Err(LabError::Invalid(format!("task {}: empty prompt or continuation", self.id)));
        }
        let m = forced_match_len(model, self.prompt.tokens(), self.continuation.tokens())?;
        if m < self.continuation.len() {
            return Err(LabError::Invalid(format!(
                "task {}: model reproduces {m} of {} continuation tokens",
                self.id,
                self.continuation.len()
            )));
        }
        Ok(())
    }
}

pub fn load_tasks(path: &Path) -> Result<Vec<UnlearnTask>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn save_tasks(path: &Path, tasks: &[UnlearnTask]) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_vec_pretty(tasks)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub task: String,
    pub method: String,
    pub match_before: usize,
    pub match_after: usize,
    pub retain_ppl_before: Option<f64>,
    pub retain_ppl_after: Option<f64>,
    /// Weight entries that differ from the input model.
    pub changed_weights: usize,
    /// `(layer, unit)` of every zeroed MLP neuron.
    pub pruned: Vec<(usize, usize)>,
}

impl UnlearnReport {
    pub fn retain_ppl_delta(&self) -> Option<f64> {
        Some(self.retain_ppl_after? - self.retain_ppl_before?)
    }
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    /// Input checkpoint with unlearned weights; optimizer state and step are
    /// carried over unchanged.
    pub checkpoint: Checkpoint,
    pub report: UnlearnReport,
}

/// Mean next-token cross-entropy over the continuation positions of
/// `prompt ++ continuation`.
fn continuation_loss(cfg: &ModelConfig, tape: &mut Tape, params: &[Var], task: &UnlearnTask, gates: Option<&[Var]>) -> Result<Var> {
    let seq = task.prompt.concat(task.continuation.tokens());
    let toks = seq.tokens();
    let p = task.prompt.len();
    let targets: Vec<Option<u32>> = (0..toks.len()).map(|j| (j + 1 >= p && j + 1 < toks.len()).then(|| toks[j + 1])).collect();
    let seqs = [toks];
    let inputs = GraphInputs { seqs: &seqs, interventions: &[], trace: &TraceRequest::none(), gates };
    let (logits, _) = forward_graph(cfg, tape, params, &inputs)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Gradient of the negated continuation loss for every weight.
fn ascent_gradients(model: &Transformer, task: &UnlearnTask) -> Result<Gradients> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, |_| true)?;
    let loss = continuation_loss(model.config(), &mut tape, &vars, task, None)?;
    let neg = tape.scale(loss, -1.0)?;
    Ok(tape.backward(neg)?)
}

fn retain_ppl(model: &Transformer, retain: &[TokenSeq]) -> Result<Option<f64>> {
    if retain.is_empty() {
        return Ok(None);
    }
    Ok(Some(model.loss(retain)?.exp()))
}

fn changed_weights(a: &Transformer, b: &Transformer) -> usize {
    a.params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| x.data().iter().zip(y.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count())
        .sum()
}

fn finish(start: &Checkpoint, model: Transformer, task: &UnlearnTask, pruned: Vec<(usize, usize)>) -> Result<UnlearnOutcome> {
    let report = UnlearnReport {
        task: task.id.clone(),
        method: task.method.name().into(),
        match_before: forced_match_len(&start.model, task.prompt.tokens(), task.continuation.tokens())?,
        match_after: forced_match_len(&model, task.prompt.tokens(), task.continuation.tokens())?,
        retain_ppl_before: retain_ppl(&start.model, &task.retain)?,
        retain_ppl_after: retain_ppl(&model, &task.retain)?,
        changed_weights: changed_weights(&start.model, &model),
        pruned,
    };
    let mut checkpoint = start.clone();
    checkpoint.model = model;
    Ok(UnlearnOutcome { checkpoint, report })
}

fn ascend(start: &Transformer, task: &UnlearnTask, p: &AscentParams, mask: Option<&[Vec<bool>]>) -> Result<Transformer> {
    let mut model = start.clone();
    let hyper = AdamW { lr: p.lr, weight_decay: p.weight_decay, ..AdamW::default() };
    let mut opt = OptimizerState::fresh(hyper, model.params());
    for step in 0..p.steps {
        let grads = ascent_gradients(&model, task).map_err(|e| match e {
            LabError::Tensor(memlab_tensor::TensorError::NonFinite { .. }) => LabError::NonFiniteLoss { step },
            e => e,
        })?;
        adamw_step_masked(model.params_mut(), &grads, &mut opt, mask)?;
    }
    Ok(model)
}

/// Maximizes the continuation loss for `steps` AdamW steps (fresh moments).
pub fn gradient_ascent(start: &Checkpoint, task: &UnlearnTask, p: &AscentParams) -> Result<UnlearnOutcome> {
    task.validate(&start.model)?;
    let model = ascend(&start.model, task, p, None)?;
    finish(start, model, task, Vec::new())
}

/// Index mask of the `k` largest `|g|` over all weights; ties go to the
/// lower flat index (parameters in storage order, elements row-major).
pub fn top_k_mask(grads: &[&[f32]], k: usize) -> Vec<Vec<bool>> {
    let mut flat: Vec<(f32, usize, usize)> = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        flat.extend(g.iter().enumerate().map(|(j, v)| (v.abs(), i, j)));
    }
    let k = k.min(flat.len());
    let cmp = |a: &(f32, usize, usize), b: &(f32, usize, usize)| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2)));
    if k > 0 && k < flat.len() {
        flat.select_nth_unstable_by(k - 1, cmp);
    }
    let mut mask: Vec<Vec<bool>> = grads.iter().map(|g| vec![false; g.len()]).collect();
    for &(_, i, j) in &flat[..k] {
        mask[i][j] = true;
    }
    mask
}

/// Gradient ascent restricted to the `ceil(fraction * n_params)` weights with
/// the largest initial gradient magnitude.
pub fn sparse_finetune(start: &Checkpoint, task: &UnlearnTask, p: &SparseParams) -> Result<UnlearnOutcome> {
    if !(0.0..=1.0).contains(&p.fraction) {
        return Err(LabError::Config(format!("fraction {} outside [0, 1]", p.fraction)));
    }
    task.validate(&start.model)?;
    let model = &start.model;
    let grads = ascent_gradients(model, task)?;
    let zeros: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let per_param: Vec<&[f32]> =
        (0..model.params().len()).map(|i| grads.get(ParamId(i)).unwrap_or(&zeros[i]).data()).collect();
    let k = (p.fraction * model.n_params() as f64).ceil() as usize;
    let mask = top_k_mask(&per_param, k);
    let out = ascend(model, task, &p.ascent, Some(&mask))?;
    finish(start, out, task, Vec::new())
}

/// Learns a sigmoid gate per MLP hidden unit that raises the continuation
/// loss under an L1 penalty, then zeroes the `ceil(fraction * n_neurons)`
/// units with the lowest gates. The penalty is applied to the mean gate.
pub fn neuron_prune(start: &Checkpoint, task: &UnlearnTask, p: &PruneParams) -> Result<UnlearnOutcome> {
    if !(0.0..=1.0).contains(&p.fraction) {
        return Err(LabError::Config(format!("fraction {} outside [0, 1]", p.fraction)));
    }
    task.validate(&start.model)?;
    let cfg = start.model.config().clone();
    let total = cfg.n_neurons();
    let k = (p.fraction * total as f64).ceil() as usize;
    if k >= total {
        return Err(LabError::Invalid(format!("pruning {k} of {total} neurons leaves none")));
    }
    if k == 0 {
        return finish(start, start.model.clone(), task, Vec::new());
    }
    let logits = learn_gates(&start.model, task, p)?;
    let mut ranked: Vec<(f32, usize, usize)> =
        logits.iter().enumerate().flat_map(|(l, row)| row.data().iter().enumerate().map(move |(u, &v)| (v, l, u))).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut pruned: Vec<(usize, usize)> = ranked[..k].iter().map(|&(_, l, u)| (l, u)).collect();
    pruned.sort();

    let mut model = start.model.clone();
    let (d, m) = (cfg.d_model, cfg.d_mlp);
    for &(l, u) in &pruned {
        let b = block_index(l);
        let params = model.params_mut();
        let w_in = params[b.w_in].data_mut();
        for r in 0..d {
            w_in[r * m + u] = 0.0;
        }
        params[b.b_in].data_mut()[u] = 0.0;
        params[b.w_out].data_mut()[u * d..(u + 1) * d].iter_mut().for_each(|x| *x = 0.0);
    }
    finish(start, model, task, pruned)
}

/// Initial gate logit; `sigmoid(3) ~ 0.95`.
const GATE_INIT: f32 = 3.0;

fn learn_gates(model: &Transformer, task: &UnlearnTask, p: &PruneParams) -> Result<Vec<Tensor>> {
    let cfg = model.config();
    let mut logits: Vec<Tensor> = (0..cfg.n_layers).map(|_| Tensor::full(vec![cfg.d_mlp], GATE_INIT)).collect();
    let mut opt = OptimizerState::fresh(AdamW { lr: p.lr, weight_decay: 0.0, ..AdamW::default() }, &logits);
    let n = cfg.n_neurons() as f64;
    for step in 0..p.steps {
        let mut tape = Tape::new();
        let vars = model.bind_constants(&mut tape)?;
        let gates = logits
            .iter()
            .enumerate()
            .map(|(l, t)| {
                let v = tape.param(ParamId(l), t.clone())?;
                tape.sigmoid(v)
            })
            .collect::<memlab_tensor::Result<Vec<Var>>>()?;
        let task_loss = continuation_loss(cfg, &mut tape, &vars, task, Some(&gates))?;
        let mut penalty = None;
        for &g in &gates {
            let s = tape.sum(g)?;
            penalty = Some(match penalty {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        let penalty = tape.scale(penalty.expect("at least one layer"), p.l1_penalty / n)?;
        let neg = tape.scale(task_loss, -1.0)?;
        let obj = tape.add(neg, penalty)?;
        let grads = tape.backward(obj).map_err(|e| match e {
            memlab_tensor::TensorError::NonFinite { .. } => LabError::NonFiniteLoss { step },
            e => e.into(),
        })?;
        adamw_step_masked(&mut logits, &grads, &mut opt, None)?;
    }
    Ok(logits)
}

/// Runs the task's own method.
pub fn unlearn(start: &Checkpoint, task: &UnlearnTask) -> Result<UnlearnOutcome> {
    match &task.method {
        Method::GradientAscent(p) => gradient_ascent(start, task, p),
        Method::SparseFinetune(p) => sparse_finetune(start, task, p),
        Method::NeuronPrune(p) => neuron_prune(start, task, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_by_index() {
        let a = [1.0f32, -3.0, 2.0];
        let b = [3.0f32, 0.5];
        let m = top_k_mask(&[&a, &b], 2);
        assert_eq!(m, vec![vec![false, true, false], vec![true, false]]);
        let m = top_k_mask(&[&a, &b], 3);
        assert_eq!(m[0], vec![false, true, true]);
        assert_eq!(top_k_mask(&[&a], 0), vec![vec![false; 3]]);
        assert_eq!(top_k_mask(&[&a], 10), vec![vec![true; 3]]);
    }

    #[test]
    fn method_json_round_trip() {
        let m = Method::SparseFinetune(SparseParams::default());
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"method\":\"sparse_finetune\""));
        let back: Method = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
