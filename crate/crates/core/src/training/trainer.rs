use std::collections::BTreeSet;

use memlab_tensor::{Tape, TensorError};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optimizer::{adamw_step, AdamW, OptimizerState};
use crate::error::{LabError, Result};
use crate::model::{lm_loss, ParamGroup, Transformer};
use crate::tokens::TokenSeq;

/// Parameter groups that receive updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    groups: BTreeSet<ParamGroup>,
}

impl TrainableMask {
    pub fn all() -> Self {
        Self { groups: ParamGroup::ALL.into_iter().collect() }
    }

    pub fn none() -> Self {
        Self { groups: BTreeSet::new() }
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        Self { groups: groups.iter().copied().collect() }
    }

    /// Attention frozen: only MLP weights train.
    pub fn mlp_only() -> Self {
        Self::only(&[ParamGroup::Mlp])
    }

    /// MLP frozen: only attention weights train.
    pub fn attention_only() -> Self {
        Self::only(&[ParamGroup::Attention])
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "all" => Ok(Self::all()),
            "none" => Ok(Self::none()),
            "mlp_only" | "frozen_attention" => Ok(Self::mlp_only()),
            "attention_only" | "frozen_mlp" => Ok(Self::attention_only()),
            _ => Err(LabError::Config(format!("unknown trainable mask {name:?}"))),
        }
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.groups.contains(&g)
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.groups.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

impl Default for TrainableMask {
    fn default() -> Self {
        Self::all()
    }
}

/// Source of training batches in step order.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Vec<TokenSeq>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Periodic,
    /// State just before the step whose loss or gradient went non-finite.
    Diagnostic,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub mask: TrainableMask,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step(model: &mut Transformer, opt: &mut OptimizerState, batch: &[TokenSeq], mask: &TrainableMask) -> Result<f64> {
    let seqs: Vec<&[u32]> = batch.iter().map(TokenSeq::tokens).collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, |g| mask.contains(g))?;
    let loss = lm_loss(model.config(), &mut tape, &vars, &seqs, None)?;
    let value = tape.value(loss).item()?.into();
    let grads = tape.backward(loss)?;
    adamw_step(model.params_mut(), &grads, opt)?;
    Ok(value)
}

fn is_non_finite(e: &LabError) -> bool {
    matches!(e, LabError::Tensor(TensorError::NonFinite { .. })) || matches!(e, LabError::Invalid(m) if m.starts_with("non-finite"))
}

/// Continues training `start` for exactly `opts.steps` optimizer steps.
///
/// `sink` receives every periodic checkpoint and, if the loss or a gradient
/// goes non-finite, a diagnostic checkpoint before the error is returned.
pub fn train(
    start: &Checkpoint,
    stream: &mut dyn BatchSource,
    opts: &TrainOptions,
    sink: &mut dyn FnMut(CheckpointKind, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut ck = start.clone();
    ck.optimizer.check_shapes(ck.model.params())?;
    let mut losses = Vec::with_capacity(opts.steps);
    for k in 0..opts.steps {
        let batch = stream.next_batch()?;
        let before = (ck.model.clone(), ck.optimizer.clone());
        match train_step(&mut ck.model, &mut ck.optimizer, &batch, &opts.mask) {
            Ok(loss) if loss.is_finite() => losses.push(loss),
            Ok(_) => return Err(abort(&mut ck, before, sink)?),
            Err(e) if is_non_finite(&e) => return Err(abort(&mut ck, before, sink)?),
            Err(e) => return Err(e),
        }
        ck.step += 1;
        if opts.checkpoint_every > 0 && (k + 1) % opts.checkpoint_every == 0 {
            sink(CheckpointKind::Periodic, &ck)?;
        }
    }
    Ok(TrainOutcome { checkpoint: ck, losses })
}

fn abort(
    ck: &mut Checkpoint,
    before: (Transformer, OptimizerState),
    sink: &mut dyn FnMut(CheckpointKind, &Checkpoint) -> Result<()>,
) -> Result<LabError> {
    (ck.model, ck.optimizer) = before;
    sink(CheckpointKind::Diagnostic, ck)?;
    Ok(LabError::NonFiniteLoss { step: ck.step as usize })
}

/// Optimizer state after `t` steps from fresh moments starting at `ckpt`.
/// The trained weights are discarded.
pub fn warmup_optimizer_state(ckpt: &Checkpoint, stream: &mut dyn BatchSource, t: usize, hyper: AdamW) -> Result<OptimizerState> {
    let mut model = ckpt.model.clone();
    let mut opt = OptimizerState::fresh(hyper, model.params());
    let mask = TrainableMask::all();
    for _ in 0..t {
        let batch = stream.next_batch()?;
        train_step(&mut model, &mut opt, &batch, &mask)?;
    }
    Ok(opt)
}
