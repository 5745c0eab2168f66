use memlab_tensor::argmax;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::forced_match_len;
use crate::model::{ForwardOptions, HookLocation, Intervention, Site, TraceRequest, Transformer};
use crate::par;
use crate::tokens::TokenSeq;

pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyOptions {
    /// Random-pool inputs used to estimate each `p_l`.
    pub n_samples: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for DependencyOptions {
    fn default() -> Self {
        Self { n_samples: 16, threshold: DEFAULT_THRESHOLD, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyResult {
    /// Decode step, 1-based.
    pub step: usize,
    pub d_t: f64,
    /// Locations with `p_l > threshold`.
    pub n_t: usize,
    /// Locations whose patch flips the token with probability above the threshold.
    pub n_changed: usize,
    pub threshold: f64,
    /// Survival fraction `p[layer][trigger position]`: share of random-source
    /// patches after which step `step` still decodes the memorized token.
    pub p: Vec<Vec<f64>>,
}

impl DependencyResult {
    /// Locations flipped with probability above the threshold, per layer.
    pub fn changed_per_layer(&self) -> Vec<usize> {
        self.p.iter().map(|row| row.iter().filter(|&&p| 1.0 - p > self.threshold).count()).collect()
    }
}

/// Number of locations with `p_l > threshold` (strict).
pub fn dependency_count<'a>(p: impl IntoIterator<Item = &'a f64>, threshold: f64) -> usize {
    p.into_iter().filter(|&&v| v > threshold).count()
}

fn pick_samples<'a>(pool: &'a [TokenSeq], n: usize, seed: u64) -> Vec<&'a TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n <= pool.len() {
        sample(&mut rng, pool.len(), n).into_iter().map(|i| &pool[i]).collect()
    } else {
        (0..n).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Estimates `p_l` for every trigger token and layer at decode step `t`.
///
/// The context is the trigger followed by the first `t - 1` memorized tokens
/// (the memorized prefix is teacher-forced). For each location the
/// `resid_post` row is replaced by the value the model computes at the same
/// layer and position on a random-pool input.
pub fn trigger_dependency(
    model: &Transformer,
    trigger: &[u32],
    memorized: &[u32],
    t: usize,
    pool: &[TokenSeq],
    opts: &DependencyOptions,
) -> Result<DependencyResult> {
    let n = trigger.len();
    if n == 0 {
        return Err(LabError::Invalid("empty trigger".into()));
    }
    if t == 0 || t > memorized.len() {
        return Err(LabError::OutOfRange { what: "decode step", index: t, limit: memorized.len() });
    }
    if opts.n_samples == 0 {
        return Err(LabError::Config("n_samples must be positive".into()));
    }
    if pool.is_empty() || pool.iter().any(|r| r.len() < n) {
        return Err(LabError::Invalid(format!("random pool must be non-empty with sequences of at least {n} tokens")));
    }
    if forced_match_len(model, trigger, &memorized[..t])? < t {
        return Err(LabError::Analysis(format!("model does not reproduce the first {t} memorized tokens from the trigger")));
    }

    let sources = pick_samples(pool, opts.n_samples, opts.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let heads: Vec<&[u32]> = sources.iter().map(|r| &r.tokens()[..n]).collect();
    let src = model.forward_with(&heads, &ForwardOptions { trace: TraceRequest::sites(&[Site::ResidPost]), ..Default::default() })?;

    let mut ctx = trigger.to_vec();
    ctx.extend_from_slice(&memorized[..t - 1]);
    let target = memorized[t - 1] as usize;
    let len = ctx.len();
    let layers = model.config().n_layers;
    let locs: Vec<(usize, usize)> = (0..layers).flat_map(|k| (0..n).map(move |j| (k, j))).collect();
    let batch: Vec<&[u32]> = vec![&ctx; sources.len()];

    let survival = par::try_map(&locs, |&(k, j)| -> Result<f64> {
        let loc = HookLocation::new(k, j, Site::ResidPost);
        let values = src.trace.layer_site(k, Site::ResidPost).expect("traced above");
        let ivs: Vec<Intervention> =
            (0..sources.len()).map(|s| Intervention::on_seq(s, loc, values.row(s * n + j).to_vec())).collect();
        let out = model.forward_with(&batch, &ForwardOptions { interventions: &ivs, ..Default::default() })?;
        let kept = (0..sources.len()).filter(|&s| argmax(out.logits.row(s * len + len - 1)) == target).count();
        Ok(kept as f64 / sources.len() as f64)
    })?;

    let p: Vec<Vec<f64>> = survival.chunks(n).map(<[f64]>::to_vec).collect();
    let best = survival.iter().copied().fold(0.0, f64::max);
    // The final-layer row at the last trigger token decides the first token.
    let d_t = if t == 1 { 1.0 } else { 1.0 - best };
    let n_changed = survival.iter().filter(|&&v| 1.0 - v > opts.threshold).count();
    Ok(DependencyResult { step: t, d_t, n_t: dependency_count(&survival, opts.threshold), n_changed, threshold: opts.threshold, p })
}

/// [`trigger_dependency`] for decode steps `1..=steps`.
pub fn dependency_profile(
    model: &Transformer,
    trigger: &[u32],
    memorized: &[u32],
    steps: usize,
    pool: &[TokenSeq],
    opts: &DependencyOptions,
) -> Result<Vec<DependencyResult>> {
    (1..=steps).map(|t| trigger_dependency(model, trigger, memorized, t, pool, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_is_strict() {
        assert_eq!(dependency_count(&[0.05, 0.1, 0.15], 0.1), 1);
        assert_eq!(dependency_count(&[0.0, 0.0], 0.1), 0);
        assert_eq!(dependency_count(&[], 0.1), 0);
    }

    #[test]
    fn sample_selection_is_deterministic() {
        let pool: Vec<TokenSeq> = (0..5).map(|i| TokenSeq::bytes(vec![i; 4])).collect();
        let a = pick_samples(&pool, 3, 7);
        let b = pick_samples(&pool, 3, 7);
        assert_eq!(a, b);
        assert_eq!(pick_samples(&pool, 9, 1).len(), 9);
    }
}
