//! Verbatim memorization length, the memorized predicate and perplexity.

use serde::{Deserialize, Serialize};

use crate::data::count_in;
use crate::error::{LabError, Result};
use crate::model::Transformer;
use crate::par;
use crate::tokens::TokenSeq;

pub const DECODE_CAP: usize = 64;
pub const MEMORIZED_THRESHOLD: usize = 32;
const EXCLUSION_WINDOW: usize = 8;

/// When a prompt is dropped because its continuation merely repeats it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionRule {
    /// The first 8 continuation tokens occur contiguously anywhere in the prompt.
    #[default]
    Anywhere,
    /// The first 8 continuation tokens equal the last 8 prompt tokens.
    PromptTail,
    /// Keep every prompt.
    Off,
}

impl ExclusionRule {
    pub fn excludes(self, prompt: &[u32], continuation: &[u32]) -> bool {
        let head = &continuation[..continuation.len().min(EXCLUSION_WINDOW)];
        match self {
            ExclusionRule::Anywhere => count_in(head, prompt) > 0,
            ExclusionRule::PromptTail => prompt.len() >= head.len() && prompt.ends_with(head),
            ExclusionRule::Off => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureOptions {
    pub prompt_lengths: Vec<usize>,
    pub decode_len: usize,
    pub exclusion: ExclusionRule,
    /// Step between enumerated prompt start offsets.
    pub stride: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self { prompt_lengths: vec![8, 16, 32, 64], decode_len: DECODE_CAP, exclusion: ExclusionRule::Anywhere, stride: 1 }
    }
}

impl MeasureOptions {
    /// Prompt lengths allowed by the memorized predicate (at most 32 tokens).
    pub fn memorized_predicate() -> Self {
        Self { prompt_lengths: vec![8, 16, 32], ..Self::default() }
    }
}

/// One measurement of an injected sequence during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub occurrences: usize,
    pub length: usize,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub sequence_id: String,
    pub verbatim_mem_length: usize,
    /// Start offset and length of the achieving prompt inside the sequence.
    pub best_prompt: Option<(usize, usize)>,
    pub best_prompt_tokens: Option<TokenSeq>,
    pub memorized: bool,
    pub all_prompts_excluded: bool,
    pub prompts_evaluated: usize,
    pub prompts_excluded: usize,
    /// The achieving prompt's continuation was shorter than the decode cap.
    pub truncated: bool,
    pub perplexity: f64,
    #[serde(default)]
    pub trace: Vec<TracePoint>,
}

/// Length of the common prefix of two sequences.
pub fn longest_prefix_match(pred: &[u32], gold: &[u32]) -> usize {
    pred.iter().zip(gold).take_while(|(a, b)| a == b).count()
}

/// Number of leading `gold` tokens that greedy decoding from `prompt` would
/// reproduce. One teacher-forced forward suffices: while the decode agrees
/// with `gold`, its context is exactly `prompt ++ gold[..k]`.
pub fn forced_match_len(model: &Transformer, prompt: &[u32], gold: &[u32]) -> Result<usize> {
    if prompt.is_empty() {
        return Err(LabError::Invalid("empty prompt".into()));
    }
    // The last gold token is never fed back, so it need not fit the context.
    let room = model.config().max_context.saturating_sub(prompt.len()) + 1;
    let gold = &gold[..gold.len().min(room)];
    if gold.is_empty() {
        return Ok(0);
    }
    let mut ctx = prompt.to_vec();
    ctx.extend_from_slice(&gold[..gold.len() - 1]);
    let pred = model.predict_next(&ctx)?;
    Ok(longest_prefix_match(&pred[prompt.len() - 1..], gold))
}

/// Per-start-offset scores: `(offset, [(prompt_len, Some(match) | None if excluded)])`.
type OffsetScores = (usize, Vec<(usize, Option<usize>)>);

fn score_offset(model: &Transformer, x: &[u32], a: usize, opts: &MeasureOptions) -> Result<OffsetScores> {
    let lens: Vec<usize> = opts.prompt_lengths.iter().copied().filter(|&l| a + l + EXCLUSION_WINDOW <= x.len()).collect();
    let Some(&longest) = lens.iter().max() else {
        return Ok((a, Vec::new()));
    };
    let end = x.len().min(a + longest + opts.decode_len);
    let window = &x[a..end];
    let kept: Vec<usize> =
        lens.iter().copied().filter(|&l| !opts.exclusion.excludes(&window[..l], &window[l..])).collect();
    let mut out: Vec<(usize, Option<usize>)> = lens.iter().map(|&l| (l, None)).collect();
    let Some(&reach) = kept.iter().max() else {
        return Ok((a, out));
    };
    // context needed by the longest kept prompt
    let ctx_end = end.min(a + reach + opts.decode_len) - 1;
    let pred = model.predict_next(&x[a..ctx_end])?;
    for (l, slot) in out.iter_mut() {
        if kept.contains(l) {
            let gold_end = window.len().min(*l + opts.decode_len);
            *slot = Some(longest_prefix_match(&pred[*l - 1..], &window[*l..gold_end]));
        }
    }
    Ok((a, out))
}

/// Maximum prefix match over every valid prompt of `x`.
///
/// Prompts start at every `stride`-th offset and need at least 8 continuation
/// tokens so the exclusion rule is defined. Continuations are the next
/// `decode_len` tokens of `x`, truncated at its end.
pub fn verbatim_mem_length(model: &Transformer, x: &TokenSeq, opts: &MeasureOptions) -> Result<MemorizationReport> {
    let toks = x.tokens();
    let min_prompt = opts.prompt_lengths.iter().copied().min().unwrap_or(0);
    if min_prompt == 0 || opts.stride == 0 {
        return Err(LabError::Config("prompt lengths and stride must be positive".into()));
    }
    if toks.len() < min_prompt + EXCLUSION_WINDOW {
        return Err(LabError::Invalid(format!(
            "sequence of {} tokens is shorter than smallest prompt {min_prompt} + {EXCLUSION_WINDOW}",
            toks.len()
        )));
    }
    let longest = opts.prompt_lengths.iter().copied().max().unwrap_or(0);
    if longest + opts.decode_len > model.config().max_context + 1 {
        return Err(LabError::ContextOverflow { needed: longest + opts.decode_len - 1, max: model.config().max_context });
    }
    let starts: Vec<usize> = (0..=toks.len() - min_prompt - EXCLUSION_WINDOW).step_by(opts.stride).collect();
    let scored = par::try_map(&starts, |&a| score_offset(model, toks, a, opts))?;

    let (mut best, mut best_at, mut evaluated, mut excluded) = (0usize, None, 0usize, 0usize);
    let mut memorized = false;
    for (a, lens) in &scored {
        for &(l, m) in lens {
            match m {
                None => excluded += 1,
                Some(m) => {
                    evaluated += 1;
                    if best_at.is_none() || m > best {
                        best = m;
                        best_at = Some((*a, l));
                    }
                    if l <= MEMORIZED_THRESHOLD && m >= MEMORIZED_THRESHOLD {
                        memorized = true;
                    }
                }
            }
        }
    }
    let truncated = best_at.is_some_and(|(a, l)| a + l + opts.decode_len > toks.len());
    Ok(MemorizationReport {
        sequence_id: String::new(),
        verbatim_mem_length: best,
        best_prompt: best_at,
        best_prompt_tokens: best_at.map(|(a, l)| x.slice(a, a + l)),
        memorized,
        all_prompts_excluded: evaluated == 0,
        prompts_evaluated: evaluated,
        prompts_excluded: excluded,
        truncated,
        perplexity: perplexity(model, x)?,
        trace: Vec::new(),
    })
}

/// Some prompt of at most 32 tokens reproduces at least 32 continuation tokens.
pub fn is_memorized(model: &Transformer, x: &TokenSeq) -> Result<bool> {
    Ok(verbatim_mem_length(model, x, &MeasureOptions::memorized_predicate())?.memorized)
}

/// `exp` of the mean next-token cross-entropy over `x`.
pub fn perplexity(model: &Transformer, x: &TokenSeq) -> Result<f64> {
    Ok(model.loss(std::slice::from_ref(x))?.exp())
}

/// Reports for several sequences, ids taken from `ids`.
pub fn measure_all(model: &Transformer, seqs: &[TokenSeq], ids: &[String], opts: &MeasureOptions) -> Result<Vec<MemorizationReport>> {
    seqs.iter()
        .zip(ids)
        .map(|(s, id)| {
            let mut r = verbatim_mem_length(model, s, opts)?;
            r.sequence_id = id.clone();
            Ok(r)
        })
        .collect()
}

pub fn mean_length(reports: &[MemorizationReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.verbatim_mem_length as f64).sum::<f64>() / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_match_examples() {
        assert_eq!(longest_prefix_match(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]), 5);
        assert_eq!(longest_prefix_match(&[0, 2], &[1, 2]), 0);
        assert_eq!(longest_prefix_match(&[1, 2, 3, 9], &[1, 2, 3, 4, 5]), 3);
        assert_eq!(longest_prefix_match(&[], &[1]), 0);
    }

    #[test]
    fn exclusion_rules() {
        let block: Vec<u32> = (0..8).collect();
        let prompt: Vec<u32> = block.iter().chain(&block).copied().collect();
        assert!(ExclusionRule::Anywhere.excludes(&prompt, &block));
        assert!(ExclusionRule::PromptTail.excludes(&prompt, &block));
        let shifted: Vec<u32> = (9..17).collect();
        let p2: Vec<u32> = shifted.iter().chain(&[50, 51]).copied().collect();
        assert!(ExclusionRule::Anywhere.excludes(&p2, &shifted));
        assert!(!ExclusionRule::PromptTail.excludes(&p2, &shifted));
        assert!(!ExclusionRule::Off.excludes(&prompt, &block));
    }
}
