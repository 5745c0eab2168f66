//! Perturbed-prompt stress tests for extraction after unlearning.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::grammar;
use crate::error::{LabError, Result};
use crate::metrics::longest_prefix_match;
use crate::model::Transformer;
use crate::par;
use crate::tokens::TokenSeq;

/// Sliding extent for 50-token prompts.
pub const DEFAULT_T: usize = 20;
pub const DEFAULT_SUBSTITUTIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Position,
    Semantic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressPrompt {
    pub category: Category,
    pub prompt: TokenSeq,
    /// Continuation tokens already contained in the prompt (first position family).
    pub extension: usize,
    /// Index of the substituted span (semantic prompts).
    pub span: Option<usize>,
    pub substitution: Option<Vec<u32>>,
}

impl StressPrompt {
    fn position(prompt: TokenSeq, extension: usize) -> Self {
        Self { category: Category::Position, prompt, extension, span: None, substitution: None }
    }
}

/// `t` scaled to a prompt of `n` tokens: `round(20 n / 50)`, at most `n - 1`.
pub fn scaled_t(n: usize) -> usize {
    let t = (DEFAULT_T * n + 25) / 50;
    t.min(n.saturating_sub(1))
}

/// Both sliding families over `x` with an `n`-token prompt: prompts growing
/// into the continuation by `0..=t` tokens, and suffixes of the prompt of
/// length `i + 1` for `i` in `t..n`. Duplicates are dropped (first kept), so
/// the unperturbed prompt is always the first element.
pub fn position_perturbations(x: &TokenSeq, n: usize, t: usize) -> Result<Vec<StressPrompt>> {
    if n == 0 {
        return Err(LabError::Invalid("prompt length must be positive".into()));
    }
    if t >= n {
        return Err(LabError::Invalid(format!("t = {t} must be below the prompt length {n}")));
    }
    if n + t > x.len() {
        return Err(LabError::Invalid(format!("n + t = {} exceeds sequence length {}", n + t, x.len())));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..=t {
        if seen.insert((0, n + i)) {
            out.push(StressPrompt::position(x.slice(0, n + i), i));
        }
    }
    for i in t..n {
        let start = n - 1 - i;
        if seen.insert((start, n)) {
            out.push(StressPrompt::position(x.slice(start, n), 0));
        }
    }
    Ok(out)
}

/// Maximal runs of ASCII letters or of ASCII digits, as `[start, end)`.
pub fn spans(tokens: &[u32]) -> Vec<(usize, usize)> {
    let class = |t: u32| match u8::try_from(t) {
        Ok(b) if b.is_ascii_alphabetic() => 1,
        Ok(b) if b.is_ascii_digit() => 2,
        _ => 0,
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let c = class(tokens[i]);
        if c == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < tokens.len() && class(tokens[i]) == c {
            i += 1;
        }
        out.push((start, i));
    }
    out
}

/// Source of replacement spans similar to a given span.
pub trait SimilarTokens: Send + Sync {
    fn similar(&self, span: &[u32]) -> Vec<Vec<u32>>;
}

/// Empty provider; yields no semantic prompts.
pub struct NoSubstitutes;

impl SimilarTokens for NoSubstitutes {
    fn similar(&self, _: &[u32]) -> Vec<Vec<u32>> {
        Vec::new()
    }
}

fn bytes_of(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

fn text_of(span: &[u32]) -> Option<String> {
    span.iter().map(|&t| u8::try_from(t).ok().map(char::from)).collect()
}

/// Same-class words of the synthetic grammar, with plural `s` preserved, and
/// nearby numbers for digit runs.
pub struct GrammarTable {
    pub per_span: usize,
    pub seed: u64,
}

impl GrammarTable {
    pub fn new(per_span: usize, seed: u64) -> Self {
        Self { per_span, seed }
    }

    fn rng_for(&self, span: &str) -> ChaCha8Rng {
        let h = span.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }
}

impl SimilarTokens for GrammarTable {
    fn similar(&self, span: &[u32]) -> Vec<Vec<u32>> {
        let Some(word) = text_of(span) else {
            return Vec::new();
        };
        if word.bytes().all(|b| b.is_ascii_digit()) {
            let v: u64 = match word.parse() {
                Ok(v) => v,
                Err(_) => return Vec::new(),
            };
            let mut out = Vec::new();
            let mut k = 1u64;
            while out.len() < self.per_span && k <= v + self.per_span as u64 {
                for c in [v.checked_add(k), v.checked_sub(k)].into_iter().flatten() {
                    if out.len() < self.per_span {
                        out.push(bytes_of(&c.to_string()));
                    }
                }
                k += 1;
            }
            return out;
        }
        let (stem, suffix) = match grammar::class_of(&word) {
            Some(_) => (word.as_str(), ""),
            None => match word.strip_suffix('s') {
                Some(s) if grammar::class_of(s).is_some() => (s, "s"),
                _ => return Vec::new(),
            },
        };
        let class = grammar::class_of(stem).expect("checked above");
        let mut pool: Vec<&String> = grammar::class_words(class).iter().filter(|w| w.as_str() != stem).collect();
        pool.shuffle(&mut self.rng_for(&word));
        pool.into_iter().take(self.per_span).map(|w| bytes_of(&format!("{w}{suffix}"))).collect()
    }
}

/// Nearest neighbours among candidate spans by cosine similarity of their
/// summed input embeddings. Spans outside the candidate set get no substitutes.
pub struct EmbeddingNeighbors {
    candidates: Vec<Vec<u32>>,
    vectors: Vec<Vec<f32>>,
    pub k: usize,
}

impl EmbeddingNeighbors {
    pub fn new(model: &Transformer, candidates: Vec<Vec<u32>>, k: usize) -> Result<Self> {
        let vectors = candidates.iter().map(|c| Self::embed(model, c)).collect::<Result<Vec<_>>>()?;
        Ok(Self { candidates, vectors, k })
    }

    /// Candidates drawn from every word of the synthetic lexicon.
    pub fn over_lexicon(model: &Transformer, k: usize) -> Result<Self> {
        let words = grammar::class_names().flat_map(|c| grammar::class_words(c).iter().map(|w| bytes_of(w))).collect();
        Self::new(model, words, k)
    }

    fn embed(model: &Transformer, span: &[u32]) -> Result<Vec<f32>> {
        let table = model.param("tok_embed").ok_or_else(|| LabError::Invalid("model has no tok_embed".into()))?;
        let d = table.last_dim();
        let mut v = vec![0.0f32; d];
        for &t in span {
            if t as usize >= table.rows() {
                return Err(LabError::OutOfRange { what: "token", index: t as usize, limit: table.rows() });
            }
            for (a, &b) in v.iter_mut().zip(table.row(t as usize)) {
                *a += b;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

impl SimilarTokens for EmbeddingNeighbors {
    fn similar(&self, span: &[u32]) -> Vec<Vec<u32>> {
        let Some(i) = self.candidates.iter().position(|c| c.as_slice() == span) else {
            return Vec::new();
        };
        let q = &self.vectors[i];
        let mut scored: Vec<(f32, usize)> = self
            .vectors
            .iter()
            .enumerate()
            .filter(|(i, _)| self.candidates[*i].as_slice() != span)
            .map(|(i, v)| (v.iter().zip(q).map(|(a, b)| a * b).sum::<f32>(), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(self.k).map(|(_, i)| self.candidates[i].clone()).collect()
    }
}

/// One prompt per (span, substitute): the span is replaced and everything
/// else kept.
pub fn semantic_perturbations(prompt: &TokenSeq, provider: &dyn SimilarTokens) -> Vec<StressPrompt> {
    let toks = prompt.tokens();
    let mut out = Vec::new();
    for (si, (a, b)) in spans(toks).into_iter().enumerate() {
        for sub in provider.similar(&toks[a..b]) {
            if sub.as_slice() == &toks[a..b] || sub.is_empty() {
                continue;
            }
            let mut p = toks[..a].to_vec();
            p.extend_from_slice(&sub);
            p.extend_from_slice(&toks[b..]);
            out.push(StressPrompt {
                category: Category::Semantic,
                prompt: TokenSeq::new(p, prompt.tokenizer()),
                extension: 0,
                span: Some(si),
                substitution: Some(sub),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressSuite {
    pub task: String,
    pub prompt: TokenSeq,
    pub continuation: TokenSeq,
    pub t: usize,
    /// First element is the unperturbed prompt.
    pub position: Vec<StressPrompt>,
    pub semantic: Vec<StressPrompt>,
}

impl StressSuite {
    pub fn build(task: &str, prompt: &TokenSeq, continuation: &TokenSeq, t: usize, provider: &dyn SimilarTokens) -> Result<Self> {
        let full = prompt.concat(continuation.tokens());
        let position = position_perturbations(&full, prompt.len(), t)?;
        Ok(Self {
            task: task.into(),
            prompt: prompt.clone(),
            continuation: continuation.clone(),
            t,
            position,
            semantic: semantic_perturbations(prompt, provider),
        })
    }

    pub fn len(&self) -> usize {
        self.position.len() + self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompts(&self) -> impl Iterator<Item = &StressPrompt> {
        self.position.iter().chain(&self.semantic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub category: Category,
    pub prompt_len: usize,
    pub extension: usize,
    pub length: usize,
    /// The context limit cut the continuation this prompt was scored on.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub task: String,
    pub original: usize,
    /// Max over the position family (includes the original prompt).
    pub position: usize,
    pub semantic: usize,
    pub per_prompt: Vec<PromptScore>,
}

/// Greedy match length of every prompt against the continuation tokens it
/// does not already contain, max-pooled per category.
pub fn evaluate_suite(model: &Transformer, suite: &StressSuite) -> Result<SuiteResult> {
    let prompts: Vec<&StressPrompt> = suite.prompts().collect();
    let cont = suite.continuation.tokens();
    let max_ctx = model.config().max_context;
    let per_prompt = par::try_map(&prompts, |sp| -> Result<PromptScore> {
        let p = sp.prompt.tokens();
        let gold = &cont[sp.extension.min(cont.len())..];
        if p.len() > max_ctx {
            return Ok(PromptScore { category: sp.category, prompt_len: p.len(), extension: sp.extension, length: 0, truncated: true });
        }
        let room = max_ctx - p.len() + 1;
        let truncated = gold.len() > room;
        let gold = &gold[..gold.len().min(room)];
        let length = if gold.is_empty() {
            0
        } else {
            let mut ctx = p.to_vec();
            ctx.extend_from_slice(&gold[..gold.len() - 1]);
            let pred = model.predict_next(&ctx)?;
            longest_prefix_match(&pred[p.len() - 1..], gold)
        };
        Ok(PromptScore { category: sp.category, prompt_len: p.len(), extension: sp.extension, length, truncated })
    })?;
    let pooled = |c: Category| per_prompt.iter().filter(|s| s.category == c).map(|s| s.length).max().unwrap_or(0);
    let original = per_prompt.first().map(|s| s.length).unwrap_or(0);
    let result =
        SuiteResult { task: suite.task.clone(), original, position: pooled(Category::Position), semantic: pooled(Category::Semantic), per_prompt };
    if result.position < result.original {
        return Err(LabError::Analysis("pooled position length below original".into()));
    }
    Ok(result)
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressRow {
    pub task: String,
    pub method: String,
    pub original_len: usize,
    pub position_len: usize,
    pub semantic_len: usize,
}

impl StressRow {
    pub fn new(method: &str, r: &SuiteResult) -> Self {
        Self {
            task: r.task.clone(),
            method: method.into(),
            original_len: r.original,
            position_len: r.position,
            semantic_len: r.semantic,
        }
    }
}

pub fn write_csv(mut w: impl Write, rows: &[StressRow]) -> Result<()> {
    writeln!(w, "task,method,original_len,position_len,semantic_len")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.task, r.method, r.original_len, r.position_len, r.semantic_len)?;
    }
    Ok(())
}

/// `(mean, population std)` per method and category.
pub fn summarize(rows: &[StressRow]) -> BTreeMap<String, [(f64, f64); 3]> {
    let mut by: BTreeMap<String, Vec<&StressRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.method.clone()).or_default().push(r);
    }
    by.into_iter()
        .map(|(m, rs)| {
            let stat = |f: &dyn Fn(&StressRow) -> usize| {
                let xs: Vec<f64> = rs.iter().map(|r| f(r) as f64).collect();
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
                (mean, var.sqrt())
            };
            (m, [stat(&|r| r.original_len), stat(&|r| r.position_len), stat(&|r| r.semantic_len)])
        })
        .collect()
}
