use std::collections::BTreeMap;

use memlab_tensor::{argmax, ParamId, RowPatch, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::hooks::{ActivationTrace, HookLocation, Intervention, Site, TraceRequest};
use super::layout::{self, param_specs, ParamGroup, ParamSpec};
use crate::error::{LabError, Result};
use crate::tokens::TokenSeq;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Everything a forward pass may do beyond the plain computation.
#[derive(Clone, Debug)]
pub struct ForwardOptions<'a, S = f32> {
    pub interventions: &'a [Intervention<S>],
    pub trace: TraceRequest,
    /// Per-layer multipliers on the MLP hidden units (after the nonlinearity).
    pub gates: Option<&'a [Vec<S>]>,
}

impl<S> Default for ForwardOptions<'_, S> {
    fn default() -> Self {
        Self { interventions: &[], trace: TraceRequest::none(), gates: None }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S = f32> {
    /// `[seqs * seq_len, vocab]`
    pub logits: Tensor<S>,
    pub trace: ActivationTrace<S>,
}

/// Graph-building inputs shared by inference and training.
pub struct GraphInputs<'a, S> {
    pub seqs: &'a [&'a [u32]],
    pub interventions: &'a [Intervention<S>],
    pub trace: &'a TraceRequest,
    pub gates: Option<&'a [Var]>,
}

/// Decoder-only pre-norm transformer with a flat parameter list (see
/// [`param_specs`] for the order).
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<S: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Tensor<S>>,
}

impl<S: Scalar> Transformer<S> {
    /// Gaussian init; residual output projections are scaled by `1/sqrt(2 L)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let params = param_specs(&config)
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let leaf = spec.name.rsplit('.').next().unwrap_or("");
                let data: Vec<S> = match leaf {
                    "g" => vec![S::one(); n],
                    "b" | "b_qkv" | "b_o" | "b_in" | "b_out" => vec![S::zero(); n],
                    _ => {
                        let std = if leaf == "w_o" || leaf == "w_out" { resid_std } else { INIT_STD };
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| S::lit(dist.sample(&mut rng))).collect()
                    }
                };
                Tensor::new(spec.shape.clone(), data).map_err(LabError::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(LabError::Config(format!("expected {} tensors, got {}", specs.len(), params.len())));
        }
        for (spec, t) in specs.iter().zip(&params) {
            if spec.shape != t.shape() {
                return Err(LabError::Config(format!("{}: expected {:?}, got {:?}", spec.name, spec.shape, t.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.config)
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor<S>> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.specs().iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Transformer<T> {
        Transformer { config: self.config.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// All weights as tape constants.
    pub fn bind_constants(&self, tape: &mut Tape<S>) -> Result<Vec<Var>> {
        self.bind(tape, |_| false)
    }

    /// Weights in groups accepted by `trainable` become tape parameters
    /// (`ParamId` = index in [`param_specs`]); the rest are constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(ParamGroup) -> bool) -> Result<Vec<Var>> {
        param_specs(&self.config)
            .iter()
            .zip(&self.params)
            .enumerate()
            .map(|(i, (spec, t))| {
                let v = if trainable(spec.group) { tape.param(ParamId(i), t.clone()) } else { tape.constant(t.clone()) };
                v.map_err(LabError::from)
            })
            .collect()
    }

    pub fn forward_with(&self, seqs: &[&[u32]], opts: &ForwardOptions<'_, S>) -> Result<ForwardOutput<S>> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape)?;
        let gate_vars = match opts.gates {
            Some(g) => Some(self.gate_constants(&mut tape, g)?),
            None => None,
        };
        let inputs = GraphInputs { seqs, interventions: opts.interventions, trace: &opts.trace, gates: gate_vars.as_deref() };
        let (logits, trace) = forward_graph(&self.config, &mut tape, &vars, &inputs)?;
        Ok(ForwardOutput { logits: tape.value(logits).clone(), trace })
    }

    fn gate_constants(&self, tape: &mut Tape<S>, gates: &[Vec<S>]) -> Result<Vec<Var>> {
        if gates.len() != self.config.n_layers {
            return Err(LabError::Invalid(format!("{} gate vectors for {} layers", gates.len(), self.config.n_layers)));
        }
        gates.iter().map(|g| tape.constant(Tensor::from_vec(g.clone())).map_err(LabError::from)).collect()
    }

    /// Single-sequence forward: `[len, vocab]` logits and the requested trace.
    pub fn forward(
        &self,
        tokens: &[u32],
        interventions: &[Intervention<S>],
        trace: &TraceRequest,
    ) -> Result<(Tensor<S>, ActivationTrace<S>)> {
        let opts = ForwardOptions { interventions, trace: trace.clone(), gates: None };
        let out = self.forward_with(&[tokens], &opts)?;
        Ok((out.logits, out.trace))
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        Ok(self.forward(tokens, &[], &TraceRequest::none())?.0)
    }

    /// Activation the plain forward computes at `loc`.
    pub fn get_val(&self, tokens: &[u32], loc: HookLocation) -> Result<Vec<S>> {
        self.check_loc(loc, tokens.len())?;
        let (_, trace) = self.forward(tokens, &[], &TraceRequest::sites(&[loc.site]))?;
        trace.get(0, loc).map(<[S]>::to_vec).ok_or_else(|| LabError::Invalid(format!("{loc} missing from trace")))
    }

    fn check_loc(&self, loc: HookLocation, len: usize) -> Result<()> {
        if loc.layer >= self.config.n_layers {
            return Err(LabError::OutOfRange { what: "layer", index: loc.layer, limit: self.config.n_layers });
        }
        if loc.pos >= len {
            return Err(LabError::OutOfRange { what: "token position", index: loc.pos, limit: len });
        }
        Ok(())
    }

    /// Argmax next token at every position (teacher forcing).
    pub fn predict_next(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        Ok(self.logits(tokens)?.argmax_rows().into_iter().map(|t| t as u32).collect())
    }

    pub fn generate_greedy(&self, prompt: &TokenSeq, n_tokens: usize) -> Result<TokenSeq> {
        self.generate_with(prompt, n_tokens, &[])
    }

    /// Greedy decoding with `interventions` re-applied on every step. Each
    /// step recomputes the whole context, so patched positions must lie in
    /// the prompt or in tokens already generated.
    pub fn generate_with(&self, prompt: &TokenSeq, n_tokens: usize, interventions: &[Intervention<S>]) -> Result<TokenSeq> {
        if prompt.is_empty() {
            return Err(LabError::Invalid("empty prompt".into()));
        }
        let needed = prompt.len() + n_tokens;
        if needed > self.config.max_context {
            return Err(LabError::ContextOverflow { needed, max: self.config.max_context });
        }
        let mut ctx = prompt.tokens().to_vec();
        let mut out = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let (logits, _) = self.forward(&ctx, interventions, &TraceRequest::none())?;
            let next = argmax(logits.row(ctx.len() - 1)) as u32;
            ctx.push(next);
            out.push(next);
        }
        Ok(TokenSeq::new(out, prompt.tokenizer()))
    }

    /// Mean next-token cross-entropy over every position of every sequence.
    pub fn loss(&self, batch: &[TokenSeq]) -> Result<f64> {
        if batch.is_empty() {
            return Err(LabError::Invalid("empty batch".into()));
        }
        let mut by_len: BTreeMap<usize, Vec<&[u32]>> = BTreeMap::new();
        for s in batch {
            if s.len() < 2 {
                return Err(LabError::Invalid(format!("sequence of length {} has no next-token target", s.len())));
            }
            by_len.entry(s.len()).or_default().push(s.tokens());
        }
        let (mut total, mut count) = (0.0, 0usize);
        for (len, seqs) in by_len {
            let mut tape = Tape::new();
            let vars = self.bind_constants(&mut tape)?;
            let l = lm_loss(&self.config, &mut tape, &vars, &seqs, None)?;
            let n = seqs.len() * (len - 1);
            total += tape.value(l).item()?.as_f64() * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }
}

impl Transformer<f64> {
    /// Worst relative error between the autodiff gradient of the mean LM loss
    /// on `seqs` and central finite differences with step `eps`, over every
    /// weight.
    pub fn loss_grad_check(&self, seqs: &[&[u32]], eps: f64) -> Result<f64> {
        let cfg = &self.config;
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            lm_loss(cfg, tape, vars, seqs, None).map_err(|e| match e {
                LabError::Tensor(t) => t,
                other => memlab_tensor::TensorError::Invalid(other.to_string()),
            })
        };
        Ok(memlab_tensor::grad_check_many(f, &self.params, eps)?)
    }
}

/// Next-token targets for equal-length sequences packed row-major.
pub fn shifted_targets(seqs: &[&[u32]]) -> Vec<Option<u32>> {
    let mut targets = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum());
    for s in seqs {
        targets.extend(s[1..].iter().map(|&t| Some(t)));
        targets.push(None);
    }
    targets
}

/// Mean next-token cross-entropy node for equal-length sequences.
pub fn lm_loss<S: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<S>,
    params: &[Var],
    seqs: &[&[u32]],
    gates: Option<&[Var]>,
) -> Result<Var> {
    let inputs = GraphInputs { seqs, interventions: &[], trace: &TraceRequest::none(), gates };
    let (logits, _) = forward_graph(cfg, tape, params, &inputs)?;
    Ok(tape.cross_entropy(logits, &shifted_targets(seqs))?)
}

struct Hooks<'a, S> {
    patches: BTreeMap<(usize, Site), Vec<RowPatch<S>>>,
    trace: &'a TraceRequest,
    n_layers: usize,
    out: ActivationTrace<S>,
}

impl<S: Scalar> Hooks<'_, S> {
    fn apply(&mut self, tape: &mut Tape<S>, layer: usize, site: Site, x: Var) -> Result<Var> {
        let x = match self.patches.get(&(layer, site)) {
            Some(p) => tape.patch_rows(x, p)?,
            None => x,
        };
        let keep = self.trace.wants(site)
            || (site == Site::ResidPost && layer + 1 < self.n_layers && self.trace.wants(Site::ResidPre));
        if keep {
            self.out.values.insert((layer, site), tape.value(x).clone());
        }
        Ok(x)
    }
}

/// Records the transformer on `tape` and returns the `[seqs * len, vocab]`
/// logits node together with the requested activations.
pub fn forward_graph<S: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<S>,
    params: &[Var],
    inputs: &GraphInputs<'_, S>,
) -> Result<(Var, ActivationTrace<S>)> {
    let seqs = inputs.seqs;
    let Some(first) = seqs.first() else {
        return Err(LabError::Invalid("empty batch".into()));
    };
    let t = first.len();
    if t == 0 || seqs.iter().any(|s| s.len() != t) {
        return Err(LabError::Invalid("batch sequences must be non-empty and of equal length".into()));
    }
    if t > cfg.max_context {
        return Err(LabError::ContextOverflow { needed: t, max: cfg.max_context });
    }
    if params.len() != param_specs(cfg).len() {
        return Err(LabError::Invalid(format!("{} parameter vars for {} tensors", params.len(), param_specs(cfg).len())));
    }
    let b = seqs.len();
    let d = cfg.d_model;

    let mut patches: BTreeMap<(usize, Site), Vec<RowPatch<S>>> = BTreeMap::new();
    for iv in inputs.interventions {
        let loc = iv.loc;
        if loc.layer >= cfg.n_layers {
            return Err(LabError::OutOfRange { what: "layer", index: loc.layer, limit: cfg.n_layers });
        }
        if loc.pos >= t {
            return Err(LabError::OutOfRange { what: "token position", index: loc.pos, limit: t });
        }
        if iv.seq >= b {
            return Err(LabError::OutOfRange { what: "batch element", index: iv.seq, limit: b });
        }
        if iv.value.len() != d {
            return Err(LabError::Invalid(format!("intervention at {loc} has {} values, expected {d}", iv.value.len())));
        }
        let c = loc.canonical();
        patches.entry((c.layer, c.site)).or_default().push(RowPatch { row: iv.seq * t + loc.pos, value: iv.value.clone() });
    }
    if let Some(g) = inputs.gates {
        if g.len() != cfg.n_layers {
            return Err(LabError::Invalid(format!("{} gate vars for {} layers", g.len(), cfg.n_layers)));
        }
    }
    let mut hooks = Hooks {
        patches,
        trace: inputs.trace,
        n_layers: cfg.n_layers,
        out: ActivationTrace { seq_len: t, values: BTreeMap::new() },
    };

    let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
    let tok = tape.embedding(params[layout::TOK_EMBED], &ids)?;
    let pos = tape.embedding(params[layout::POS_EMBED], &pos_ids)?;
    let mut x = tape.add(tok, pos)?;
    x = hooks.apply(tape, 0, Site::ResidPre, x)?;

    for i in 0..cfg.n_layers {
        let bi = layout::block(i);
        let p = |k: usize| params[k];
        let a_in = tape.layer_norm(x, p(bi.ln1_g), p(bi.ln1_b), LN_EPS)?;
        let a_in = hooks.apply(tape, i, Site::AttnIn, a_in)?;
        let qkv = tape.matmul(a_in, p(bi.w_qkv))?;
        let qkv = tape.add_bias(qkv, p(bi.b_qkv))?;
        let att = tape.causal_attention(qkv, b, t, cfg.n_heads)?;
        let ao = tape.matmul(att, p(bi.w_o))?;
        let ao = tape.add_bias(ao, p(bi.b_o))?;
        let ao = hooks.apply(tape, i, Site::AttnOut, ao)?;
        let mid = tape.add(x, ao)?;

        let m_in = tape.layer_norm(mid, p(bi.ln2_g), p(bi.ln2_b), LN_EPS)?;
        let m_in = hooks.apply(tape, i, Site::MlpIn, m_in)?;
        let h = tape.matmul(m_in, p(bi.w_in))?;
        let h = tape.add_bias(h, p(bi.b_in))?;
        let mut h = tape.gelu(h)?;
        if let Some(g) = inputs.gates {
            h = tape.mul_cols(h, g[i])?;
        }
        let mo = tape.matmul(h, p(bi.w_out))?;
        let mo = tape.add_bias(mo, p(bi.b_out))?;
        let mo = hooks.apply(tape, i, Site::MlpOut, mo)?;
        x = tape.add(mid, mo)?;
        x = hooks.apply(tape, i, Site::ResidPost, x)?;
    }

    let (g, bb) = layout::ln_f(cfg);
    let f = tape.layer_norm(x, params[g], params[bb], LN_EPS)?;
    let logits = match layout::unembed(cfg) {
        Some(u) => tape.matmul(f, params[u])?,
        None => tape.matmul_bt(f, params[layout::TOK_EMBED])?,
    };
    Ok((logits, hooks.out))
}
