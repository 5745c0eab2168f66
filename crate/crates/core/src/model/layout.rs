use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

/// Coarse parameter groups used by trainable masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Attention,
    Mlp,
    Norms,
    Unembedding,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Embeddings, ParamGroup::Attention, ParamGroup::Mlp, ParamGroup::Norms, ParamGroup::Unembedding];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) const TOK_EMBED: usize = 0;
pub(crate) const POS_EMBED: usize = 1;
const BLOCK_BASE: usize = 2;
const PER_BLOCK: usize = 12;

/// Offsets of a block's tensors inside the flat parameter list.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

pub(crate) fn block(i: usize) -> BlockIdx {
    let b = BLOCK_BASE + PER_BLOCK * i;
    BlockIdx {
        ln1_g: b,
        ln1_b: b + 1,
        w_qkv: b + 2,
        b_qkv: b + 3,
        w_o: b + 4,
        b_o: b + 5,
        ln2_g: b + 6,
        ln2_b: b + 7,
        w_in: b + 8,
        b_in: b + 9,
        w_out: b + 10,
        b_out: b + 11,
    }
}

pub(crate) fn ln_f(cfg: &ModelConfig) -> (usize, usize) {
    let b = BLOCK_BASE + PER_BLOCK * cfg.n_layers;
    (b, b + 1)
}

/// `None` when the unembedding is tied to the token embedding.
pub(crate) fn unembed(cfg: &ModelConfig) -> Option<usize> {
    (!cfg.tie_embeddings).then(|| BLOCK_BASE + PER_BLOCK * cfg.n_layers + 2)
}

/// Names, shapes and groups of every parameter, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, v, m) = (cfg.d_model, cfg.vocab_size, cfg.d_mlp);
    let spec = |name: String, shape: Vec<usize>, group| ParamSpec { name, shape, group };
    let mut out = vec![
        spec("tok_embed".into(), vec![v, d], ParamGroup::Embeddings),
        spec("pos_embed".into(), vec![cfg.max_context, d], ParamGroup::Embeddings),
    ];
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            spec(p("ln1.g"), vec![d], ParamGroup::Norms),
            spec(p("ln1.b"), vec![d], ParamGroup::Norms),
            spec(p("attn.w_qkv"), vec![d, 3 * d], ParamGroup::Attention),
            spec(p("attn.b_qkv"), vec![3 * d], ParamGroup::Attention),
            spec(p("attn.w_o"), vec![d, d], ParamGroup::Attention),
            spec(p("attn.b_o"), vec![d], ParamGroup::Attention),
            spec(p("ln2.g"), vec![d], ParamGroup::Norms),
            spec(p("ln2.b"), vec![d], ParamGroup::Norms),
            spec(p("mlp.w_in"), vec![d, m], ParamGroup::Mlp),
            spec(p("mlp.b_in"), vec![m], ParamGroup::Mlp),
            spec(p("mlp.w_out"), vec![m, d], ParamGroup::Mlp),
            spec(p("mlp.b_out"), vec![d], ParamGroup::Mlp),
        ]);
    }
    out.push(spec("ln_f.g".into(), vec![d], ParamGroup::Norms));
    out.push(spec("ln_f.b".into(), vec![d], ParamGroup::Norms));
    if !cfg.tie_embeddings {
        out.push(spec("unembed.w".into(), vec![d, v], ParamGroup::Unembedding));
    }
    out
}
