use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::forced_match_len;
use crate::model::{ActivationTrace, HookLocation, Intervention, Site, TraceRequest, Transformer};
use crate::par;
use crate::tokens::TokenSeq;

/// Default minimum of `p_out - p_none` for a reuse ratio to be reported.
pub const REUSE_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attention,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Stream from the treatment model, component input pinned to the control's own value.
    #[serde(rename = "l_none")]
    None,
    /// Stream and component input from the treatment model; the control's component runs on it.
    #[serde(rename = "l_in")]
    In,
    /// Stream and component output from the treatment model.
    #[serde(rename = "l_out")]
    Out,
}

/// Which model a patched value is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Treatment,
    /// The control model's own unpatched value on the same input.
    Control,
}

/// Site set patched at every trigger position of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocationSet {
    pub variant: Variant,
    pub layer: usize,
    pub component: Component,
}

impl LocationSet {
    pub fn new(variant: Variant, layer: usize, component: Component) -> Self {
        Self { variant, layer, component }
    }

    /// The whole residual stream after the last block.
    pub fn final_residual(n_layers: usize) -> Self {
        Self::new(Variant::Out, n_layers - 1, Component::Mlp)
    }

    /// Every set for every layer and component.
    pub fn all(n_layers: usize) -> Vec<Self> {
        let mut out = Vec::new();
        for layer in 0..n_layers {
            for component in [Component::Attention, Component::Mlp] {
                for variant in [Variant::None, Variant::In, Variant::Out] {
                    out.push(Self::new(variant, layer, component));
                }
            }
        }
        out
    }

    /// Patched sites and where their values come from.
    ///
    /// For the MLP of layer `i`, `l_none` carries the treatment's residual
    /// and attention output but feeds the MLP the control's own input;
    /// `l_out` is equivalent to the treatment's `resid_post` of layer `i`.
    pub fn sites(&self) -> Vec<(Site, Source)> {
        use Source::*;
        match (self.component, self.variant) {
            (Component::Mlp, Variant::None) => vec![(Site::ResidPre, Treatment), (Site::AttnOut, Treatment), (Site::MlpIn, Control)],
            (Component::Mlp, Variant::In) => vec![(Site::ResidPre, Treatment), (Site::AttnOut, Treatment), (Site::MlpIn, Treatment)],
            (Component::Mlp, Variant::Out) => vec![(Site::ResidPre, Treatment), (Site::AttnOut, Treatment), (Site::MlpOut, Treatment)],
            (Component::Attention, Variant::None) => vec![(Site::ResidPre, Treatment), (Site::AttnIn, Control)],
            (Component::Attention, Variant::In) => vec![(Site::ResidPre, Treatment), (Site::AttnIn, Treatment)],
            (Component::Attention, Variant::Out) => vec![(Site::ResidPre, Treatment), (Site::AttnOut, Treatment)],
        }
    }
}

impl std::fmt::Display for LocationSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = match self.variant {
            Variant::None => "l_none",
            Variant::In => "l_in",
            Variant::Out => "l_out",
        };
        let c = match self.component {
            Component::Attention => "attn",
            Component::Mlp => "mlp",
        };
        write!(f, "{v}.{c}.{}", self.layer)
    }
}

fn check_pair(control: &Transformer, treatment: &Transformer) -> Result<()> {
    if control.config() != treatment.config() {
        return Err(LabError::Config("control and treatment configs differ".into()));
    }
    Ok(())
}

fn traced(model: &Transformer, trigger: &[u32]) -> Result<ActivationTrace> {
    Ok(model.forward(trigger, &[], &TraceRequest::all())?.1)
}

fn build_interventions(set: &LocationSet, len: usize, treat: &ActivationTrace, ctrl: &ActivationTrace) -> Result<Vec<Intervention>> {
    let mut ivs = Vec::new();
    for (site, source) in set.sites() {
        let trace = match source {
            Source::Treatment => treat,
            Source::Control => ctrl,
        };
        for pos in 0..len {
            let loc = HookLocation::new(set.layer, pos, site);
            let v = trace.get(0, loc).ok_or_else(|| LabError::Invalid(format!("{loc} missing from trace")))?;
            ivs.push(Intervention::new(loc, v.to_vec()));
        }
    }
    Ok(ivs)
}

/// Greedy decodes `n` tokens from the control model with every site of
/// `set` overwritten at all trigger positions, and reports whether they equal
/// the treatment model's own first `n` tokens.
///
/// The patch is re-applied on every decode step. Trigger activations do not
/// depend on later tokens, so re-extracting them per step gives the same
/// values as extracting once.
pub fn cross_model_intervene(control: &Transformer, treatment: &Transformer, trigger: &TokenSeq, set: &LocationSet, n: usize) -> Result<bool> {
    check_pair(control, treatment)?;
    let ex = CrossExample::from_treatment(treatment, trigger, n)?;
    Ok(decode_patched(control, treatment, &ex, set, n)? >= n)
}

/// Length of agreement between the patched control decode and `ex.target`.
fn decode_patched(control: &Transformer, treatment: &Transformer, ex: &CrossExample, set: &LocationSet, n: usize) -> Result<usize> {
    if set.layer >= control.config().n_layers {
        return Err(LabError::OutOfRange { what: "layer", index: set.layer, limit: control.config().n_layers });
    }
    let trig = ex.trigger.tokens();
    let ivs = build_interventions(set, trig.len(), &traced(treatment, trig)?, &traced(control, trig)?)?;
    let out = control.generate_with(&ex.trigger, n, &ivs)?;
    Ok(crate::metrics::longest_prefix_match(out.tokens(), &ex.target[..n.min(ex.target.len())]))
}

/// Trigger and the tokens the treatment model decodes from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossExample {
    pub sequence_id: String,
    pub trigger: TokenSeq,
    pub target: Vec<u32>,
}

impl CrossExample {
    pub fn from_treatment(treatment: &Transformer, trigger: &TokenSeq, n: usize) -> Result<Self> {
        let target = treatment.generate_greedy(trigger, n)?.tokens().to_vec();
        Ok(Self { sequence_id: String::new(), trigger: trigger.clone(), target })
    }
}

/// Triggers inside injected sequences where the treatment model continues
/// with the next `n_max` true tokens while the control model, given the true
/// prefix, mispredicts every one of them.
///
/// Candidate triggers are the prefixes of each sequence of length
/// `trigger_len`, starting every `stride` tokens; at most `per_seq` are kept
/// per sequence.
pub fn select_examples(
    control: &Transformer,
    treatment: &Transformer,
    seqs: &[TokenSeq],
    trigger_len: usize,
    n_max: usize,
    stride: usize,
    per_seq: usize,
) -> Result<Vec<CrossExample>> {
    check_pair(control, treatment)?;
    if trigger_len == 0 || n_max == 0 || stride == 0 {
        return Err(LabError::Config("trigger_len, n_max and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for (i, x) in seqs.iter().enumerate() {
        let toks = x.tokens();
        let mut kept = 0;
        let mut a = 0;
        while a + trigger_len + n_max <= toks.len() && kept < per_seq {
            let trig = &toks[a..a + trigger_len];
            let gold = &toks[a + trigger_len..a + trigger_len + n_max];
            if forced_match_len(treatment, trig, gold)? == n_max {
                let mut ctx = trig.to_vec();
                ctx.extend_from_slice(&gold[..n_max - 1]);
                let pred = control.predict_next(&ctx)?;
                let novel = pred[trigger_len - 1..].iter().zip(gold).all(|(p, g)| p != g);
                if novel {
                    out.push(CrossExample { sequence_id: i.to_string(), trigger: x.slice(a, a + trigger_len), target: gold.to_vec() });
                    kept += 1;
                }
            }
            a += stride;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub set: LocationSet,
    /// `n -> p_{l,n}`
    pub p: BTreeMap<usize, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseRatio {
    pub value: Option<f64>,
    pub denominator: f64,
    pub valid: bool,
}

/// `R = (p_in - p_none) / (p_out - p_none)`, withheld when the denominator
/// is below `floor`.
pub fn reuse_ratio(p_in: f64, p_none: f64, p_out: f64, floor: f64) -> ReuseRatio {
    let denominator = p_out - p_none;
    let valid = denominator >= floor && denominator > 0.0;
    ReuseRatio { value: valid.then(|| (p_in - p_none) / denominator), denominator, valid }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseScore {
    pub layer: usize,
    pub component: Component,
    pub n: usize,
    pub ratio: ReuseRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossModelResult {
    pub examples: usize,
    pub ns: Vec<usize>,
    pub floor: f64,
    pub sets: Vec<SetScore>,
    pub reuse: Vec<ReuseScore>,
}

impl CrossModelResult {
    pub fn p(&self, set: &LocationSet, n: usize) -> Option<f64> {
        self.sets.iter().find(|s| &s.set == set).and_then(|s| s.p.get(&n).copied())
    }
}

/// `p_{l,n}` for every set and `n`, plus reuse ratios wherever the three
/// variants of a (layer, component) pair were scanned.
pub fn cross_model_scan(
    control: &Transformer,
    treatment: &Transformer,
    examples: &[CrossExample],
    sets: &[LocationSet],
    ns: &[usize],
    floor: f64,
) -> Result<CrossModelResult> {
    check_pair(control, treatment)?;
    let n_max = ns.iter().copied().max().unwrap_or(0);
    if n_max == 0 || ns.contains(&0) {
        return Err(LabError::Config("decode lengths must be positive".into()));
    }
    if let Some(short) = examples.iter().find(|e| e.target.len() < n_max) {
        return Err(LabError::Invalid(format!("example target has {} tokens, need {n_max}", short.target.len())));
    }
    let jobs: Vec<(usize, usize)> = (0..sets.len()).flat_map(|s| (0..examples.len()).map(move |e| (s, e))).collect();
    let agree = par::try_map(&jobs, |&(s, e)| decode_patched(control, treatment, &examples[e], &sets[s], n_max))?;

    let mut scores = Vec::with_capacity(sets.len());
    for (s, set) in sets.iter().enumerate() {
        let lens = &agree[s * examples.len()..(s + 1) * examples.len()];
        let p = ns
            .iter()
            .map(|&n| {
                let hits = lens.iter().filter(|&&m| m >= n).count();
                let frac = if examples.is_empty() { 0.0 } else { hits as f64 / examples.len() as f64 };
                (n, frac)
            })
            .collect();
        scores.push(SetScore { set: *set, p });
    }
    let mut result = CrossModelResult { examples: examples.len(), ns: ns.to_vec(), floor, sets: scores, reuse: Vec::new() };
    let mut pairs: Vec<(usize, Component)> = sets.iter().map(|s| (s.layer, s.component)).collect();
    pairs.sort();
    pairs.dedup();
    for (layer, component) in pairs {
        for &n in ns {
            let p = |v| result.p(&LocationSet::new(v, layer, component), n);
            if let (Some(pn), Some(pi), Some(po)) = (p(Variant::None), p(Variant::In), p(Variant::Out)) {
                result.reuse.push(ReuseScore { layer, component, n, ratio: reuse_ratio(pi, pn, po, floor) });
            }
        }
    }
    Ok(result)
}
