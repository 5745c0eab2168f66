//! Named activation sites of the residual stream.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use memlab_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::LabError;

/// Tap point inside a block.
///
/// Within block `i` the stream is
/// `resid_pre -> attn_in = ln1(.) -> attn_out -> (resid_pre + attn_out)
///  -> mlp_in = ln2(.) -> mlp_out -> resid_post`.
/// `resid_post` of block `i` is the same value as `resid_pre` of block `i + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    ResidPre,
    AttnIn,
    AttnOut,
    MlpIn,
    MlpOut,
    ResidPost,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::ResidPre, Site::AttnIn, Site::AttnOut, Site::MlpIn, Site::MlpOut, Site::ResidPost];

    pub fn name(self) -> &'static str {
        match self {
            Site::ResidPre => "resid_pre",
            Site::AttnIn => "attn_in",
            Site::AttnOut => "attn_out",
            Site::MlpIn => "mlp_in",
            Site::MlpOut => "mlp_out",
            Site::ResidPost => "resid_post",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| LabError::Invalid(format!("unknown site {s:?}")))
    }
}

/// One interventable activation: `(layer, token position, site)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookLocation {
    pub layer: usize,
    pub pos: usize,
    pub site: Site,
}

impl HookLocation {
    pub fn new(layer: usize, pos: usize, site: Site) -> Self {
        Self { layer, pos, site }
    }

    /// `resid_pre` of layer `i > 0` is stored as `resid_post` of layer `i - 1`.
    pub(crate) fn canonical(self) -> Self {
        match (self.site, self.layer) {
            (Site::ResidPre, l) if l > 0 => Self { layer: l - 1, pos: self.pos, site: Site::ResidPost },
            _ => self,
        }
    }
}

impl fmt::Display for HookLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}@{}", self.layer, self.site, self.pos)
    }
}

/// Overwrite of one activation vector in one batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention<S = f32> {
    pub seq: usize,
    pub loc: HookLocation,
    pub value: Vec<S>,
}

impl<S> Intervention<S> {
    pub fn new(loc: HookLocation, value: Vec<S>) -> Self {
        Self { seq: 0, loc, value }
    }

    pub fn on_seq(seq: usize, loc: HookLocation, value: Vec<S>) -> Self {
        Self { seq, loc, value }
    }
}

/// Which sites to keep from a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceRequest {
    sites: Vec<Site>,
}

impl TraceRequest {
    pub fn none() -> Self {
        Self { sites: Vec::new() }
    }

    pub fn all() -> Self {
        Self { sites: Site::ALL.to_vec() }
    }

    pub fn sites(sites: &[Site]) -> Self {
        Self { sites: sites.to_vec() }
    }

    pub fn wants(&self, site: Site) -> bool {
        self.sites.contains(&site)
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

/// Activations recorded for a batch; values are `[seqs * seq_len, d_model]`
/// per `(layer, site)`.
#[derive(Clone, Debug, Default)]
pub struct ActivationTrace<S = f32> {
    pub(crate) seq_len: usize,
    pub(crate) values: BTreeMap<(usize, Site), Tensor<S>>,
}

impl<S: Scalar> ActivationTrace<S> {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Vector at `loc` for batch element `seq`, if that site was traced.
    pub fn get(&self, seq: usize, loc: HookLocation) -> Option<&[S]> {
        let direct = self.values.get(&(loc.layer, loc.site));
        let t = match direct {
            Some(t) => t,
            None => self.values.get(&{
                let c = loc.canonical();
                (c.layer, c.site)
            })?,
        };
        if loc.pos >= self.seq_len {
            return None;
        }
        let row = seq * self.seq_len + loc.pos;
        (row < t.rows()).then(|| t.row(row))
    }

    pub fn layer_site(&self, layer: usize, site: Site) -> Option<&Tensor<S>> {
        self.values.get(&(layer, site))
    }

    pub fn locations(&self) -> impl Iterator<Item = (usize, Site)> + '_ {
        self.values.keys().copied()
    }
}
