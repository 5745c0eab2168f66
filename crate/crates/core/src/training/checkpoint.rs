use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use memlab_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::optimizer::{AdamW, OptimizerState};
use crate::binio::{Reader, Writer};
use crate::error::{LabError, Result};
use crate::model::{param_specs, ModelConfig, Transformer};

const MAGIC: &[u8; 4] = b"MLCK";
const VERSION: u32 = 1;

/// Where a checkpoint's training data came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stream_id: String,
    pub schedule_id: Option<String>,
}

/// Weights, optimizer state and the global step index.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Transformer,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Freshly initialised model with zero moments at step 0.
    pub fn init(config: ModelConfig, seed: u64, hyper: AdamW) -> Result<Self> {
        let model = Transformer::init(config, seed)?;
        let optimizer = OptimizerState::fresh(hyper, model.params());
        Ok(Self { model, optimizer, step: 0, provenance: Provenance::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = Writer(w);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        let c = self.config();
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_head, c.d_mlp, c.vocab_size, c.max_context] {
            w.len(v)?;
        }
        w.u8(c.tie_embeddings as u8)?;

        let specs = param_specs(c);
        w.len(specs.len())?;
        for (spec, t) in specs.iter().zip(self.model.params()) {
            w.str(&spec.name)?;
            w.tensor(t)?;
        }

        let o = &self.optimizer;
        w.u64(o.step)?;
        for v in [o.hyper.lr, o.hyper.beta1, o.hyper.beta2, o.hyper.eps, o.hyper.weight_decay] {
            w.f64(v)?;
        }
        w.len(2 * specs.len())?;
        for (prefix, moments) in [("m", &o.m), ("v", &o.v)] {
            for (spec, t) in specs.iter().zip(moments) {
                w.str(&format!("{prefix}.{}", spec.name))?;
                w.tensor(t)?;
            }
        }

        w.u64(self.step)?;
        w.str(&self.provenance.stream_id)?;
        match &self.provenance.schedule_id {
            Some(s) => {
                w.u8(1)?;
                w.str(s)?;
            }
            None => w.u8(0)?,
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader(r);
        if &r.exact::<4>()? != MAGIC {
            return Err(LabError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(LabError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.len()?;
        }
        let [n_layers, d_model, n_heads, d_head, d_mlp, vocab_size, max_context] = dims;
        let tie_embeddings = r.u8()? != 0;
        let config = ModelConfig { n_layers, d_model, n_heads, d_head, d_mlp, vocab_size, max_context, tie_embeddings };
        config.validate()?;
        let specs = param_specs(&config);

        let named = |r: &mut Reader<_>, prefix: &str| -> Result<Vec<Tensor>> {
            let n = r.len()?;
            let expect = if prefix.is_empty() { specs.len() } else { 2 * specs.len() };
            if n != expect {
                return Err(LabError::Format(format!("expected {expect} tensors, found {n}")));
            }
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                let name = r.str()?;
                let spec = &specs[k % specs.len()];
                let want = match (prefix, k < specs.len()) {
                    ("", _) => spec.name.clone(),
                    (_, true) => format!("m.{}", spec.name),
                    (_, false) => format!("v.{}", spec.name),
                };
                if name != want {
                    return Err(LabError::Format(format!("tensor {k}: expected {want}, found {name}")));
                }
                let t = r.tensor()?;
                if t.shape() != spec.shape {
                    return Err(LabError::Format(format!("{name}: shape {:?} vs {:?}", t.shape(), spec.shape)));
                }
                out.push(t);
            }
            Ok(out)
        };
        let params = named(&mut r, "")?;
        let opt_step = r.u64()?;
        let mut h = [0f64; 5];
        for v in &mut h {
            *v = r.f64()?;
        }
        let mut moments = named(&mut r, "opt")?;
        let v = moments.split_off(specs.len());
        let hyper = AdamW { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], weight_decay: h[4] };
        let optimizer = OptimizerState { hyper, step: opt_step, m: moments, v };

        let step = r.u64()?;
        let stream_id = r.str()?;
        let schedule_id = match r.u8()? {
            0 => None,
            1 => Some(r.str()?),
            b => return Err(LabError::Format(format!("bad provenance flag {b}"))),
        };
        let mut trailing = [0u8; 1];
        if r.0.read(&mut trailing)? != 0 {
            return Err(LabError::Format("trailing bytes after checkpoint".into()));
        }
        let model = Transformer::from_params(config, params)?;
        Ok(Self { model, optimizer, step, provenance: Provenance { stream_id, schedule_id } })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        Self::read_from(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
