//! Binary checkpoints: magic, a JSON header (configuration echo, vocabulary,
//! tensor index, optimizer and RNG state) and little-endian f32 payload.
//!
//! Layout: `MRCKPT` + u16 format version + u32 header length + header + data.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::RngState;
use crate::training::TrainState;

const MAGIC: &[u8; 6] = b"MRCKPT";
const FORMAT: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub adam_t: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    kind: String,
    model: Value,
    run_config: Value,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    /// Present when Adam moments follow the parameters (same order, m then v).
    optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: String,
    /// What the parameters belong to (`generator`, `retriever`).
    pub kind: String,
    /// That component's configuration.
    pub model: Value,
    pub run_config: Value,
    pub vocab: Vec<String>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<(OptimizerState, Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        model: &impl Serialize,
        run_config: Value,
        vocab: Vec<String>,
        params: ParamStore<f32>,
    ) -> Self {
        Checkpoint {
            version: crate::artifact::version(),
            kind: kind.to_string(),
            model: serde_json::to_value(model).expect("config serializes"),
            run_config,
            vocab,
            params,
            optimizer: None,
        }
    }

    /// The stored component configuration, checking the kind.
    pub fn config<C: DeserializeOwned>(&self, kind: &str) -> Result<C> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        serde_json::from_value(self.model.clone()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn generator_config(&self) -> Result<ModelConfig> {
        self.config("generator")
    }

    pub fn with_state(mut self, state: &TrainState<f32>) -> Self {
        let (m, v) = state.optimizer.moments();
        let st = OptimizerState {
            step: state.step,
            lr: state.lr,
            adam_t: state.optimizer.t,
            rng: RngState::capture(&state.rng),
        };
        self.optimizer = Some((st, m.to_vec(), v.to_vec()));
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self
            .params
            .iter()
            .map(|(_, name, t)| TensorEntry { name: name.to_string(), rows: t.rows, cols: t.cols })
            .collect();
        let header = Header {
            version: self.version.clone(),
            kind: self.kind.clone(),
            model: self.model.clone(),
            run_config: self.run_config.clone(),
            vocab: self.vocab.clone(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| o.0.clone()),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.num_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor<f32>| t.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        self.params.iter().for_each(|(_, _, t)| put(t));
        if let Some((_, m, v)) = &self.optimizer {
            m.iter().chain(v).for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..6] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let format = u16::from_le_bytes([bytes[6], bytes[7]]);
        if format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format version {format}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut data = &bytes[12 + hlen..];
        let mut take = |rows: usize, cols: usize| -> Result<Tensor<f32>> {
            let n = rows * cols * 4;
            if data.len() < n {
                return Err(bad("truncated tensor data"));
            }
            let vals = data[..n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            data = &data[n..];
            Ok(Tensor::from_vec(rows, cols, vals))
        };
        let mut params = ParamStore::new();
        for e in &header.tensors {
            params.insert(e.name.clone(), take(e.rows, e.cols)?);
        }
        let optimizer = match header.optimizer {
            Some(st) => {
                let m = header.tensors.iter().map(|e| take(e.rows, e.cols)).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(|e| take(e.rows, e.cols)).collect::<Result<Vec<_>>>()?;
                Some((st, m, v))
            }
            None => None,
        };
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            version: header.version,
            kind: header.kind,
            model: header.model,
            run_config: header.run_config,
            vocab: header.vocab,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::artifact::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored values into `target` by name; every target parameter
    /// must be present with the same shape.
    pub fn load_into(&self, target: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = target.ids().collect();
        for id in ids {
            let name = target.name(id).to_string();
            let src = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
            let src = self.params.get(src);
            let dst = target.get_mut(id);
            if (src.rows, src.cols) != (dst.rows, dst.cols) {
                return Err(Error::ShapeMismatch { name, expected: (dst.rows, dst.cols), found: (src.rows, src.cols) });
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Rebuilds the training state saved with the parameters, if any.
    pub fn restore_state(&self, ps: &ParamStore<f32>) -> Result<Option<TrainState<f32>>> {
        let Some((st, m, v)) = &self.optimizer else { return Ok(None) };
        let rng = st.rng.restore().ok_or_else(|| Error::Checkpoint("bad RNG state".into()))?;
        let mut state = TrainState::new(ps, rng);
        if m.len() != ps.len() {
            return Err(Error::Checkpoint("optimizer moments do not match the parameter set".into()));
        }
        state.optimizer.restore(st.adam_t, m.clone(), v.clone());
        state.step = st.step;
        state.lr = st.lr;
        Ok(Some(state))
    }
}
