use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"AVBCKPT1";

/// Parameters, optional optimizer moments, and run metadata.
///
/// On disk: the magic, a little-endian `u64` header length, a JSON header,
/// then every tensor as little-endian `f64` (parameters, then first and
/// second moments when present), so loading is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    /// Adam first and second moments.
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
    pub optimizer_step: u64,
    pub epoch: usize,
    pub config_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    has_moments: bool,
    optimizer_step: u64,
    epoch: usize,
    config_hash: u64,
}

impl Checkpoint {
    pub fn from_store(
        model: &ModelConfig,
        store: &ParamStore,
        epoch: usize,
        config_hash: u64,
    ) -> Self {
        Self {
            model: model.clone(),
            names: store.names().to_vec(),
            params: store.values().to_vec(),
            moments: None,
            optimizer_step: 0,
            epoch,
            config_hash,
        }
    }

    /// Copies the parameters into `store`, checking names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.names() != self.names.as_slice() {
            return Err(Error::Contract(
                "checkpoint parameter names do not match the model".into(),
            ));
        }
        store.load_values(self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            model: self.model.clone(),
            names: self.names.clone(),
            shapes: self.params.iter().map(|t| t.shape().to_vec()).collect(),
            has_moments: self.moments.is_some(),
            optimizer_step: self.optimizer_step,
            epoch: self.epoch,
            config_hash: self.config_hash,
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut tensors: Vec<&Tensor> = self.params.iter().collect();
        if let Some((m, v)) = &self.moments {
            tensors.extend(m.iter().chain(v));
        }
        for t in tensors {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::Format(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json)?;
        if h.names.len() != h.shapes.len() {
            return Err(Error::Format("header names and shapes disagree".into()));
        }
        let mut read_all = || -> Result<Vec<Tensor>> {
            h.shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let mut bytes = vec![0u8; n * 8];
                    r.read_exact(&mut bytes)?;
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    Tensor::new(s.clone(), data)
                })
                .collect()
        };
        let params = read_all()?;
        let moments = if h.has_moments {
            let m = read_all()?;
            let v = read_all()?;
            Some((m, v))
        } else {
            None
        };
        Ok(Self {
            model: h.model,
            names: h.names,
            params,
            moments,
            optimizer_step: h.optimizer_step,
            epoch: h.epoch,
            config_hash: h.config_hash,
        })
    }
}

/// Element-wise mean of the parameters of `checkpoints`; optimizer state
/// is dropped. Metadata comes from the last checkpoint.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let Some(last) = checkpoints.last() else {
        return Err(Error::Contract(
            "averaging needs at least one checkpoint".into(),
        ));
    };
    for c in checkpoints {
        if c.names != last.names {
            return Err(Error::Contract(
                "checkpoints hold different parameters".into(),
            ));
        }
        for (a, b) in c.params.iter().zip(&last.params) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "average_checkpoints",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
    }
    let n = checkpoints.len() as f64;
    let params = (0..last.params.len())
        .map(|i| {
            let mut sum = Tensor::zeros(last.params[i].shape());
            for c in checkpoints {
                sum.data_mut()
                    .iter_mut()
                    .zip(c.params[i].data())
                    .for_each(|(s, x)| *s += x);
            }
            sum.map(|s| s / n)
        })
        .collect();
    Ok(Checkpoint {
        params,
        moments: None,
        optimizer_step: 0,
        ..last.clone()
    })
}

pub fn average_checkpoint_files<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint> {
    let cks = paths
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&cks)
}
