//! Versioned binary checkpoints.
//!
//! Layout: the magic bytes `CFCICKPT`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then the parameters followed by the
//! optional Adam moments, each as little-endian `f64` in storage order.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::nn::ParamId;
use crate::tensor::Tensor;

use super::optim::AdamW;
use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CFCICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    pub best_metric: Option<f64>,
    pub rng: Option<ChaCha8Rng>,
    pub layout: Vec<(String, Vec<usize>)>,
    /// Adam step count; moments follow the parameters when present.
    pub optimizer_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Parameters only, for inference.
    pub fn from_model(model: &Model) -> Self {
        let header = CheckpointHeader {
            network: model.net.cfg.clone(),
            train: None,
            epoch: 0,
            step: 0,
            total_steps: 0,
            best_metric: None,
            rng: None,
            layout: model.params.layout(),
            optimizer_step: None,
        };
        let params = model.params.ids().map(|id| model.params.get(id).clone()).collect();
        Self { header, params, moments: None }
    }

    pub fn with_optimizer(mut self, opt: &AdamW) -> Self {
        self.header.optimizer_step = Some(opt.step);
        self.moments = Some((opt.m.clone(), opt.v.clone()));
        self
    }

    /// Rebuild the network from the echoed config and load the weights.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.header.network)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copy weights into an existing model whose layout must match exactly.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        let layout = model.params.layout();
        if layout != self.header.layout {
            let first = layout
                .iter()
                .zip(&self.header.layout)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("model has {} {:?}, checkpoint has {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("model has {} tensors, checkpoint has {}", layout.len(), self.header.layout.len()));
            return Err(ckpt_err(format!("checkpoint does not match the network configuration: {first}")));
        }
        for (i, t) in self.params.iter().enumerate() {
            model.params.set(ParamId(i), t.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes())?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            let blobs = self.params.iter().chain(self.moments.iter().flat_map(|(m, v)| m.iter().chain(v)));
            for t in blobs {
                for x in t.data() {
                    f.write_all(&x.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| ckpt_err(format!("cannot open {}: {e}", path.display())))?,
        );
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|_| ckpt_err(format!("{} is too short", path.display())))?;
        if &magic != MAGIC {
            return Err(ckpt_err(format!("{} is not a checkpoint file", path.display())));
        }
        let mut u32b = [0u8; 4];
        f.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})")));
        }
        let mut u64b = [0u8; 8];
        f.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; len];
        f.read_exact(&mut header).map_err(|_| ckpt_err("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;

        let read_all = |f: &mut dyn Read| -> Result<Vec<Tensor>> {
            header
                .layout
                .iter()
                .map(|(name, shape)| {
                    let n: usize = shape.iter().product();
                    let mut buf = vec![0u8; n * 8];
                    f.read_exact(&mut buf).map_err(|_| ckpt_err(format!("truncated data for {name}")))?;
                    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::new(shape.clone(), data)
                })
                .collect()
        };
        let params = read_all(&mut f)?;
        let moments = match header.optimizer_step {
            Some(_) => Some((read_all(&mut f)?, read_all(&mut f)?)),
            None => None,
        };
        if f.read(&mut [0u8; 1])? != 0 {
            return Err(ckpt_err("trailing bytes after the tensor data"));
        }
        Ok(Self { header, params, moments })
    }
}
