//! Binary checkpoint container.
//!
//! Layout: magic `MNTS`, format version (u16 LE), header length (u32 LE), a
//! JSON header, then every tensor as contiguous f32 LE values in header order.
//! The header carries a SHA-256 of the tensor bytes so flipped bits are caught.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"MNTS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model_config: ModelConfig,
    pub vocab_hash: String,
    /// Configuration of the run that produced the checkpoint.
    pub run_config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub data_sha256: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab_hash: String,
    pub run_config: serde_json::Value,
}

impl Checkpoint {
    /// A warning when `vocab` is not the vocabulary the model was trained with.
    pub fn vocab_warning(&self, vocab: &Vocab) -> Option<String> {
        let h = vocab.hash();
        (h != self.vocab_hash).then(|| format!("vocabulary hash {} differs from the checkpoint's {}", h, self.vocab_hash))
    }
}

fn digest(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn to_bytes(model: &Model<f32>, vocab_hash: &str, run_config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(4 * model.num_params());
    for p in model.store.iter() {
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        model_config: model.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        run_config: run_config.clone(),
        tensors: model
            .store
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), decay: p.decay })
            .collect(),
        data_sha256: digest(&data),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let fail = |detail: String| Error::Checkpoint { path: origin.into(), detail };
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(format!("unsupported format version {}", version)));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| fail("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| fail(format!("bad header: {}", e)))?;
    let floats: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let data = &bytes[10 + hlen..];
    if data.len() != 4 * floats {
        return Err(fail(format!("expected {} bytes of tensor data, found {}", 4 * floats, data.len())));
    }
    if digest(data) != header.data_sha256 {
        return Err(fail("tensor data does not match its checksum".into()));
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let vals = data[off..off + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        off += 4 * n;
        if store.find(&t.name).is_some() {
            return Err(fail(format!("duplicate tensor {}", t.name)));
        }
        store.add(t.name.clone(), Tensor::new(t.shape.clone(), vals)?, t.decay);
    }
    let model = Model::from_store(header.model_config, store).map_err(|e| fail(format!("shape table mismatch: {}", e)))?;
    Ok(Checkpoint { model, vocab_hash: header.vocab_hash, run_config: header.run_config })
}

pub fn save_checkpoint(model: &Model<f32>, vocab_hash: &str, run_config: &serde_json::Value, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, vocab_hash, run_config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}
