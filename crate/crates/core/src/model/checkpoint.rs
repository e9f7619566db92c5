//! `.lsec` checkpoints.
//!
//! ```text
//! b"LSEC" | u16 version (=1) | u32 header length | JSON header | .lst record per block
//! ```
//!
//! The header lists every block (name and dims) in the order the records
//! follow, plus the model shape and the optimizer hyperparameters and step.
//! Adam moments are stored as blocks `adam.m.*` / `adam.v.*` so training can
//! resume exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, ModelConfig, ModelParams, OptimizerState, Params, BLOCK_NAMES};
use crate::error::{Error, Result};
use crate::lst;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LSEC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u16,
    model: ModelConfig,
    blocks: Vec<BlockEntry>,
    optimizer: OptimizerEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

fn block_names() -> Vec<String> {
    let mut names: Vec<String> = BLOCK_NAMES.iter().map(|s| s.to_string()).collect();
    for prefix in ["adam.m.", "adam.v."] {
        names.extend(BLOCK_NAMES.iter().map(|s| format!("{prefix}{s}")));
    }
    names
}

pub fn save_checkpoint(params: &ModelParams, opt: &OptimizerState) -> Vec<u8> {
    let dims = params.config.block_dims();
    let names = block_names();
    let header = Header {
        format: "lsec".into(),
        version: VERSION,
        model: params.config,
        blocks: names
            .iter()
            .enumerate()
            .map(|(i, n)| BlockEntry {
                name: n.clone(),
                dims: dims[i % 6].clone(),
            })
            .collect(),
        optimizer: OptimizerEntry {
            lr: opt.config.lr,
            beta1: opt.config.beta1,
            beta2: opt.config.beta2,
            eps: opt.config.eps,
            t: opt.t,
        },
    };
    let json = serde_json::to_vec(&header).expect("serialisable header");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let all = params
        .blocks()
        .into_iter()
        .chain(opt.m.blocks())
        .chain(opt.v.blocks());
    for (i, block) in all.enumerate() {
        let t = Tensor::from_f32(dims[i % 6].clone(), block.to_vec()).expect("block dims");
        lst::encode(&t, &mut out);
    }
    out
}

pub fn load_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let short = |need: usize| Error::Truncated {
        expected: need,
        found: buf.len(),
    };
    if buf.len() < 10 {
        return Err(short(10));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let body = 10 + hlen;
    if buf.len() < body {
        return Err(short(body));
    }
    let header: Header = serde_json::from_slice(&buf[10..body])
        .map_err(|e| Error::Shape(format!("checkpoint header: {e}")))?;
    let names = block_names();
    let dims = header.model.block_dims();
    if header.blocks.len() != names.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} blocks, expected {}",
            header.blocks.len(),
            names.len()
        )));
    }
    let mut at = body;
    let mut blocks = Vec::with_capacity(names.len());
    for (i, entry) in header.blocks.iter().enumerate() {
        if entry.name != names[i] || entry.dims != dims[i % 6] {
            return Err(Error::Shape(format!(
                "block {i}: expected {} {:?}, found {} {:?}",
                names[i],
                dims[i % 6],
                entry.name,
                entry.dims
            )));
        }
        let (t, used) = lst::decode_prefix(&buf[at..])?;
        if t.dims() != entry.dims.as_slice() {
            return Err(Error::DimMismatch {
                what: "checkpoint block",
                expected: entry.dims.clone(),
                actual: t.dims().to_vec(),
            });
        }
        blocks.push(t.as_f32()?.to_vec());
        at += used;
    }
    if at != buf.len() {
        return Err(Error::Truncated {
            expected: at,
            found: buf.len(),
        });
    }
    let mut it = blocks.into_iter();
    let mut take = |config: ModelConfig| {
        let mut p = Params::<f32>::zeros(config);
        for b in p.blocks_mut() {
            *b = it.next().expect("block count checked");
        }
        p
    };
    let mut params = take(header.model);
    let m = take(header.model);
    let v = take(header.model);
    params.generation = header.optimizer.t;
    let o = &header.optimizer;
    Ok(Checkpoint {
        params,
        optimizer: OptimizerState {
            config: AdamConfig {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            m,
            v,
            t: o.t,
        },
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams, opt: &OptimizerState) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, save_checkpoint(params, opt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&buf)
}
