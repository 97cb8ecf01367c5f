use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ArchSpec, Model};
use crate::seed;
use crate::task::TaskKind;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"AFMTLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Single,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankRef {
    pub source: TaskKind,
    pub checkpoint_hash: String,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub tasks: Vec<TaskKind>,
    pub banks: Vec<BankRef>,
    /// Hash of the checkpoint the weights were initialised from.
    pub init_from: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchSpec,
    config: TrainConfig,
    best_score: f64,
    best_epoch: usize,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub best_score: f64,
    pub best_epoch: usize,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// A single-task checkpoint of exactly `task` without fusion.
    pub fn is_single_task_for(&self, task: TaskKind) -> bool {
        self.provenance.stage == Stage::Single && self.provenance.tasks == [task]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.model.arch.clone(),
            config: self.config.clone(),
            best_score: self.best_score,
            best_epoch: self.best_epoch,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        seed::hash_hex(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let fail = |m: &str| Error::format(path, m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fail("truncated"))?;
        if &magic != MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let version = read_u32(&mut r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u32(&mut r, path)? as usize;
        if r.len() < hlen {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        r = &r[hlen..];
        let mut model = Model::new(header.arch.clone(), header.config.seed)?;
        let count = read_u32(&mut r, path)? as usize;
        if count != model.params.len() {
            return Err(fail(&format!(
                "expected {} parameters, found {count}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let nlen = read_u32(&mut r, path)? as usize;
            if r.len() < nlen {
                return Err(fail("truncated parameter name"));
            }
            let name = std::str::from_utf8(&r[..nlen])
                .map_err(|_| fail("parameter name is not UTF-8"))?
                .to_string();
            r = &r[nlen..];
            let rank = read_u32(&mut r, path)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, path)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| fail("truncated parameter data"))?;
                data.push(f64::from_le_bytes(b));
            }
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| fail(&format!("unexpected parameter `{name}`")))?;
            if model.params.get(id).shape() != shape.as_slice() {
                return Err(fail(&format!("parameter `{name}` has shape {shape:?}")));
            }
            *model.params.get_mut(id) = Tensor::new(shape, data)?;
        }
        if !r.is_empty() {
            return Err(fail("trailing bytes"));
        }
        Ok(Checkpoint {
            model,
            config: header.config,
            best_score: header.best_score,
            best_epoch: header.best_epoch,
            provenance: header.provenance,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_u32(r: &mut &[u8], path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(path, "truncated"))?;
    Ok(u32::from_le_bytes(b))
}
