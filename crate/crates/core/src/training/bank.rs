use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, FeatureTable};
use crate::error::{Error, Result};
use crate::layers::Session;
use crate::task::TaskKind;
use crate::tensor::Tensor;
use crate::training::Checkpoint;

const MAGIC: &[u8; 8] = b"AFMTLBNK";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    source: TaskKind,
    checkpoint_hash: String,
    single_task: bool,
    dim: usize,
}

/// Frozen encoder outputs of a trained model, keyed by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub source: TaskKind,
    pub checkpoint_hash: String,
    /// True when the encoder came from a single-task run on `source`.
    pub single_task: bool,
    table: FeatureTable,
}

impl FeatureBank {
    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, video_id: &str, frame: u32) -> Option<&[f64]> {
        self.table.get(video_id, frame)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BankHeader {
            source: self.source,
            checkpoint_hash: self.checkpoint_hash.clone(),
            single_task: self.single_task,
            dim: self.table.dim,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        self.table.write(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a feature bank file"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[12..];
        if rest.len() < hlen {
            return Err(Error::format(path, "truncated header"));
        }
        let header: BankHeader = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let table = FeatureTable::read(&rest[hlen..], path)?;
        if !table.is_empty() && table.dim != header.dim {
            return Err(Error::format(path, "dimension disagrees with header"));
        }
        Ok(FeatureBank {
            source: header.source,
            checkpoint_hash: header.checkpoint_hash,
            single_task: header.single_task,
            table,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

const EXTRACT_CHUNK: usize = 256;

/// Evaluation-mode encoder outputs for every record, in record order.
pub fn extract_bank(ck: &Checkpoint, records: &[AnnotationRecord]) -> Result<FeatureBank> {
    let model = &ck.model;
    let source = ck.config.primary();
    let mut table = FeatureTable::new(model.arch.feature_dim);
    for chunk in records.chunks(EXTRACT_CHUNK) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(|r| r.features.clone()).collect();
        let mut s = Session::eval(&model.params);
        let x = s.tape.constant(Tensor::from_rows(&rows)?);
        let y = model.encode(&mut s, x)?;
        let out = s.tape.value(y);
        for (i, r) in chunk.iter().enumerate() {
            table.insert(&r.video_id, r.frame_index, out.row(i).to_vec())?;
        }
    }
    Ok(FeatureBank {
        source,
        checkpoint_hash: ck.hash(),
        single_task: ck.is_single_task_for(source),
        table,
    })
}
