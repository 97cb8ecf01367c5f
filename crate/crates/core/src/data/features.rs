use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::AnnotationRecord;
use crate::error::{Error, Result};

pub const FEATURE_FORMAT_VERSION: u32 = 1;

/// Per-frame feature vectors keyed by `(video_id, frame_index)`, in file
/// order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub dim: usize,
    entries: Vec<(String, u32, Vec<f64>)>,
    index: HashMap<(String, u32), usize>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, video_id: &str, frame: u32, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Dimension {
                op: "feature_table",
                left: vec![self.dim],
                right: vec![values.len()],
            });
        }
        let key = (video_id.to_string(), frame);
        if self.index.contains_key(&key) {
            return Err(Error::Integrity(format!(
                "duplicate feature entry for {video_id}/{frame}"
            )));
        }
        self.index.insert(key, self.entries.len());
        self.entries.push((video_id.to_string(), frame, values));
        Ok(())
    }

    pub fn get(&self, video_id: &str, frame: u32) -> Option<&[f64]> {
        self.index
            .get(&(video_id.to_string(), frame))
            .map(|&i| self.entries[i].2.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, &[f64])> {
        self.entries
            .iter()
            .map(|(v, f, x)| (v.as_str(), *f, x.as_slice()))
    }

    pub fn from_records(records: &[AnnotationRecord]) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.features.len());
        let mut t = FeatureTable::new(dim);
        for r in records {
            t.insert(&r.video_id, r.frame_index, r.features.clone())?;
        }
        Ok(t)
    }

    /// Copies each record's vector in; every record must be covered.
    pub fn attach(&self, records: &mut [AnnotationRecord]) -> Result<()> {
        let mut missing = Vec::new();
        for r in records.iter_mut() {
            match self.get(&r.video_id, r.frame_index) {
                Some(x) => r.features = x.to_vec(),
                None => missing.push((r.video_id.clone(), r.frame_index)),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFrames(missing))
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&FEATURE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (video, frame, values) in &self.entries {
            w.write_all(&(video.len() as u32).to_le_bytes())?;
            w.write_all(video.as_bytes())?;
            w.write_all(&frame.to_le_bytes())?;
            w.write_all(&(values.len() as u32).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read<R: Read>(r: R, path: &Path) -> Result<Self> {
        let mut r = ByteReader { inner: r, path };
        let version = r.u32()?;
        if version != FEATURE_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported feature format version {version}"),
            ));
        }
        let count = r.u64()?;
        let mut table: Option<FeatureTable> = None;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let video = String::from_utf8(r.bytes(len)?)
                .map_err(|_| Error::format(path, "video_id is not UTF-8"))?;
            let frame = r.u32()?;
            let dim = r.u32()? as usize;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f64::from_le_bytes(r.array()?));
            }
            let t = table.get_or_insert_with(|| FeatureTable::new(dim));
            t.insert(&video, frame, values)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(table.unwrap_or_default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file), path)
    }
}

struct ByteReader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> ByteReader<'_, R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "truncated feature file"))?;
        Ok(buf)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "truncated feature file"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
