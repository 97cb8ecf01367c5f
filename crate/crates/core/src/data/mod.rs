//! Annotation ingestion, feature files, windowing, batching and the
//! synthetic corpus.

mod annotations;
mod features;
mod synth;
mod windows;

use std::path::Path;

pub use annotations::{
    dedup, filter_valid, parse_annotations, read_annotations, split_by_video, write_annotations,
    AnnotationRecord, DatasetSplit, ValidCounts, CSV_HEADER,
};
pub use features::{FeatureTable, FEATURE_FORMAT_VERSION};
pub use synth::{octant, synth_generate, SentinelRates, SynthConfig};
pub use windows::{batch_order, batches, build_windows, segments, Batch, Batches, Window};

use crate::error::Result;

/// Reads, deduplicates and attaches features. Returns the records and the
/// number of duplicates removed.
pub fn load_corpus(annotations: &Path, features: &Path) -> Result<(Vec<AnnotationRecord>, usize)> {
    let records = read_annotations(annotations)?;
    let (mut records, removed) = dedup(records)?;
    if removed > 0 {
        log::info!("removed {removed} duplicate annotation rows");
    }
    FeatureTable::load(features)?.attach(&mut records)?;
    Ok((records, removed))
}
