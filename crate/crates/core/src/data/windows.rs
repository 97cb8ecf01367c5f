use rand::seq::SliceRandom;

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::seed;
use crate::task::NUM_AUS;
use crate::tensor::Tensor;

/// A length-S run of frames from one video. `frames` index into the split's
/// records; `pad_mask[t]` is true for real frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub video_id: String,
    pub start_frame: u32,
    pub frames: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl Window {
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }
}

/// Contiguous runs of frame indices per video, in `(video_id, frame)` order.
/// A missing frame index ends a run.
pub fn segments(split: &DatasetSplit) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.sort_by(|&a, &b| split.records[a].key().cmp(&split.records[b].key()));
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in order {
        let r = &split.records[i];
        let extend = out.last().is_some_and(|seg| {
            let prev = &split.records[*seg.last().expect("non-empty segment")];
            prev.video_id == r.video_id && prev.frame_index.checked_add(1) == Some(r.frame_index)
        });
        if extend {
            out.last_mut().expect("checked").push(i);
        } else {
            out.push(vec![i]);
        }
    }
    out
}

/// Windows of length `seq_len` starting every `stride` frames. Tails are
/// padded by repeating the last real frame.
pub fn build_windows(split: &DatasetSplit, seq_len: usize, stride: usize) -> Result<Vec<Window>> {
    if seq_len == 0 || stride == 0 || stride > seq_len {
        return Err(Error::Config(format!(
            "need S >= 1 and 1 <= W <= S, got S={seq_len} W={stride}"
        )));
    }
    let mut out = Vec::new();
    for seg in segments(split) {
        for start in (0..seg.len()).step_by(stride) {
            let end = (start + seq_len).min(seg.len());
            let mut frames = seg[start..end].to_vec();
            let mut pad_mask = vec![true; frames.len()];
            let last = *frames.last().expect("start < len");
            frames.resize(seq_len, last);
            pad_mask.resize(seq_len, false);
            out.push(Window {
                video_id: split.records[seg[start]].video_id.clone(),
                start_frame: split.records[seg[start]].frame_index,
                frames,
                pad_mask,
            });
        }
    }
    Ok(out)
}

/// One assembled batch. Rows are window-major: row `i * seq + t` is step
/// `t` of window `i`. Labels keep their sentinels; padded rows carry the
/// replicated frame's labels and are flagged in `pad_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub windows: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub inputs: Tensor,
    pub rows: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub aus: Vec<[i8; NUM_AUS]>,
    pub expr: Vec<i32>,
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
}

impl Batch {
    pub fn assemble(split: &DatasetSplit, windows: &[Window], ids: &[usize]) -> Result<Batch> {
        let seq = ids.first().map_or(0, |&w| windows[w].frames.len());
        let dim = split.input_dim().unwrap_or(0);
        let n = ids.len() * seq;
        let mut data = Vec::with_capacity(n * dim);
        let mut b = Batch {
            windows: ids.to_vec(),
            batch: ids.len(),
            seq,
            inputs: Tensor::zeros(&[0, dim]),
            rows: Vec::with_capacity(n),
            pad_mask: Vec::with_capacity(n),
            aus: Vec::with_capacity(n),
            expr: Vec::with_capacity(n),
            valence: Vec::with_capacity(n),
            arousal: Vec::with_capacity(n),
        };
        for &w in ids {
            let win = &windows[w];
            if win.frames.len() != seq {
                return Err(Error::Contract("windows in a batch differ in length".into()));
            }
            for (&i, &real) in win.frames.iter().zip(&win.pad_mask) {
                let r = &split.records[i];
                if r.features.len() != dim {
                    return Err(Error::Dimension {
                        op: "batch",
                        left: vec![dim],
                        right: vec![r.features.len()],
                    });
                }
                data.extend_from_slice(&r.features);
                b.rows.push(i);
                b.pad_mask.push(real);
                b.aus.push(r.aus);
                b.expr.push(r.expression);
                b.valence.push(r.valence);
                b.arousal.push(r.arousal);
            }
        }
        b.inputs = Tensor::new(vec![n, dim], data)?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row indices of the last step of each window.
    pub fn last_step_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|i| i * self.seq + self.seq - 1).collect()
    }
}

/// Window order for one pass: canonical `(video_id, start)` order, or a
/// seeded shuffle of it.
pub fn batch_order(windows: &[Window], batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| {
        (&windows[a].video_id, windows[a].start_frame).cmp(&(&windows[b].video_id, windows[b].start_frame))
    });
    if shuffle {
        order.shuffle(&mut seed::stream(seed, "batches"));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub struct Batches<'a> {
    split: &'a DatasetSplit,
    windows: &'a [Window],
    groups: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let ids = self.groups.next()?;
        Some(Batch::assemble(self.split, self.windows, &ids))
    }
}

pub fn batches<'a>(
    split: &'a DatasetSplit,
    windows: &'a [Window],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Batches<'a> {
    Batches {
        split,
        windows,
        groups: batch_order(windows, batch_size, seed, shuffle).into_iter(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnnotationRecord;

    fn video(id: &str, frames: impl IntoIterator<Item = u32>) -> Vec<AnnotationRecord> {
        frames
            .into_iter()
            .map(|f| AnnotationRecord {
                video_id: id.into(),
                frame_index: f,
                valence: f as f64 / 100.0,
                arousal: 0.0,
                expression: 0,
                aus: [0; 12],
                features: vec![f as f64],
            })
            .collect()
    }

    #[test]
    fn exact_tiling() {
        let split = DatasetSplit::new(video("a", 0..10));
        let w = build_windows(&split, 5, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|w| w.pad_mask.iter().all(|&m| m)));
    }

    #[test]
    fn overlapping_windows_with_tail_padding() {
        let split = DatasetSplit::new(video("a", 0..50));
        let w = build_windows(&split, 20, 15).unwrap();
        let starts: Vec<u32> = w.iter().map(|w| w.start_frame).collect();
        assert_eq!(starts, vec![0, 15, 30, 45]);
        let last = &w[3];
        assert_eq!(last.pad_mask.iter().filter(|&&m| !m).count(), 15);
        assert!(last.frames[5..].iter().all(|&i| split.records[i].frame_index == 49));
    }

    #[test]
    fn single_frame_mode_and_gaps() {
        let split = DatasetSplit::new(video("a", 0..7));
        assert_eq!(build_windows(&split, 1, 1).unwrap().len(), 7);

        let mut recs = video("a", 0..4);
        recs.extend(video("a", 6..9));
        let split = DatasetSplit::new(recs);
        let w = build_windows(&split, 4, 4).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].start_frame, 6);
        assert_eq!(w[1].real_len(), 3);
        assert!(build_windows(&split, 2, 3).is_err());
    }

    #[test]
    fn batching() {
        let split = DatasetSplit::new(video("a", 0..10));
        let w = build_windows(&split, 1, 1).unwrap();
        let sizes: Vec<usize> = batches(&split, &w, 4, 0, true)
            .map(|b| b.unwrap().batch)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batch_order(&w, 4, 9, true), batch_order(&w, 4, 9, true));
        assert_ne!(batch_order(&w, 10, 9, true), batch_order(&w, 10, 10, true));

        let mut recs = video("b", 0..3);
        recs.extend(video("a", 0..3));
        let split = DatasetSplit::new(recs);
        let w = build_windows(&split, 2, 1).unwrap();
        let b = batches(&split, &w, 100, 0, false).next().unwrap().unwrap();
        let keys: Vec<(&str, u32)> = b
            .windows
            .iter()
            .map(|&i| (w[i].video_id.as_str(), w[i].start_frame))
            .collect();
        assert_eq!(keys, vec![("a", 0), ("a", 1), ("a", 2), ("b", 0), ("b", 1), ("b", 2)]);
        assert_eq!(b.inputs.shape(), &[12, 1]);
        assert_eq!(b.last_step_rows()[0], 1);
    }
}
