use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{au_valid, expr_valid, va_valid};
use crate::task::{TaskKind, AU_NAMES, AU_SENTINEL, EXPR_SENTINEL, NUM_AUS, NUM_EXPR, VA_SENTINEL};

pub const CSV_HEADER: [&str; 17] = [
    "video_id",
    "frame_index",
    "valence",
    "arousal",
    "expression",
    AU_NAMES[0],
    AU_NAMES[1],
    AU_NAMES[2],
    AU_NAMES[3],
    AU_NAMES[4],
    AU_NAMES[5],
    AU_NAMES[6],
    AU_NAMES[7],
    AU_NAMES[8],
    AU_NAMES[9],
    AU_NAMES[10],
    AU_NAMES[11],
];

/// One frame's labels. `features` is empty until attached from a feature
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub frame_index: u32,
    pub valence: f64,
    pub arousal: f64,
    pub expression: i32,
    pub aus: [i8; NUM_AUS],
    #[serde(skip)]
    pub features: Vec<f64>,
}

impl AnnotationRecord {
    pub fn key(&self) -> (&str, u32) {
        (&self.video_id, self.frame_index)
    }

    pub fn is_valid_for(&self, task: TaskKind) -> bool {
        match task {
            TaskKind::Au => au_valid(&self.aus),
            TaskKind::Expr => expr_valid(self.expression),
            TaskKind::Valence | TaskKind::Arousal => {
                va_valid(self.valence) && va_valid(self.arousal)
            }
        }
    }

    fn same_labels(&self, other: &AnnotationRecord) -> bool {
        self.valence.to_bits() == other.valence.to_bits()
            && self.arousal.to_bits() == other.arousal.to_bits()
            && self.expression == other.expression
            && self.aus == other.aus
    }

    fn describe(&self) -> String {
        format!(
            "v={} a={} expr={} aus={:?}",
            self.valence, self.arousal, self.expression, self.aus
        )
    }

    /// Checks label ranges and sentinel encodings.
    pub fn validate(&self, line: usize) -> Result<()> {
        let bad = |field: &str, msg: String| Error::Validation {
            line,
            field: field.into(),
            msg,
        };
        for (field, v) in [("valence", self.valence), ("arousal", self.arousal)] {
            if v != VA_SENTINEL && !(-1.0..=1.0).contains(&v) {
                return Err(bad(field, format!("{v} outside [-1, 1] and not -5")));
            }
        }
        if self.expression != EXPR_SENTINEL && !(0..NUM_EXPR as i32).contains(&self.expression) {
            return Err(bad(
                "expression",
                format!("{} outside 0..7 and not -1", self.expression),
            ));
        }
        let sentinels = self.aus.iter().filter(|&&a| a == AU_SENTINEL).count();
        if sentinels != 0 && sentinels != NUM_AUS {
            return Err(bad("aus", "AU labels must be all -1 or none".into()));
        }
        for (j, &a) in self.aus.iter().enumerate() {
            if a != AU_SENTINEL && a != 0 && a != 1 {
                return Err(bad(AU_NAMES[j], format!("{a} not in {{0, 1, -1}}")));
            }
        }
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, field: &str, line: usize) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Validation {
        line,
        field: field.into(),
        msg: format!("cannot parse `{raw}`"),
    })
}

/// Parses the annotation CSV. Every malformed row is an error naming its
/// line; no row is dropped silently.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", CSV_HEADER.len(), row.len()),
            });
        }
        let mut aus = [0i8; NUM_AUS];
        for (j, a) in aus.iter_mut().enumerate() {
            *a = parse_field(&row[5 + j], AU_NAMES[j], line)?;
        }
        let video_id = row[0].to_string();
        if video_id.is_empty() {
            return Err(Error::Validation {
                line,
                field: "video_id".into(),
                msg: "empty".into(),
            });
        }
        let rec = AnnotationRecord {
            video_id,
            frame_index: parse_field(&row[1], "frame_index", line)?,
            valence: parse_field(&row[2], "valence", line)?,
            arousal: parse_field(&row[3], "arousal", line)?,
            expression: parse_field(&row[4], "expression", line)?,
            aus,
            features: Vec::new(),
        };
        rec.validate(line)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(std::io::BufReader::new(file))
}

pub fn write_annotations<W: Write>(writer: W, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::format("annotations", e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in records {
        let mut row = vec![
            r.video_id.clone(),
            r.frame_index.to_string(),
            r.valence.to_string(),
            r.arousal.to_string(),
            r.expression.to_string(),
        ];
        row.extend(r.aus.iter().map(i8::to_string));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("annotations", e))?;
    Ok(())
}

/// Keeps the first record per `(video_id, frame_index)`. Returns the
/// survivors and the number removed.
pub fn dedup(records: Vec<AnnotationRecord>) -> Result<(Vec<AnnotationRecord>, usize)> {
    let mut seen: HashMap<(String, u32), usize> = HashMap::new();
    let mut out: Vec<AnnotationRecord> = Vec::with_capacity(records.len());
    let mut removed = 0;
    for r in records {
        match seen.get(&(r.video_id.clone(), r.frame_index)) {
            Some(&i) => {
                if !out[i].same_labels(&r) {
                    return Err(Error::Conflict {
                        video_id: r.video_id.clone(),
                        frame_index: r.frame_index,
                        first: out[i].describe(),
                        second: r.describe(),
                    });
                }
                removed += 1;
            }
            None => {
                seen.insert((r.video_id.clone(), r.frame_index), out.len());
                out.push(r);
            }
        }
    }
    Ok((out, removed))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidCounts {
    pub au: usize,
    pub expr: usize,
    pub va: usize,
}

/// Records plus their per-task valid counts and class histograms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub records: Vec<AnnotationRecord>,
    pub valid: ValidCounts,
    pub expr_histogram: [usize; NUM_EXPR],
    pub au_positives: [usize; NUM_AUS],
}

impl DatasetSplit {
    pub fn new(records: Vec<AnnotationRecord>) -> Self {
        let mut s = DatasetSplit {
            records,
            ..Default::default()
        };
        for r in &s.records {
            if r.is_valid_for(TaskKind::Au) {
                s.valid.au += 1;
                for (c, &a) in s.au_positives.iter_mut().zip(&r.aus) {
                    *c += (a == 1) as usize;
                }
            }
            if r.is_valid_for(TaskKind::Expr) {
                s.valid.expr += 1;
                s.expr_histogram[r.expression as usize] += 1;
            }
            if r.is_valid_for(TaskKind::Valence) {
                s.valid.va += 1;
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.features.len())
    }

    pub fn au_labels(&self) -> Vec<[i8; NUM_AUS]> {
        self.records.iter().map(|r| r.aus).collect()
    }

    pub fn expr_labels(&self) -> Vec<i32> {
        self.records.iter().map(|r| r.expression).collect()
    }
}

/// Drops records that are invalid for `task`. Valence and arousal share the
/// VA rule: either value at -5 drops the record.
pub fn filter_valid(records: &[AnnotationRecord], task: TaskKind) -> DatasetSplit {
    let kept: Vec<AnnotationRecord> = records
        .iter()
        .filter(|r| r.is_valid_for(task))
        .cloned()
        .collect();
    if kept.is_empty() {
        log::warn!("no records valid for {task}");
    }
    DatasetSplit::new(kept)
}

/// Deterministic split by video: the last `val_videos` ids in sorted order
/// form the validation split.
pub fn split_by_video(
    records: &[AnnotationRecord],
    val_videos: usize,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if val_videos == 0 || val_videos >= ids.len() {
        return Err(Error::Config(format!(
            "val_videos = {val_videos} must be in 1..{} for this corpus",
            ids.len()
        )));
    }
    let val_ids = &ids[ids.len() - val_videos..];
    let (val, train): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| val_ids.contains(&r.video_id.as_str()));
    Ok((DatasetSplit::new(train), DatasetSplit::new(val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "video_id,frame_index,valence,arousal,expression,au1,au2,au4,au6,au7,au10,au12,au15,au23,au24,au25,au26";

    fn csv_text(rows: &[&str]) -> String {
        let mut s = String::from(HEADER);
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s.push('\n');
        s
    }

    #[test]
    fn rejects_out_of_range_expression_with_field_name() {
        let text = csv_text(&["v1,0,0.1,0.2,9,0,0,0,0,0,0,0,0,0,0,0,0"]);
        match parse_annotations(text.as_bytes()) {
            Err(Error::Validation { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "expression");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn sentinel_rows_parse() {
        let text = csv_text(&["v1,0,-5,-5,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1"]);
        let recs = parse_annotations(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(!recs[0].is_valid_for(TaskKind::Au));
    }

    #[test]
    fn partial_au_sentinel_rejected_and_bad_number_reports_line() {
        let text = csv_text(&["v1,0,0,0,1,-1,0,0,0,0,0,0,0,0,0,0,0"]);
        assert!(matches!(
            parse_annotations(text.as_bytes()),
            Err(Error::Validation { .. })
        ));
        let text = csv_text(&[
            "v1,0,0,0,1,0,0,0,0,0,0,0,0,0,0,0,0",
            "v1,1,abc,0,1,0,0,0,0,0,0,0,0,0,0,0,0",
        ]);
        match parse_annotations(text.as_bytes()) {
            Err(Error::Validation { line, field, .. }) => {
                assert_eq!((line, field.as_str()), (3, "valence"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_annotations("a,b\n1,2\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn dedup_contract() {
        let row = "v1,0,0.1,0.2,3,0,1,0,0,0,0,0,0,0,0,1,0";
        let text = csv_text(&[row, "v1,1,0.1,0.2,3,0,1,0,0,0,0,0,0,0,0,1,0", row]);
        let recs = parse_annotations(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        let (kept, removed) = dedup(recs.clone()).unwrap();
        assert_eq!((kept.len(), removed), (2, 1));

        let (same, removed) = dedup(kept.clone()).unwrap();
        assert_eq!((same, removed), (kept, 0));

        let text = csv_text(&[row, "v1,0,0.5,0.2,3,0,1,0,0,0,0,0,0,0,0,1,0"]);
        let recs = parse_annotations(text.as_bytes()).unwrap();
        assert!(matches!(dedup(recs), Err(Error::Conflict { .. })));
    }

    fn fixture() -> Vec<AnnotationRecord> {
        (0..10)
            .map(|i| AnnotationRecord {
                video_id: "v".into(),
                frame_index: i,
                valence: if i % 3 == 1 { -5.0 } else { 0.1 },
                arousal: 0.2,
                expression: if i == 0 { -1 } else { 2 },
                aus: if i == 9 { [-1; 12] } else { [0; 12] },
                features: vec![],
            })
            .collect()
    }

    #[test]
    fn filter_counts_and_independence() {
        let recs = fixture();
        let va = filter_valid(&recs, TaskKind::Valence);
        assert_eq!(va.len(), 7);
        let au = filter_valid(&recs, TaskKind::Au);
        let ex = filter_valid(&recs, TaskKind::Expr);
        assert!(au.records.iter().any(|r| r.frame_index == 0));
        assert!(!ex.records.iter().any(|r| r.frame_index == 0));
        assert_eq!(filter_valid(&va.records, TaskKind::Valence), va);
        let all = DatasetSplit::new(recs);
        assert_eq!(all.valid, ValidCounts { au: 9, expr: 9, va: 7 });
    }

    #[test]
    fn csv_round_trip() {
        let recs = fixture();
        let mut buf = Vec::new();
        write_annotations(&mut buf, &recs).unwrap();
        assert_eq!(parse_annotations(buf.as_slice()).unwrap(), recs);
    }
}
