//! Evaluation scores: per-class F1, split-wide CCC and the composite `P`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{au_valid, expr_valid, va_valid};
use crate::task::{NUM_AUS, NUM_EXPR};
use crate::tensor::Tensor;

/// F1 for a class with no positives in either predictions or targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassF1 {
    #[default]
    One,
    Zero,
}

impl AbsentClassF1 {
    fn value(self) -> f64 {
        match self {
            AbsentClassF1::One => 1.0,
            AbsentClassF1::Zero => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AbsentClassF1::One => "one",
            AbsentClassF1::Zero => "zero",
        }
    }
}

/// Confusion counts for one binary class. Counts from disjoint shards merge
/// by addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn record(&mut self, pred: bool, target: bool) {
        match (pred, target) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn merge(&mut self, other: &BinaryCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn f1(&self, absent: AbsentClassF1) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            absent.value()
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn binary_f1(pred: &[bool], target: &[bool], absent: AbsentClassF1) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            op: "binary_f1",
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    let mut c = BinaryCounts::default();
    pred.iter().zip(target).for_each(|(&p, &t)| c.record(p, t));
    Ok(c.f1(absent))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn macro_of(counts: &[BinaryCounts], absent: AbsentClassF1, evaluated: usize, skipped: usize) -> F1Scores {
    let per_class: Vec<f64> = counts.iter().map(|c| c.f1(absent)).collect();
    let macro_f1 = per_class.iter().sum::<f64>() / per_class.len() as f64;
    F1Scores {
        per_class,
        macro_f1,
        evaluated,
        skipped,
    }
}

/// Per-unit F1 after thresholding `probs` (`[n, 12]`), then the unweighted
/// mean. Samples with sentinel labels are skipped.
pub fn au_macro_f1(
    probs: &Tensor,
    targets: &[[i8; NUM_AUS]],
    threshold: f64,
    absent: AbsentClassF1,
) -> Result<F1Scores> {
    if probs.shape() != [targets.len(), NUM_AUS] {
        return Err(Error::Dimension {
            op: "au_macro_f1",
            left: probs.shape().to_vec(),
            right: vec![targets.len(), NUM_AUS],
        });
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("AU threshold {threshold} outside (0, 1)")));
    }
    let mut counts = [BinaryCounts::default(); NUM_AUS];
    let mut evaluated = 0;
    for (i, t) in targets.iter().enumerate() {
        if !au_valid(t) {
            continue;
        }
        evaluated += 1;
        for (j, c) in counts.iter_mut().enumerate() {
            c.record(probs.at(i, j) >= threshold, t[j] == 1);
        }
    }
    if evaluated == 0 {
        return Err(Error::Degenerate {
            op: "au_macro_f1",
            msg: "no valid samples".into(),
        });
    }
    Ok(macro_of(&counts, absent, evaluated, targets.len() - evaluated))
}

/// Argmax with the lowest index winning ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest F1 per expression class after argmax, then the unweighted
/// mean over all eight classes.
pub fn expr_macro_f1(dist: &Tensor, targets: &[i32], absent: AbsentClassF1) -> Result<F1Scores> {
    if dist.shape() != [targets.len(), NUM_EXPR] {
        return Err(Error::Dimension {
            op: "expr_macro_f1",
            left: dist.shape().to_vec(),
            right: vec![targets.len(), NUM_EXPR],
        });
    }
    let mut counts = [BinaryCounts::default(); NUM_EXPR];
    let mut evaluated = 0;
    for (i, &t) in targets.iter().enumerate() {
        if !expr_valid(t) {
            continue;
        }
        evaluated += 1;
        let p = argmax(dist.row(i));
        for (k, c) in counts.iter_mut().enumerate() {
            c.record(p == k, t as usize == k);
        }
    }
    if evaluated == 0 {
        return Err(Error::Degenerate {
            op: "expr_macro_f1",
            msg: "no valid samples".into(),
        });
    }
    Ok(macro_of(&counts, absent, evaluated, targets.len() - evaluated))
}

/// Plain-float CCC with population moments, the same formula as the loss.
pub fn ccc_value(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let d = (vx + vy + (mx - my).powi(2)).max(crate::objectives::CCC_EPS);
    2.0 * cov / d
}

/// CCC over a whole split, skipping entries whose target is the sentinel.
pub fn ccc_metric(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            op: "ccc_metric",
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    let (p, t): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(target)
        .filter(|(_, &t)| va_valid(t))
        .map(|(&p, &t)| (p, t))
        .unzip();
    if p.len() < 2 {
        return Err(Error::Degenerate {
            op: "ccc_metric",
            msg: format!("need at least 2 valid entries, got {}", p.len()),
        });
    }
    Ok(ccc_value(&p, &t))
}

/// The four components of the challenge score.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreComponents {
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub expr_f1: Option<f64>,
    pub au_f1: Option<f64>,
}

/// `P = (CCC_arousal + CCC_valence) / 2 + F_expr + F_aus`.
pub fn composite_p(c: &ScoreComponents) -> Result<f64> {
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::Degenerate {
            op: "composite_p",
            msg: format!("missing component {name}"),
        })
    };
    let v = need(c.ccc_valence, "ccc_valence")?;
    let a = need(c.ccc_arousal, "ccc_arousal")?;
    let e = need(c.expr_f1, "expr_f1")?;
    let u = need(c.au_f1, "au_f1")?;
    Ok((a + v) / 2.0 + e + u)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub au_f1_per_unit: Option<Vec<f64>>,
    pub au_f1_macro: Option<f64>,
    pub expr_f1_per_class: Option<Vec<f64>>,
    pub expr_f1_macro: Option<f64>,
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub mean_ccc: Option<f64>,
    pub p: Option<f64>,
    pub au_counts: SampleCounts,
    pub expr_counts: SampleCounts,
    pub valence_counts: SampleCounts,
    pub arousal_counts: SampleCounts,
    pub absent_class_f1: AbsentClassF1,
    pub au_threshold: f64,
    /// Which heads read the temporal module output.
    pub routing: String,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn components(&self) -> ScoreComponents {
        ScoreComponents {
            ccc_valence: self.ccc_valence,
            ccc_arousal: self.ccc_arousal,
            expr_f1: self.expr_f1_macro,
            au_f1: self.au_f1_macro,
        }
    }

    /// Fills `mean_ccc` and `p` from the components that are present.
    pub fn finalize(&mut self) {
        self.mean_ccc = match (self.ccc_valence, self.ccc_arousal) {
            (Some(v), Some(a)) => Some((v + a) / 2.0),
            _ => None,
        };
        self.p = composite_p(&self.components()).ok();
    }

    /// Recomputes `P` and compares it with the stored value.
    pub fn verify(&self) -> Result<()> {
        let Some(stored) = self.p else { return Ok(()) };
        let recomputed = composite_p(&self.components()).map_err(|e| {
            Error::Integrity(format!("report stores P = {stored} but {e}"))
        })?;
        if (recomputed - stored).abs() > 1e-9 {
            return Err(Error::Integrity(format!(
                "stored P = {stored} but components give {recomputed}"
            )));
        }
        Ok(())
    }

    /// Flat `key=value` lines, sorted by key. Floats use Rust's shortest
    /// round-trip formatting.
    pub fn to_kv_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let list = |v: &Option<Vec<f64>>| {
            v.as_ref().map_or_else(String::new, |xs| {
                xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
            })
        };
        let mut kv: BTreeMap<String, String> = [
            ("au_f1_per_unit", list(&self.au_f1_per_unit)),
            ("au_f1_macro", opt(self.au_f1_macro)),
            ("expr_f1_per_class", list(&self.expr_f1_per_class)),
            ("expr_f1_macro", opt(self.expr_f1_macro)),
            ("ccc_valence", opt(self.ccc_valence)),
            ("ccc_arousal", opt(self.ccc_arousal)),
            ("mean_ccc", opt(self.mean_ccc)),
            ("P", opt(self.p)),
            ("absent_class_f1", self.absent_class_f1.as_str().into()),
            ("au_threshold", self.au_threshold.to_string()),
            ("routing", self.routing.clone()),
            ("config_hash", self.config_hash.clone()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (name, c) in [
            ("au", self.au_counts),
            ("expr", self.expr_counts),
            ("valence", self.valence_counts),
            ("arousal", self.arousal_counts),
        ] {
            kv.insert(format!("{name}_evaluated"), c.evaluated.to_string());
            kv.insert(format!("{name}_skipped"), c.skipped.to_string());
        }
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let float = |key: &str| -> Result<Option<f64>> {
            match kv.get(key) {
                None => Ok(None),
                Some((_, v)) if v.is_empty() => Ok(None),
                Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                    line: *line,
                    msg: format!("`{key}` is not a number: {v}"),
                }),
            }
        };
        let list = |key: &str| -> Result<Option<Vec<f64>>> {
            match kv.get(key) {
                None => Ok(None),
                Some((_, v)) if v.is_empty() => Ok(None),
                Some((line, v)) => v
                    .split(',')
                    .map(|x| {
                        x.trim().parse().map_err(|_| Error::Parse {
                            line: *line,
                            msg: format!("`{key}` has a non-numeric entry `{x}`"),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
                    .map(Some),
            }
        };
        let count = |key: &str| -> Result<usize> {
            Ok(float(key)?.map_or(0, |v| v as usize))
        };
        let counts = |name: &str| -> Result<SampleCounts> {
            Ok(SampleCounts {
                evaluated: count(&format!("{name}_evaluated"))?,
                skipped: count(&format!("{name}_skipped"))?,
            })
        };
        let text_of = |key: &str| kv.get(key).map(|(_, v)| v.clone()).unwrap_or_default();
        Ok(EvalReport {
            au_f1_per_unit: list("au_f1_per_unit")?,
            au_f1_macro: float("au_f1_macro")?,
            expr_f1_per_class: list("expr_f1_per_class")?,
            expr_f1_macro: float("expr_f1_macro")?,
            ccc_valence: float("ccc_valence")?,
            ccc_arousal: float("ccc_arousal")?,
            mean_ccc: float("mean_ccc")?,
            p: float("P")?,
            au_counts: counts("au")?,
            expr_counts: counts("expr")?,
            valence_counts: counts("valence")?,
            arousal_counts: counts("arousal")?,
            absent_class_f1: match text_of("absent_class_f1").as_str() {
                "zero" => AbsentClassF1::Zero,
                _ => AbsentClassF1::One,
            },
            au_threshold: float("au_threshold")?.unwrap_or(0.5),
            routing: text_of("routing"),
            config_hash: text_of("config_hash"),
            seed: text_of("seed").parse().unwrap_or(0),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_f1_cases() {
        let t = [true, false, true, false];
        assert_eq!(binary_f1(&t, &t, AbsentClassF1::One).unwrap(), 1.0);
        let p = [true, true, false, false];
        assert_eq!(binary_f1(&p, &t, AbsentClassF1::One).unwrap(), 0.5);
        let none = [false; 4];
        assert_eq!(binary_f1(&none, &none, AbsentClassF1::One).unwrap(), 1.0);
        assert_eq!(binary_f1(&none, &none, AbsentClassF1::Zero).unwrap(), 0.0);
        assert!(binary_f1(&none, &t[..3], AbsentClassF1::One).is_err());
    }

    #[test]
    fn au_macro_composition() {
        let targets: Vec<[i8; 12]> = [1, 0, 1, 0]
            .iter()
            .map(|&first| {
                let mut a = [1i8; 12];
                a[0] = first;
                a
            })
            .collect();
        let mut probs = Tensor::ones(&[4, 12]);
        for (i, p) in [1.0, 1.0, 0.0, 0.0].iter().enumerate() {
            probs.data_mut()[i * 12] = *p;
        }
        let s = au_macro_f1(&probs, &targets, 0.5, AbsentClassF1::One).unwrap();
        assert!((s.macro_f1 - (11.0 + 0.5) / 12.0).abs() < 1e-15);

        let perfect = Tensor::new(
            vec![4, 12],
            targets.iter().flatten().map(|&v| f64::from(v)).collect(),
        )
        .unwrap();
        let s = au_macro_f1(&perfect, &targets, 0.5, AbsentClassF1::One).unwrap();
        assert_eq!(s.macro_f1, 1.0);

        assert!(au_macro_f1(&perfect, &[[-1; 12]; 4], 0.5, AbsentClassF1::One).is_err());
    }

    #[test]
    fn expr_macro_cases() {
        let mut dist = Tensor::zeros(&[4, 8]);
        for (i, &c) in [0usize, 1, 1, 1].iter().enumerate() {
            dist.data_mut()[i * 8 + c] = 0.9;
        }
        let s = expr_macro_f1(&dist, &[0, 0, 1, 1], AbsentClassF1::One).unwrap();
        assert!((s.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.per_class[1] - 0.8).abs() < 1e-15);
        assert!((s.macro_f1 - (2.0 / 3.0 + 0.8 + 6.0) / 8.0).abs() < 1e-15);

        assert_eq!(argmax(&[0.2, 0.4, 0.4, 0.0]), 1);
        assert!(expr_macro_f1(&dist, &[-1; 4], AbsentClassF1::One).is_err());
    }

    #[test]
    fn ccc_metric_cases() {
        assert!((ccc_metric(&[0.1, 0.5, -0.3], &[0.1, 0.5, -0.3]).unwrap() - 1.0).abs() < 1e-15);
        assert!((ccc_metric(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 4.0 / 11.0).abs() < 1e-15);
        let a = ccc_metric(&[1.0, 9.0, 2.0, 7.0, 3.0], &[2.0, -5.0, 4.0, -5.0, 6.0]).unwrap();
        let b = ccc_metric(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(a, b);
        assert!(ccc_metric(&[1.0, 2.0], &[1.0, -5.0]).is_err());
    }

    #[test]
    fn composite_p_values() {
        let perfect = ScoreComponents {
            ccc_valence: Some(1.0),
            ccc_arousal: Some(1.0),
            expr_f1: Some(1.0),
            au_f1: Some(1.0),
        };
        assert_eq!(composite_p(&perfect).unwrap(), 3.0);
        let missing = ScoreComponents {
            au_f1: None,
            ..perfect
        };
        assert!(composite_p(&missing).is_err());
    }

    #[test]
    fn kv_round_trip_and_tamper_detection() {
        let mut r = EvalReport {
            au_f1_per_unit: Some(vec![0.5; 12]),
            au_f1_macro: Some(0.5),
            expr_f1_per_class: Some(vec![0.25; 8]),
            expr_f1_macro: Some(0.25),
            ccc_valence: Some(0.7),
            ccc_arousal: Some(0.3),
            au_threshold: 0.5,
            routing: "temporal:EXPR,VA".into(),
            config_hash: "abc".into(),
            seed: 7,
            ..Default::default()
        };
        r.finalize();
        assert!((r.p.unwrap() - 1.25).abs() < 1e-15);
        let back = EvalReport::from_kv_text(&r.to_kv_text()).unwrap();
        assert_eq!(back, r);
        back.verify().unwrap();

        let tampered = r.to_kv_text().replace("P=1.25", "P=1.5");
        let t = EvalReport::from_kv_text(&tampered).unwrap();
        assert!(matches!(t.verify(), Err(Error::Integrity(_))));
    }
}
