//! Task losses with sentinel masking and the weighted joint objective.
//!
//! Sentinel-labelled samples are removed by gathering the valid rows before
//! any arithmetic, so a batch padded with sentinels produces exactly the same
//! computation as the sentinel-free batch.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{TaskKind, AU_SENTINEL, EXPR_SENTINEL, NUM_AUS, NUM_EXPR, VA_SENTINEL};
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp used before every `log`.
pub const PROB_EPS: f64 = 1e-12;
/// Lower bound on the CCC denominator.
pub const CCC_EPS: f64 = 1e-8;

pub fn au_valid(labels: &[i8; NUM_AUS]) -> bool {
    labels.iter().all(|&v| v != AU_SENTINEL)
}

pub fn expr_valid(label: i32) -> bool {
    label != EXPR_SENTINEL
}

pub fn va_valid(label: f64) -> bool {
    label != VA_SENTINEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub au: [f64; NUM_AUS],
    pub expr: [f64; NUM_EXPR],
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            au: [1.0; NUM_AUS],
            expr: [1.0; NUM_EXPR],
        }
    }
}

/// Inverse frequency `n_valid / count`, absent classes take the largest
/// observed weight, then the vector is scaled to mean 1.
fn inverse_frequency<const K: usize>(counts: &[usize; K], n_valid: usize) -> [f64; K] {
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| n_valid as f64 / c as f64))
        .collect();
    let max = raw.iter().flatten().copied().fold(f64::NAN, f64::max);
    let filled: Vec<f64> = raw.iter().map(|r| r.unwrap_or(max)).collect();
    let mean = filled.iter().sum::<f64>() / K as f64;
    let mut out = [0.0; K];
    for (o, v) in out.iter_mut().zip(&filled) {
        *o = v / mean;
    }
    out
}

impl ClassWeights {
    /// Weights from training labels (sentinels skipped).
    pub fn from_labels(aus: &[[i8; NUM_AUS]], exprs: &[i32]) -> Result<Self> {
        let valid_au: Vec<_> = aus.iter().filter(|a| au_valid(a)).collect();
        let valid_ex: Vec<_> = exprs.iter().filter(|&&e| expr_valid(e)).collect();
        if valid_au.is_empty() || valid_ex.is_empty() {
            return Err(Error::Degenerate {
                op: "compute_class_weights",
                msg: format!(
                    "need valid AU and EXPR samples (got {} AU, {} EXPR)",
                    valid_au.len(),
                    valid_ex.len()
                ),
            });
        }
        let mut au_pos = [0usize; NUM_AUS];
        for a in &valid_au {
            for (c, &v) in au_pos.iter_mut().zip(a.iter()) {
                *c += (v == 1) as usize;
            }
        }
        let mut ex_counts = [0usize; NUM_EXPR];
        for &&e in &valid_ex {
            ex_counts[e as usize] += 1;
        }
        let au = if au_pos.iter().all(|&c| c == 0) {
            [1.0; NUM_AUS]
        } else {
            inverse_frequency(&au_pos, valid_au.len())
        };
        Ok(ClassWeights {
            au,
            expr: inverse_frequency(&ex_counts, valid_ex.len()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub au: f64,
    pub expr: f64,
    pub va: f64,
}

impl LossWeights {
    /// 1 for every loss whose task is in `tasks`, 0 otherwise.
    pub fn for_tasks(tasks: &[TaskKind]) -> Self {
        let has = |t: TaskKind| tasks.contains(&t);
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        LossWeights {
            au: on(has(TaskKind::Au)),
            expr: on(has(TaskKind::Expr)),
            va: on(has(TaskKind::Valence) || has(TaskKind::Arousal)),
        }
    }

    /// A weight is zero exactly when its task is excluded.
    pub fn check_against(&self, tasks: &[TaskKind]) -> Result<()> {
        let expect = LossWeights::for_tasks(tasks);
        for (name, w, e) in [
            ("au", self.au, expect.au),
            ("expr", self.expr, expect.expr),
            ("va", self.va, expect.va),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be >= 0")));
            }
            if (w > 0.0) != (e > 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w} is inconsistent with tasks {tasks:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        LossWeights {
            au: self.au * alpha,
            expr: self.expr * alpha,
            va: self.va * alpha,
        }
    }
}

fn rows_where(n: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..n).filter(|&i| keep(i)).collect()
}

fn check_rows(tape: &Tape, op: &'static str, pred: Var, n: usize, width: usize) -> Result<()> {
    let sh = tape.shape(pred);
    if sh.len() != 2 || sh[0] != n || sh[1] != width {
        return Err(Error::Dimension {
            op,
            left: sh.to_vec(),
            right: vec![n, width],
        });
    }
    Ok(())
}

/// Weighted binary cross-entropy averaged over the 12 units and over the
/// valid samples.
pub fn au_loss(
    tape: &mut Tape,
    pred: Var,
    targets: &[[i8; NUM_AUS]],
    w: &ClassWeights,
) -> Result<Var> {
    check_rows(tape, "au_loss", pred, targets.len(), NUM_AUS)?;
    let rows = rows_where(targets.len(), |i| au_valid(&targets[i]));
    if rows.is_empty() {
        return Err(Error::EmptyBatch { task: TaskKind::Au });
    }
    let n = rows.len();
    let p = tape.gather_rows(pred, &rows)?;
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let mut y = Vec::with_capacity(n * NUM_AUS);
    let mut not_y = Vec::with_capacity(n * NUM_AUS);
    for &r in &rows {
        for j in 0..NUM_AUS {
            let t = f64::from(targets[r][j]);
            y.push(w.au[j] * t);
            not_y.push(w.au[j] * (1.0 - t));
        }
    }
    let y = tape.constant(Tensor::new(vec![n, NUM_AUS], y)?);
    let not_y = tape.constant(Tensor::new(vec![n, NUM_AUS], not_y)?);
    let log_p = tape.log(p)?;
    let q = tape.one_minus(p);
    let log_q = tape.log(q)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s, None)?;
    Ok(tape.scale(total, -1.0 / (NUM_AUS as f64 * n as f64)))
}

/// Weighted cross-entropy with the explicit `1/8` factor, averaged over the
/// valid samples.
pub fn expr_loss(tape: &mut Tape, pred: Var, targets: &[i32], w: &ClassWeights) -> Result<Var> {
    check_rows(tape, "expr_loss", pred, targets.len(), NUM_EXPR)?;
    let rows = rows_where(targets.len(), |i| expr_valid(targets[i]));
    if rows.is_empty() {
        return Err(Error::EmptyBatch {
            task: TaskKind::Expr,
        });
    }
    let classes: Vec<usize> = rows.iter().map(|&r| targets[r] as usize).collect();
    if let Some(&bad) = classes.iter().find(|&&c| c >= NUM_EXPR) {
        return Err(Error::Domain {
            op: "expr_loss",
            msg: format!("class index {bad} out of range"),
        });
    }
    let n = rows.len();
    let p = tape.gather_rows(pred, &rows)?;
    let picked = tape.pick(p, &classes)?;
    let picked = tape.clamp(picked, PROB_EPS, 1.0);
    let logs = tape.log(picked)?;
    let wts = tape.constant(Tensor::from_vec(classes.iter().map(|&c| w.expr[c]).collect()));
    let weighted = tape.mul(wts, logs)?;
    let total = tape.sum(weighted, None)?;
    Ok(tape.scale(total, -1.0 / (NUM_EXPR as f64 * n as f64)))
}

/// Concordance correlation coefficient of two rank-1 tensors:
/// `2 cov / (var_x + var_y + (mean_x - mean_y)^2)` with population moments.
/// The denominator is floored at [`CCC_EPS`].
pub fn ccc(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if sx.len() != 1 || sx != sy {
        return Err(Error::Dimension {
            op: "ccc",
            left: sx,
            right: sy,
        });
    }
    if sx[0] < 2 {
        return Err(Error::Degenerate {
            op: "ccc",
            msg: format!("need at least 2 entries, got {}", sx[0]),
        });
    }
    let mx = tape.mean(x, None)?;
    let my = tape.mean(y, None)?;
    let bx = tape.broadcast(mx, &sx)?;
    let by = tape.broadcast(my, &sx)?;
    let cx = tape.sub(x, bx)?;
    let cy = tape.sub(y, by)?;
    let prod = tape.mul(cx, cy)?;
    let cov = tape.mean(prod, None)?;
    let vx = tape.variance(x, None)?;
    let vy = tape.variance(y, None)?;
    let gap = tape.sub(mx, my)?;
    let gap2 = tape.mul(gap, gap)?;
    let d = tape.add(vx, vy)?;
    let d = tape.add(d, gap2)?;
    let d = tape.clamp(d, CCC_EPS, f64::INFINITY);
    let num = tape.scale(cov, 2.0);
    tape.div(num, d)
}

/// `1 - CCC` over the entries whose target is not the VA sentinel.
pub fn ccc_loss_term(tape: &mut Tape, pred: Var, target: &[f64], task: TaskKind) -> Result<Var> {
    let sh = tape.shape(pred);
    if sh != [target.len()] {
        return Err(Error::Dimension {
            op: "va_loss",
            left: sh.to_vec(),
            right: vec![target.len()],
        });
    }
    let rows = rows_where(target.len(), |i| va_valid(target[i]));
    if rows.len() < 2 {
        return Err(Error::EmptyBatch { task });
    }
    let p = tape.gather_rows(pred, &rows)?;
    let t = tape.constant(Tensor::from_vec(rows.iter().map(|&r| target[r]).collect()));
    let c = ccc(tape, p, t)?;
    let neg = tape.scale(c, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `(1 - CCC_valence) + (1 - CCC_arousal)` over one batch. A pair counts
/// only when neither value is the sentinel.
pub fn va_loss(
    tape: &mut Tape,
    pred_v: Var,
    pred_a: Var,
    target_v: &[f64],
    target_a: &[f64],
) -> Result<Var> {
    if target_v.len() != target_a.len() {
        return Err(Error::Dimension {
            op: "va_loss",
            left: vec![target_v.len()],
            right: vec![target_a.len()],
        });
    }
    let pair = |i: usize, t: &[f64]| {
        if va_valid(target_v[i]) && va_valid(target_a[i]) {
            t[i]
        } else {
            VA_SENTINEL
        }
    };
    let tv: Vec<f64> = (0..target_v.len()).map(|i| pair(i, target_v)).collect();
    let ta: Vec<f64> = (0..target_a.len()).map(|i| pair(i, target_a)).collect();
    let lv = ccc_loss_term(tape, pred_v, &tv, TaskKind::Valence)?;
    let la = ccc_loss_term(tape, pred_a, &ta, TaskKind::Arousal)?;
    tape.add(lv, la)
}

/// Per-batch loss terms; `None` marks a term that was skipped.
#[derive(Debug, Default, Clone, Copy)]
pub struct TaskLosses {
    pub au: Option<Var>,
    pub expr: Option<Var>,
    pub va: Option<Var>,
}

/// `lambda_au * L_au + lambda_expr * L_expr + lambda_va * L_va`.
///
/// Terms with zero weight are never added. A positive-weight term that is
/// missing (no valid labels in this batch) is skipped with a warning. Returns
/// `Ok(None)` when nothing is left to optimise.
pub fn overall_loss(
    tape: &mut Tape,
    losses: &TaskLosses,
    lambda: &LossWeights,
) -> Result<Option<Var>> {
    if lambda.au == 0.0 && lambda.expr == 0.0 && lambda.va == 0.0 {
        return Err(Error::Config("all loss weights are zero".into()));
    }
    let mut total: Option<Var> = None;
    for (name, term, w) in [
        ("AU", losses.au, lambda.au),
        ("EXPR", losses.expr, lambda.expr),
        ("VA", losses.va, lambda.va),
    ] {
        if w == 0.0 {
            continue;
        }
        let Some(term) = term else {
            warn!("{name} loss skipped for this batch (no valid labels)");
            continue;
        };
        let scaled = tape.scale(term, w);
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn val(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn au_loss_half_predictions() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::full(&[3, 12], 0.5));
        let l = au_loss(&mut t, p, &[[1; 12]; 3], &ClassWeights::default()).unwrap();
        assert!((val(&t, l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn au_loss_perfect_and_masking() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::full(&[1, 12], 1.0 - 1e-12));
        let l = au_loss(&mut t, p, &[[1; 12]], &ClassWeights::default()).unwrap();
        assert!(val(&t, l) < 1e-11);

        let row: Vec<f64> = (0..12).map(|j| 0.1 + 0.05 * j as f64).collect();
        let mut both = row.clone();
        both.extend(vec![0.3; 12]);
        let single = t.constant(Tensor::new(vec![1, 12], row).unwrap());
        let pair = t.constant(Tensor::new(vec![2, 12], both).unwrap());
        let y = [[1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 1]];
        let l1 = au_loss(&mut t, single, &y, &ClassWeights::default()).unwrap();
        let l2 = au_loss(&mut t, pair, &[y[0], [-1; 12]], &ClassWeights::default()).unwrap();
        assert_eq!(val(&t, l1), val(&t, l2));

        let empty = t.constant(Tensor::full(&[1, 12], 0.5));
        assert!(matches!(
            au_loss(&mut t, empty, &[[-1; 12]], &ClassWeights::default()),
            Err(Error::EmptyBatch { task: TaskKind::Au })
        ));
    }

    #[test]
    fn expr_loss_uniform_and_perfect() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::full(&[2, 8], 0.125));
        let l = expr_loss(&mut t, p, &[3, 7], &ClassWeights::default()).unwrap();
        assert!((val(&t, l) - 8f64.ln() / 8.0).abs() < 1e-15);
        assert!((val(&t, l) - 0.2599).abs() < 1e-4);

        let mut one_hot = Tensor::zeros(&[1, 8]);
        one_hot.data_mut()[5] = 1.0;
        let p = t.constant(one_hot);
        let l = expr_loss(&mut t, p, &[5], &ClassWeights::default()).unwrap();
        assert!(val(&t, l).abs() < 1e-15);

        let p = t.constant(Tensor::full(&[2, 8], 0.125));
        assert!(matches!(
            expr_loss(&mut t, p, &[-1, -1], &ClassWeights::default()),
            Err(Error::EmptyBatch { .. })
        ));
    }

    fn ccc_of(x: &[f64], y: &[f64]) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(x.to_vec()));
        let b = t.constant(Tensor::from_vec(y.to_vec()));
        let c = ccc(&mut t, a, b).unwrap();
        val(&t, c)
    }

    #[test]
    fn ccc_hand_cases() {
        assert!((ccc_of(&[0.1, -0.4, 0.7], &[0.1, -0.4, 0.7]) - 1.0).abs() < 1e-15);
        assert!((ccc_of(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 4.0 / 11.0).abs() < 1e-15);
        assert!((ccc_of(&[-1.0, 0.0, 1.0], &[1.0, 0.0, -1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(ccc_of(&[0.3, 0.3], &[0.3, 0.3]), 0.0);
    }

    #[test]
    fn ccc_needs_two_entries() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0]));
        assert!(matches!(ccc(&mut t, a, a), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn va_loss_cases() {
        let mut t = Tape::new();
        let pv = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let pa = t.constant(Tensor::from_vec(vec![0.2, -0.1, 0.5]));
        let l = va_loss(&mut t, pv, pa, &[2.0, 4.0, 6.0], &[0.2, -0.1, 0.5]).unwrap();
        assert!((val(&t, l) - 7.0 / 11.0).abs() < 1e-15);

        let pv = t.constant(Tensor::from_vec(vec![0.1, 0.4, 0.9]));
        let pv4 = t.constant(Tensor::from_vec(vec![0.1, 0.4, 0.7, 0.9]));
        let pa = t.constant(Tensor::from_vec(vec![0.3, 0.1, 0.2]));
        let pa4 = t.constant(Tensor::from_vec(vec![0.3, 0.1, 0.0, 0.2]));
        let l3 = va_loss(&mut t, pv, pa, &[0.0, 0.5, 0.6], &[0.1, 0.2, 0.0]).unwrap();
        let l4 = va_loss(&mut t, pv4, pa4, &[0.0, 0.5, -5.0, 0.6], &[0.1, 0.2, -5.0, 0.0])
            .unwrap();
        assert_eq!(val(&t, l3), val(&t, l4));

        let pv = t.constant(Tensor::from_vec(vec![0.1, 0.4]));
        assert!(matches!(
            va_loss(&mut t, pv, pv, &[0.1, -5.0], &[0.1, 0.2]),
            Err(Error::EmptyBatch { .. })
        ));
    }

    #[test]
    fn overall_loss_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.5));
        let e = t.constant(Tensor::scalar(0.3));
        let v = t.constant(Tensor::scalar(0.2));
        let losses = TaskLosses {
            au: Some(a),
            expr: Some(e),
            va: Some(v),
        };
        let ones = LossWeights {
            au: 1.0,
            expr: 1.0,
            va: 1.0,
        };
        let l = overall_loss(&mut t, &losses, &ones).unwrap().unwrap();
        assert!((val(&t, l) - 1.0).abs() < 1e-15);

        let big = t.constant(Tensor::scalar(9.9));
        let losses = TaskLosses {
            expr: Some(big),
            ..losses
        };
        let w = LossWeights {
            au: 2.0,
            expr: 0.0,
            va: 1.0,
        };
        let l = overall_loss(&mut t, &losses, &w).unwrap().unwrap();
        assert!((val(&t, l) - 1.2).abs() < 1e-15);

        let zero = LossWeights {
            au: 0.0,
            expr: 0.0,
            va: 0.0,
        };
        assert!(matches!(
            overall_loss(&mut t, &losses, &zero),
            Err(Error::Config(_))
        ));
        let missing = TaskLosses::default();
        assert!(overall_loss(&mut t, &missing, &ones).unwrap().is_none());
    }

    #[test]
    fn class_weights() {
        let balanced_expr: Vec<i32> = (0..16).map(|i| i % 8).collect();
        let mut aus = Vec::new();
        for i in 0..4 {
            let mut a = [0i8; 12];
            for (j, v) in a.iter_mut().enumerate() {
                *v = ((i + j) % 2) as i8;
            }
            aus.push(a);
        }
        let w = ClassWeights::from_labels(&aus, &balanced_expr).unwrap();
        assert!(w.au.iter().chain(&w.expr).all(|&v| (v - 1.0).abs() < 1e-15));

        let mut ex: Vec<i32> = Vec::new();
        for c in 0..7 {
            ex.extend(std::iter::repeat_n(c, 10));
        }
        ex.extend(std::iter::repeat_n(7, 30));
        let w = ClassWeights::from_labels(&aus, &ex).unwrap();
        for c in 0..7 {
            assert!((w.expr[c] - 12.0 / 11.0).abs() < 1e-12);
        }
        assert!((w.expr[7] - 4.0 / 11.0).abs() < 1e-12);

        // AU 3 never positive: takes the largest other weight.
        let mut skewed = aus.clone();
        for a in &mut skewed {
            a[3] = 0;
        }
        skewed[0][0] = 1;
        let w = ClassWeights::from_labels(&skewed, &ex).unwrap();
        let max_other = w
            .au
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != 3)
            .map(|(_, &v)| v)
            .fold(f64::MIN, f64::max);
        assert_eq!(w.au[3], max_other);
        let mean: f64 = w.au.iter().sum::<f64>() / 12.0;
        assert!((mean - 1.0).abs() < 1e-12);

        assert!(ClassWeights::from_labels(&[[-1; 12]], &[-1]).is_err());
    }

    #[test]
    fn loss_weights_follow_task_set() {
        let w = LossWeights::for_tasks(&[TaskKind::Valence, TaskKind::Au]);
        assert_eq!((w.au, w.expr, w.va), (1.0, 0.0, 1.0));
        assert!(w.check_against(&[TaskKind::Valence, TaskKind::Au]).is_ok());
        assert!(w.check_against(&[TaskKind::Valence]).is_err());
    }
}
