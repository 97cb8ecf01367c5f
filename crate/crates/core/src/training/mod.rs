//! Single-task training, feature-bank extraction, joint training with fusion
//! and temporal modelling, and evaluation.

mod bank;
mod checkpoint;
mod config;
mod optim;

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

pub use bank::{extract_bank, FeatureBank};
pub use checkpoint::{BankRef, Checkpoint, Provenance, Stage, CHECKPOINT_VERSION};
pub use config::{apply_overrides, ClassWeightMode, LrSchedule, TrainConfig};
pub use optim::{clip_grad_norm, global_norm, Adam, AdamParams};

use crate::data::{batch_order, build_windows, AnnotationRecord, Batch, DatasetSplit, Window};
use crate::error::{Error, Result};
use crate::layers::{Model, ParamStore, Session};
use crate::metrics::{au_macro_f1, ccc_metric, expr_macro_f1, EvalReport, SampleCounts};
use crate::objectives::{
    au_loss, ccc_loss_term, expr_loss, overall_loss, va_valid, ClassWeights, TaskLosses,
};
use crate::seed;
use crate::task::{HeadKind, TaskKind, AU_SENTINEL, EXPR_SENTINEL, NUM_AUS, NUM_EXPR, VA_SENTINEL};
use crate::tensor::{Tensor, Var};

/// Records valid for at least one of `tasks`.
pub fn task_split(split: &DatasetSplit, tasks: &[TaskKind]) -> DatasetSplit {
    DatasetSplit::new(
        split
            .records
            .iter()
            .filter(|r| tasks.iter().any(|&t| r.is_valid_for(t)))
            .cloned()
            .collect(),
    )
}

/// One row of `log.csv`. Epoch 0 is the initial model, before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub loss_au: Option<f64>,
    pub loss_expr: Option<f64>,
    pub loss_va: Option<f64>,
    pub val_score: f64,
    pub report: EvalReport,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut s = String::from(
        "epoch,train_loss,loss_au,loss_expr,loss_va,val_score,val_au_f1,val_expr_f1,val_ccc_v,val_ccc_a\n",
    );
    for e in log {
        let r = &e.report;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            opt(e.loss_au),
            opt(e.loss_expr),
            opt(e.loss_va),
            e.val_score,
            opt(r.au_f1_macro),
            opt(r.expr_f1_macro),
            opt(r.ccc_valence),
            opt(r.ccc_arousal),
        )
        .expect("writing to a string");
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-epoch weights and score.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Total loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
    /// Weights after the last epoch run.
    pub final_params: ParamStore,
}

/// The primary task's own metric from a report.
pub fn task_score(report: &EvalReport, task: TaskKind) -> Option<f64> {
    match task {
        TaskKind::Au => report.au_f1_macro,
        TaskKind::Expr => report.expr_f1_macro,
        TaskKind::Valence => report.ccc_valence,
        TaskKind::Arousal => report.ccc_arousal,
    }
}

/// Summed bank vectors for each record, or `None` without fusion sources.
fn bank_inputs(
    records: &[AnnotationRecord],
    banks: &[&FeatureBank],
    dim: usize,
) -> Result<Option<Vec<Vec<f64>>>> {
    if banks.is_empty() {
        return Ok(None);
    }
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut acc = vec![0.0; dim];
        for b in banks {
            match b.get(&r.video_id, r.frame_index) {
                Some(x) => acc.iter_mut().zip(x).for_each(|(a, v)| *a += v),
                None => missing.push((r.video_id.clone(), r.frame_index)),
            }
        }
        out.push(acc);
    }
    if !missing.is_empty() {
        missing.dedup();
        return Err(Error::MissingFrames(missing));
    }
    Ok(Some(out))
}

fn other_tensor(other: &Option<Vec<Vec<f64>>>, batch: &Batch) -> Result<Option<Tensor>> {
    other
        .as_ref()
        .map(|o| {
            let rows: Vec<Vec<f64>> = batch.rows.iter().map(|&i| o[i].clone()).collect();
            Tensor::from_rows(&rows)
        })
        .transpose()
}

fn empty_ok(r: Result<Var>) -> Result<Option<Var>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyBatch { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Loss terms for one batch. Padded rows are relabelled with sentinels so
/// the losses skip them.
fn batch_losses(
    s: &mut Session,
    model: &Model,
    cfg: &TrainConfig,
    batch: &Batch,
    other: Option<Tensor>,
    weights: &ClassWeights,
) -> Result<TaskLosses> {
    let x = s.tape.constant(batch.inputs.clone());
    let o = other.map(|t| s.tape.constant(t));
    let heads = cfg.heads();
    let out = model.forward(
        s,
        x,
        o,
        (batch.batch, batch.seq),
        &heads,
        &cfg.temporal_routing(),
    )?;
    let real = |i: usize| batch.pad_mask[i];
    let n = batch.len();
    let mut losses = TaskLosses::default();
    if cfg.tasks.contains(&TaskKind::Au) {
        let t: Vec<[i8; NUM_AUS]> = (0..n)
            .map(|i| if real(i) { batch.aus[i] } else { [AU_SENTINEL; NUM_AUS] })
            .collect();
        let p = out.au.expect("AU head requested");
        losses.au = empty_ok(au_loss(&mut s.tape, p, &t, weights))?;
    }
    if cfg.tasks.contains(&TaskKind::Expr) {
        let t: Vec<i32> = (0..n)
            .map(|i| if real(i) { batch.expr[i] } else { EXPR_SENTINEL })
            .collect();
        let p = out.expr.expect("EXPR head requested");
        losses.expr = empty_ok(expr_loss(&mut s.tape, p, &t, weights))?;
    }
    let mut va_terms = Vec::new();
    for (task, col, labels) in [
        (TaskKind::Valence, 0, &batch.valence),
        (TaskKind::Arousal, 1, &batch.arousal),
    ] {
        if !cfg.tasks.contains(&task) {
            continue;
        }
        // the VA rule: a sentinel in either value invalidates both
        let t: Vec<f64> = (0..n)
            .map(|i| {
                let ok = real(i) && va_valid(batch.valence[i]) && va_valid(batch.arousal[i]);
                if ok { labels[i] } else { VA_SENTINEL }
            })
            .collect();
        let p = out.va.expect("VA head requested");
        let c = s.tape.slice_last(p, col, 1)?;
        let c = s.tape.reshape(c, &[n])?;
        if let Some(term) = empty_ok(ccc_loss_term(&mut s.tape, c, &t, task))? {
            va_terms.push(term);
        }
    }
    losses.va = match va_terms.as_slice() {
        [] => None,
        [one] => Some(*one),
        [a, b] => Some(s.tape.add(*a, *b)?),
        _ => unreachable!("at most two VA terms"),
    };
    Ok(losses)
}

fn value_of(s: &Session, v: Option<Var>) -> Option<f64> {
    v.map(|v| s.tape.value(v).item())
}

#[derive(Default)]
struct LossAverages {
    total: (f64, usize),
    au: (f64, usize),
    expr: (f64, usize),
    va: (f64, usize),
}

impl LossAverages {
    fn add(slot: &mut (f64, usize), v: Option<f64>) {
        if let Some(v) = v {
            slot.0 += v;
            slot.1 += 1;
        }
    }

    fn mean(slot: (f64, usize)) -> Option<f64> {
        (slot.1 > 0).then(|| slot.0 / slot.1 as f64)
    }
}

/// Model predictions for the real frames of a split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    /// Index into the split's records for each prediction row.
    pub records: Vec<usize>,
    pub au: Option<Vec<[f64; NUM_AUS]>>,
    pub expr: Option<Vec<[f64; NUM_EXPR]>>,
    pub va: Option<Vec<[f64; 2]>>,
}

/// Predictions for every real frame of `split`, using non-overlapping
/// windows of the configured length.
pub fn predict(
    model: &Model,
    cfg: &TrainConfig,
    split: &DatasetSplit,
    other: &Option<Vec<Vec<f64>>>,
) -> Result<Predictions> {
    let windows = build_windows(split, cfg.seq_len, cfg.seq_len)?;
    let heads = cfg.heads();
    let routing = cfg.temporal_routing();
    let mut preds = Predictions {
        au: heads.contains(&HeadKind::Au).then(Vec::new),
        expr: heads.contains(&HeadKind::Expr).then(Vec::new),
        va: heads.contains(&HeadKind::Va).then(Vec::new),
        ..Default::default()
    };
    for group in batch_order(&windows, cfg.batch_size, 0, false) {
        let batch = Batch::assemble(split, &windows, &group)?;
        let mut s = Session::eval(&model.params);
        let x = s.tape.constant(batch.inputs.clone());
        let o = other_tensor(other, &batch)?.map(|t| s.tape.constant(t));
        let out = model.forward(&mut s, x, o, (batch.batch, batch.seq), &heads, &routing)?;
        for i in (0..batch.len()).filter(|&i| batch.pad_mask[i]) {
            preds.records.push(batch.rows[i]);
            if let (Some(v), Some(p)) = (preds.au.as_mut(), out.au) {
                v.push(s.tape.value(p).row(i).try_into().expect("12 units"));
            }
            if let (Some(v), Some(p)) = (preds.expr.as_mut(), out.expr) {
                v.push(s.tape.value(p).row(i).try_into().expect("8 classes"));
            }
            if let (Some(v), Some(p)) = (preds.va.as_mut(), out.va) {
                v.push(s.tape.value(p).row(i).try_into().expect("2 outputs"));
            }
        }
    }
    Ok(preds)
}

/// Scores predictions against the labels of `split` for every configured
/// task that has valid labels.
pub fn score_predictions(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    preds: &Predictions,
) -> Result<EvalReport> {
    let recs: Vec<&AnnotationRecord> = preds.records.iter().map(|&i| &split.records[i]).collect();
    let mut report = EvalReport {
        absent_class_f1: cfg.absent_class_f1,
        au_threshold: cfg.au_threshold,
        routing: cfg.routing_label(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        ..Default::default()
    };
    let counts = |task: TaskKind| {
        let evaluated = recs.iter().filter(|r| r.is_valid_for(task)).count();
        SampleCounts {
            evaluated,
            skipped: recs.len() - evaluated,
        }
    };
    let mut scored = 0;
    for &task in &cfg.tasks {
        let c = counts(task);
        match task {
            TaskKind::Au => {
                report.au_counts = c;
                if c.evaluated == 0 {
                    continue;
                }
                let p = preds.au.as_ref().expect("AU predictions");
                let probs = Tensor::new(
                    vec![p.len(), NUM_AUS],
                    p.iter().flatten().copied().collect(),
                )?;
                let t: Vec<[i8; NUM_AUS]> = recs.iter().map(|r| r.aus).collect();
                let f = au_macro_f1(&probs, &t, cfg.au_threshold, cfg.absent_class_f1)?;
                report.au_f1_per_unit = Some(f.per_class);
                report.au_f1_macro = Some(f.macro_f1);
            }
            TaskKind::Expr => {
                report.expr_counts = c;
                if c.evaluated == 0 {
                    continue;
                }
                let p = preds.expr.as_ref().expect("EXPR predictions");
                let dist = Tensor::new(
                    vec![p.len(), NUM_EXPR],
                    p.iter().flatten().copied().collect(),
                )?;
                let t: Vec<i32> = recs.iter().map(|r| r.expression).collect();
                let f = expr_macro_f1(&dist, &t, cfg.absent_class_f1)?;
                report.expr_f1_per_class = Some(f.per_class);
                report.expr_f1_macro = Some(f.macro_f1);
            }
            TaskKind::Valence | TaskKind::Arousal => {
                let col = (task == TaskKind::Arousal) as usize;
                if c.evaluated < 2 {
                    continue;
                }
                let p = preds.va.as_ref().expect("VA predictions");
                let pred: Vec<f64> = p.iter().map(|v| v[col]).collect();
                let target: Vec<f64> = recs
                    .iter()
                    .map(|r| if r.is_valid_for(task) { [r.valence, r.arousal][col] } else { VA_SENTINEL })
                    .collect();
                let ccc = Some(ccc_metric(&pred, &target)?);
                if task == TaskKind::Valence {
                    report.valence_counts = c;
                    report.ccc_valence = ccc;
                } else {
                    report.arousal_counts = c;
                    report.ccc_arousal = ccc;
                }
            }
        }
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Degenerate {
            op: "evaluate",
            msg: "no valid labels for any configured task".into(),
        });
    }
    report.finalize();
    Ok(report)
}

fn check_banks<'b>(cfg: &TrainConfig, banks: &[&'b FeatureBank]) -> Result<Vec<&'b FeatureBank>> {
    cfg.fusion_sources
        .iter()
        .map(|&src| {
            let b = banks
                .iter()
                .find(|b| b.source == src)
                .ok_or_else(|| Error::Config(format!("fusion source {src} has no feature bank")))?;
            if !b.single_task {
                return Err(Error::Config(format!(
                    "bank for {src} was not extracted from a single-task checkpoint"
                )));
            }
            if b.dim() != cfg.feature_dim {
                return Err(Error::Config(format!(
                    "bank for {src} has dimension {}, model uses {}",
                    b.dim(),
                    cfg.feature_dim
                )));
            }
            Ok(*b)
        })
        .collect()
}

/// Evaluates a checkpoint on `split` with its own configuration.
pub fn evaluate(ck: &Checkpoint, split: &DatasetSplit, banks: &[&FeatureBank]) -> Result<EvalReport> {
    let cfg = &ck.config;
    let used = check_banks(cfg, banks)?;
    let split = task_split(split, &cfg.tasks);
    let other = bank_inputs(&split.records, &used, cfg.feature_dim)?;
    let preds = predict(&ck.model, cfg, &split, &other)?;
    score_predictions(cfg, &split, &preds)
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    model: Model,
    trainable: Vec<bool>,
    weights: ClassWeights,
    train: DatasetSplit,
    train_windows: Vec<Window>,
    train_other: Option<Vec<Vec<f64>>>,
    val: DatasetSplit,
    val_other: Option<Vec<Vec<f64>>>,
}

impl Run<'_> {
    fn validate(&self) -> Result<(EvalReport, f64)> {
        let preds = predict(&self.model, self.cfg, &self.val, &self.val_other)?;
        let report = score_predictions(self.cfg, &self.val, &preds)?;
        let primary = self.cfg.primary();
        let score = task_score(&report, primary).ok_or_else(|| {
            Error::Config(format!("validation split has no valid labels for {primary}"))
        })?;
        Ok((report, score))
    }

    fn batch(&self, ids: &[usize]) -> Result<(Batch, Option<Tensor>)> {
        let b = Batch::assemble(&self.train, &self.train_windows, ids)?;
        let o = other_tensor(&self.train_other, &b)?;
        Ok((b, o))
    }

    /// Mean training loss of the current weights, dropout off.
    fn initial_losses(&self) -> Result<LossAverages> {
        let mut avg = LossAverages::default();
        let lambda = self.cfg.lambda();
        for ids in batch_order(&self.train_windows, self.cfg.batch_size, 0, false) {
            let (b, o) = self.batch(&ids)?;
            let mut s = Session::eval(&self.model.params);
            let l = batch_losses(&mut s, &self.model, self.cfg, &b, o, &self.weights)?;
            if let Some(total) = overall_loss(&mut s.tape, &l, &lambda)? {
                LossAverages::add(&mut avg.total, Some(s.tape.value(total).item()));
                LossAverages::add(&mut avg.au, value_of(&s, l.au));
                LossAverages::add(&mut avg.expr, value_of(&s, l.expr));
                LossAverages::add(&mut avg.va, value_of(&s, l.va));
            }
        }
        Ok(avg)
    }

    fn epoch(
        &mut self,
        epoch: usize,
        opt: &mut Adam,
        rng: &mut ChaCha8Rng,
        batch_log: &mut Vec<f64>,
    ) -> Result<LossAverages> {
        let cfg = self.cfg;
        let lambda = cfg.lambda();
        opt.hp.lr = cfg.lr_schedule.rate(cfg.lr, epoch);
        let order_seed = seed::derive(cfg.seed, &format!("epoch.{epoch}"));
        let mut avg = LossAverages::default();
        for ids in batch_order(&self.train_windows, cfg.batch_size, order_seed, true) {
            let (b, o) = self.batch(&ids)?;
            let mut s = Session::train(&self.model.params, &self.trainable, rng);
            let l = batch_losses(&mut s, &self.model, cfg, &b, o, &self.weights)?;
            let Some(total) = overall_loss(&mut s.tape, &l, &lambda)? else {
                continue;
            };
            let value = s.tape.value(total).item();
            batch_log.push(value);
            LossAverages::add(&mut avg.total, Some(value));
            LossAverages::add(&mut avg.au, value_of(&s, l.au));
            LossAverages::add(&mut avg.expr, value_of(&s, l.expr));
            LossAverages::add(&mut avg.va, value_of(&s, l.va));

            let mut grads = s.tape.backward(total)?;
            let mut pairs: Vec<(usize, Tensor)> = (0..self.model.params.len())
                .filter(|&i| self.trainable[i])
                .filter_map(|i| grads.take(s.param(i)).map(|g| (i, g)))
                .collect();
            clip_grad_norm(&mut pairs, cfg.grad_clip);
            opt.step(&mut self.model.params, &pairs)?;
        }
        Ok(avg)
    }
}

fn epoch_log(epoch: usize, avg: &LossAverages, report: EvalReport, score: f64) -> EpochLog {
    EpochLog {
        epoch,
        train_loss: LossAverages::mean(avg.total).unwrap_or(f64::NAN),
        loss_au: LossAverages::mean(avg.au),
        loss_expr: LossAverages::mean(avg.expr),
        loss_va: LossAverages::mean(avg.va),
        val_score: score,
        report,
    }
}

fn train(
    cfg: &TrainConfig,
    train: &DatasetSplit,
    val: &DatasetSplit,
    banks: &[&FeatureBank],
    init: Option<&Checkpoint>,
    stage: Stage,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = task_split(train, &cfg.tasks);
    let val = task_split(val, &cfg.tasks);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "no training records are valid for {:?}",
            cfg.tasks
        )));
    }
    let input_dim = train.input_dim().unwrap_or(0);
    if input_dim == 0 {
        return Err(Error::Config("training records carry no features".into()));
    }
    let used = check_banks(cfg, banks)?;
    let mut model = Model::new(cfg.arch(input_dim, stage == Stage::Joint), cfg.seed)?;

    let mut init_from = None;
    if stage == Stage::Joint && cfg.init_from_single {
        let primary = cfg.primary();
        let ck = init.ok_or_else(|| {
            Error::Config(format!(
                "init_from_single needs the single-task checkpoint for {primary}"
            ))
        })?;
        if !ck.is_single_task_for(primary) {
            return Err(Error::Config(format!(
                "init checkpoint is not a single-task {primary} model"
            )));
        }
        model.params.load_from(&ck.model.params, "encoder.")?;
        let head = match primary.head() {
            HeadKind::Au => "heads.au.",
            HeadKind::Expr => "heads.expr.",
            HeadKind::Va => "heads.va.",
        };
        model.params.load_from(&ck.model.params, head)?;
        init_from = Some(ck.hash());
    }

    let mut trainable = vec![true; model.params.len()];
    if cfg.freeze_fusion {
        model.fusion_params().into_iter().for_each(|i| trainable[i] = false);
    }
    let heads = cfg.heads();
    for h in [HeadKind::Au, HeadKind::Expr, HeadKind::Va] {
        if !heads.contains(&h) {
            model.head_params(h).into_iter().for_each(|i| trainable[i] = false);
        }
    }

    let weights = match cfg.class_weights {
        ClassWeightMode::Uniform => ClassWeights::default(),
        ClassWeightMode::InverseFrequency => {
            ClassWeights::from_labels(&train.au_labels(), &train.expr_labels())
                .map_err(|e| Error::Config(format!("class weights: {e}")))?
        }
    };
    let train_windows = build_windows(&train, cfg.seq_len, cfg.stride)?;
    let train_other = bank_inputs(&train.records, &used, cfg.feature_dim)?;
    let val_other = bank_inputs(&val.records, &used, cfg.feature_dim)?;
    let mut run = Run {
        cfg,
        model,
        trainable,
        weights,
        train,
        train_windows,
        train_other,
        val,
        val_other,
    };

    let (report, score) = run.validate()?;
    let mut log = vec![epoch_log(0, &run.initial_losses()?, report, score)];
    let mut best = (score, 0usize, run.model.params.clone());
    let mut stale = 0;
    let mut opt = Adam::new(
        run.model.params.len(),
        AdamParams {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        },
    );
    let mut rng = seed::stream(cfg.seed, "dropout");
    let mut batch_log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let avg = run.epoch(epoch, &mut opt, &mut rng, &mut batch_log)?;
        let (report, score) = run.validate()?;
        log::info!(
            "epoch {epoch}: train loss {:.5}, val {} {score:.5}",
            LossAverages::mean(avg.total).unwrap_or(f64::NAN),
            cfg.primary()
        );
        log.push(epoch_log(epoch, &avg, report, score));
        if score > best.0 {
            best = (score, epoch, run.model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let final_params = run.model.params.clone();
    let mut model = run.model;
    model.params = best.2;
    let provenance = Provenance {
        stage,
        tasks: cfg.tasks.clone(),
        banks: used
            .iter()
            .map(|b| BankRef {
                source: b.source,
                checkpoint_hash: b.checkpoint_hash.clone(),
            })
            .collect(),
        init_from,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            config: cfg.clone(),
            best_score: best.0,
            best_epoch: best.1,
            provenance,
        },
        log,
        batch_losses: batch_log,
        final_params,
    })
}

/// Trains the encoder and the head of `task` alone.
pub fn train_single(
    task: TaskKind,
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
) -> Result<TrainOutcome> {
    if !cfg.fusion_sources.is_empty() {
        return Err(Error::Config("single-task training takes no fusion sources".into()));
    }
    let cfg = TrainConfig {
        tasks: vec![task],
        loss_weights: cfg.loss_weights.filter(|_| cfg.tasks == [task]),
        ..cfg.clone()
    };
    train(&cfg, train_split, val_split, &[], None, Stage::Single)
}

/// Joint training with fusion of frozen banks and optional temporal
/// modelling. `init` is the primary task's single-task checkpoint.
pub fn train_joint(
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
    banks: &[&FeatureBank],
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train(cfg, train_split, val_split, banks, init, Stage::Joint)
}
