//! Exhaustive ablation grid over fusion sources, joint task sets and
//! temporal windows, run in parallel with deterministic results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::seed;
use crate::task::TaskKind;
use crate::training::{train_joint, Checkpoint, FeatureBank, TrainConfig, TrainOutcome};

/// Candidate settings for one target task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetGrid {
    pub task: TaskKind,
    #[serde(default = "no_fusion")]
    pub fusion: Vec<Vec<TaskKind>>,
    pub joint: Vec<Vec<TaskKind>>,
    /// `(S, W)` pairs; `(1, 1)` means no temporal module.
    #[serde(default = "single_frame")]
    pub windows: Vec<(usize, usize)>,
}

fn no_fusion() -> Vec<Vec<TaskKind>> {
    vec![Vec::new()]
}

fn single_frame() -> Vec<(usize, usize)> {
    vec![(1, 1)]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training settings shared by every run, as in a training config.
    #[serde(default)]
    pub train: toml::Table,
    #[serde(rename = "target")]
    pub targets: Vec<TargetGrid>,
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: GridConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.base_config()?;
        Ok(g)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid serializes")
    }

    /// The shared training configuration (unknown keys are errors).
    pub fn base_config(&self) -> Result<TrainConfig> {
        toml::Value::Table(self.train.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[train]: {e}")))
    }

    pub fn hash(&self) -> String {
        seed::hash_hex(self.to_toml().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub target: TaskKind,
    pub fusion: Vec<TaskKind>,
    /// Joint task set with the target first.
    pub joint: Vec<TaskKind>,
    pub lambda: LossWeights,
    pub temporal: bool,
    pub seq_len: usize,
    pub stride: usize,
    pub seeds: Vec<u64>,
}

impl StrategySpec {
    /// Ordering key for tie-breaks: fewer fusion sources, then shorter S.
    fn size(&self) -> (usize, usize) {
        (self.fusion.len(), self.seq_len)
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            tasks: self.joint.clone(),
            loss_weights: Some(self.lambda),
            fusion_sources: self.fusion.clone(),
            temporal: self.temporal,
            seq_len: self.seq_len,
            stride: self.stride,
            seed,
            ..base.clone()
        }
    }
}

pub fn enumerate_grid(grid: &GridConfig) -> Result<Vec<StrategySpec>> {
    if grid.seeds.is_empty() {
        return Err(Error::Config("grid needs at least one seed".into()));
    }
    let mut out = Vec::new();
    for t in &grid.targets {
        for fusion in &t.fusion {
            for joint in &t.joint {
                if !joint.contains(&t.task) {
                    log::warn!("skipping joint set {joint:?}: target {} not included", t.task);
                    continue;
                }
                for &(s, w) in &t.windows {
                    if s == 0 || w == 0 || w > s || (s == 1) != (w == 1) {
                        log::warn!("skipping window (S={s}, W={w})");
                        continue;
                    }
                    let mut tasks = vec![t.task];
                    tasks.extend(joint.iter().copied().filter(|&x| x != t.task));
                    out.push(StrategySpec {
                        target: t.task,
                        fusion: fusion.clone(),
                        lambda: LossWeights::for_tasks(&tasks),
                        joint: tasks,
                        temporal: s > 1,
                        seq_len: s,
                        stride: w,
                        seeds: grid.seeds.clone(),
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("grid enumerates no strategies".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub spec: StrategySpec,
    /// One entry per seed; `None` for a failed run.
    pub scores: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub best: bool,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub rows: Vec<SearchRow>,
    pub master_seed: u64,
    pub grid_hash: String,
    /// "single-seed" or "multi-seed (mean of N)".
    pub mode: String,
}

/// One finished run. Wall-clock time is kept outside the report so reports
/// stay reproducible.
pub struct RunResult {
    pub spec_index: usize,
    pub seed_index: usize,
    pub outcome: Result<TrainOutcome>,
    pub elapsed: Duration,
}

pub struct SearchInputs<'a> {
    pub base: &'a TrainConfig,
    pub train: &'a DatasetSplit,
    pub val: &'a DatasetSplit,
    pub banks: &'a [&'a FeatureBank],
    /// Single-task checkpoints used when `init_from_single` is set.
    pub singles: &'a [&'a Checkpoint],
}

pub fn run_seed(master_seed: u64, run_index: usize, seed: u64) -> u64 {
    seed::derive(master_seed, &format!("run.{run_index}.seed.{seed}"))
}

/// Trains every `(spec, seed)` pair on a pool of `jobs` threads.
pub fn run_search(
    specs: &[StrategySpec],
    inputs: &SearchInputs,
    master_seed: u64,
    grid_hash: &str,
    jobs: usize,
) -> Result<(SearchReport, Vec<RunResult>)> {
    for s in specs {
        for src in &s.fusion {
            if !inputs.banks.iter().any(|b| b.source == *src) {
                return Err(Error::Config(format!("no feature bank for fusion source {src}")));
            }
        }
    }
    let runs: Vec<(usize, usize, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.seeds.iter().enumerate().map(move |(k, &sd)| (i, k, sd)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<RunResult> = pool.install(|| {
        runs.par_iter()
            .enumerate()
            .map(|(run_index, &(i, k, sd))| {
                let spec = &specs[i];
                let cfg = spec.apply(inputs.base, run_seed(master_seed, run_index, sd));
                let init = inputs
                    .singles
                    .iter()
                    .copied()
                    .find(|c| c.is_single_task_for(spec.target));
                let start = Instant::now();
                let outcome = train_joint(&cfg, inputs.train, inputs.val, inputs.banks, init);
                RunResult {
                    spec_index: i,
                    seed_index: k,
                    outcome,
                    elapsed: start.elapsed(),
                }
            })
            .collect()
    });

    let mut rows: Vec<SearchRow> = specs
        .iter()
        .map(|s| SearchRow {
            spec: s.clone(),
            scores: vec![None; s.seeds.len()],
            mean: None,
            best: false,
            errors: Vec::new(),
        })
        .collect();
    for r in &results {
        let row = &mut rows[r.spec_index];
        match &r.outcome {
            Ok(o) => row.scores[r.seed_index] = Some(o.checkpoint.best_score),
            Err(e) => row
                .errors
                .push(format!("seed {}: {e}", row.spec.seeds[r.seed_index])),
        }
    }
    for row in &mut rows {
        if row.errors.is_empty() {
            let n = row.scores.len() as f64;
            row.mean = Some(row.scores.iter().flatten().sum::<f64>() / n);
        }
    }
    flag_best(&mut rows);
    let n_seeds = specs.first().map_or(0, |s| s.seeds.len());
    Ok((
        SearchReport {
            rows,
            master_seed,
            grid_hash: grid_hash.to_string(),
            mode: if n_seeds == 1 {
                "single-seed".into()
            } else {
                format!("multi-seed (mean of {n_seeds})")
            },
        },
        results,
    ))
}

/// Marks the highest-mean row per target; ties go to fewer fusion sources,
/// then shorter S, then grid order.
pub fn flag_best(rows: &mut [SearchRow]) {
    let mut best: BTreeMap<TaskKind, usize> = BTreeMap::new();
    for row in rows.iter_mut() {
        row.best = false;
    }
    for i in 0..rows.len() {
        let Some(m) = rows[i].mean else { continue };
        let t = rows[i].spec.target;
        match best.get(&t) {
            Some(&j) => {
                let bm = rows[j].mean.expect("best has a mean");
                if m > bm || (m == bm && rows[i].spec.size() < rows[j].spec.size()) {
                    best.insert(t, i);
                }
            }
            None => {
                best.insert(t, i);
            }
        }
    }
    for &i in best.values() {
        rows[i].best = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

const MARK: &str = "✓";

fn join_tasks(ts: &[TaskKind]) -> String {
    ts.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("|")
}

fn split_tasks(s: &str) -> Result<Vec<TaskKind>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('|')
        .map(|t| t.parse().map_err(|e: String| Error::format("search_report.csv", e)))
        .collect()
}

/// One markdown table per target task.
pub fn markdown_tables(report: &SearchReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Config("empty search report".into()));
    }
    let mut out = String::new();
    writeln!(out, "Strategy search ({}, master seed {})\n", report.mode, report.master_seed)
        .expect("string write");
    let mut targets: Vec<TaskKind> = report.rows.iter().map(|r| r.spec.target).collect();
    targets.dedup();
    for target in targets {
        let rows: Vec<&SearchRow> = report.rows.iter().filter(|r| r.spec.target == target).collect();
        let seeds = &rows[0].spec.seeds;
        writeln!(out, "### Target {target}\n").expect("string write");
        let mut head: Vec<String> = TaskKind::ALL.iter().map(|t| format!("F_{t}")).collect();
        head.extend(TaskKind::ALL.iter().map(|t| t.to_string()));
        head.extend(["Tem.".into(), "S".into(), "W".into()]);
        head.extend(seeds.iter().map(|s| format!("seed {s}")));
        head.push("Mean".into());
        writeln!(out, "| {} |", head.join(" | ")).expect("string write");
        writeln!(out, "|{}", "---|".repeat(head.len())).expect("string write");
        for r in rows {
            let mark = |b: bool| if b { MARK.to_string() } else { String::new() };
            let mut cells: Vec<String> =
                TaskKind::ALL.iter().map(|t| mark(r.spec.fusion.contains(t))).collect();
            cells.extend(TaskKind::ALL.iter().map(|t| mark(r.spec.joint.contains(t))));
            cells.push(mark(r.spec.temporal));
            cells.push(r.spec.seq_len.to_string());
            cells.push(r.spec.stride.to_string());
            cells.extend(
                r.scores
                    .iter()
                    .map(|s| s.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}"))),
            );
            let mean = r.mean.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            cells.push(if r.best { format!("**{mean}**") } else { mean });
            writeln!(out, "| {} |", cells.join(" | ")).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

const CSV_COLUMNS: [&str; 11] = [
    "target", "fusion", "joint", "lambda", "temporal", "seq_len", "stride", "seeds", "scores",
    "mean", "best",
];

pub fn csv_table(report: &SearchReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Config("empty search report".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format("search_report.csv", e.to_string());
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    header.push("errors");
    w.write_record(&header).map_err(err)?;
    let list = |v: Vec<String>| v.join(";");
    for r in &report.rows {
        let s = &r.spec;
        w.write_record([
            s.target.to_string(),
            join_tasks(&s.fusion),
            join_tasks(&s.joint),
            format!("{};{};{}", s.lambda.au, s.lambda.expr, s.lambda.va),
            s.temporal.to_string(),
            s.seq_len.to_string(),
            s.stride.to_string(),
            list(s.seeds.iter().map(u64::to_string).collect()),
            list(
                r.scores
                    .iter()
                    .map(|x| x.map_or_else(String::new, |v| v.to_string()))
                    .collect(),
            ),
            r.mean.map_or_else(String::new, |v| v.to_string()),
            r.best.to_string(),
            r.errors.join(" || "),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("search_report.csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}

/// Parses rows written by [`csv_table`].
pub fn parse_csv_rows(text: &str) -> Result<Vec<SearchRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let fail = |m: String| Error::format("search_report.csv", m);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        if rec.len() != CSV_COLUMNS.len() + 1 {
            return Err(fail(format!("expected {} columns", CSV_COLUMNS.len() + 1)));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| fail(format!("bad number `{s}`"))) };
        let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| fail(format!("bad integer `{s}`"))) };
        let flag = |s: &str| -> Result<bool> { s.parse().map_err(|_| fail(format!("bad flag `{s}`"))) };
        let lam: Vec<f64> = rec[3].split(';').map(num).collect::<Result<_>>()?;
        if lam.len() != 3 {
            return Err(fail("lambda needs three entries".into()));
        }
        let seeds: Vec<u64> = if rec[7].is_empty() {
            Vec::new()
        } else {
            rec[7]
                .split(';')
                .map(|s| s.parse().map_err(|_| fail(format!("bad seed `{s}`"))))
                .collect::<Result<_>>()?
        };
        let scores: Vec<Option<f64>> = rec[8]
            .split(';')
            .take(seeds.len())
            .map(|s| if s.is_empty() { Ok(None) } else { num(s).map(Some) })
            .collect::<Result<_>>()?;
        rows.push(SearchRow {
            spec: StrategySpec {
                target: rec[0].parse().map_err(fail)?,
                fusion: split_tasks(&rec[1])?,
                joint: split_tasks(&rec[2])?,
                lambda: LossWeights {
                    au: lam[0],
                    expr: lam[1],
                    va: lam[2],
                },
                temporal: flag(&rec[4])?,
                seq_len: int(&rec[5])?,
                stride: int(&rec[6])?,
                seeds,
            },
            scores,
            mean: if rec[9].is_empty() { None } else { Some(num(&rec[9])?) },
            best: flag(&rec[10])?,
            errors: if rec[11].is_empty() {
                Vec::new()
            } else {
                rec[11].split(" || ").map(String::from).collect()
            },
        });
    }
    Ok(rows)
}

pub fn emit_tables(report: &SearchReport, format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Markdown => markdown_tables(report),
        TableFormat::Csv => csv_table(report),
    }
}
