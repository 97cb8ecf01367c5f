use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, ArchSpec, FusionInit};
use crate::metrics::AbsentClassF1;
use crate::objectives::LossWeights;
use crate::seed;
use crate::task::{HeadKind, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    Uniform,
    InverseFrequency,
}

/// Learning-rate schedule. Only a constant rate ships.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
}

impl LrSchedule {
    pub fn rate(self, base: f64, _epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
        }
    }
}

/// Everything that controls one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Tasks trained jointly; the first one drives model selection.
    pub tasks: Vec<TaskKind>,
    /// Per-loss weights; `None` means 1 for each configured task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    pub fusion_sources: Vec<TaskKind>,
    pub temporal: bool,
    pub seq_len: usize,
    pub stride: usize,
    /// Tasks whose heads read the temporal output; empty means all.
    pub temporal_heads: Vec<TaskKind>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping; 0 disables early stop.
    pub patience: usize,
    pub seed: u64,
    pub class_weights: ClassWeightMode,
    pub init_from_single: bool,
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub fusion_init: FusionInit,
    pub fusion_activation: Activation,
    pub freeze_fusion: bool,
    pub au_threshold: f64,
    pub absent_class_f1: AbsentClassF1,
    pub val_videos: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tasks: vec![TaskKind::Expr],
            loss_weights: None,
            fusion_sources: Vec::new(),
            temporal: false,
            seq_len: 1,
            stride: 1,
            temporal_heads: Vec::new(),
            batch_size: 16,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            class_weights: ClassWeightMode::Uniform,
            init_from_single: true,
            feature_dim: 32,
            encoder_hidden: 64,
            dropout: 0.1,
            leaky_slope: 0.01,
            fusion_init: FusionInit::Random,
            fusion_activation: Activation::LeakyRelu,
            freeze_fusion: false,
            au_threshold: 0.5,
            absent_class_f1: AbsentClassF1::One,
            val_videos: 2,
        }
    }
}

const KEY_DOCS: &[(&str, &str)] = &[
    ("tasks", "tasks trained together; the first selects the best epoch"),
    ("loss_weights", "table {au, expr, va}; zero exactly for excluded tasks"),
    ("fusion_sources", "tasks whose frozen feature banks are fused"),
    ("temporal", "enable the recurrent temporal module"),
    ("seq_len", "window length S"),
    ("stride", "window stride W (1 <= W <= S)"),
    ("temporal_heads", "tasks routed through the temporal module (empty = all)"),
    ("batch_size", "windows per batch"),
    ("lr", "learning rate"),
    ("lr_schedule", "constant"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("adam_eps", "optimizer epsilon"),
    ("grad_clip", "global gradient-norm clip (0 disables)"),
    ("max_epochs", "epoch budget"),
    ("patience", "early-stop patience in epochs (0 disables)"),
    ("seed", "master seed"),
    ("class_weights", "uniform | inverse_frequency"),
    ("init_from_single", "start joint runs from the primary task's single-task checkpoint"),
    ("feature_dim", "encoder output size d"),
    ("encoder_hidden", "encoder hidden width"),
    ("dropout", "fusion dropout rate"),
    ("leaky_slope", "negative slope of leaky ReLU"),
    ("fusion_init", "random | identity"),
    ("fusion_activation", "leaky_relu | identity"),
    ("freeze_fusion", "keep fusion parameters fixed"),
    ("au_threshold", "AU decision threshold"),
    ("absent_class_f1", "F1 for a class with no positives: one | zero"),
    ("val_videos", "videos held out for validation"),
];

/// Applies `key=value` overrides to any TOML-shaped config; dotted keys
/// address nested tables. Values are read as TOML, falling back to a bare
/// string. Unknown keys are rejected by the target type.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(value: &T, overrides: &[String]) -> Result<T> {
    let mut root = toml::Table::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let value = parse_value(raw.trim());
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut table = &mut root;
        for part in &path[..path.len() - 1] {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{part}` is not a table")))?;
        }
        table.insert(path[path.len() - 1].to_string(), value);
    }
    root.try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        apply_overrides(self, overrides)
    }

    /// Every key with its default value and a short description.
    pub fn key_docs() -> Vec<(String, String, &'static str)> {
        let defaults = toml::Table::try_from(TrainConfig::default()).expect("serializes");
        KEY_DOCS
            .iter()
            .map(|&(k, doc)| {
                let v = defaults
                    .get(k)
                    .map_or_else(|| "(unset)".to_string(), |v| v.to_string());
                (k.to_string(), v, doc)
            })
            .collect()
    }

    pub fn primary(&self) -> TaskKind {
        self.tasks[0]
    }

    pub fn lambda(&self) -> LossWeights {
        self.loss_weights
            .unwrap_or_else(|| LossWeights::for_tasks(&self.tasks))
    }

    pub fn heads(&self) -> Vec<HeadKind> {
        let mut out: Vec<HeadKind> = Vec::new();
        for t in &self.tasks {
            if !out.contains(&t.head()) {
                out.push(t.head());
            }
        }
        out
    }

    pub fn temporal_routing(&self) -> Vec<HeadKind> {
        if !self.temporal {
            return Vec::new();
        }
        if self.temporal_heads.is_empty() {
            self.heads()
        } else {
            self.temporal_heads.iter().map(|t| t.head()).collect()
        }
    }

    pub fn routing_label(&self) -> String {
        let r = self.temporal_routing();
        let names: Vec<&str> = self
            .tasks
            .iter()
            .map(|t| {
                if r.contains(&t.head()) {
                    "temporal"
                } else {
                    "frame"
                }
            })
            .collect();
        self.tasks
            .iter()
            .zip(names)
            .map(|(t, n)| format!("{t}:{n}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() {
            return bad("tasks must not be empty".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return bad(format!("task {t} listed twice"));
            }
        }
        for (i, t) in self.fusion_sources.iter().enumerate() {
            if self.fusion_sources[..i].contains(t) {
                return bad(format!("fusion source {t} listed twice"));
            }
        }
        for t in &self.temporal_heads {
            if !self.tasks.contains(t) {
                return bad(format!("temporal head {t} is not a configured task"));
            }
        }
        self.lambda().check_against(&self.tasks)?;
        if self.temporal {
            if self.seq_len < 2 {
                return bad("temporal modelling needs seq_len >= 2".into());
            }
        } else if self.seq_len != 1 || self.stride != 1 {
            return bad("seq_len and stride must be 1 when temporal = false".into());
        }
        if self.stride == 0 || self.stride > self.seq_len {
            return bad(format!(
                "stride {} must lie in 1..={}",
                self.stride, self.seq_len
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("adam_eps must be positive and grad_clip non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.au_threshold > 0.0 && self.au_threshold < 1.0) {
            return bad(format!("au_threshold {} outside (0, 1)", self.au_threshold));
        }
        if self.feature_dim == 0 || self.encoder_hidden == 0 {
            return bad("feature_dim and encoder_hidden must be positive".into());
        }
        if self.val_videos == 0 {
            return bad("val_videos must be positive".into());
        }
        Ok(())
    }

    /// Single-task models have no fusion module; joint models always do.
    pub fn arch(&self, input_dim: usize, fusion: bool) -> ArchSpec {
        ArchSpec {
            input_dim,
            feature_dim: self.feature_dim,
            encoder_hidden: self.encoder_hidden,
            fusion,
            temporal: self.temporal,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
            fusion_activation: self.fusion_activation,
            fusion_init: self.fusion_init,
        }
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        seed::hash_hex(self.to_toml().as_bytes())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
