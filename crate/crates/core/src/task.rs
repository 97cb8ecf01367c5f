//! Task identifiers shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const NUM_AUS: usize = 12;
pub const NUM_EXPR: usize = 8;

/// AU column names in annotation order.
pub const AU_NAMES: [&str; NUM_AUS] = [
    "au1", "au2", "au4", "au6", "au7", "au10", "au12", "au15", "au23", "au24", "au25", "au26",
];

pub const EXPR_NAMES: [&str; NUM_EXPR] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Other",
];

pub const VA_SENTINEL: f64 = -5.0;
pub const EXPR_SENTINEL: i32 = -1;
pub const AU_SENTINEL: i8 = -1;

/// A scored task. Valence and arousal are separate targets for selection and
/// for feature banks; they share the VA head and the VA loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "AU")]
    Au,
    #[serde(rename = "EXPR")]
    Expr,
    #[serde(rename = "V")]
    Valence,
    #[serde(rename = "A")]
    Arousal,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Au,
        TaskKind::Expr,
        TaskKind::Valence,
        TaskKind::Arousal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Au => "AU",
            TaskKind::Expr => "EXPR",
            TaskKind::Valence => "V",
            TaskKind::Arousal => "A",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            TaskKind::Au => HeadKind::Au,
            TaskKind::Expr => HeadKind::Expr,
            TaskKind::Valence | TaskKind::Arousal => HeadKind::Va,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "AU" => Ok(TaskKind::Au),
            "EXPR" => Ok(TaskKind::Expr),
            "V" | "VALENCE" => Ok(TaskKind::Valence),
            "A" | "AROUSAL" => Ok(TaskKind::Arousal),
            other => Err(format!("unknown task `{other}` (expected AU, EXPR, V or A)")),
        }
    }
}

/// The three prediction heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    Au,
    Expr,
    Va,
}
