//! Task heads, objectives and metrics for fine-tuning.

pub mod classify;
pub mod impute;
pub mod tpp;

pub use classify::{auc, classify, classify_batch_loss, classify_many, init_classifier_head, CLS_HEAD};
pub use impute::{impute, impute_batch_loss, impute_metrics, init_impute_heads, ImputeMetrics, ImputeResult};
pub use tpp::{evaluate_tpp, init_tpp_head, predict_next, tpp_batch_loss, tpp_nll, IntensityHead, TppEvalOptions, TppMetrics};

use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tpp,
    Classify,
    Impute,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Tpp => "tpp",
            Task::Classify => "classify",
            Task::Impute => "impute",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "tpp" => Ok(Task::Tpp),
            "classify" => Ok(Task::Classify),
            "impute" => Ok(Task::Impute),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}
