//! Training loop, evaluation, metrics and the experiment runners.

mod ablation;
mod baseline;
mod bench;
mod metrics;
mod props;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ablation::{fit_eval, grouping_rows, run_ablation, AblationAxis, AblationRow, AblationSetup, AblationTable};
pub use baseline::{evaluate_baseline, train_baseline, TileBaseline, TilePooling};
pub use bench::{bench_scaling, loglog_slope, quadratic_attention_pool, ScalingReport, ScalingRow};
pub use metrics::{accuracy, auc, macro_auc, pearson, MetricReport, TaskMetrics};
pub use props::{mean_gradient_unbiasedness, variance_curve, UnbiasednessReport};
pub use trainer::{
    eval_order, evaluate, predict_slide, split_counts, split_indices, task_metrics, train, EvalMode,
    EvalOptions, Evaluation, Example, Examples, SlidePrediction, TrainConfig, TrainReport,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision `{s}` (f32, f64)"))),
        }
    }
}

/// Mixes `parts` into `base` with splitmix64 steps.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}
