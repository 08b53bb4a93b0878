//! Model-agnostic local explanations: perturb segments of an instance, score
//! the perturbations with a black box, and fit a kernel-weighted lasso from
//! the on/off masks to the scores.

mod explain;
mod lasso;
mod sampling;
mod segment;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use explain::{fit_explanation, BlackBox, Explainer, FnBlackBox};
pub use lasso::{fit_weighted_lasso, lambda_max, weighted_r2, LassoFit, MAX_SWEEPS, TOLERANCE};
pub use sampling::{all_masks, kernel_weight, perturb, sample_masks, sample_masks_stream};
pub use segment::{segment_grid, RgbImage, SegmentMap, SegmentationSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("only {surviving} of {requested} samples survived; need at least {needed}")]
    TooFewSamples {
        surviving: usize,
        requested: usize,
        needed: usize,
    },
}

fn default_num_samples() -> usize {
    1000
}

fn default_kernel_width() -> f64 {
    0.25
}

fn default_on_probability() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LimeConfig {
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_kernel_width")]
    pub kernel_width: f64,
    /// Unset means `0.01 * lambda_max` of the sampled problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_penalty: Option<f64>,
    #[serde(default = "default_on_probability")]
    pub on_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            num_samples: default_num_samples(),
            kernel_width: default_kernel_width(),
            l1_penalty: None,
            on_probability: default_on_probability(),
            seed: 0,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self) -> Result<(), LimeError> {
        if self.num_samples == 0 {
            return Err(LimeError::Config("numSamples must be positive".into()));
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return Err(LimeError::Config("kernelWidth must be positive".into()));
        }
        if let Some(l) = self.l1_penalty {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(LimeError::Config("l1Penalty must be non-negative".into()));
            }
        }
        if !(self.on_probability > 0.0 && self.on_probability < 1.0) {
            return Err(LimeError::Config("onProbability must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `LimeExplain` stage parameters: which column holds the tabular instance,
/// which column of the target pipeline's output is the score, and the
/// sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LimeStageConfig {
    pub input_col: String,
    pub score_col: String,
    /// Defaults to all zeros of the instance's length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neutral_values: Option<Vec<f64>>,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_kernel_width")]
    pub kernel_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_penalty: Option<f64>,
    #[serde(default = "default_on_probability")]
    pub on_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LimeStageConfig {
    pub fn lime_config(&self) -> LimeConfig {
        LimeConfig {
            num_samples: self.num_samples,
            kernel_width: self.kernel_width,
            l1_penalty: self.l1_penalty,
            on_probability: self.on_probability,
            seed: self.seed,
        }
    }
}

/// Segment on/off states; `true` keeps the segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn all_on(d: usize) -> Self {
        Self {
            bits: vec![true; d],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_features(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instance {
    Tabular(Vec<f64>),
    Image(RgbImage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Explanation {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub sample_count: usize,
    #[serde(rename = "weightedR2")]
    pub weighted_r2: f64,
}
