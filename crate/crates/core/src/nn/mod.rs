//! Small differentiable convolutional classifiers.

pub mod arch;
pub mod checkpoint;
mod layers;
pub mod model;
pub mod train;

pub use arch::{ArchSpec, InputDims, LayerSpec, Shape};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_VERSION,
};
pub use model::{Model, Param, Trace};
pub use train::{train_model, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};

pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.into_iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits.iter().copied());
    logits.iter().map(|v| (v - lse).exp()).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// A scalar function of the fine logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// Does not depend on the input.
    Constant(f64),
    /// The raw logit of one class.
    Logit(usize),
    /// Softmax cross entropy against a fine label.
    CrossEntropy(usize),
}

impl Loss {
    pub fn value_and_grad(&self, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
        let check = |j: usize| {
            if j >= logits.len() {
                Err(Error::LabelOutOfRange {
                    label: j,
                    num_classes: logits.len(),
                })
            } else {
                Ok(())
            }
        };
        match *self {
            Loss::Constant(c) => Ok((c, vec![0.0; logits.len()])),
            Loss::Logit(j) => {
                check(j)?;
                let mut g = vec![0.0; logits.len()];
                g[j] = 1.0;
                Ok((logits[j], g))
            }
            Loss::CrossEntropy(j) => {
                check(j)?;
                let lse = log_sum_exp(logits.iter().copied());
                let mut g: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
                g[j] -= 1.0;
                Ok((lse - logits[j], g))
            }
        }
    }
}
