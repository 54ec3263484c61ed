//! Accuracy and attack success of train/test models on stimulus pools, and
//! the ε / ensemble-size / retina ablation sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::stats::binomial_sf;
use crate::attack::{iterative_targeted_attack, AttackConfig, Retention, TargetedEnsemble};
use crate::coarse::{coarse_logit, CoarsePartition, Ensemble};
use crate::data::{write_json, write_png};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::stimuli::{rescale_image_to_margin, Condition, StimulusRecord};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    /// Member of the attack ensemble.
    Train,
    /// Held out from the attack.
    Test,
}

#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub role: ModelRole,
    pub model: Model,
}

/// Model puts more than half its probability on `class`.
pub fn predicts_class(logits: &[f64], partition: &CoarsePartition, class: &str) -> Result<bool> {
    Ok(coarse_logit(logits, partition.class(class)?)? > 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusOutcome {
    pub model: String,
    pub stimulus_id: String,
    pub source_id: String,
    pub condition: Condition,
    pub group: String,
    pub correct: Option<bool>,
    pub fooled: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub role: ModelRole,
    pub condition: Condition,
    pub group: String,
    pub n: usize,
    pub correct: usize,
    /// Undefined for `false` stimuli, which have no true class.
    pub accuracy: Option<f64>,
    pub fooled: usize,
    /// Undefined for clean images, which have no target.
    pub success: Option<f64>,
}

/// adv vs flip attack success on one model, paired by source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipComparison {
    pub model: String,
    pub role: ModelRole,
    pub pairs: usize,
    pub adv_success: f64,
    pub flip_success: f64,
    /// adv fooled, flip did not.
    pub adv_only: usize,
    /// flip fooled, adv did not.
    pub flip_only: usize,
    /// One-sided exact McNemar p-value for adv > flip.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub flip_comparisons: Vec<FlipComparison>,
    pub outcomes: Vec<StimulusOutcome>,
}

/// `P(X >= adv_only)` for `X ~ Binomial(adv_only + flip_only, 1/2)`.
pub fn mcnemar_one_sided(adv_only: usize, flip_only: usize) -> f64 {
    binomial_sf(adv_only as u64, (adv_only + flip_only) as u64, 0.5)
}

/// Scores every retained stimulus on every model.
pub fn evaluate_models(
    models: &[NamedModel],
    stimuli: &[(StimulusRecord, Tensor)],
    partition: &CoarsePartition,
) -> Result<EvalReport> {
    let stimuli: Vec<&(StimulusRecord, Tensor)> = stimuli.iter().filter(|(r, _)| r.retained).collect();
    for m in models {
        for (r, img) in &stimuli {
            if img.shape() != m.model.input_shape().as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: m.model.input_shape(),
                    actual: img.shape().to_vec(),
                });
            }
            if r.group.is_empty() {
                return Err(Error::InvalidConfig(format!("stimulus `{}` has no group", r.id)));
            }
        }
    }
    let outcomes: Vec<StimulusOutcome> = models
        .par_iter()
        .flat_map_iter(|m| stimuli.iter().map(move |s| (m, s)))
        .map(|(m, (r, img))| {
            let logits = m.model.forward(img)?;
            let check = |c: &Option<String>| c.as_deref().map(|c| predicts_class(&logits, partition, c)).transpose();
            Ok(StimulusOutcome {
                model: m.name.clone(),
                stimulus_id: r.id.clone(),
                source_id: r.source_id.clone(),
                condition: r.condition,
                group: r.group.clone(),
                correct: check(&r.true_class)?,
                fooled: check(&r.target)?,
            })
        })
        .collect::<Result<_>>()?;

    let roles: BTreeMap<&str, ModelRole> = models.iter().map(|m| (m.name.as_str(), m.role)).collect();
    let mut cells: BTreeMap<(&str, Condition, &str), (usize, usize, usize)> = BTreeMap::new();
    for o in &outcomes {
        let e = cells.entry((o.model.as_str(), o.condition, o.group.as_str())).or_default();
        e.0 += 1;
        e.1 += usize::from(o.correct == Some(true));
        e.2 += usize::from(o.fooled == Some(true));
    }
    let rows = cells
        .into_iter()
        .map(|((model, condition, group), (n, correct, fooled))| EvalRow {
            model: model.to_owned(),
            role: roles[model],
            condition,
            group: group.to_owned(),
            n,
            correct,
            accuracy: (condition != Condition::False).then(|| correct as f64 / n as f64),
            fooled,
            success: (condition != Condition::Image).then(|| fooled as f64 / n as f64),
        })
        .collect();

    let mut flip_comparisons = Vec::new();
    for m in models {
        let mut adv: BTreeMap<&str, bool> = BTreeMap::new();
        let mut flip: BTreeMap<&str, bool> = BTreeMap::new();
        for o in outcomes.iter().filter(|o| o.model == m.name) {
            match o.condition {
                Condition::Adv => adv.insert(&o.source_id, o.fooled == Some(true)),
                Condition::Flip => flip.insert(&o.source_id, o.fooled == Some(true)),
                _ => None,
            };
        }
        let pairs: Vec<(bool, bool)> = adv.iter().filter_map(|(k, &a)| Some((a, *flip.get(k)?))).collect();
        if pairs.is_empty() {
            continue;
        }
        let n = pairs.len();
        let adv_only = pairs.iter().filter(|p| p.0 && !p.1).count();
        let flip_only = pairs.iter().filter(|p| !p.0 && p.1).count();
        flip_comparisons.push(FlipComparison {
            model: m.name.clone(),
            role: m.role,
            pairs: n,
            adv_success: pairs.iter().filter(|p| p.0).count() as f64 / n as f64,
            flip_success: pairs.iter().filter(|p| p.1).count() as f64 / n as f64,
            adv_only,
            flip_only,
            p_value: mcnemar_one_sided(adv_only, flip_only),
        });
    }
    Ok(EvalReport {
        rows,
        flip_comparisons,
        outcomes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    pub fn row(&self, model: &str, condition: Condition, group: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.condition == condition && r.group == group)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,role,condition,group,n,correct,accuracy,fooled,success\n");
        for r in &self.rows {
            let role = match r.role {
                ModelRole::Train => "train",
                ModelRole::Test => "test",
            };
            let _ = writeln!(
                s,
                "{},{role},{},{},{},{},{},{},{}",
                r.model,
                r.condition,
                r.group,
                r.n,
                r.correct,
                opt(r.accuracy),
                r.fooled,
                opt(r.success)
            );
        }
        s
    }
}

/// An image to attack in the sweep, already labelled with its coarse class.
#[derive(Debug, Clone)]
pub struct SweepSource {
    pub id: String,
    pub image: Tensor,
    pub true_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variant: String,
    pub ensemble_size: usize,
    pub epsilon: f64,
    pub sources: usize,
    /// Fraction of sources that fool every member of the attacking prefix.
    pub train_success: f64,
    /// Held-out model name to success rate.
    pub test_success: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// One quantized stimulus per (cell, source), same order as `cells`.
    pub stimuli: Vec<Vec<Tensor>>,
}

/// Attacks every source for each (variant, prefix size, ε) and scores the
/// result on the held-out models. ε = 0 leaves the clean image.
pub fn ablation_sweep(
    sources: &[SweepSource],
    partition: &CoarsePartition,
    epsilons: &[f64],
    prefix_sizes: &[usize],
    variants: &[(String, Ensemble)],
    test_models: &[NamedModel],
) -> Result<SweepResult> {
    if epsilons.windows(2).any(|w| w[0] >= w[1]) || epsilons.iter().any(|&e| e < 0.0) {
        return Err(Error::InvalidConfig("epsilon list must be ascending and non-negative".into()));
    }
    let mut cells = Vec::new();
    let mut stimuli = Vec::new();
    for (label, ensemble) in variants {
        for &k in prefix_sizes {
            let prefix = ensemble.prefix(k)?;
            for &eps in epsilons {
                let images: Vec<(Tensor, bool, String)> = sources
                    .par_iter()
                    .map(|s| {
                        let x = rescale_image_to_margin(&s.image);
                        let target = partition.opposite(&s.true_class)?.to_owned();
                        let labels = partition.class(&target)?;
                        let adv = if eps == 0.0 {
                            x
                        } else {
                            let cfg = AttackConfig {
                                retention: Retention::All,
                                step_size: eps.min(2.0),
                                max_iters: AttackConfig::default_iters(eps, eps.min(2.0)),
                                ..AttackConfig::adv(eps)
                            };
                            let obj = TargetedEnsemble {
                                ensemble: &prefix,
                                target: labels,
                            };
                            match iterative_targeted_attack(&x, &obj, &cfg) {
                                Ok(r) => r.adversarial,
                                Err(Error::ZeroPerturbation) => x,
                                Err(e) => return Err(e),
                            }
                        };
                        let q = adv.map(|v| v.round().clamp(0.0, 255.0));
                        let all = prefix
                            .member_coarse_logits(&q, labels)?
                            .iter()
                            .all(|&z| z > 0.0);
                        Ok((q, all, target))
                    })
                    .collect::<Result<_>>()?;
                let mut test_success = BTreeMap::new();
                for m in test_models {
                    let mut hits = 0usize;
                    for (img, _, target) in &images {
                        hits += usize::from(predicts_class(&m.model.forward(img)?, partition, target)?);
                    }
                    test_success.insert(m.name.clone(), hits as f64 / images.len().max(1) as f64);
                }
                cells.push(SweepCell {
                    variant: label.clone(),
                    ensemble_size: k,
                    epsilon: eps,
                    sources: images.len(),
                    train_success: images.iter().filter(|i| i.1).count() as f64 / images.len().max(1) as f64,
                    test_success,
                });
                stimuli.push(images.into_iter().map(|i| i.0).collect());
            }
        }
    }
    Ok(SweepResult { cells, stimuli })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let models: Vec<&String> = self
            .cells
            .first()
            .map(|c| c.test_success.keys().collect())
            .unwrap_or_default();
        let mut s = String::from("variant,ensemble_size,epsilon,sources,train_success");
        for m in &models {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
        for c in &self.cells {
            let _ = write!(
                s,
                "{},{},{},{},{:.6}",
                c.variant, c.ensemble_size, c.epsilon, c.sources, c.train_success
            );
            for m in &models {
                let _ = write!(s, ",{:.6}", c.test_success[*m]);
            }
            s.push('\n');
        }
        s
    }

    /// `<dir>/<variant>/k<size>/eps<ε>/<source>.png`, plus `sweep.csv` and `sweep.json`.
    pub fn write(&self, dir: &Path, source_ids: &[String]) -> Result<()> {
        for (cell, images) in self.cells.iter().zip(&self.stimuli) {
            let sub = dir
                .join(&cell.variant)
                .join(format!("k{}", cell.ensemble_size))
                .join(format!("eps{}", cell.epsilon));
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (id, img) in source_ids.iter().zip(images) {
                write_png(&sub.join(format!("{id}.png")), img)?;
            }
        }
        let csv = dir.join("sweep.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        write_json(&dir.join("sweep.json"), &self.cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcnemar_values() {
        assert_eq!(mcnemar_one_sided(0, 0), 1.0);
        assert!((mcnemar_one_sided(3, 0) - 0.125).abs() < 1e-12);
        // 2^-10 for ten discordant pairs all favouring adv.
        assert!((mcnemar_one_sided(10, 0) - 2f64.powi(-10)).abs() < 1e-15);
        assert!(mcnemar_one_sided(5, 5) > 0.5);
    }
}
