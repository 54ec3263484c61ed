//! Turns dataset images into exported stimuli for each condition.

use std::path::Path;

use rayon::prelude::*;

use crate::attack::{false_targets, make_adv_stimulus, make_false_stimulus, make_flip_control, AttackConfig};
use crate::coarse::{CoarsePartition, Ensemble};
use crate::data::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::stimuli::{rescale_image_to_margin, write_stimulus, Condition, StimulusRecord};
use crate::tensor::Tensor;

/// A stimulus ready to be written: record, 8-bit image, optional integer δ.
#[derive(Debug, Clone)]
pub struct GeneratedStimulus {
    pub record: StimulusRecord,
    pub image: Tensor,
    pub delta: Option<Tensor>,
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v.round().clamp(0.0, 255.0))
}

fn coarse_in_group<'a>(partition: &'a CoarsePartition, group: &str, fine: usize) -> Result<Option<&'a str>> {
    let classes = partition.group(group)?;
    Ok(partition.coarse_of(fine).filter(|c| classes.iter().any(|g| g == c)))
}

/// Image, adv and flip stimuli for one in-group source image.
pub fn adv_stimuli(
    item: &LabeledImage,
    group: &str,
    partition: &CoarsePartition,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<Vec<GeneratedStimulus>> {
    let true_class = coarse_in_group(partition, group, item.fine_label)?
        .ok_or_else(|| Error::AttackInput(format!("source `{}` is not in group `{group}`", item.id)))?
        .to_owned();
    let x = rescale_image_to_margin(&item.image);
    let clean = quantize(&x);
    let rec = make_adv_stimulus(&x, &item.id, &true_class, partition, ensemble, cfg)?;
    let summary = rec.summary();
    let adv = quantize(&rec.result.adversarial);
    let flip = quantize(&make_flip_control(&x, &rec.result.delta, cfg.clip_min, cfg.clip_max)?);
    let base = |condition: Condition, suffix: &str| StimulusRecord {
        id: format!("{}-{suffix}", item.id),
        condition,
        group: group.to_owned(),
        true_class: Some(true_class.clone()),
        target: Some(rec.target.clone()),
        file: format!("{}-{suffix}.png", item.id),
        source_id: item.id.clone(),
        epsilon: Some(cfg.epsilon),
        perturbation: Some(summary.clone()),
        delta_file: None,
        retained: rec.result.retained,
    };
    let image_record = StimulusRecord {
        target: None,
        epsilon: None,
        perturbation: None,
        retained: true,
        ..base(Condition::Image, "image")
    };
    let adv_record = StimulusRecord {
        delta_file: Some(format!("{}-adv.delta", item.id)),
        ..base(Condition::Adv, "adv")
    };
    let delta = adv.sub(&clean)?;
    Ok(vec![
        GeneratedStimulus {
            record: image_record,
            image: clean,
            delta: None,
        },
        GeneratedStimulus {
            record: adv_record,
            image: adv,
            delta: Some(delta),
        },
        GeneratedStimulus {
            record: base(Condition::Flip, "flip"),
            image: flip,
            delta: None,
        },
    ])
}

/// A false-condition stimulus from a distractor image.
pub fn false_stimulus(
    item: &LabeledImage,
    group: &str,
    target: &str,
    partition: &CoarsePartition,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<GeneratedStimulus> {
    let x = rescale_image_to_margin(&item.image);
    let clean = quantize(&x);
    let rec = make_false_stimulus(&x, &item.id, item.fine_label, group, target, partition, ensemble, cfg)?;
    let image = quantize(&rec.result.adversarial);
    let id = format!("{}-false-{target}", item.id);
    Ok(GeneratedStimulus {
        record: StimulusRecord {
            id: id.clone(),
            condition: Condition::False,
            group: group.to_owned(),
            true_class: None,
            target: Some(target.to_owned()),
            file: format!("{id}.png"),
            source_id: item.id.clone(),
            epsilon: Some(cfg.epsilon),
            perturbation: Some(rec.summary()),
            delta_file: Some(format!("{id}.delta")),
            retained: rec.result.retained,
        },
        delta: Some(image.sub(&clean)?),
        image,
    })
}

fn skip_zero<T>(id: &str, r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ZeroPerturbation) => {
            log::warn!("{id}: attack produced no perturbation, dropped");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Stimuli for every eligible image of `dataset`. `adv` uses in-group images and
/// yields image/adv/flip triples; `false` uses distractors with alternating targets.
pub fn generate_pool(
    dataset: &Dataset,
    partition: &CoarsePartition,
    group: &str,
    condition: Condition,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<Vec<GeneratedStimulus>> {
    let classes = partition.group(group)?.clone();
    match condition {
        Condition::Adv => {
            let sources: Vec<&LabeledImage> = dataset
                .items
                .iter()
                .filter(|it| matches!(coarse_in_group(partition, group, it.fine_label), Ok(Some(_))))
                .collect();
            let out: Vec<Option<Vec<GeneratedStimulus>>> = sources
                .par_iter()
                .map(|it| skip_zero(&it.id, adv_stimuli(it, group, partition, ensemble, cfg)))
                .collect::<Result<_>>()?;
            Ok(out.into_iter().flatten().flatten().collect())
        }
        Condition::False => {
            let sources: Vec<&LabeledImage> = dataset
                .items
                .iter()
                .filter(|it| partition.distractors.contains(&it.fine_label))
                .collect();
            let targets = false_targets(&classes, sources.len());
            let out: Vec<Option<GeneratedStimulus>> = sources
                .par_iter()
                .zip(&targets)
                .map(|(it, t)| skip_zero(&it.id, false_stimulus(it, group, t, partition, ensemble, cfg)))
                .collect::<Result<_>>()?;
            Ok(out.into_iter().flatten().collect())
        }
        other => Err(Error::InvalidConfig(format!(
            "stimuli are generated for `adv` or `false`, not `{other}`"
        ))),
    }
}

pub fn write_pool(dir: &Path, stimuli: &[GeneratedStimulus]) -> Result<()> {
    for s in stimuli {
        write_stimulus(dir, &s.record, &s.image, s.delta.as_ref())?;
    }
    Ok(())
}
