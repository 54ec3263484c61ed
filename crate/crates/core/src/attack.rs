//! Iterative targeted ℓ∞ attack on a coarse-class ensemble, perturbation
//! normalization, flip controls and retention.

use serde::{Deserialize, Serialize};

use crate::coarse::{CoarsePartition, Ensemble};
use crate::error::{Error, Result};
use crate::nn::train::sign;
use crate::stimuli::Condition;
use crate::tensor::Tensor;

/// How many ensemble members must be fooled for a stimulus to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "m")]
pub enum Retention {
    All,
    AtLeast(usize),
}

impl Retention {
    pub fn is_satisfied(&self, member_success: &[bool]) -> bool {
        let hits = member_success.iter().filter(|&&s| s).count();
        match *self {
            Retention::All => hits == member_success.len(),
            Retention::AtLeast(m) => hits >= m,
        }
    }

    /// `ceil(k * 7 / 10)`, the fraction used for false-condition stimuli.
    pub fn seven_of_ten(k: usize) -> Self {
        Retention::AtLeast((7 * k).div_ceil(10))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub retention: Retention,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Evaluate success on the 8-bit rounded image, as it will be exported.
    pub quantize: bool,
    /// Stop at the first iterate that satisfies retention. Otherwise all
    /// `max_iters` steps run and the last iterate is kept.
    #[serde(default = "default_early_stop")]
    pub early_stop: bool,
}

fn default_early_stop() -> bool {
    true
}

impl AttackConfig {
    /// `N = 2ε/α + 16`.
    pub fn default_iters(epsilon: f64, step_size: f64) -> usize {
        (2.0 * epsilon / step_size).ceil() as usize + 16
    }

    pub fn adv(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: 2.0,
            max_iters: Self::default_iters(epsilon, 2.0),
            retention: Retention::All,
            clip_min: 0.0,
            clip_max: 255.0,
            quantize: true,
            early_stop: true,
        }
    }

    pub fn false_condition(epsilon: f64, ensemble_size: usize) -> Self {
        Self {
            retention: Retention::seven_of_ten(ensemble_size),
            ..Self::adv(epsilon)
        }
    }

    pub fn validate(&self, ensemble_size: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "step size must lie in (0, epsilon], got {}",
                self.step_size
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if let Retention::AtLeast(m) = self.retention {
            if m > ensemble_size {
                return Err(Error::InvalidConfig(format!(
                    "retention needs {m} of {ensemble_size} members"
                )));
            }
        }
        if self.clip_min >= self.clip_max {
            return Err(Error::InvalidConfig("empty pixel clip range".into()));
        }
        Ok(())
    }
}

/// Something an attack can descend: a loss over the image and per-member
/// target margins (positive means the member is fooled).
pub trait AttackObjective {
    fn num_members(&self) -> usize;
    fn evaluate(&self, image: &Tensor) -> Result<(f64, Tensor, Vec<f64>)>;
    fn member_margins(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.evaluate(image)?.2)
    }
}

/// An ensemble steered toward one coarse class.
pub struct TargetedEnsemble<'a> {
    pub ensemble: &'a Ensemble,
    pub target: &'a [usize],
}

impl AttackObjective for TargetedEnsemble<'_> {
    fn num_members(&self) -> usize {
        self.ensemble.len()
    }

    fn evaluate(&self, image: &Tensor) -> Result<(f64, Tensor, Vec<f64>)> {
        let l = self.ensemble.loss_and_gradient(image, self.target)?;
        Ok((l.loss, l.gradient, l.member_logits))
    }

    fn member_margins(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.ensemble.member_coarse_logits(image, self.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Normalized adversarial image, before any rounding.
    pub adversarial: Tensor,
    /// The normalized perturbation, ‖δ‖∞ = ε exactly; `adversarial = image + delta`.
    pub delta: Tensor,
    /// Raw iterate before normalization.
    pub iterate: Tensor,
    pub member_success: Vec<bool>,
    pub retained: bool,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// The sidecar-friendly part of an attack outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSummary {
    pub source_id: String,
    pub target: String,
    pub epsilon: f64,
    pub member_success: Vec<bool>,
    pub retained: bool,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// ‖δ‖∞ before 8-bit export.
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRecord {
    pub source_id: String,
    pub condition: Condition,
    pub target: String,
    pub epsilon: f64,
    pub result: AttackResult,
}

impl PerturbationRecord {
    pub fn summary(&self) -> PerturbationSummary {
        PerturbationSummary {
            source_id: self.source_id.clone(),
            target: self.target.clone(),
            epsilon: self.epsilon,
            member_success: self.result.member_success.clone(),
            retained: self.result.retained,
            iterations: self.result.iterations,
            initial_loss: self.result.initial_loss,
            final_loss: self.result.final_loss,
            linf: self.result.delta.linf_norm(),
        }
    }
}

/// `X + δ·ε/‖δ‖∞`, with the extreme entries pinned to exactly ±ε.
pub fn finalize_perturbation_norm(image: &Tensor, adversarial: &Tensor, epsilon: f64) -> Result<Tensor> {
    image.add(&normalized_delta(image, adversarial, epsilon)?)
}

/// `δ·ε/‖δ‖∞` for `δ = adversarial - image`. Its norm is exactly ε, which
/// `finalize_perturbation_norm(..) - image` need not be after rounding.
pub fn normalized_delta(image: &Tensor, adversarial: &Tensor, epsilon: f64) -> Result<Tensor> {
    let delta = adversarial.sub(image)?;
    let m = delta.linf_norm();
    if m == 0.0 {
        return Err(Error::ZeroPerturbation);
    }
    let k = epsilon / m;
    Ok(delta.map(|d| if d.abs() == m { epsilon * d.signum() } else { d * k }))
}

/// `clip(image + flip_vertical(δ))`.
pub fn make_flip_control(image: &Tensor, delta: &Tensor, clip_min: f64, clip_max: f64) -> Result<Tensor> {
    Ok(image.add(&delta.flip_vertical()?)?.clamp(clip_min, clip_max))
}

fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| v.round())
}

fn success_bits(margins: &[f64]) -> Vec<bool> {
    margins.iter().map(|&z| z > 0.0).collect()
}

/// Runs the sign-gradient attack, calling `observe(n, &Xⁿ)` after each step.
pub fn iterative_targeted_attack_observed(
    image: &Tensor,
    objective: &dyn AttackObjective,
    cfg: &AttackConfig,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<AttackResult> {
    cfg.validate(objective.num_members())?;
    if !image.all_finite() {
        return Err(Error::AttackInput("non-finite source image".into()));
    }
    if image.min() - cfg.epsilon < cfg.clip_min || image.max() + cfg.epsilon > cfg.clip_max {
        return Err(Error::AttackInput(format!(
            "image range [{}, {}] with epsilon {} leaves [{}, {}]; rescale the source first",
            image.min(),
            image.max(),
            cfg.epsilon,
            cfg.clip_min,
            cfg.clip_max
        )));
    }
    let lo = image.map(|v| (v - cfg.epsilon).max(cfg.clip_min));
    let hi = image.map(|v| (v + cfg.epsilon).min(cfg.clip_max));
    let judge = |x: &Tensor| -> Result<Vec<bool>> {
        let x = if cfg.quantize { quantize(x) } else { x.clone() };
        objective.member_margins(&x).map(|m| success_bits(&m))
    };

    let mut x = image.clone();
    let (initial_loss, mut grad, _) = objective.evaluate(&x)?;
    let mut loss = initial_loss;
    let mut iterations = 0;
    let mut finished: Option<(Tensor, Tensor, Vec<bool>)> = None;
    while iterations < cfg.max_iters {
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("attack gradient at iteration {iterations}")));
        }
        let step = x.zip_map(&grad, |v, g| v - cfg.step_size * sign(g))?;
        x = Tensor::new(
            step.shape().to_vec(),
            step.data()
                .iter()
                .zip(lo.data().iter().zip(hi.data()))
                .map(|(&v, (&l, &h))| v.clamp(l, h))
                .collect(),
        )?;
        iterations += 1;
        observe(iterations, &x);
        let (l, g, margins) = objective.evaluate(&x)?;
        loss = l;
        grad = g;
        if cfg.early_stop && cfg.retention.is_satisfied(&success_bits(&margins)) && x != *image {
            let delta = normalized_delta(image, &x, cfg.epsilon)?;
            let candidate = image.add(&delta)?;
            let bits = judge(&candidate)?;
            if cfg.retention.is_satisfied(&bits) {
                finished = Some((delta, candidate, bits));
                break;
            }
        }
    }
    let (delta, adversarial, member_success) = match finished {
        Some(done) => done,
        None => {
            let delta = normalized_delta(image, &x, cfg.epsilon)?;
            let adv = image.add(&delta)?;
            let bits = judge(&adv)?;
            (delta, adv, bits)
        }
    };
    let retained = cfg.retention.is_satisfied(&member_success);
    Ok(AttackResult {
        delta,
        adversarial,
        iterate: x,
        member_success,
        retained,
        iterations,
        initial_loss,
        final_loss: loss,
    })
}

pub fn iterative_targeted_attack(
    image: &Tensor,
    objective: &dyn AttackObjective,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    iterative_targeted_attack_observed(image, objective, cfg, &mut |_, _| {})
}

/// Attacks a group image toward the other class of its group.
pub fn make_adv_stimulus(
    image: &Tensor,
    source_id: &str,
    true_class: &str,
    partition: &CoarsePartition,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<PerturbationRecord> {
    let target = partition.opposite(true_class)?.to_owned();
    let labels = partition.class(&target)?;
    let objective = TargetedEnsemble {
        ensemble,
        target: labels,
    };
    let result = iterative_targeted_attack(image, &objective, cfg)?;
    Ok(PerturbationRecord {
        source_id: source_id.to_owned(),
        condition: Condition::Adv,
        target,
        epsilon: cfg.epsilon,
        result,
    })
}

/// Attacks a distractor image toward one class of `group`.
#[allow(clippy::too_many_arguments)]
pub fn make_false_stimulus(
    image: &Tensor,
    source_id: &str,
    fine_label: usize,
    group: &str,
    target_class: &str,
    partition: &CoarsePartition,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<PerturbationRecord> {
    let classes = partition.group(group)?;
    if !classes.iter().any(|c| c == target_class) {
        return Err(Error::AttackInput(format!(
            "target `{target_class}` is not in group `{group}`"
        )));
    }
    if let Some(c) = partition.coarse_of(fine_label) {
        if classes.iter().any(|g| g == c) {
            return Err(Error::AttackInput(format!(
                "source `{source_id}` belongs to `{c}`, inside group `{group}`"
            )));
        }
    }
    let objective = TargetedEnsemble {
        ensemble,
        target: partition.class(target_class)?,
    };
    let result = iterative_targeted_attack(image, &objective, cfg)?;
    Ok(PerturbationRecord {
        source_id: source_id.to_owned(),
        condition: Condition::False,
        target: target_class.to_owned(),
        epsilon: cfg.epsilon,
        result,
    })
}

/// Targets for `n` false-condition stimuli, alternating between the two classes.
pub fn false_targets(classes: &[String; 2], n: usize) -> Vec<String> {
    (0..n).map(|i| classes[i % 2].clone()).collect()
}
