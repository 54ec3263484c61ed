//! Coarse-class probabilities and the geometric-mean ensemble objective.
//!
//! A coarse class is a set of fine labels. Its probability under one model is the
//! softmax mass on that set, computed as `sigmoid(log(sum_target e^l / sum_other e^l))`.
//! The ensemble combines members by a normalized geometric mean over the two
//! outcomes (target / not target), which makes the attack loss
//! `J = -log P_ens(target)` a cross entropy on the member-averaged coarse logit.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, Checkpoint, Model};
use crate::retina::RetinaSpec;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_sets(n: usize, target: &[usize]) -> Result<Vec<bool>> {
    let mut in_target = vec![false; n];
    for &i in target {
        if i >= n {
            return Err(Error::LabelOutOfRange {
                label: i,
                num_classes: n,
            });
        }
        in_target[i] = true;
    }
    let count = in_target.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::Partition("empty target label set".into()));
    }
    if count == n {
        return Err(Error::Partition("empty complement label set".into()));
    }
    Ok(in_target)
}

/// `log(sum_{i in target} e^{l_i} / sum_{i not in target} e^{l_i})`.
pub fn coarse_logit(fine_logits: &[f64], target: &[usize]) -> Result<f64> {
    Ok(coarse_logit_grad(fine_logits, target)?.0)
}

pub fn coarse_probability(fine_logits: &[f64], target: &[usize]) -> Result<f64> {
    coarse_logit(fine_logits, target).map(sigmoid)
}

/// Coarse logit and its gradient with respect to the fine logits: the softmax
/// restricted to the target set, minus the softmax restricted to the complement.
pub fn coarse_logit_grad(fine_logits: &[f64], target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mask = split_sets(fine_logits.len(), target)?;
    let pick = |want: bool| {
        fine_logits
            .iter()
            .zip(&mask)
            .filter(move |(_, &m)| m == want)
            .map(|(&v, _)| v)
    };
    let lse_t = log_sum_exp(pick(true));
    let lse_o = log_sum_exp(pick(false));
    let grad = fine_logits
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { (v - lse_t).exp() } else { -(v - lse_o).exp() })
        .collect();
    Ok((lse_t - lse_o, grad))
}

/// Fine labels grouped into named coarse classes, pairs of classes forming
/// experiment groups, and distractor labels outside every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsePartition {
    pub fine_labels: Vec<String>,
    pub coarse_classes: BTreeMap<String, Vec<usize>>,
    pub groups: BTreeMap<String, [String; 2]>,
    pub distractors: Vec<usize>,
}

impl CoarsePartition {
    pub fn num_fine(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_fine();
        let mut owner: Vec<Option<&str>> = vec![None; n];
        let sets = self
            .coarse_classes
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("<distractors>", &self.distractors)));
        for (name, labels) in sets {
            for &l in labels {
                if l >= n {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        num_classes: n,
                    });
                }
                if let Some(prev) = owner[l] {
                    return Err(Error::Partition(format!(
                        "fine label `{}` assigned to both `{prev}` and `{name}`",
                        self.fine_labels[l]
                    )));
                }
                owner[l] = Some(name);
            }
        }
        for (name, labels) in &self.coarse_classes {
            if labels.is_empty() || labels.len() == n {
                return Err(Error::Partition(format!(
                    "coarse class `{name}` must be a nonempty proper subset"
                )));
            }
        }
        let mut grouped: BTreeMap<&str, &str> = BTreeMap::new();
        for (g, [a, b]) in &self.groups {
            if a == b {
                return Err(Error::Partition(format!("group `{g}` repeats class `{a}`")));
            }
            for c in [a, b] {
                if !self.coarse_classes.contains_key(c) {
                    return Err(Error::UnknownClass(c.clone()));
                }
                if let Some(prev) = grouped.insert(c, g) {
                    return Err(Error::Partition(format!(
                        "class `{c}` belongs to groups `{prev}` and `{g}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class(&self, name: &str) -> Result<&[usize]> {
        self.coarse_classes
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownClass(name.to_owned()))
    }

    pub fn group(&self, name: &str) -> Result<&[String; 2]> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::UnknownGroup(name.to_owned()))
    }

    /// Coarse class containing a fine label, if any.
    pub fn coarse_of(&self, fine: usize) -> Option<&str> {
        self.coarse_classes
            .iter()
            .find(|(_, v)| v.contains(&fine))
            .map(|(k, _)| k.as_str())
    }

    pub fn group_of_class(&self, class: &str) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, pair)| pair.iter().any(|c| c == class))
            .map(|(g, _)| g.as_str())
    }

    /// The other class of the group containing `class`.
    pub fn opposite(&self, class: &str) -> Result<&str> {
        let g = self
            .group_of_class(class)
            .ok_or_else(|| Error::UnknownClass(class.to_owned()))?;
        let [a, b] = &self.groups[g];
        Ok(if a == class { b } else { a })
    }

    pub fn coarse_logit(&self, fine_logits: &[f64], class: &str) -> Result<f64> {
        self.check_len(fine_logits)?;
        coarse_logit(fine_logits, self.class(class)?)
    }

    pub fn coarse_probability(&self, fine_logits: &[f64], class: &str) -> Result<f64> {
        self.coarse_logit(fine_logits, class).map(sigmoid)
    }

    fn check_len(&self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.num_fine() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_fine()],
                actual: vec![logits.len()],
            });
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let p: Self = read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Normalized geometric mean of member target probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleProbability {
    pub probability: f64,
    pub member_probabilities: Vec<f64>,
    /// Some member probability was exactly 0 or 1 and had to be clamped.
    pub clamped: bool,
}

/// `exp(mean log p) / (exp(mean log p) + exp(mean log (1 - p)))` with uniform weights.
pub fn combine_geometric(member_probabilities: &[f64]) -> Result<EnsembleProbability> {
    if member_probabilities.is_empty() {
        return Err(Error::InvalidConfig("ensemble has no members".into()));
    }
    let mut clamped = false;
    let k = member_probabilities.len() as f64;
    let (mut lt, mut lo) = (0.0, 0.0);
    for &p in member_probabilities {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::NonFinite(format!("member probability {p}")));
        }
        let c = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        clamped |= c != p;
        lt += c.ln();
        lo += (1.0 - c).ln();
    }
    Ok(EnsembleProbability {
        probability: sigmoid((lt - lo) / k),
        member_probabilities: member_probabilities.to_vec(),
        clamped,
    })
}

#[derive(Debug, Clone)]
pub struct Member {
    pub name: String,
    pub model: Model,
}

impl Member {
    pub fn new(name: impl Into<String>, model: Model) -> Self {
        Self {
            name: name.into(),
            model,
        }
    }

    pub fn from_checkpoint(name: impl Into<String>, ckpt: Checkpoint) -> Self {
        Self::new(name, ckpt.model)
    }

    pub fn has_retina(&self) -> bool {
        self.model.retina().is_some()
    }
}

/// Attack objective value, gradient and per-member coarse logits at one image.
#[derive(Debug, Clone)]
pub struct EnsembleLoss {
    pub loss: f64,
    pub gradient: Tensor,
    pub member_logits: Vec<f64>,
}

impl EnsembleLoss {
    /// Member `k` puts more than half its mass on the target.
    pub fn member_success(&self) -> Vec<bool> {
        self.member_logits.iter().map(|&z| z > 0.0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Member>,
}

impl Ensemble {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidConfig("ensemble needs at least one member".into()))?;
        let (nc, shape) = (first.model.num_classes(), first.model.input_shape());
        for m in &members {
            if m.model.num_classes() != nc {
                return Err(Error::InvalidConfig(format!(
                    "member `{}` has {} fine classes, expected {nc}",
                    m.name,
                    m.model.num_classes()
                )));
            }
            if m.model.input_shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: m.model.input_shape(),
                });
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.members[0].model.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].model.num_classes()
    }

    /// The first `k` members.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.members.len() {
            return Err(Error::InvalidConfig(format!(
                "prefix size {k} outside 1..={}",
                self.members.len()
            )));
        }
        Self::new(self.members[..k].to_vec())
    }

    /// Stages `image` once per distinct retina configuration.
    fn stage_all(&self, image: &Tensor) -> Result<(Vec<Tensor>, Vec<usize>)> {
        let mut keys: Vec<Option<&RetinaSpec>> = Vec::new();
        let mut staged = Vec::new();
        let mut index = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let key = m.model.retina().map(|r| r.spec());
            match keys.iter().position(|k| *k == key) {
                Some(i) => index.push(i),
                None => {
                    keys.push(key);
                    staged.push(m.model.stage(image)?);
                    index.push(staged.len() - 1);
                }
            }
        }
        Ok((staged, index))
    }

    pub fn member_coarse_logits(&self, image: &Tensor, target: &[usize]) -> Result<Vec<f64>> {
        let (staged, index) = self.stage_all(image)?;
        self.members
            .par_iter()
            .zip(&index)
            .map(|(m, &i)| {
                let (logits, _) = m.model.forward_staged(&staged[i])?;
                coarse_logit(&logits, target)
            })
            .collect()
    }

    pub fn coarse_probability(&self, image: &Tensor, target: &[usize]) -> Result<EnsembleProbability> {
        let z = self.member_coarse_logits(image, target)?;
        combine_geometric(&z.into_iter().map(sigmoid).collect::<Vec<_>>())
    }

    /// `J = -log P_ens(target | image)` and `dJ/dimage`.
    pub fn loss_and_gradient(&self, image: &Tensor, target: &[usize]) -> Result<EnsembleLoss> {
        let (staged, index) = self.stage_all(image)?;
        let passes: Vec<(f64, Vec<f64>, crate::nn::Trace)> = self
            .members
            .par_iter()
            .zip(&index)
            .map(|(m, &i)| {
                let (logits, trace) = m.model.forward_staged(&staged[i])?;
                let (z, dz) = coarse_logit_grad(&logits, target)?;
                Ok((z, dz, trace))
            })
            .collect::<Result<_>>()?;
        let k = self.members.len() as f64;
        let member_logits: Vec<f64> = passes.iter().map(|p| p.0).collect();
        let zbar = member_logits.iter().sum::<f64>() / k;
        let loss = softplus(-zbar);
        if !loss.is_finite() {
            return Err(Error::NonFinite("ensemble loss".into()));
        }
        let coef = -sigmoid(-zbar) / k;
        let staged_grads: Vec<Tensor> = self
            .members
            .par_iter()
            .zip(&passes)
            .map(|(m, (_, dz, trace))| {
                let d: Vec<f64> = dz.iter().map(|v| v * coef).collect();
                m.model.backward_staged(trace, &d, None)
            })
            .collect::<Result<_>>()?;
        // Sum per staging group in member order, then one adjoint per group.
        let mut sums: Vec<Option<Tensor>> = vec![None; staged.len()];
        for (g, &i) in staged_grads.into_iter().zip(&index) {
            sums[i] = Some(match sums[i].take() {
                None => g,
                Some(acc) => acc.add(&g)?,
            });
        }
        let mut gradient = Tensor::zeros(self.input_shape());
        for (i, s) in sums.into_iter().enumerate() {
            let owner = index.iter().position(|&j| j == i).expect("group has a member");
            let s = s.expect("group has a gradient");
            gradient = gradient.add(&self.members[owner].model.stage_adjoint(&s)?)?;
        }
        if !gradient.all_finite() {
            return Err(Error::NonFinite("ensemble gradient".into()));
        }
        Ok(EnsembleLoss {
            loss,
            gradient,
            member_logits,
        })
    }
}
