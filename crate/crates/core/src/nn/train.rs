use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMeta};
use super::model::{round_f32, Model};
use super::{ArchSpec, Loss};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stimuli::rescale_image_to_margin;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Duplicate each batch with intensities mapped into `[40, 215]`.
    #[serde(default)]
    pub rescale_augmentation: bool,
    /// Append an FGSM-perturbed copy of each batch, generated against the model being trained.
    #[serde(default)]
    pub adversarial_augmentation: bool,
    #[serde(default = "default_adv_eps")]
    pub adversarial_epsilon: f64,
    /// Append a copy of each rescaled image plus `a * s`, with `a ~ U(0, noise_amplitude)`
    /// and `s` a random ±1 pattern that is constant over square blocks of 1 to 8 pixels.
    /// Zero disables it; at most 40 so the sum stays in `[0, 255]`.
    #[serde(default)]
    pub noise_amplitude: f64,
}

fn default_adv_eps() -> f64 {
    16.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            rescale_augmentation: true,
            adversarial_augmentation: false,
            adversarial_epsilon: default_adv_eps(),
            noise_amplitude: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.adversarial_augmentation && !(self.adversarial_epsilon > 0.0) {
            return Err(Error::InvalidConfig("adversarial_epsilon must be positive".into()));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise_amplitude) {
            return Err(Error::InvalidConfig(format!(
                "noise_amplitude must lie in [0, {MAX_NOISE}], got {}",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

/// Largest noise amplitude that keeps rescaled images inside `[0, 255]`.
const MAX_NOISE: f64 = 40.0;
/// Number of distinct noise patterns staged per training run.
const NOISE_BANK: usize = 256;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean training loss per epoch (over all augmented examples).
    pub epoch_losses: Vec<f64>,
    /// Clean-image accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, p) in model.params_mut().iter_mut().enumerate() {
            for (i, w) in p.data.iter_mut().enumerate() {
                let g = grads[k][i];
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                *w = round_f32(*w - update);
            }
        }
    }
}

/// Trains a fresh model with Adam on softmax cross entropy. Single-threaded and
/// fully determined by `(arch, dataset, cfg)`.
pub fn train_model(arch: &ArchSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if dataset.items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let expected = arch.input.shape();
    for item in &dataset.items {
        item.image.ensure_shape(&expected)?;
        if item.fine_label >= arch.num_classes {
            return Err(Error::LabelOutOfRange {
                label: item.fine_label,
                num_classes: arch.num_classes,
            });
        }
    }

    let mut model = Model::init(arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);

    // Retina preprocessing has no parameters, so clean and rescaled inputs are staged once.
    let staged: Vec<Tensor> = dataset
        .items
        .iter()
        .map(|it| model.stage(&it.image))
        .collect::<Result<_>>()?;
    let use_noise = cfg.noise_amplitude > 0.0;
    let staged_rescaled: Vec<Tensor> = if cfg.rescale_augmentation || use_noise {
        dataset
            .items
            .iter()
            .map(|it| model.stage(&rescale_image_to_margin(&it.image)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    // Staging is linear, so a staged noisy image is the staged image plus a staged pattern.
    // Patterns are constant over square blocks of 1 to 8 pixels.
    let noise_bank: Vec<Tensor> = if use_noise {
        (0..NOISE_BANK)
            .map(|j| model.stage(&sign_blocks(&expected, 1 << (j % 4), &mut rng)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..dataset.items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut examples: Vec<(Tensor, usize)> = Vec::with_capacity(idx.len() * 3);
            for &i in idx {
                examples.push((staged[i].clone(), dataset.items[i].fine_label));
            }
            if cfg.rescale_augmentation {
                for &i in idx {
                    examples.push((staged_rescaled[i].clone(), dataset.items[i].fine_label));
                }
            }
            if use_noise {
                for &i in idx {
                    let a = rng.random_range(0.0..cfg.noise_amplitude);
                    let pattern = &noise_bank[rng.random_range(0..NOISE_BANK)];
                    let x = staged_rescaled[i].zip_map(pattern, |v, n| v + a * n)?;
                    examples.push((x, dataset.items[i].fine_label));
                }
            }
            if cfg.adversarial_augmentation {
                for &i in idx {
                    let it = &dataset.items[i];
                    let (_, g) = model.input_gradient(&it.image, &Loss::CrossEntropy(it.fine_label))?;
                    let adv = it
                        .image
                        .zip_map(&g, |x, d| x + cfg.adversarial_epsilon * sign(d))?
                        .clamp(0.0, 255.0);
                    examples.push((model.stage(&adv)?, it.fine_label));
                }
            }

            let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
            let mut batch_loss = 0.0;
            for (x, label) in &examples {
                let (logits, trace) = model.forward_staged(x)?;
                let (loss, dlogits) = Loss::CrossEntropy(*label).value_and_grad(&logits)?;
                batch_loss += loss;
                model.backward_staged(&trace, &dlogits, Some(&mut grads))?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let n = examples.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            adam.step(&mut model, &grads);
            total += batch_loss;
            count += examples.len();
        }
        let mean = total / count as f64;
        log::debug!("{}: epoch {epoch} loss {mean:.4}", arch.name);
        epoch_losses.push(mean);
    }

    let correct = staged
        .iter()
        .zip(&dataset.items)
        .map(|(x, it)| model.forward_staged(x).map(|(l, _)| super::argmax(&l) == it.fine_label))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();

    let meta = TrainingMeta {
        dataset_id: dataset.id.clone(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        rescale_augmentation: cfg.rescale_augmentation,
        adversarial_augmentation: cfg.adversarial_augmentation,
        noise_amplitude: cfg.noise_amplitude,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, meta },
        epoch_losses,
        train_accuracy: correct as f64 / dataset.items.len() as f64,
    })
}

/// Random ±1 pattern of `[h, w, c]` shape, constant over `block x block` squares.
fn sign_blocks(shape: &[usize], block: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let signs: Vec<f64> = (0..bh * bw * c).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::from_fn(shape.to_vec(), |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        signs[((y / block) * bw + x / block) * c + ch]
    })
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::arch::InputDims;
    use crate::nn::LayerSpec;

    fn arch() -> ArchSpec {
        ArchSpec {
            name: "t".into(),
            input: InputDims {
                height: 16,
                width: 16,
                channels: 3,
            },
            num_classes: 14,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
            ],
            retina: None,
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_dataset(2, 16, 1).dataset;
        let a = train_model(&arch(), &data, &cfg()).unwrap();
        let b = train_model(&arch(), &data, &cfg()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let mut other = cfg();
        other.seed = 6;
        let c = train_model(&arch(), &data, &other).unwrap();
        assert_ne!(a.checkpoint, c.checkpoint);
    }

    #[test]
    fn loss_decreases_on_small_problem() {
        let data = synthetic_dataset(4, 16, 2).dataset;
        let cfg = TrainConfig {
            epochs: 6,
            learning_rate: 1e-2,
            ..cfg()
        };
        let out = train_model(&arch(), &data, &cfg).unwrap();
        assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
    }

    #[test]
    fn adversarial_augmentation_runs() {
        let data = synthetic_dataset(1, 16, 3).dataset;
        let cfg = TrainConfig {
            epochs: 1,
            adversarial_augmentation: true,
            ..cfg()
        };
        let out = train_model(&arch(), &data, &cfg).unwrap();
        assert!(out.checkpoint.meta.adversarial_augmentation);
    }

    #[test]
    fn noise_augmentation_is_deterministic_and_bounded() {
        let data = synthetic_dataset(1, 16, 3).dataset;
        let cfg = TrainConfig {
            epochs: 1,
            noise_amplitude: 40.0,
            ..cfg()
        };
        let a = train_model(&arch(), &data, &cfg).unwrap();
        assert_eq!(a.checkpoint, train_model(&arch(), &data, &cfg).unwrap().checkpoint);
        assert_eq!(a.checkpoint.meta.noise_amplitude, 40.0);
        let too_loud = TrainConfig {
            noise_amplitude: 41.0,
            ..cfg
        };
        assert!(train_model(&arch(), &data, &too_loud).is_err());
    }

    #[test]
    fn input_errors() {
        let data = synthetic_dataset(1, 16, 3).dataset;
        let mut bad = arch();
        bad.num_classes = 5;
        assert!(matches!(
            train_model(&bad, &data, &cfg()),
            Err(Error::LabelOutOfRange { .. })
        ));
        let empty = Dataset {
            id: "e".into(),
            items: vec![],
        };
        assert!(matches!(train_model(&arch(), &empty, &cfg()), Err(Error::EmptyDataset)));
        let mut c = cfg();
        c.batch_size = 0;
        assert!(train_model(&arch(), &data, &c).is_err());
    }
}
