use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{ArchSpec, LayerSpec, Shape};
use super::layers::{self, ConvGeom};
use super::Loss;
use crate::error::{Error, Result};
use crate::retina::RetinaLayer;
use crate::tensor::Tensor;

/// Intensity offset and scale applied to `[0, 255]` inputs before the first layer.
pub const INPUT_CENTER: f64 = 127.5;

/// A named parameter tensor. Values are always exactly representable as `f32`,
/// which is what makes checkpoint round-trips bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Round to the nearest `f32`, kept in `f64` storage.
#[inline]
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Per-layer cache recorded during the forward pass.
#[derive(Debug)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    argmax: Vec<Option<Vec<usize>>>,
    features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchSpec,
    shapes: Vec<Shape>,
    params: Vec<Param>,
    retina: Option<RetinaLayer>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl Model {
    /// He-normal weights and zero biases from a seed.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                        .expect("positive std");
                    (0..n).map(|_| round_f32(normal.sample(&mut rng))).collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: ArchSpec, params: Vec<Param>) -> Result<Self> {
        let expected = arch.param_shapes()?;
        if expected.len() != params.len() {
            return Err(Error::InvalidArch(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    expected: shape.clone(),
                    actual: p.shape.clone(),
                });
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", p.name)));
            }
        }
        let retina = arch.retina.as_ref().map(RetinaLayer::new).transpose()?;
        let shapes = arch.shapes()?;
        Ok(Self {
            arch,
            shapes,
            params,
            retina,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn retina(&self) -> Option<&RetinaLayer> {
        self.retina.as_ref()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.arch.input.shape()
    }

    /// Shape of the tensor entering the layer stack, as an `[h, w, c]` image.
    pub fn staged_shape(&self) -> Vec<usize> {
        match self.shapes[0] {
            Shape::Spatial { c, h, w } => vec![h, w, c],
            Shape::Flat(n) => vec![n],
        }
    }

    /// Applies the retina layer if present. The result is what the layer stack sees
    /// (before intensity normalization).
    pub fn stage(&self, image: &Tensor) -> Result<Tensor> {
        image.ensure_shape(&self.input_shape())?;
        match &self.retina {
            Some(r) => r.apply(image),
            None => Ok(image.clone()),
        }
    }

    /// Adjoint of [`stage`](Self::stage).
    pub fn stage_adjoint(&self, grad: &Tensor) -> Result<Tensor> {
        match &self.retina {
            Some(r) => r.adjoint(grad),
            None => Ok(grad.clone()),
        }
    }

    /// Logits for a staged input, plus the cache needed for backpropagation.
    pub fn forward_staged(&self, staged: &Tensor) -> Result<(Vec<f64>, Trace)> {
        staged.ensure_shape(&self.staged_shape())?;
        let mut x: Vec<f64> = staged
            .to_planes()?
            .concat()
            .into_iter()
            .map(|v| (v - INPUT_CENTER) / INPUT_CENTER)
            .collect();
        let mut inputs = Vec::with_capacity(self.arch.layers.len());
        let mut argmax = Vec::with_capacity(self.arch.layers.len());
        let mut pi = 0;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let shape = self.shapes[i];
            let mut am = None;
            let y = match (*layer, shape) {
                (LayerSpec::Conv { .. }, _) => {
                    let g = self.conv_geom(i);
                    let y = layers::conv_forward(&g, &x, &self.params[pi].data, &self.params[pi + 1].data);
                    pi += 2;
                    y
                }
                (LayerSpec::Dense { .. }, _) => {
                    let y = layers::dense_forward(&x, &self.params[pi].data, &self.params[pi + 1].data);
                    pi += 2;
                    y
                }
                (LayerSpec::Relu, _) => layers::relu_forward(&x),
                (LayerSpec::MaxPool { size }, Shape::Spatial { c, h, w }) => {
                    let (y, a) = layers::max_pool_forward(&x, c, h, w, size);
                    am = Some(a);
                    y
                }
                (LayerSpec::AvgPool { size }, Shape::Spatial { c, h, w }) => {
                    layers::avg_pool_forward(&x, c, h, w, size)
                }
                (LayerSpec::GlobalAvgPool, Shape::Spatial { c, h, w }) => {
                    layers::global_avg_forward(&x, c, h * w)
                }
                _ => unreachable!("validated architecture"),
            };
            inputs.push(std::mem::replace(&mut x, y));
            argmax.push(am);
        }
        let logits = layers::dense_forward(&x, &self.params[pi].data, &self.params[pi + 1].data);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((
            logits,
            Trace {
                inputs,
                argmax,
                features: x,
            },
        ))
    }

    /// Backpropagates `dlogits` to the staged input. Parameter gradients are
    /// accumulated into `param_grads` (same layout as [`params`](Self::params)) when given.
    pub fn backward_staged(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        mut param_grads: Option<&mut [Vec<f64>]>,
    ) -> Result<Tensor> {
        let np = self.params.len();
        let mut g = {
            let pg = param_grads.as_deref_mut().map(|pg| {
                let (a, b) = pg[np - 2..].split_at_mut(1);
                (a[0].as_mut_slice(), b[0].as_mut_slice())
            });
            layers::dense_backward(&trace.features, &self.params[np - 2].data, dlogits, pg)
        };
        let mut pi = np - 2;
        for (i, layer) in self.arch.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            g = match (*layer, self.shapes[i]) {
                (LayerSpec::Conv { .. } | LayerSpec::Dense { .. }, _) => {
                    pi -= 2;
                    let pg = param_grads.as_deref_mut().map(|pg| {
                        let (a, b) = pg[pi..pi + 2].split_at_mut(1);
                        (a[0].as_mut_slice(), b[0].as_mut_slice())
                    });
                    let w = &self.params[pi].data;
                    if matches!(layer, LayerSpec::Conv { .. }) {
                        layers::conv_backward(&self.conv_geom(i), x, w, &g, pg)
                    } else {
                        layers::dense_backward(x, w, &g, pg)
                    }
                }
                (LayerSpec::Relu, _) => layers::relu_backward(x, &g),
                (LayerSpec::MaxPool { .. }, _) => {
                    layers::max_pool_backward(trace.argmax[i].as_ref().expect("recorded"), &g, x.len())
                }
                (LayerSpec::AvgPool { size }, Shape::Spatial { c, h, w }) => {
                    layers::avg_pool_backward(&g, c, h, w, size)
                }
                (LayerSpec::GlobalAvgPool, Shape::Spatial { h, w, .. }) => {
                    layers::global_avg_backward(&g, h * w)
                }
                _ => unreachable!("validated architecture"),
            };
        }
        let shape = self.staged_shape();
        let (h, w) = (shape[0], shape[1]);
        let planes: Vec<Vec<f64>> = g
            .chunks_exact(h * w)
            .map(|p| p.iter().map(|v| v / INPUT_CENTER).collect())
            .collect();
        let t = Tensor::from_planes(h, w, &planes)?;
        if !t.all_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok(t)
    }

    fn conv_geom(&self, i: usize) -> ConvGeom {
        let (LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        }, Shape::Spatial { c, h, w }, Shape::Spatial { h: oh, w: ow, .. }) =
            (self.arch.layers[i], self.shapes[i], self.shapes[i + 1])
        else {
            unreachable!("conv layer with spatial shapes")
        };
        ConvGeom {
            c_in: c,
            h,
            w,
            c_out: out_channels,
            k: kernel,
            stride,
            pad: padding,
            oh,
            ow,
        }
    }

    /// Fine-class logits for an `[h, w, c]` image on the `[0, 255]` scale.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<f64>> {
        let staged = self.stage(image)?;
        Ok(self.forward_staged(&staged)?.0)
    }

    /// Vector-Jacobian product of the logits with respect to the image.
    pub fn logits_vjp(&self, image: &Tensor, dlogits: &[f64]) -> Result<Tensor> {
        let staged = self.stage(image)?;
        let (_, trace) = self.forward_staged(&staged)?;
        let g = self.backward_staged(&trace, dlogits, None)?;
        self.stage_adjoint(&g)
    }

    /// Loss value and its gradient with respect to the image.
    pub fn input_gradient(&self, image: &Tensor, loss: &Loss) -> Result<(f64, Tensor)> {
        let staged = self.stage(image)?;
        let (logits, trace) = self.forward_staged(&staged)?;
        let (value, dlogits) = loss.value_and_grad(&logits)?;
        let g = self.backward_staged(&trace, &dlogits, None)?;
        let g = self.stage_adjoint(&g)?;
        if !g.all_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok((value, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::tests::small_arch;
    use crate::nn::arch::InputDims;
    use crate::retina::{RetinaParams, RetinaSpec, ViewingGeometry};
    use rand::Rng;

    const STEP: f64 = 1e-5;

    fn arch(size: usize, channels: usize, layers: Vec<LayerSpec>) -> ArchSpec {
        ArchSpec {
            name: "grad".into(),
            input: InputDims {
                height: size,
                width: size,
                channels,
            },
            num_classes: 4,
            layers,
            retina: None,
        }
    }

    fn image(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(20.0..235.0))
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        diff / scale
    }

    fn loss_at(m: &Model, x: &Tensor) -> f64 {
        Loss::CrossEntropy(1).value_and_grad(&m.forward(x).unwrap()).unwrap().0
    }

    fn check_gradients(m: &mut Model, x: &Tensor) {
        let (_, g) = m.input_gradient(x, &Loss::CrossEntropy(1)).unwrap();
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                let mut n = x.clone();
                p.data_mut()[i] += STEP;
                n.data_mut()[i] -= STEP;
                (loss_at(m, &p) - loss_at(m, &n)) / (2.0 * STEP)
            })
            .collect();
        let r = rel(g.data(), &fd);
        assert!(r < 1e-4, "input gradient rel error {r}");

        let staged = m.stage(x).unwrap();
        let (logits, trace) = m.forward_staged(&staged).unwrap();
        let (_, dl) = Loss::CrossEntropy(1).value_and_grad(&logits).unwrap();
        let mut grads: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        m.backward_staged(&trace, &dl, Some(&mut grads)).unwrap();
        for k in 0..m.params().len() {
            let n = m.params()[k].data.len();
            let fd: Vec<f64> = (0..n)
                .map(|i| {
                    let orig = m.params()[k].data[i];
                    m.params_mut()[k].data[i] = orig + STEP;
                    let lp = loss_at(m, x);
                    m.params_mut()[k].data[i] = orig - STEP;
                    let ln = loss_at(m, x);
                    m.params_mut()[k].data[i] = orig;
                    (lp - ln) / (2.0 * STEP)
                })
                .collect();
            let r = rel(&grads[k], &fd);
            assert!(r < 1e-4, "{} gradient rel error {r}", m.params()[k].name);
        }
    }

    fn run(a: ArchSpec, seed: u64) {
        let mut m = Model::init(a, seed).unwrap();
        // Nonzero biases so that bias gradients are exercised away from init.
        for p in m.params_mut() {
            if p.name.ends_with("bias") {
                p.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64);
            }
        }
        let x = image(m.input_shape(), seed + 1);
        check_gradients(&mut m, &x);
    }

    #[test]
    fn conv_gradient() {
        let conv = LayerSpec::Conv {
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        run(arch(7, 2, vec![conv]), 1);
    }

    #[test]
    fn relu_gradient() {
        let conv = LayerSpec::Conv {
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        run(arch(6, 1, vec![conv, LayerSpec::Relu]), 2);
    }

    #[test]
    fn pooling_gradients() {
        run(arch(6, 2, vec![LayerSpec::MaxPool { size: 2 }]), 3);
        run(arch(6, 2, vec![LayerSpec::AvgPool { size: 3 }]), 4);
        run(arch(5, 3, vec![LayerSpec::GlobalAvgPool]), 5);
    }

    #[test]
    fn dense_gradient() {
        run(arch(4, 2, vec![LayerSpec::Dense { units: 6 }, LayerSpec::Relu]), 6);
    }

    #[test]
    fn full_stack_gradient() {
        run(small_arch(), 7);
    }

    #[test]
    fn gradient_through_retina() {
        let mut a = arch(
            16,
            3,
            vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
            ],
        );
        a.retina = Some(RetinaSpec {
            geometry: ViewingGeometry::new(0.61, 0.1524, 16),
            params: RetinaParams::default(),
        });
        run(a, 8);
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let a = Model::init(small_arch(), 3).unwrap();
        let b = Model::init(small_arch(), 3).unwrap();
        let c = Model::init(small_arch(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().iter().flat_map(|p| &p.data).all(|&v| round_f32(v) == v));
    }

    #[test]
    fn from_params_checks_layout() {
        let m = Model::init(small_arch(), 0).unwrap();
        let mut ps = m.params().to_vec();
        ps[0].data.pop();
        assert!(Model::from_params(small_arch(), ps).is_err());
        let ps = m.params()[1..].to_vec();
        assert!(Model::from_params(small_arch(), ps).is_err());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = Model::init(small_arch(), 0).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(vec![12, 12, 3])),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
