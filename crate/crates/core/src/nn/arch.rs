use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retina::{cropped_size, RetinaSpec};

/// Image dimensions a model accepts (before any retina preprocessing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputDims {
    pub fn shape(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Dense {
        units: usize,
    },
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A classifier architecture: a layer stack followed by an implicit dense head
/// producing `num_classes` logits, optionally preceded by a retinal blur layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input: InputDims,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub retina: Option<RetinaSpec>,
}

impl ArchSpec {
    /// Shape entering the first layer (after retina crop if present).
    pub fn body_input(&self) -> Result<Shape> {
        let InputDims {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArch("input dims must be positive".into()));
        }
        match &self.retina {
            None => Ok(Shape::Spatial {
                c: channels,
                h: height,
                w: width,
            }),
            Some(r) => {
                r.geometry.validate()?;
                r.params.validate()?;
                if height != width || height != r.geometry.image_pixels {
                    return Err(Error::InvalidArch(format!(
                        "retina geometry expects {0}x{0} input, arch declares {height}x{width}",
                        r.geometry.image_pixels
                    )));
                }
                let n = cropped_size(height);
                Ok(Shape::Spatial {
                    c: channels,
                    h: n,
                    w: n,
                })
            }
        }
    }

    /// Input shape of each layer plus the shape feeding the head.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.num_classes < 4 {
            return Err(Error::InvalidArch(format!(
                "need at least 4 fine classes, got {}",
                self.num_classes
            )));
        }
        let mut cur = self.body_input()?;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(cur);
            let bad = |msg: String| Error::InvalidArch(format!("layer {i} ({layer:?}): {msg}"));
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Shape::Spatial { h, w, .. },
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("channels, kernel and stride must be positive".into()));
                    }
                    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                    if kernel > ph || kernel > pw {
                        return Err(bad(format!("kernel larger than padded input {ph}x{pw}")));
                    }
                    Shape::Spatial {
                        c: out_channels,
                        h: (ph - kernel) / stride + 1,
                        w: (pw - kernel) / stride + 1,
                    }
                }
                (LayerSpec::MaxPool { size } | LayerSpec::AvgPool { size }, Shape::Spatial { c, h, w }) => {
                    if size == 0 || size > h || size > w {
                        return Err(bad(format!("pool size {size} does not fit {h}x{w}")));
                    }
                    Shape::Spatial {
                        c,
                        h: h / size,
                        w: w / size,
                    }
                }
                (LayerSpec::GlobalAvgPool, Shape::Spatial { c, .. }) => Shape::Flat(c),
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dense { units }, _) => {
                    if units == 0 {
                        return Err(bad("dense units must be positive".into()));
                    }
                    Shape::Flat(units)
                }
                (_, Shape::Flat(_)) => return Err(bad("spatial layer after flat activation".into())),
            };
        }
        out.push(cur);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Named parameter shapes in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match (*layer, shapes[i]) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        ..
                    },
                    Shape::Spatial { c, .. },
                ) => {
                    out.push((format!("layers.{i}.weight"), vec![out_channels, c, kernel, kernel]));
                    out.push((format!("layers.{i}.bias"), vec![out_channels]));
                }
                (LayerSpec::Dense { units }, s) => {
                    out.push((format!("layers.{i}.weight"), vec![units, s.len()]));
                    out.push((format!("layers.{i}.bias"), vec![units]));
                }
                _ => {}
            }
        }
        let feat = shapes.last().expect("non-empty").len();
        out.push(("head.weight".into(), vec![self.num_classes, feat]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_arch() -> ArchSpec {
        ArchSpec {
            name: "tiny".into(),
            input: InputDims {
                height: 12,
                width: 12,
                channels: 2,
            },
            num_classes: 4,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 5 },
            ],
            retina: None,
        }
    }

    #[test]
    fn shapes_flow() {
        let s = small_arch().shapes().unwrap();
        assert_eq!(s[3], Shape::Spatial { c: 3, h: 6, w: 6 });
        assert_eq!(s[4], Shape::Spatial { c: 4, h: 2, w: 2 });
        assert_eq!(*s.last().unwrap(), Shape::Flat(5));
        let p = small_arch().param_shapes().unwrap();
        assert_eq!(p[0].1, vec![3, 2, 3, 3]);
        assert_eq!(p[4].1, vec![5, 16]);
        assert_eq!(p[6].1, vec![4, 5]);
    }

    #[test]
    fn rejects_incompatible_layers() {
        let mut a = small_arch();
        a.layers.push(LayerSpec::MaxPool { size: 2 });
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.num_classes = 3;
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.layers[0] = LayerSpec::Conv {
            out_channels: 3,
            kernel: 20,
            stride: 1,
            padding: 0,
        };
        assert!(a.validate().is_err());
    }

    #[test]
    fn json_layer_syntax() {
        let a: ArchSpec = serde_json::from_str(
            r#"{"name":"n","input":{"height":8,"width":8,"channels":1},"num_classes":4,
                "layers":[{"type":"conv","out_channels":2,"kernel":3},{"type":"relu"},{"type":"global_avg_pool"}]}"#,
        )
        .unwrap();
        assert_eq!(
            a.layers[0],
            LayerSpec::Conv {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0
            }
        );
        assert!(a.retina.is_none());
        assert_eq!(*a.shapes().unwrap().last().unwrap(), Shape::Flat(2));
    }
}
