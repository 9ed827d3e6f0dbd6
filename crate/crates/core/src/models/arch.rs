use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Per-channel (or per-feature) affine normalization `(x - mean) / std`.
    /// Has no trainable parameters; keeps perturbation budgets in raw input units.
    Normalize { mean: Vec<f64>, std: Vec<f64> },
    /// Stride-1 square convolution.
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping max pooling with window `size`.
    MaxPool { size: usize },
    Flatten,
    Linear { out_features: usize },
}

/// Serializable architecture description of a sequential classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `[channels, height, width]` for images or `[features]` for vectors.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Shape of an activation for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored channel-major across the batch: `[c][n][h][w]`.
    Spatial { c: usize, h: usize, w: usize },
    /// Stored sample-major: `[n][f]`.
    Flat { f: usize },
}

impl Layout {
    pub(crate) fn len(&self) -> usize {
        match *self {
            Layout::Spatial { c, h, w } => c * h * w,
            Layout::Flat { f } => f,
        }
    }
}

impl ArchSpec {
    /// Two-layer perceptron: `features -> hidden -> relu -> classes`.
    pub fn mlp(features: usize, hidden: usize, num_classes: usize) -> Self {
        ArchSpec {
            input_shape: vec![features],
            num_classes,
            layers: vec![
                LayerSpec::Linear {
                    out_features: hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    out_features: num_classes,
                },
            ],
        }
    }

    /// Single affine layer; logits are `W x + b`.
    pub fn linear(features: usize, num_classes: usize) -> Self {
        ArchSpec {
            input_shape: vec![features],
            num_classes,
            layers: vec![LayerSpec::Linear {
                out_features: num_classes,
            }],
        }
    }

    /// Four `conv3x3 -> relu -> maxpool2` blocks followed by a linear head.
    /// A block skips its pooling when the spatial size is odd.
    pub fn cnn4(input: [usize; 3], widths: [usize; 4], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let (mut h, mut w) = (input[1], input[2]);
        for &out_channels in &widths {
            layers.push(LayerSpec::Conv {
                out_channels,
                kernel: 3,
                padding: 1,
            });
            layers.push(LayerSpec::Relu);
            if h % 2 == 0 && w % 2 == 0 {
                layers.push(LayerSpec::MaxPool { size: 2 });
                h /= 2;
                w /= 2;
            }
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            out_features: num_classes,
        });
        ArchSpec {
            input_shape: input.to_vec(),
            num_classes,
            layers,
        }
    }

    /// Prepend a normalization layer.
    pub fn with_normalization(mut self, mean: Vec<f64>, std: Vec<f64>) -> Self {
        self.layers.insert(0, LayerSpec::Normalize { mean, std });
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub(crate) fn input_layout(&self) -> Result<Layout> {
        match self.input_shape.as_slice() {
            [f] if *f > 0 => Ok(Layout::Flat { f: *f }),
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok(Layout::Spatial {
                c: *c,
                h: *h,
                w: *w,
            }),
            other => Err(Error::InvalidInput(format!(
                "input shape must be [features] or [channels, height, width], got {other:?}"
            ))),
        }
    }

    /// Input layout of every layer plus the final output layout.
    pub(crate) fn layouts(&self) -> Result<Vec<Layout>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be positive".into()));
        }
        let mut cur = self.input_layout()?;
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::InvalidInput(format!("layer {i}: {msg}"));
            cur = match (layer, cur) {
                (LayerSpec::Normalize { mean, std }, l) => {
                    let groups = match l {
                        Layout::Spatial { c, .. } => c,
                        Layout::Flat { f } => f,
                    };
                    if mean.len() != std.len() || (mean.len() != groups && mean.len() != 1) {
                        return Err(bad(format!(
                            "normalize expects 1 or {groups} statistics, got {}/{}",
                            mean.len(),
                            std.len()
                        )));
                    }
                    if std.iter().any(|&s| s <= 0.0) {
                        return Err(bad("normalize std must be positive".into()));
                    }
                    l
                }
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        padding,
                    },
                    Layout::Spatial { h, w, .. },
                ) => {
                    if *kernel == 0 || *out_channels == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(bad("convolution does not fit its input".into()));
                    }
                    Layout::Spatial {
                        c: *out_channels,
                        h: h + 2 * padding + 1 - kernel,
                        w: w + 2 * padding + 1 - kernel,
                    }
                }
                (LayerSpec::Relu, l) => l,
                (LayerSpec::MaxPool { size }, Layout::Spatial { c, h, w }) => {
                    if *size == 0 || h % size != 0 || w % size != 0 {
                        return Err(bad(format!("pool size {size} does not divide {h}x{w}")));
                    }
                    Layout::Spatial {
                        c,
                        h: h / size,
                        w: w / size,
                    }
                }
                (LayerSpec::Flatten, l) => Layout::Flat { f: l.len() },
                (LayerSpec::Linear { out_features }, Layout::Flat { .. }) if *out_features > 0 => {
                    Layout::Flat { f: *out_features }
                }
                (layer, l) => return Err(bad(format!("{layer:?} cannot follow activation {l:?}"))),
            };
            out.push(cur);
        }
        match cur {
            Layout::Flat { f } if f == self.num_classes => Ok(out),
            other => Err(Error::InvalidInput(format!(
                "final activation {other:?} does not match {} classes",
                self.num_classes
            ))),
        }
    }

    /// Names, shapes and fan-in of every trainable array, in layer order.
    pub(crate) fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>, usize)>> {
        let layouts = self.layouts()?;
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match (layer, layouts[i]) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        ..
                    },
                    Layout::Spatial { c, .. },
                ) => {
                    let fan_in = c * kernel * kernel;
                    shapes.push((format!("layer{i}.weight"), vec![*out_channels, c, *kernel, *kernel], fan_in));
                    shapes.push((format!("layer{i}.bias"), vec![*out_channels], fan_in));
                }
                (LayerSpec::Linear { out_features }, Layout::Flat { f }) => {
                    shapes.push((format!("layer{i}.weight"), vec![*out_features, f], f));
                    shapes.push((format!("layer{i}.bias"), vec![*out_features], f));
                }
                _ => {}
            }
        }
        Ok(shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn4_shapes_for_cifar() {
        let arch = ArchSpec::cnn4([3, 32, 32], [16, 32, 64, 128], 10);
        let layouts = arch.layouts().unwrap();
        assert_eq!(layouts.last(), Some(&Layout::Flat { f: 10 }));
        let params = arch.param_shapes().unwrap();
        assert_eq!(params.len(), 10);
        assert_eq!(params[0].1, vec![16, 3, 3, 3]);
        assert_eq!(params[8].1, vec![10, 128 * 2 * 2]);
    }

    #[test]
    fn rejects_inconsistent_architectures() {
        let mut arch = ArchSpec::mlp(4, 8, 3);
        arch.num_classes = 5;
        assert!(arch.layouts().is_err());
        let arch = ArchSpec {
            input_shape: vec![4],
            num_classes: 2,
            layers: vec![LayerSpec::MaxPool { size: 2 }],
        };
        assert!(arch.layouts().is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let arch = ArchSpec::cnn4([1, 28, 28], [4, 8, 8, 8], 10).with_normalization(vec![0.5], vec![0.25]);
        let text = serde_json::to_string(&arch).unwrap();
        let back: ArchSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(arch, back);
    }
}
