use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of a backbone's block plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Layer {
    /// Bias-free 2-D convolution with a square kernel.
    Conv {
        out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "one")]
        groups: usize,
    },
    BatchNorm,
    /// Group norm with 8 groups, or 1 when the layer has fewer than 8 channels.
    GroupNorm,
    Relu,
    AvgPool {
        k: usize,
    },
    GlobalAvgPool,
    ChannelShuffle {
        groups: usize,
    },
    Flatten,
    /// Affine classifier head producing one logit per class.
    Linear,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        #[serde(default)]
        shortcut: Vec<Layer>,
    },
}

fn one() -> usize {
    1
}

/// A named miniature architecture for a fixed input shape and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// Names accepted by [`BackboneSpec::preset`].
pub const PRESETS: &[&str] = &["tiny-resnet", "tiny-convnet-gn", "tiny-mobile", "tiny-shuffle"];

pub(crate) const GN_GROUPS: usize = 8;

pub(crate) fn gn_groups(channels: usize) -> usize {
    if channels < GN_GROUPS {
        1
    } else {
        GN_GROUPS
    }
}

fn conv(out: usize, k: usize, stride: usize) -> Layer {
    Layer::Conv {
        out,
        k,
        stride,
        pad: k / 2,
        groups: 1,
    }
}

fn grouped(out: usize, k: usize, stride: usize, groups: usize) -> Layer {
    Layer::Conv {
        out,
        k,
        stride,
        pad: k / 2,
        groups,
    }
}

fn basic_block(width: usize, stride: usize, in_width: usize) -> Layer {
    let shortcut = if stride != 1 || in_width != width {
        vec![conv(width, 1, stride), Layer::BatchNorm]
    } else {
        vec![]
    };
    Layer::Residual {
        body: vec![
            conv(width, 3, stride),
            Layer::BatchNorm,
            Layer::Relu,
            conv(width, 3, 1),
            Layer::BatchNorm,
        ],
        shortcut,
    }
}

fn inverted_residual(width: usize, expand: usize) -> Vec<Layer> {
    let hidden = width * expand;
    vec![
        conv(hidden, 1, 1),
        Layer::BatchNorm,
        Layer::Relu,
        grouped(hidden, 3, 1, hidden),
        Layer::BatchNorm,
        Layer::Relu,
        conv(width, 1, 1),
        Layer::BatchNorm,
    ]
}

fn shuffle_unit(width: usize) -> Layer {
    Layer::Residual {
        body: vec![
            grouped(width, 1, 1, 2),
            Layer::BatchNorm,
            Layer::Relu,
            Layer::ChannelShuffle { groups: 2 },
            grouped(width, 3, 1, width),
            Layer::BatchNorm,
            grouped(width, 1, 1, 2),
            Layer::BatchNorm,
        ],
        shortcut: vec![],
    }
}

impl BackboneSpec {
    /// One of the built-in miniature backbones (see [`PRESETS`]).
    pub fn preset(name: &str, input: [usize; 3], classes: usize) -> Result<BackboneSpec> {
        let layers = match name {
            "tiny-resnet" => vec![
                conv(16, 3, 1),
                Layer::BatchNorm,
                Layer::Relu,
                basic_block(16, 1, 16),
                Layer::Relu,
                basic_block(32, 2, 16),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Linear,
            ],
            "tiny-convnet-gn" => {
                let mut l = Vec::new();
                for _ in 0..3 {
                    l.extend([conv(32, 3, 1), Layer::GroupNorm, Layer::Relu, Layer::AvgPool { k: 2 }]);
                }
                l.extend([Layer::Flatten, Layer::Linear]);
                l
            }
            "tiny-mobile" => {
                let mut l = vec![conv(16, 3, 1), Layer::BatchNorm, Layer::Relu];
                l.push(Layer::Residual {
                    body: inverted_residual(16, 2),
                    shortcut: vec![],
                });
                l.extend([
                    conv(32, 1, 1),
                    Layer::BatchNorm,
                    Layer::Relu,
                    grouped(32, 3, 2, 32),
                    Layer::BatchNorm,
                    Layer::Relu,
                    conv(32, 1, 1),
                    Layer::BatchNorm,
                ]);
                l.push(Layer::Residual {
                    body: inverted_residual(32, 2),
                    shortcut: vec![],
                });
                l.extend([
                    conv(64, 1, 1),
                    Layer::BatchNorm,
                    Layer::Relu,
                    Layer::GlobalAvgPool,
                    Layer::Linear,
                ]);
                l
            }
            "tiny-shuffle" => vec![
                conv(24, 3, 1),
                Layer::BatchNorm,
                Layer::Relu,
                shuffle_unit(24),
                Layer::Relu,
                conv(48, 3, 2),
                Layer::BatchNorm,
                Layer::Relu,
                shuffle_unit(48),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Linear,
            ],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown backbone `{other}` (expected one of {PRESETS:?})"
                )))
            }
        };
        let spec = BackboneSpec {
            name: name.to_string(),
            input,
            classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses a spec from TOML; unknown layer kinds are rejected.
    pub fn from_toml(text: &str) -> Result<BackboneSpec> {
        let spec: BackboneSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("backbone spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("backbone spec serializes")
    }

    /// Checks shape flow through the plan and that it ends in the classifier.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "{}: need at least 2 classes",
                self.name
            )));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("{}: empty input shape", self.name)));
        }
        if !matches!(self.layers.last(), Some(Layer::Linear)) {
            return Err(Error::InvalidArgument(format!(
                "{}: final layer must be `linear`",
                self.name
            )));
        }
        let n = self.layers.len();
        if has_linear(&self.layers[..n - 1]) {
            return Err(Error::InvalidArgument(format!(
                "{}: `linear` may only appear as the final layer",
                self.name
            )));
        }
        let out = infer(&self.layers, Shape::Map(self.input), &self.name, self.classes)?;
        match out {
            Shape::Flat(n) if n == self.classes => Ok(()),
            other => Err(Error::InvalidArgument(format!(
                "{}: plan produces {other:?}, expected {} logits",
                self.name, self.classes
            ))),
        }
    }
}

fn has_linear(layers: &[Layer]) -> bool {
    layers.iter().any(|l| match l {
        Layer::Linear => true,
        Layer::Residual { body, shortcut } => has_linear(body) || has_linear(shortcut),
        _ => false,
    })
}

/// Number of convolutions in `layers`, including those inside residual blocks.
pub fn count_convs(layers: &[Layer]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            Layer::Conv { .. } => 1,
            Layer::Residual { body, shortcut } => count_convs(body) + count_convs(shortcut),
            _ => 0,
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Shape {
    Map([usize; 3]),
    Flat(usize),
}

fn bad(name: &str, detail: String) -> Error {
    Error::InvalidArgument(format!("{name}: {detail}"))
}

pub(crate) fn infer(layers: &[Layer], mut shape: Shape, name: &str, classes: usize) -> Result<Shape> {
    for layer in layers {
        shape = step(layer, shape, name, classes)?;
    }
    Ok(shape)
}

fn step(layer: &Layer, shape: Shape, name: &str, classes: usize) -> Result<Shape> {
    use Layer::*;
    let map = |s: Shape| match s {
        Shape::Map(m) => Ok(m),
        Shape::Flat(_) => Err(bad(name, format!("{layer:?} needs a feature map"))),
    };
    Ok(match layer {
        Conv {
            out,
            k,
            stride,
            pad,
            groups,
        } => {
            let [c, h, w] = map(shape)?;
            if *k == 0 || *stride == 0 || *groups == 0 || *out == 0 {
                return Err(bad(name, format!("degenerate conv {layer:?}")));
            }
            if c % groups != 0 || out % groups != 0 {
                return Err(bad(name, format!("conv groups {groups} do not divide {c}->{out}")));
            }
            if h + 2 * pad < *k || w + 2 * pad < *k {
                return Err(bad(name, format!("conv kernel {k} exceeds {h}x{w} input")));
            }
            Shape::Map([
                *out,
                (h + 2 * pad - k) / stride + 1,
                (w + 2 * pad - k) / stride + 1,
            ])
        }
        BatchNorm | Relu => shape,
        GroupNorm => {
            let [c, _, _] = map(shape)?;
            if c % gn_groups(c) != 0 {
                return Err(bad(name, format!("group norm needs channels divisible by 8, got {c}")));
            }
            shape
        }
        AvgPool { k } => {
            let [c, h, w] = map(shape)?;
            if *k == 0 || h < *k || w < *k {
                return Err(bad(name, format!("avg pool {k} on {h}x{w}")));
            }
            Shape::Map([c, h / k, w / k])
        }
        GlobalAvgPool => Shape::Flat(map(shape)?[0]),
        ChannelShuffle { groups } => {
            let [c, _, _] = map(shape)?;
            if *groups == 0 || c % groups != 0 {
                return Err(bad(name, format!("channel shuffle {groups} on {c} channels")));
            }
            shape
        }
        Flatten => {
            let [c, h, w] = map(shape)?;
            Shape::Flat(c * h * w)
        }
        Linear => match shape {
            Shape::Flat(_) => Shape::Flat(classes),
            Shape::Map(_) => return Err(bad(name, "linear needs a flat input".into())),
        },
        Residual { body, shortcut } => {
            let a = infer(body, shape, name, classes)?;
            let b = infer(shortcut, shape, name, classes)?;
            if a != b {
                return Err(bad(name, format!("residual branches disagree: {a:?} vs {b:?}")));
            }
            a
        }
    })
}
