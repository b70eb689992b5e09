//! Architecture descriptors and shape inference.
//!
//! An architecture is an input shape plus an ordered list of layers. The
//! canonical text form (used in model files and as the input to the
//! architecture checksum) looks like
//!
//! ```text
//! input=64x64x3;conv=8,5,2,2;relu;maxpool=2,2;flatten;dense=64;relu;dense=2
//! ```
//!
//! where `conv=out,kernel,stride,padding` and `maxpool=kernel,stride`.

use std::fmt;
use std::str::FromStr;

use super::NnError;

/// Number of output classes. Index 0 is "blocked", index 1 is "free".
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Shape of an activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    /// Channel-major spatial map `[channels][height][width]`.
    Spatial {
        c: usize,
        h: usize,
        w: usize,
    },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ActShape::Spatial { c, h, w } => write!(f, "{h}x{w}x{c}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    pub input: InputShape,
    pub layers: Vec<Layer>,
}

/// One layer with resolved shapes and parameter offsets into the flat vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerPlan {
    pub layer: Layer,
    pub input: ActShape,
    pub output: ActShape,
    /// Offset of the weights; biases follow immediately.
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_len: usize,
}

impl LayerPlan {
    pub fn bias_offset(&self) -> usize {
        self.weight_offset + self.weight_len
    }

    pub fn param_len(&self) -> usize {
        self.weight_len + self.bias_len
    }

    /// Fan-in used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match (self.layer, self.input) {
            (Layer::Conv { kernel, .. }, ActShape::Spatial { c, .. }) => c * kernel * kernel,
            (Layer::Dense { .. }, ActShape::Flat(n)) => n,
            _ => 0,
        }
    }
}

/// Resolved, shape-checked architecture.
#[derive(Debug, Clone)]
pub struct Plan {
    pub layers: Vec<LayerPlan>,
    pub param_count: usize,
}

impl ArchDescriptor {
    /// The desk-scale AlexNet-style default network.
    pub fn default_alexnet() -> Self {
        ArchDescriptor {
            input: InputShape {
                height: 64,
                width: 64,
                channels: 3,
            },
            layers: vec![
                Layer::Conv {
                    out_channels: 8,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
                Layer::Relu,
                Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                Layer::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                Layer::Conv {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                Layer::Flatten,
                Layer::Dense { out_features: 64 },
                Layer::Relu,
                Layer::Dense {
                    out_features: NUM_CLASSES,
                },
            ],
        }
    }

    pub fn plan(&self) -> Result<Plan, NnError> {
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 {
            return Err(NnError::Shape(format!(
                "input shape {height}x{width}x{channels} has a zero dimension"
            )));
        }
        let mut shape = ActShape::Spatial {
            c: channels,
            h: height,
            w: width,
        };
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, &layer) in self.layers.iter().enumerate() {
            let (output, weight_len, bias_len) = match (layer, shape) {
                (
                    Layer::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    ActShape::Spatial { c, h, w },
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(NnError::Shape(format!(
                            "layer {idx}: conv has zero-sized field"
                        )));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(NnError::Shape(format!(
                            "layer {idx}: conv kernel {kernel} larger than padded input {shape}"
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    (
                        ActShape::Spatial {
                            c: out_channels,
                            h: oh,
                            w: ow,
                        },
                        out_channels * c * kernel * kernel,
                        out_channels,
                    )
                }
                (Layer::MaxPool { kernel, stride }, ActShape::Spatial { c, h, w }) => {
                    if kernel == 0 || stride == 0 {
                        return Err(NnError::Shape(format!(
                            "layer {idx}: maxpool has zero-sized field"
                        )));
                    }
                    if h < kernel || w < kernel {
                        return Err(NnError::Shape(format!(
                            "layer {idx}: maxpool kernel {kernel} larger than input {shape}"
                        )));
                    }
                    (
                        ActShape::Spatial {
                            c,
                            h: (h - kernel) / stride + 1,
                            w: (w - kernel) / stride + 1,
                        },
                        0,
                        0,
                    )
                }
                (Layer::Relu, s) => (s, 0, 0),
                (Layer::Flatten, s) => (ActShape::Flat(s.len()), 0, 0),
                (Layer::Dense { out_features }, ActShape::Flat(n)) => {
                    if out_features == 0 {
                        return Err(NnError::Shape(format!(
                            "layer {idx}: dense with zero outputs"
                        )));
                    }
                    (ActShape::Flat(out_features), out_features * n, out_features)
                }
                (layer, s) => {
                    return Err(NnError::Shape(format!(
                        "layer {idx}: {} cannot consume activation of shape {s}",
                        LayerText(&layer)
                    )))
                }
            };
            layers.push(LayerPlan {
                layer,
                input: shape,
                output,
                weight_offset: offset,
                weight_len,
                bias_len,
            });
            offset += weight_len + bias_len;
            shape = output;
        }
        if shape != ActShape::Flat(NUM_CLASSES) {
            return Err(NnError::Shape(format!(
                "network output must be {NUM_CLASSES} flat features, got {shape}"
            )));
        }
        Ok(Plan {
            layers,
            param_count: offset,
        })
    }

    pub fn param_count(&self) -> Result<usize, NnError> {
        Ok(self.plan()?.param_count)
    }

    /// FNV-1a hash of the canonical text form.
    pub fn checksum(&self) -> u64 {
        crate::seed::fnv1a(self.to_string().as_bytes())
    }
}

struct LayerText<'a>(&'a Layer);

impl fmt::Display for LayerText<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self.0 {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv={out_channels},{kernel},{stride},{padding}"),
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool { kernel, stride } => write!(f, "maxpool={kernel},{stride}"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Dense { out_features } => write!(f, "dense={out_features}"),
        }
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        write!(f, "input={height}x{width}x{channels}")?;
        for layer in &self.layers {
            write!(f, ";{}", LayerText(layer))?;
        }
        Ok(())
    }
}

fn parse_usizes(s: &str, n: usize, sep: char) -> Option<Vec<usize>> {
    let v: Vec<usize> = s
        .split(sep)
        .map(|p| p.parse().ok())
        .collect::<Option<_>>()?;
    (v.len() == n).then_some(v)
}

impl FromStr for ArchDescriptor {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |what: &str| NnError::InvalidArch(format!("{what} in {s:?}"));
        let mut parts = s.split(';');
        let input = parts
            .next()
            .and_then(|p| p.strip_prefix("input="))
            .and_then(|p| parse_usizes(p, 3, 'x'))
            .ok_or_else(|| bad("missing or malformed input"))?;
        let mut layers = Vec::new();
        for part in parts {
            let (name, args) = part.split_once('=').unwrap_or((part, ""));
            let layer = match name {
                "conv" => {
                    let v = parse_usizes(args, 4, ',').ok_or_else(|| bad("malformed conv"))?;
                    Layer::Conv {
                        out_channels: v[0],
                        kernel: v[1],
                        stride: v[2],
                        padding: v[3],
                    }
                }
                "maxpool" => {
                    let v = parse_usizes(args, 2, ',').ok_or_else(|| bad("malformed maxpool"))?;
                    Layer::MaxPool {
                        kernel: v[0],
                        stride: v[1],
                    }
                }
                "dense" => {
                    let v = parse_usizes(args, 1, ',').ok_or_else(|| bad("malformed dense"))?;
                    Layer::Dense { out_features: v[0] }
                }
                "relu" if args.is_empty() => Layer::Relu,
                "flatten" if args.is_empty() => Layer::Flatten,
                _ => return Err(bad(&format!("unknown layer {part:?}"))),
            };
            layers.push(layer);
        }
        Ok(ArchDescriptor {
            input: InputShape {
                height: input[0],
                width: input[1],
                channels: input[2],
            },
            layers,
        })
    }
}
