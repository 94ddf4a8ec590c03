//! Declarative network descriptions.
//!
//! A [`NetSpec`] is an input shape plus an ordered layer list. Its text form
//! (`input 1x8x8 | conv 4 3 2 1 | relu | dense 64 10 | linear`) is what
//! checkpoints store, so `Display` and `FromStr` round-trip.

use std::fmt;
use std::str::FromStr;

use super::error::{NnError, Result};

/// Per-sample tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { channels, height, width } => channels * height * width,
        }
    }

    /// `(channels, spatial)` view used by batchnorm: flat features are channels of size 1.
    pub fn channel_split(&self) -> (usize, usize) {
        match *self {
            Shape::Flat(n) => (n, 1),
            Shape::Image { channels, height, width } => (channels, height * width),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Flat(n) => write!(f, "{n}"),
            Shape::Image { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

impl FromStr for Shape {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| NnError::Config(format!("bad shape `{s}`")))?;
        match dims.as_slice() {
            [n] => Ok(Shape::Flat(*n)),
            [c, h, w] => Ok(Shape::Image { channels: *c, height: *h, width: *w }),
            _ => Err(NnError::Config(format!("bad shape `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv { filters: usize, kernel: usize, stride: usize, pad: usize },
    Deconv { filters: usize, kernel: usize, stride: usize, pad: usize },
    /// Reinterpret a flat vector as an image; no arithmetic.
    Reshape { channels: usize, height: usize, width: usize },
    BatchNorm,
    Relu,
    Softmax,
    Softplus,
    Sigmoid,
    Linear,
}

impl LayerSpec {
    /// Output nonlinearities that terminate a head.
    pub fn is_output(&self) -> bool {
        matches!(self, LayerSpec::Softmax | LayerSpec::Softplus | LayerSpec::Sigmoid | LayerSpec::Linear)
    }

    /// Shape produced from `input`, or a configuration error if incompatible.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input.size() != inputs {
                    return Err(NnError::Config(format!(
                        "dense expects {inputs} inputs but receives {input}"
                    )));
                }
                Ok(Shape::Flat(outputs))
            }
            LayerSpec::Conv { filters, kernel, stride, pad } => {
                let Shape::Image { height, width, .. } = input else {
                    return Err(NnError::Config(format!("conv needs an image input, got {input}")));
                };
                if height + 2 * pad < kernel || width + 2 * pad < kernel {
                    return Err(NnError::Config(format!("conv kernel {kernel} larger than padded input {input}")));
                }
                Ok(Shape::Image {
                    channels: filters,
                    height: (height + 2 * pad - kernel) / stride + 1,
                    width: (width + 2 * pad - kernel) / stride + 1,
                })
            }
            LayerSpec::Deconv { filters, kernel, stride, pad } => {
                let Shape::Image { height, width, .. } = input else {
                    return Err(NnError::Config(format!("deconv needs an image input, got {input}")));
                };
                let h = (height - 1) * stride + kernel;
                let w = (width - 1) * stride + kernel;
                if h <= 2 * pad || w <= 2 * pad {
                    return Err(NnError::Config(format!("deconv padding {pad} consumes the output")));
                }
                Ok(Shape::Image { channels: filters, height: h - 2 * pad, width: w - 2 * pad })
            }
            LayerSpec::Reshape { channels, height, width } => {
                if channels * height * width != input.size() {
                    return Err(NnError::Config(format!(
                        "reshape to {channels}x{height}x{width} from {input}"
                    )));
                }
                Ok(Shape::Image { channels, height, width })
            }
            _ => Ok(input),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense {inputs} {outputs}"),
            LayerSpec::Conv { filters, kernel, stride, pad } => write!(f, "conv {filters} {kernel} {stride} {pad}"),
            LayerSpec::Deconv { filters, kernel, stride, pad } => {
                write!(f, "deconv {filters} {kernel} {stride} {pad}")
            }
            LayerSpec::Reshape { channels, height, width } => write!(f, "reshape {channels}x{height}x{width}"),
            LayerSpec::BatchNorm => f.write_str("batchnorm"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Softmax => f.write_str("softmax"),
            LayerSpec::Softplus => f.write_str("softplus"),
            LayerSpec::Sigmoid => f.write_str("sigmoid"),
            LayerSpec::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        let toks: Vec<&str> = s.split_whitespace().collect();
        let bad = || NnError::Config(format!("bad layer `{s}`"));
        let nums = |from: usize| -> Result<Vec<usize>> {
            toks[from..].iter().map(|t| t.parse::<usize>().map_err(|_| bad())).collect()
        };
        let layer = match toks.first().copied() {
            Some("dense") => match nums(1)?.as_slice() {
                [i, o] => LayerSpec::Dense { inputs: *i, outputs: *o },
                _ => return Err(bad()),
            },
            Some(kind @ ("conv" | "deconv")) => match nums(1)?.as_slice() {
                [f, k, st, p] if kind == "conv" => LayerSpec::Conv { filters: *f, kernel: *k, stride: *st, pad: *p },
                [f, k, st, p] => LayerSpec::Deconv { filters: *f, kernel: *k, stride: *st, pad: *p },
                _ => return Err(bad()),
            },
            Some("reshape") if toks.len() == 2 => match toks[1].parse::<Shape>()? {
                Shape::Image { channels, height, width } => LayerSpec::Reshape { channels, height, width },
                Shape::Flat(_) => return Err(bad()),
            },
            Some("batchnorm") => LayerSpec::BatchNorm,
            Some("relu") => LayerSpec::Relu,
            Some("softmax") => LayerSpec::Softmax,
            Some("softplus") => LayerSpec::Softplus,
            Some("sigmoid") => LayerSpec::Sigmoid,
            Some("linear") => LayerSpec::Linear,
            _ => return Err(bad()),
        };
        let arity = match layer {
            LayerSpec::Dense { .. } => 3,
            LayerSpec::Conv { .. } | LayerSpec::Deconv { .. } => 5,
            LayerSpec::Reshape { .. } => 2,
            _ => 1,
        };
        if toks.len() != arity {
            return Err(bad());
        }
        Ok(layer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { input, layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-layer output shapes after checking that the layers compose.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = l.output_shape(cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.size() == 0 {
            return Err(NnError::Config("zero-sized input".into()));
        }
        for l in &self.layers {
            let zero = match *l {
                LayerSpec::Dense { inputs, outputs } => inputs == 0 || outputs == 0,
                LayerSpec::Conv { filters, kernel, stride, .. } | LayerSpec::Deconv { filters, kernel, stride, .. } => {
                    filters == 0 || kernel == 0 || stride == 0
                }
                LayerSpec::Reshape { channels, height, width } => channels * height * width == 0,
                _ => false,
            };
            if zero {
                return Err(NnError::Config(format!("layer `{l}` has a zero dimension")));
            }
        }
        let outputs = self.layers.iter().filter(|l| l.is_output()).count();
        if outputs > 1 || (outputs == 1 && !self.layers.last().is_some_and(LayerSpec::is_output)) {
            return Err(NnError::Config(format!(
                "a net may end in at most one output nonlinearity, found {outputs} in `{self}`"
            )));
        }
        self.shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Shape {
        self.shapes().ok().and_then(|s| s.last().copied()).unwrap_or(self.input)
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input {}", self.input)?;
        for l in &self.layers {
            write!(f, " | {l}")?;
        }
        Ok(())
    }
}

impl FromStr for NetSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('|').map(str::trim);
        let head = parts.next().unwrap_or_default();
        let input = head
            .strip_prefix("input ")
            .ok_or_else(|| NnError::Config(format!("net spec must start with `input`: `{s}`")))?
            .parse::<Shape>()?;
        let layers = parts.map(str::parse).collect::<Result<Vec<LayerSpec>>>()?;
        NetSpec::new(input, layers)
    }
}
