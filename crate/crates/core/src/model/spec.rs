use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Four conv3x3 -> ReLU -> maxpool2 blocks and a dense classifier.
    Conv4Tiny,
    /// Two ReLU hidden layers and a dense classifier.
    MlpTiny,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Conv4Tiny => "conv4-tiny",
            Architecture::MlpTiny => "mlp-tiny",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv4-tiny" => Ok(Architecture::Conv4Tiny),
            "mlp-tiny" => Ok(Architecture::MlpTiny),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        }
    }
}

/// Shape and role of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub layer: String,
    pub kind: ParamKind,
    pub classifier: bool,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights of non-classifier layers; the only entries pruning may touch.
    pub fn is_prunable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.classifier
    }
}

/// Topology descriptor. `input_shape` is `[d]` for the MLP and `[c, h, w]`
/// for the conv net; `widths` holds the filters of each of the four conv
/// blocks or the units of the two hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub arch: Architecture,
    pub input_shape: Vec<usize>,
    pub outputs: usize,
    pub widths: Vec<usize>,
}

impl NetworkSpec {
    pub fn conv4_tiny(in_channels: usize, size: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::Conv4Tiny,
            input_shape: vec![in_channels, size, size],
            outputs: classes,
            widths: vec![8; 4],
        }
    }

    pub fn mlp_tiny(input_dim: usize, outputs: usize) -> Self {
        Self {
            arch: Architecture::MlpTiny,
            input_shape: vec![input_dim],
            outputs,
            widths: vec![40; 2],
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.outputs == 0 {
            return bad("network needs at least one output".into());
        }
        if self.widths.contains(&0) || self.input_shape.contains(&0) {
            return bad(format!("zero extent in {self}"));
        }
        match self.arch {
            Architecture::Conv4Tiny => {
                if self.input_shape.len() != 3 {
                    return bad(format!("conv4-tiny needs [c,h,w] input, got {:?}", self.input_shape));
                }
                if self.widths.len() != 4 {
                    return bad(format!("conv4-tiny needs 4 widths, got {}", self.widths.len()));
                }
            }
            Architecture::MlpTiny => {
                if self.input_shape.len() != 1 {
                    return bad(format!("mlp-tiny needs [d] input, got {:?}", self.input_shape));
                }
                if self.widths.len() != 2 {
                    return bad(format!("mlp-tiny needs 2 widths, got {}", self.widths.len()));
                }
            }
        }
        Ok(())
    }

    /// Spatial extent after the four ceil-mode pools.
    fn pooled_extent(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 0..4 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Features entering the classifier layer.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Architecture::Conv4Tiny => {
                let (h, w) = self.pooled_extent();
                self.widths[3] * h * w
            }
            Architecture::MlpTiny => self.widths[1],
        }
    }

    /// Every parameter tensor in canonical order.
    pub fn layout(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let mut push_layer = |layer: String, weight: Vec<usize>, fan_in: usize, units: usize, classifier| {
            out.push(ParamShape {
                layer: layer.clone(),
                kind: ParamKind::Weight,
                classifier,
                shape: weight,
                fan_in,
            });
            out.push(ParamShape {
                layer,
                kind: ParamKind::Bias,
                classifier,
                shape: vec![units],
                fan_in,
            });
        };
        match self.arch {
            Architecture::Conv4Tiny => {
                let mut c_in = self.input_shape[0];
                for (i, &c_out) in self.widths.iter().enumerate() {
                    push_layer(
                        format!("conv{}", i + 1),
                        vec![c_out, c_in, 3, 3],
                        c_in * 9,
                        c_out,
                        false,
                    );
                    c_in = c_out;
                }
            }
            Architecture::MlpTiny => {
                let mut d_in = self.input_shape[0];
                for (i, &units) in self.widths.iter().enumerate() {
                    push_layer(format!("hidden{}", i + 1), vec![d_in, units], d_in, units, false);
                    d_in = units;
                }
            }
        }
        let feat = self.feature_dim();
        push_layer("classifier".into(), vec![feat, self.outputs], feat, self.outputs, true);
        out
    }

    pub fn prunable_len(&self) -> usize {
        self.layout().iter().filter(|p| p.is_prunable()).map(|p| p.len()).sum()
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Compact single-line form, e.g. `mlp-tiny;input=8;outputs=5;widths=40,40`.
impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{};input={};outputs={};widths={}",
            self.arch,
            join(&self.input_shape),
            self.outputs,
            join(&self.widths)
        )
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';');
        let arch: Architecture = parts.next().unwrap_or_default().parse()?;
        let (mut input, mut outputs, mut widths) = (None, None, None);
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad network field `{part}`")))?;
            match key {
                "input" => input = Some(parse_list(value)?),
                "outputs" => outputs = Some(parse_usize(value)?),
                "widths" => widths = Some(parse_list(value)?),
                other => return Err(Error::Config(format!("unknown network field `{other}`"))),
            }
        }
        let spec = NetworkSpec {
            arch,
            input_shape: input.ok_or_else(|| Error::Config("network spec missing input".into()))?,
            outputs: outputs.ok_or_else(|| Error::Config("network spec missing outputs".into()))?,
            widths: widths.ok_or_else(|| Error::Config("network spec missing widths".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("expected an integer, got `{s}`")))
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(parse_usize).collect()
}
