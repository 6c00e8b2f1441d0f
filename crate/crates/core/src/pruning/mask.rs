use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coverage {
    Prunable,
    Exempt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Global,
    PerLayer,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Global => "global",
            Scope::PerLayer => "per-layer",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Scope::Global),
            "per-layer" => Ok(Scope::PerLayer),
            other => Err(Error::Config(format!("unknown pruning scope `{other}`"))),
        }
    }
}

/// One bit per entry of the matching parameter tensor; `true` = open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLayer {
    pub layer: String,
    pub kind: ParamKind,
    pub coverage: Coverage,
    bits: Vec<bool>,
}

impl MaskLayer {
    pub fn new(layer: String, kind: ParamKind, coverage: Coverage, bits: Vec<bool>) -> Self {
        Self {
            layer,
            kind,
            coverage,
            bits,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn name(&self) -> String {
        format!("{}.{}", self.layer, self.kind.as_str())
    }
}

/// Zero-one mask aligned one-to-one with a `ParamSet`'s entries.
///
/// A pruning mask keeps exempt layers (classifier, biases) all-ones; its
/// complement closes them and opens exactly the pruned coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    layers: Vec<MaskLayer>,
    percent: f64,
    scope: Scope,
    complemented: bool,
}

impl Mask {
    pub fn from_layers(layers: Vec<MaskLayer>, percent: f64, scope: Scope, complemented: bool) -> Self {
        Self {
            layers,
            percent,
            scope,
            complemented,
        }
    }

    fn build(params: &ParamSet, mut open: impl FnMut(&crate::model::Param) -> bool) -> Self {
        let layers = params
            .entries()
            .iter()
            .map(|p| {
                let coverage = if p.is_prunable() {
                    Coverage::Prunable
                } else {
                    Coverage::Exempt
                };
                MaskLayer::new(p.layer.clone(), p.kind, coverage, vec![open(p); p.tensor.len()])
            })
            .collect();
        Self::from_layers(layers, 0.0, Scope::Global, false)
    }

    /// Every coordinate open.
    pub fn ones(params: &ParamSet) -> Self {
        Self::build(params, |_| true)
    }

    /// Only the classifier weight and bias open.
    pub fn classifier_only(params: &ParamSet) -> Self {
        Self::build(params, |p| p.classifier)
    }

    pub fn layers(&self) -> &[MaskLayer] {
        &self.layers
    }

    pub fn percent(&self) -> f64 {
        self.percent
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn is_complement(&self) -> bool {
        self.complemented
    }

    pub fn check_aligned(&self, params: &ParamSet) -> Result<()> {
        if self.layers.len() != params.entries().len() {
            return Err(Error::Alignment(format!(
                "mask has {} layers, parameters have {}",
                self.layers.len(),
                params.entries().len()
            )));
        }
        for (m, p) in self.layers.iter().zip(params.entries()) {
            if m.layer != p.layer || m.kind != p.kind || m.bits.len() != p.tensor.len() {
                return Err(Error::Alignment(format!(
                    "mask entry {} ({}) does not match parameter {} ({})",
                    m.name(),
                    m.bits.len(),
                    p.name(),
                    p.tensor.len()
                )));
            }
        }
        Ok(())
    }

    fn prunable_bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers
            .iter()
            .filter(|l| l.coverage == Coverage::Prunable)
            .flat_map(|l| l.bits.iter().copied())
    }

    pub fn prunable_len(&self) -> usize {
        self.prunable_bits().count()
    }

    /// Closed (zero) entries among prunable coordinates.
    pub fn prunable_zeros(&self) -> usize {
        self.prunable_bits().filter(|b| !b).count()
    }

    /// Fraction of prunable coordinates that are open.
    pub fn prunable_density(&self) -> f64 {
        let n = self.prunable_len();
        (n - self.prunable_zeros()) as f64 / n.max(1) as f64
    }

    /// Open coordinates over every layer.
    pub fn open_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.bits.iter()).filter(|&&b| b).count()
    }

    /// Whether coordinate `j` of entry `entry` is open.
    pub fn is_open(&self, entry: usize, j: usize) -> bool {
        self.layers[entry].bits[j]
    }
}
