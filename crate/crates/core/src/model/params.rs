use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{NetworkSpec, ParamKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pruning::Mask;

/// Where a parameter set sits in the pretrain -> prune -> retrain -> test pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Initial,
    Pretrained,
    Adapted,
    Pruned,
    Retrained,
    TestAdapted,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Pretrained => "pretrained",
            Stage::Adapted => "adapted",
            Stage::Pruned => "pruned",
            Stage::Retrained => "retrained",
            Stage::TestAdapted => "test-adapted",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "initial" => Stage::Initial,
            "pretrained" => Stage::Pretrained,
            "adapted" => Stage::Adapted,
            "pruned" => Stage::Pruned,
            "retrained" => Stage::Retrained,
            "test-adapted" => Stage::TestAdapted,
            other => return Err(Error::Format(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub layer: String,
    pub kind: ParamKind,
    pub classifier: bool,
    pub tensor: Tensor,
}

impl Param {
    pub fn is_prunable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.classifier
    }

    pub fn name(&self) -> String {
        format!("{}.{}", self.layer, self.kind.as_str())
    }
}

/// Ordered parameter tensors of one network, tagged with a pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    spec: NetworkSpec,
    pub stage: Stage,
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let entries = spec
            .layout()
            .into_iter()
            .map(|p| {
                Ok(Param {
                    tensor: Tensor::zeros(p.shape.clone())?,
                    layer: p.layer,
                    kind: p.kind,
                    classifier: p.classifier,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            stage: Stage::Initial,
            entries,
        })
    }

    /// Builds a set from raw value buffers in layout order.
    pub fn from_values(spec: &NetworkSpec, stage: Stage, values: Vec<Vec<f32>>) -> Result<Self> {
        let mut set = Self::zeros(spec)?;
        if values.len() != set.entries.len() {
            return Err(Error::Alignment(format!(
                "expected {} tensors, got {}",
                set.entries.len(),
                values.len()
            )));
        }
        for (entry, v) in set.entries.iter_mut().zip(values) {
            entry.tensor = Tensor::new(entry.tensor.shape().to_vec(), v)?;
        }
        set.stage = stage;
        Ok(set)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn get(&self, layer: &str, kind: ParamKind) -> Option<&Param> {
        self.entries.iter().find(|p| p.layer == layer && p.kind == kind)
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    /// Bitwise equality of every value (stage tags ignored).
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.layer == b.layer && a.kind == b.kind && a.tensor.bits_eq(&b.tensor))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.tensor.is_finite())
    }

    /// Read-only flat view over every non-classifier weight, layer order then row-major.
    pub fn flatten_prunable(&self) -> PrunableView<'_> {
        PrunableView::new(
            self.entries
                .iter()
                .filter(|p| p.is_prunable())
                .map(|p| p.tensor.values())
                .collect(),
        )
    }

    /// Mutable flat view; writes land in this set.
    pub fn flatten_prunable_mut(&mut self) -> PrunableViewMut<'_> {
        PrunableViewMut::new(
            self.entries
                .iter_mut()
                .filter(|p| p.is_prunable())
                .map(|p| p.tensor.values_mut())
                .collect(),
        )
    }

    /// Fraction of exactly-zero prunable weights.
    pub fn prunable_sparsity(&self) -> f64 {
        let view = self.flatten_prunable();
        let zeros = view.iter().filter(|&v| v == 0.0).count();
        zeros as f64 / view.len().max(1) as f64
    }

    /// `self -= lr * grads`, skipping coordinates whose mask bit is clear.
    pub fn descend(&mut self, grads: &Gradients, lr: f32, mask: Option<&Mask>) -> Result<()> {
        if grads.entries.len() != self.entries.len() {
            return Err(Error::Alignment("gradient/parameter count mismatch".into()));
        }
        if let Some(mask) = mask {
            mask.check_aligned(self)?;
        }
        for (idx, (param, g)) in self.entries.iter_mut().zip(&grads.entries).enumerate() {
            let values = param.tensor.values_mut();
            match mask {
                Some(mask) => {
                    let bits = mask.layers()[idx].bits();
                    for ((v, &gv), &open) in values.iter_mut().zip(g).zip(bits) {
                        if open {
                            *v -= lr * gv;
                        }
                    }
                }
                None => {
                    for (v, &gv) in values.iter_mut().zip(g) {
                        *v -= lr * gv;
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-layer L2 norm of `self - other`, weight and bias pooled.
    pub fn layer_delta_norms(&self, other: &ParamSet) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (a, b) in self.entries.iter().zip(&other.entries) {
            let sq: f64 = a
                .tensor
                .values()
                .iter()
                .zip(b.tensor.values())
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            match out.last_mut() {
                Some((name, acc)) if *name == a.layer => *acc += sq,
                _ => out.push((a.layer.clone(), sq)),
            }
        }
        out.into_iter().map(|(n, sq)| (n, sq.sqrt())).collect()
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    let mut set = ParamSet::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (param, shape) in set.entries.iter_mut().zip(spec.layout()) {
        if param.kind != ParamKind::Weight {
            continue;
        }
        let bound = (6.0 / shape.fan_in as f64).sqrt() as f32;
        for v in param.tensor.values_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(set)
}

/// Gradient buffers aligned entry-for-entry with a `ParamSet`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entries: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            entries: params.entries.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for v in self.entries.iter_mut().flatten() {
            *v *= factor;
        }
    }

    /// Zeroes every coordinate whose mask bit is clear.
    pub fn apply_mask(&mut self, mask: &Mask) {
        for (g, layer) in self.entries.iter_mut().zip(mask.layers()) {
            for (v, &open) in g.iter_mut().zip(layer.bits()) {
                if !open {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().flatten().all(|v| v.is_finite())
    }
}

fn locate(offsets: &[usize], i: usize) -> (usize, usize) {
    let part = offsets.partition_point(|&o| o <= i) - 1;
    (part, i - offsets[part])
}

fn offsets_of(lens: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    let mut out = vec![0];
    for l in lens {
        acc += l;
        out.push(acc);
    }
    out
}

pub struct PrunableView<'a> {
    parts: Vec<&'a [f32]>,
    offsets: Vec<usize>,
}

impl<'a> PrunableView<'a> {
    fn new(parts: Vec<&'a [f32]>) -> Self {
        let offsets = offsets_of(parts.iter().map(|p| p.len()));
        Self { parts, offsets }
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f32 {
        let (p, j) = locate(&self.offsets, i);
        self.parts[p][j]
    }

    pub fn iter(&self) -> impl Iterator<Item = f32> + '_ {
        self.parts.iter().flat_map(|p| p.iter().copied())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.iter().collect()
    }
}

pub struct PrunableViewMut<'a> {
    parts: Vec<&'a mut [f32]>,
    offsets: Vec<usize>,
}

impl<'a> PrunableViewMut<'a> {
    fn new(parts: Vec<&'a mut [f32]>) -> Self {
        let offsets = offsets_of(parts.iter().map(|p| p.len()));
        Self { parts, offsets }
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f32 {
        let (p, j) = locate(&self.offsets, i);
        self.parts[p][j]
    }

    pub fn set(&mut self, i: usize, value: f32) {
        let (p, j) = locate(&self.offsets, i);
        self.parts[p][j] = value;
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f32> + use<'_, 'a> {
        self.parts.iter_mut().flat_map(|p| p.iter_mut())
    }
}
