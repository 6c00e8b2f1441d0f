//! Lottery-ticket magnitude pruning.
//!
//! Selection is rank based: with `n` prunable weights and percentage `p`,
//! exactly `floor(p * n / 100)` weights with the smallest magnitudes are
//! removed, ties broken by flat-view index. Classifier weights and all
//! biases are exempt.

mod mask;

pub use mask::{Coverage, Mask, MaskLayer, Scope};

use crate::error::{Error, Result};
use crate::model::{ParamSet, Stage};

/// Magnitude cut for one group of prunable weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cut {
    /// The `prune_count`-th smallest magnitude, or `-inf` when nothing is pruned.
    pub magnitude: f32,
    pub prune_count: usize,
    pub len: usize,
}

/// One cut for global scope, one per prunable layer otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub percent: f64,
    pub scope: Scope,
    pub cuts: Vec<Cut>,
}

/// `floor(p * n / 100)`.
pub fn prune_count(percent: f64, n: usize) -> usize {
    ((percent * n as f64) / 100.0).floor() as usize
}

fn check_percent(percent: f64) -> Result<()> {
    if !(0.0..100.0).contains(&percent) {
        return Err(Error::Config(format!("pruning percentage {percent} outside [0, 100)")));
    }
    Ok(())
}

/// Magnitudes of each pruning group, in flat-view order.
fn groups(params: &ParamSet, scope: Scope) -> Vec<Vec<f32>> {
    match scope {
        Scope::Global => vec![params.flatten_prunable().iter().map(f32::abs).collect()],
        Scope::PerLayer => params
            .entries()
            .iter()
            .filter(|p| p.is_prunable())
            .map(|p| p.tensor.values().iter().map(|v| v.abs()).collect())
            .collect(),
    }
}

/// Indices of `mags` sorted by (magnitude, index).
fn rank_order(mags: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_by(|&a, &b| mags[a].total_cmp(&mags[b]).then(a.cmp(&b)));
    order
}

pub fn compute_threshold(params: &ParamSet, percent: f64, scope: Scope) -> Result<Threshold> {
    check_percent(percent)?;
    let cuts = groups(params, scope)
        .into_iter()
        .map(|mags| {
            let count = prune_count(percent, mags.len());
            let magnitude = if count == 0 {
                f32::NEG_INFINITY
            } else {
                mags[rank_order(&mags)[count - 1]]
            };
            Cut {
                magnitude,
                prune_count: count,
                len: mags.len(),
            }
        })
        .collect();
    Ok(Threshold { percent, scope, cuts })
}

/// Survivor bits of one group: everything strictly below the cut is pruned,
/// then entries equal to it in index order until the count is met.
fn group_bits(mags: &[f32], cut: &Cut) -> Result<Vec<bool>> {
    if mags.len() != cut.len {
        return Err(Error::Alignment(format!(
            "threshold was computed over {} weights, got {}",
            cut.len,
            mags.len()
        )));
    }
    let mut bits = vec![true; mags.len()];
    let mut pruned = 0;
    for (b, &m) in bits.iter_mut().zip(mags) {
        if m < cut.magnitude {
            *b = false;
            pruned += 1;
        }
    }
    for (b, &m) in bits.iter_mut().zip(mags) {
        if pruned == cut.prune_count {
            break;
        }
        if m == cut.magnitude {
            *b = false;
            pruned += 1;
        }
    }
    if pruned != cut.prune_count {
        return Err(Error::Alignment(format!(
            "threshold selects {pruned} weights, expected {}",
            cut.prune_count
        )));
    }
    Ok(bits)
}

pub fn make_mask(params: &ParamSet, threshold: &Threshold) -> Result<Mask> {
    let groups = groups(params, threshold.scope);
    if groups.len() != threshold.cuts.len() {
        return Err(Error::Alignment(format!(
            "threshold has {} cuts for {} groups",
            threshold.cuts.len(),
            groups.len()
        )));
    }
    let mut flat = Vec::new();
    for (mags, cut) in groups.iter().zip(&threshold.cuts) {
        flat.extend(group_bits(mags, cut)?);
    }
    let mut flat = flat.into_iter();
    let layers = params
        .entries()
        .iter()
        .map(|p| {
            let (coverage, bits) = if p.is_prunable() {
                (Coverage::Prunable, flat.by_ref().take(p.tensor.len()).collect())
            } else {
                (Coverage::Exempt, vec![true; p.tensor.len()])
            };
            MaskLayer::new(p.layer.clone(), p.kind, coverage, bits)
        })
        .collect();
    Ok(Mask::from_layers(layers, threshold.percent, threshold.scope, false))
}

/// Threshold and mask in one call.
pub fn prune(params: &ParamSet, percent: f64, scope: Scope) -> Result<Mask> {
    make_mask(params, &compute_threshold(params, percent, scope)?)
}

/// Rewinds to the initial weights under `mask`: survivors take their
/// initial values, pruned coordinates become exactly zero.
pub fn apply_mask_reinit(initial: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    if initial.stage != Stage::Initial {
        return Err(Error::PipelineOrder {
            expected: Stage::Initial.to_string(),
            found: initial.stage,
        });
    }
    mask.check_aligned(initial)?;
    let mut out = initial.clone().with_stage(Stage::Pruned);
    for (param, layer) in out.entries_mut().iter_mut().zip(mask.layers()) {
        for (v, &open) in param.tensor.values_mut().iter_mut().zip(layer.bits()) {
            if !open {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Opens exactly the pruned coordinates; exempt layers are closed.
pub fn complement(mask: &Mask) -> Mask {
    let layers = mask
        .layers()
        .iter()
        .map(|l| {
            let bits = match l.coverage {
                Coverage::Prunable => l.bits().iter().map(|b| !b).collect(),
                Coverage::Exempt => vec![false; l.len()],
            };
            MaskLayer::new(l.layer.clone(), l.kind, l.coverage, bits)
        })
        .collect();
    Mask::from_layers(layers, mask.percent(), mask.scope(), !mask.is_complement())
}
