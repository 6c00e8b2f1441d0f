//! Network topologies, parameter sets and the differentiable task loss.

mod params;
mod spec;

pub use params::{init_params, Gradients, Param, ParamSet, PrunableView, PrunableViewMut, Stage};
pub(crate) use spec::parse_list;
pub use spec::{Architecture, NetworkSpec, ParamKind, ParamShape};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Regression predictions within this absolute error count as correct.
pub const REGRESSION_TOLERANCE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `[n, outputs]` regression targets.
    Values(Vec<f32>),
}

/// A labeled mini-batch; `inputs` is `[n, ..input_shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A recorded forward pass. `params[i]` is the graph leaf of parameter entry `i`.
pub struct Forward {
    pub graph: Graph,
    pub params: Vec<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
}

impl Forward {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    /// Parameter gradients after `graph.backward` has run.
    pub fn gradients(&self) -> crate::model::Gradients {
        Gradients {
            entries: self.params.iter().map(|&id| self.graph.grad(id).to_vec()).collect(),
        }
    }
}

/// Runs the network on a batch, keeping the graph for a later backward pass.
pub fn predict(params: &ParamSet, inputs: &Tensor) -> Result<Forward> {
    let spec = params.spec();
    let shape = inputs.shape();
    if shape.len() != spec.input_shape.len() + 1 || shape[1..] != spec.input_shape[..] {
        return Err(Error::Dimension {
            op: "predict",
            lhs: shape.to_vec(),
            rhs: spec.input_shape.clone(),
        });
    }
    let batch = shape[0];
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.entries().iter().map(|p| graph.leaf(p.tensor.clone())).collect();
    let mut h = graph.leaf(inputs.clone());
    let layers = ids.len() / 2;
    match spec.arch {
        Architecture::Conv4Tiny => {
            for l in 0..layers - 1 {
                h = graph.conv2d(h, ids[2 * l], ids[2 * l + 1])?;
                h = graph.relu(h)?;
                h = graph.maxpool2(h)?;
            }
            h = graph.reshape(h, vec![batch, spec.feature_dim()])?;
        }
        Architecture::MlpTiny => {
            for l in 0..layers - 1 {
                h = graph.matmul(h, ids[2 * l])?;
                h = graph.add_bias(h, ids[2 * l + 1])?;
                h = graph.relu(h)?;
            }
        }
    }
    let c = layers - 1;
    h = graph.matmul(h, ids[2 * c])?;
    let logits = graph.add_bias(h, ids[2 * c + 1])?;
    Ok(Forward {
        graph,
        params: ids,
        logits,
        loss: None,
    })
}

/// Softmax cross-entropy for class targets, MSE for value targets.
pub fn task_loss(params: &ParamSet, batch: &Batch) -> Result<Forward> {
    let mut fwd = predict(params, &batch.inputs)?;
    let loss = match &batch.targets {
        Targets::Classes(labels) => fwd.graph.softmax_cross_entropy(fwd.logits, labels)?,
        Targets::Values(values) => fwd.graph.mse(fwd.logits, values)?,
    };
    fwd.loss = Some(loss);
    Ok(fwd)
}

/// Loss value, parameter gradients and logits from one forward/backward pass.
pub fn loss_and_gradients(params: &ParamSet, batch: &Batch) -> Result<(f32, Gradients, Tensor)> {
    let mut fwd = task_loss(params, batch)?;
    let loss = fwd.loss.expect("task_loss sets the loss node");
    fwd.graph.backward(loss)?;
    let value = fwd.graph.value(loss).item();
    Ok((value, fwd.gradients(), fwd.logits().clone()))
}

/// Row-wise argmax, first maximum on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .values()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// Fraction of correct predictions in `[0, 1]`.
pub fn accuracy(logits: &Tensor, targets: &Targets) -> f64 {
    match targets {
        Targets::Classes(labels) => {
            let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
            hits as f64 / labels.len().max(1) as f64
        }
        Targets::Values(values) => {
            let hits = logits
                .values()
                .iter()
                .zip(values)
                .filter(|(p, t)| (*p - *t).abs() <= REGRESSION_TOLERANCE)
                .count();
            hits as f64 / values.len().max(1) as f64
        }
    }
}
