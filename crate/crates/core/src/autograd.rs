//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards is a valid
//! reverse topological order. Parameters enter the tape through
//! [`Graph::param`] and come back out of [`Graph::backward`] keyed by name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Receives the output gradient, the parent values and the output value;
/// returns one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and reports them.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
    mode: Mode,
    bn_observations: Vec<BnObservation>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: Vec::new(),
            mode,
            bn_observations: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Parameters whose name starts with any of `prefixes` enter the tape as
    /// constants and receive an exactly-zero gradient.
    pub fn freeze(&mut self, prefixes: &[&str]) {
        self.frozen.extend(prefixes.iter().map(|p| p.to_string()));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Load a named parameter from `store` (cached per graph).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Vec::new(), None, !frozen);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn record_bn(&mut self, obs: BnObservation) {
        self.bn_observations.push(obs);
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    /// Record an operation. `backward` is dropped when no parent needs a
    /// gradient.
    pub fn op(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents: Vec<usize> = parents.iter().map(|p| p.0).collect();
        if requires_grad {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for i in (0..=output.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(backward) = &node.backward {
                let parent_values: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = backward(&grad, &parent_values, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "grad shape");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // Leaves keep their gradient; interior gradients are dropped.
            if node.backward.is_none() {
                grads[i] = Some(grad);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self
                .params
                .values()
                .map(|v| (v.0, self.nodes[v.0].value.shape().to_vec()))
                .collect(),
        })
    }
}

/// Gradients of leaves after a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
    shapes: BTreeMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter touched by the graph; zeros where the
    /// output does not depend on the parameter (or it was frozen).
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[&v.0]));
                (name.clone(), g)
            })
            .collect()
    }
}
