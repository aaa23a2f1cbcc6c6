//! Reverse-mode automatic differentiation over a closed set of log-space
//! operations.
//!
//! A [`Tape`] records nodes in evaluation order. Because the tape is
//! append-only, every node's inputs precede it and a single reverse sweep in
//! [`Tape::backward`] propagates adjoints. Parameter leaves are keyed by
//! [`ParamId`] and recorded at most once per tape, so each parameter receives
//! exactly one gradient.
//!
//! ```
//! use clickgrad::autodiff::{ParamId, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.parameter(ParamId(0), 0.0);
//! let y = tape.log_sigmoid(x);
//! let grads = tape.backward(y).unwrap();
//! assert!((grads.get(ParamId(0)) - 0.5).abs() < 1e-15);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::logspace::{
    log1m_sigmoid_unchecked, log1mexp_unchecked, log_sigmoid_unchecked, log_sum_exp_unchecked,
};

/// Largest positive value accepted as a log-probability. Larger inputs to
/// `log1mexp` are rejected; anything in `(0, tolerance]` is rounding noise
/// and is treated as `log 1`.
pub const LOG_PROB_TOLERANCE: f64 = 1e-12;

/// Index of a scalar parameter in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Constant(f64),
    Parameter(ParamId, f64),
    Add,
    Scale(f64),
    Negate,
    LogSigmoid,
    Log1mSigmoid,
    LogSumExp,
    Log1mexp,
}

impl Op {
    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Constant(_) | Op::Parameter(..) => n == 0,
            Op::Add | Op::LogSumExp => n >= 1,
            _ => n == 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    start: u32,
    len: u32,
    value: f64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    leaves: HashMap<ParamId, NodeId>,
    scratch: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes so the tape can be reused for the next batch.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.inputs.clear();
        self.leaves.clear();
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.index()].value
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id.index()].op
    }

    pub fn node_inputs(&self, id: NodeId) -> &[NodeId] {
        let n = &self.nodes[id.index()];
        &self.inputs[n.start as usize..(n.start + n.len) as usize]
    }

    /// Checked entry point: validates input ids, arity and domain, then
    /// appends the node.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|i| i.index() >= self.nodes.len()) {
            return Err(Error::usage(format!("unknown input node {}", bad.0)));
        }
        if !op.arity_ok(inputs.len()) {
            return Err(Error::usage(format!(
                "{op:?} does not take {} inputs",
                inputs.len()
            )));
        }
        if let Op::Parameter(id, _) = op {
            if let Some(&existing) = self.leaves.get(&id) {
                return Ok(existing);
            }
        }
        let in_values = inputs.iter().map(|&i| self.value(i));
        let nan_input = in_values.clone().any(f64::is_nan);
        if nan_input {
            return Err(Error::usage(format!("{op:?} input is NaN")));
        }
        if op == Op::Log1mexp {
            let a = self.value(inputs[0]);
            if a > LOG_PROB_TOLERANCE {
                return Err(Error::usage(format!("log1mexp input {a} is positive")));
            }
        }
        Ok(self.push(op, inputs))
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        let value = match op {
            Op::Constant(v) | Op::Parameter(_, v) => v,
            Op::Add => inputs.iter().map(|&i| self.value(i)).sum(),
            Op::Scale(c) => c * self.value(inputs[0]),
            Op::Negate => -self.value(inputs[0]),
            Op::LogSigmoid => log_sigmoid_unchecked(self.value(inputs[0])),
            Op::Log1mSigmoid => log1m_sigmoid_unchecked(self.value(inputs[0])),
            Op::LogSumExp => {
                self.scratch.clear();
                for &i in inputs {
                    self.scratch.push(self.nodes[i.index()].value);
                }
                log_sum_exp_unchecked(&self.scratch)
            }
            Op::Log1mexp => log1mexp_unchecked(self.value(inputs[0]).min(0.0)),
        };
        let id = NodeId(self.nodes.len() as u32);
        let start = self.inputs.len() as u32;
        self.inputs.extend_from_slice(inputs);
        self.nodes.push(Node {
            op,
            start,
            len: inputs.len() as u32,
            value,
        });
        if let Op::Parameter(pid, _) = op {
            self.leaves.insert(pid, id);
        }
        id
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Op::Constant(value), &[])
    }

    /// Leaf for parameter `id`. Recording the same parameter twice returns
    /// the existing leaf.
    pub fn parameter(&mut self, id: ParamId, value: f64) -> NodeId {
        if let Some(&existing) = self.leaves.get(&id) {
            return existing;
        }
        self.push(Op::Parameter(id, value), &[])
    }

    pub fn add(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "add of no terms");
        if terms.len() == 1 {
            return terms[0];
        }
        self.push(Op::Add, terms)
    }

    pub fn add2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), &[x])
    }

    pub fn negate(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Negate, &[x])
    }

    /// `a - b`, recorded as an add of a negation.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.negate(b);
        self.add2(a, nb)
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSigmoid, &[x])
    }

    pub fn log1m_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log1mSigmoid, &[x])
    }

    pub fn log_sum_exp(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "log_sum_exp of no terms");
        if terms.len() == 1 {
            return terms[0];
        }
        self.push(Op::LogSumExp, terms)
    }

    pub fn log1mexp(&mut self, x: NodeId) -> Result<NodeId> {
        let a = self.value(x);
        if a > LOG_PROB_TOLERANCE {
            return Err(Error::Numerical(format!("log1mexp input {a} is positive")));
        }
        Ok(self.push(Op::Log1mexp, &[x]))
    }

    /// Propagates adjoints from `loss` in reverse tape order and returns the
    /// gradient of every parameter leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.index() >= n {
            return Err(Error::usage(format!("unknown loss node {}", loss.0)));
        }
        let mut adjoint = vec![0.0; n];
        adjoint[loss.index()] = 1.0;
        for idx in (0..=loss.index()).rev() {
            let g = adjoint[idx];
            if g == 0.0 {
                continue;
            }
            let node = self.nodes[idx];
            let inputs = &self.inputs[node.start as usize..(node.start + node.len) as usize];
            for &input in inputs {
                if input.index() >= idx {
                    return Err(Error::Internal(format!(
                        "node {idx} reads later node {}",
                        input.0
                    )));
                }
            }
            match node.op {
                Op::Constant(_) | Op::Parameter(..) => {}
                Op::Add => {
                    for &i in inputs {
                        adjoint[i.index()] += g;
                    }
                }
                Op::Scale(c) => adjoint[inputs[0].index()] += c * g,
                Op::Negate => adjoint[inputs[0].index()] -= g,
                Op::LogSigmoid => {
                    let x = self.nodes[inputs[0].index()].value;
                    adjoint[inputs[0].index()] += g * log_sigmoid_unchecked(-x).exp();
                }
                Op::Log1mSigmoid => {
                    let x = self.nodes[inputs[0].index()].value;
                    adjoint[inputs[0].index()] -= g * log_sigmoid_unchecked(x).exp();
                }
                Op::LogSumExp => {
                    for &i in inputs {
                        let a = self.nodes[i.index()].value;
                        adjoint[i.index()] += g * (a - node.value).exp();
                    }
                }
                Op::Log1mexp => {
                    let a = self.nodes[inputs[0].index()].value.min(0.0);
                    adjoint[inputs[0].index()] -= g * (a - node.value).exp();
                }
            }
        }
        let mut entries: Vec<(ParamId, f64)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Parameter(id, _) => Some((id, adjoint[i])),
                _ => None,
            })
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        Ok(Gradients { entries })
    }
}

/// Gradients of the parameters that appear as leaves on a tape, sorted by
/// parameter id. Parameters absent from the tape have gradient zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: Vec<(ParamId, f64)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> f64 {
        self.entries
            .binary_search_by_key(&id, |(p, _)| *p)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scale(&mut self, c: f64) {
        for (_, g) in &mut self.entries {
            *g *= c;
        }
    }
}
