//! Static computation graph over a fixed primitive-operator set.
//!
//! A [`Graph`] is a topologically ordered list of nodes built through the
//! push methods; shapes are inferred and checked at construction time, so
//! any graph that builds successfully evaluates without shape errors.
//! Leaves are named inputs (bound at evaluation) and named parameters
//! (resolved against a [`super::params::ParamStore`]). Node ids are plain
//! indices into the node list.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Activation kinds whose pointwise derivative can be materialized as a
/// value (used when a gradient computation is itself part of a graph).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    LeakyRelu { slope: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Named input bound at evaluation time.
    Input { name: String },
    /// Named parameter resolved from the parameter store.
    Param { name: String },
    /// 2-D convolution, stride 1, zero padding. Inputs: x `[B,Cin,H,W]`,
    /// w `[Cout,Cin,kh,kw]`, b `[Cout]`.
    Conv2d { padding: usize },
    /// Adjoint of `Conv2d` as a forward op: maps an output-space tensor
    /// back to input space. Inputs: gy `[B,Cout,Ho,Wo]`, w.
    Conv2dInputGrad { padding: usize },
    /// Inputs: x `[B,in]`, w `[out,in]`, b `[out]`.
    Linear,
    /// Adjoint of `Linear` as a forward op: gy `[B,out]`, w `[out,in]` -> `[B,in]`.
    LinearInputGrad,
    /// Inputs: x `[B,C,H,W]`, gamma `[C]`, beta `[C]`, running_mean `[C]`,
    /// running_var `[C]`. Batch statistics in training mode, running
    /// statistics in eval mode.
    BatchNorm { eps: f64, momentum: f64 },
    Relu,
    LeakyRelu { slope: f64 },
    Silu,
    Tanh,
    Sigmoid,
    Softplus,
    /// Pointwise derivative of an activation, evaluated at the input and
    /// treated as constant with respect to it.
    ActGradMask { kind: ActKind },
    UpsampleNearest2x,
    AvgPool2x2,
    /// Adjoint of `AvgPool2x2`: spreads each value / 4 over a 2x2 block.
    AvgUnpool2x2,
    MaxPool2x2,
    /// `[B, ...]` -> `[B, prod(rest)]`.
    Flatten,
    Reshape { shape: Vec<usize> },
    /// Elementwise with limited broadcasting; see [`broadcast_shape`].
    Add,
    Mul,
    MulScalar { c: f64 },
    /// Concatenate along axis 1.
    ConcatChannels,
    /// `[B, ...]` -> `[B]`.
    SumPerSample,
    /// Mean over all elements -> `[1]`.
    MeanAll,
    /// Elementwise `sqrt(x + eps)`.
    SqrtEps { eps: f64 },
    /// Inputs: logits `[B,K]`, labels `[B]` (class indices) -> `[1]`.
    SoftmaxCrossEntropy,
    /// Inputs: prediction, target (same shape) -> `[1]` mean squared error.
    Mse,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Linear => "linear",
            Op::LinearInputGrad => "linear_input_grad",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Silu => "silu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::ActGradMask { .. } => "act_grad_mask",
            Op::UpsampleNearest2x => "upsample_nearest_2x",
            Op::AvgPool2x2 => "avg_pool_2x2",
            Op::AvgUnpool2x2 => "avg_unpool_2x2",
            Op::MaxPool2x2 => "max_pool_2x2",
            Op::Flatten => "flatten",
            Op::Reshape { .. } => "reshape",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MulScalar { .. } => "mul_scalar",
            Op::ConcatChannels => "concat_channels",
            Op::SumPerSample => "sum_per_sample",
            Op::MeanAll => "mean_all",
            Op::SqrtEps { .. } => "sqrt_eps",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Op::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    params: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
}

/// Broadcast of `b` onto `a` for `Add`/`Mul`. Allowed: identical shapes,
/// scalar `[1]`, per-sample `[B]`, and per-channel `[B,C]` against `[B,C,H,W]`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if b == [1] {
        return Ok(a.to_vec());
    }
    if b.len() == 1 && !a.is_empty() && a[0] == b[0] && a.len() >= 2 {
        return Ok(a.to_vec());
    }
    if b.len() == 2 && a.len() == 4 && a[0] == b[0] && a[1] == b[1] {
        return Ok(a.to_vec());
    }
    Err(Error::Shape(format!(
        "cannot broadcast {b:?} onto {a:?}"
    )))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    /// Declare (or re-reference) a named input of the given shape.
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        if let Some(&id) = self.inputs.get(name) {
            if self.nodes[id].shape != shape {
                return Err(Error::Graph(format!(
                    "input `{name}` redeclared with shape {:?}, was {:?}",
                    shape, self.nodes[id].shape
                )));
            }
            return Ok(id);
        }
        let id = self.push_node(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
            shape,
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declare (or re-reference) a named parameter of the given shape.
    /// Re-use returns the existing node so gradients accumulate.
    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id].shape != shape {
                return Err(Error::Graph(format!(
                    "param `{name}` redeclared with shape {:?}, was {:?}",
                    shape, self.nodes[id].shape
                )));
            }
            return Ok(id);
        }
        let id = self.push_node(
            Op::Param {
                name: name.to_string(),
            },
            vec![],
            shape,
        );
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn push_node(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, shape });
        id
    }

    fn arg(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::Graph(format!("node id {id} out of range")))
    }

    /// Append an op node; validates input arity and shapes and infers the
    /// output shape.
    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let shape = self.infer_shape(&op, inputs)?;
        Ok(self.push_node(op, inputs.to_vec(), shape))
    }

    fn expect_arity(&self, op: &Op, inputs: &[NodeId], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::Graph(format!(
                "{} expects {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
        Ok(())
    }

    fn infer_shape(&self, op: &Op, inputs: &[NodeId]) -> Result<Vec<usize>> {
        let err = |msg: String| Err(Error::Shape(format!("{}: {msg}", op.name())));
        match op {
            Op::Input { .. } | Op::Param { .. } => {
                Err(Error::Graph("leaves must be added via input()/param()".into()))
            }
            Op::Conv2d { padding } => {
                self.expect_arity(op, inputs, 3)?;
                let x = self.arg(inputs[0])?;
                let w = self.arg(inputs[1])?;
                let b = self.arg(inputs[2])?;
                if x.len() != 4 || w.len() != 4 || b.len() != 1 {
                    return err(format!("bad ranks x{x:?} w{w:?} b{b:?}"));
                }
                let (bsz, cin, h, wd) = (x[0], x[1], x[2], x[3]);
                let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
                if wcin != cin || b[0] != cout {
                    return err(format!("channel mismatch x{x:?} w{w:?} b{b:?}"));
                }
                let ho = (h + 2 * padding).checked_sub(kh - 1);
                let wo = (wd + 2 * padding).checked_sub(kw - 1);
                match (ho, wo) {
                    (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(vec![bsz, cout, ho, wo]),
                    _ => err(format!("kernel {kh}x{kw} too large for {h}x{wd} pad {padding}")),
                }
            }
            Op::Conv2dInputGrad { padding } => {
                self.expect_arity(op, inputs, 2)?;
                let gy = self.arg(inputs[0])?;
                let w = self.arg(inputs[1])?;
                if gy.len() != 4 || w.len() != 4 {
                    return err(format!("bad ranks gy{gy:?} w{w:?}"));
                }
                if gy[1] != w[0] {
                    return err(format!("channel mismatch gy{gy:?} w{w:?}"));
                }
                let h = (gy[2] + w[2] - 1).checked_sub(2 * padding);
                let wd = (gy[3] + w[3] - 1).checked_sub(2 * padding);
                match (h, wd) {
                    (Some(h), Some(wd)) if h > 0 && wd > 0 => Ok(vec![gy[0], w[1], h, wd]),
                    _ => err("padding exceeds reconstructed size".into()),
                }
            }
            Op::Linear => {
                self.expect_arity(op, inputs, 3)?;
                let x = self.arg(inputs[0])?;
                let w = self.arg(inputs[1])?;
                let b = self.arg(inputs[2])?;
                if x.len() != 2 || w.len() != 2 || b.len() != 1 {
                    return err(format!("bad ranks x{x:?} w{w:?} b{b:?}"));
                }
                if x[1] != w[1] || b[0] != w[0] {
                    return err(format!("dims x{x:?} w{w:?} b{b:?}"));
                }
                Ok(vec![x[0], w[0]])
            }
            Op::LinearInputGrad => {
                self.expect_arity(op, inputs, 2)?;
                let gy = self.arg(inputs[0])?;
                let w = self.arg(inputs[1])?;
                if gy.len() != 2 || w.len() != 2 || gy[1] != w[0] {
                    return err(format!("dims gy{gy:?} w{w:?}"));
                }
                Ok(vec![gy[0], w[1]])
            }
            Op::BatchNorm { .. } => {
                self.expect_arity(op, inputs, 5)?;
                let x = self.arg(inputs[0])?;
                if x.len() != 4 {
                    return err(format!("expects [B,C,H,W], got {x:?}"));
                }
                let c = x[1];
                for (i, name) in ["gamma", "beta", "running_mean", "running_var"]
                    .iter()
                    .enumerate()
                {
                    let s = self.arg(inputs[i + 1])?;
                    if s != [c] {
                        return err(format!("{name} shape {s:?}, expected [{c}]"));
                    }
                }
                Ok(x.to_vec())
            }
            Op::Relu
            | Op::LeakyRelu { .. }
            | Op::Silu
            | Op::Tanh
            | Op::Sigmoid
            | Op::Softplus
            | Op::ActGradMask { .. }
            | Op::SqrtEps { .. }
            | Op::MulScalar { .. } => {
                self.expect_arity(op, inputs, 1)?;
                Ok(self.arg(inputs[0])?.to_vec())
            }
            Op::UpsampleNearest2x => {
                self.expect_arity(op, inputs, 1)?;
                let x = self.arg(inputs[0])?;
                if x.len() != 4 {
                    return err(format!("expects [B,C,H,W], got {x:?}"));
                }
                Ok(vec![x[0], x[1], x[2] * 2, x[3] * 2])
            }
            Op::AvgPool2x2 | Op::MaxPool2x2 => {
                self.expect_arity(op, inputs, 1)?;
                let x = self.arg(inputs[0])?;
                if x.len() != 4 || x[2] % 2 != 0 || x[3] % 2 != 0 {
                    return err(format!("expects [B,C,even,even], got {x:?}"));
                }
                Ok(vec![x[0], x[1], x[2] / 2, x[3] / 2])
            }
            Op::AvgUnpool2x2 => {
                self.expect_arity(op, inputs, 1)?;
                let x = self.arg(inputs[0])?;
                if x.len() != 4 {
                    return err(format!("expects [B,C,H,W], got {x:?}"));
                }
                Ok(vec![x[0], x[1], x[2] * 2, x[3] * 2])
            }
            Op::Flatten => {
                self.expect_arity(op, inputs, 1)?;
                let x = self.arg(inputs[0])?;
                if x.len() < 2 {
                    return err(format!("expects rank >= 2, got {x:?}"));
                }
                Ok(vec![x[0], x[1..].iter().product()])
            }
            Op::Reshape { shape } => {
                self.expect_arity(op, inputs, 1)?;
                let x = self.arg(inputs[0])?;
                if x.iter().product::<usize>() != shape.iter().product::<usize>() {
                    return err(format!("cannot reshape {x:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
            Op::Add | Op::Mul => {
                self.expect_arity(op, inputs, 2)?;
                broadcast_shape(self.arg(inputs[0])?, self.arg(inputs[1])?)
            }
            Op::ConcatChannels => {
                self.expect_arity(op, inputs, 2)?;
                let a = self.arg(inputs[0])?;
                let b = self.arg(inputs[1])?;
                if a.len() < 2 || a.len() != b.len() || a[0] != b[0] || a[2..] != b[2..] {
                    return err(format!("incompatible {a:?} and {b:?}"));
                }
                let mut out = a.to_vec();
                out[1] += b[1];
                Ok(out)
            }
            Op::SumPerSample => {
                self.expect_arity(op, inputs, 1)?;
                let x = self.arg(inputs[0])?;
                if x.is_empty() {
                    return err("expects rank >= 1".into());
                }
                Ok(vec![x[0]])
            }
            Op::MeanAll => {
                self.expect_arity(op, inputs, 1)?;
                self.arg(inputs[0])?;
                Ok(vec![1])
            }
            Op::SoftmaxCrossEntropy => {
                self.expect_arity(op, inputs, 2)?;
                let logits = self.arg(inputs[0])?;
                let labels = self.arg(inputs[1])?;
                if logits.len() != 2 || labels.len() != 1 || logits[0] != labels[0] {
                    return err(format!("logits {logits:?}, labels {labels:?}"));
                }
                Ok(vec![1])
            }
            Op::Mse => {
                self.expect_arity(op, inputs, 2)?;
                let a = self.arg(inputs[0])?;
                let b = self.arg(inputs[1])?;
                if a != b {
                    return err(format!("shape mismatch {a:?} vs {b:?}"));
                }
                Ok(vec![1])
            }
        }
    }
}
