//! Forward evaluation of a [`Graph`].
//!
//! Evaluation fills a [`Values`] table with one activation per node (all
//! retained so backprop can run afterwards). For a fixed graph, inputs and
//! parameter state the result is bitwise deterministic across runs and
//! thread counts.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{broadcast_shape, ActKind, Graph, Node, NodeId, Op};
use crate::numerics::kernels;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Named input bindings for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Inputs<T: Scalar> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Inputs<T> {
    pub fn new() -> Self {
        Inputs { map: HashMap::new() }
    }

    pub fn bind(mut self, name: &str, tensor: Tensor<T>) -> Self {
        self.map.insert(name.to_string(), tensor);
        self
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) {
        self.map.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Batch-norm uses batch statistics when true, running statistics
    /// otherwise.
    pub training: bool,
    /// Write updated running statistics back to the store (training only).
    pub update_running_stats: bool,
    /// Scan every node output for non-finite values and fail fast.
    pub checked: bool,
}

impl EvalOptions {
    pub fn training() -> Self {
        EvalOptions {
            training: true,
            update_running_stats: true,
            checked: false,
        }
    }

    pub fn inference() -> Self {
        EvalOptions {
            training: false,
            update_running_stats: false,
            checked: false,
        }
    }

    /// Training-mode forward that leaves all state untouched; used by the
    /// gradient checker, which needs a pure function of the parameters.
    pub fn frozen_training() -> Self {
        EvalOptions {
            training: true,
            update_running_stats: false,
            checked: false,
        }
    }

    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }
}

/// Per-node batch statistics saved by batch-norm for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// All node activations from one forward pass.
#[derive(Debug)]
pub struct Values<T: Scalar> {
    pub(crate) tensors: Vec<Tensor<T>>,
    pub(crate) bn_stats: Vec<Option<BnStats<T>>>,
    pub(crate) training: bool,
}

impl<T: Scalar> Values<T> {
    pub fn node(&self, id: NodeId) -> &Tensor<T> {
        &self.tensors[id]
    }

    /// Look up a marked graph output by name.
    pub fn output(&self, graph: &Graph, name: &str) -> Result<&Tensor<T>> {
        let id = graph
            .output(name)
            .ok_or_else(|| Error::Graph(format!("no output named `{name}`")))?;
        Ok(&self.tensors[id])
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.tensors[id].data()[0]
    }
}

/// Evaluate every node of `graph` in topological order.
pub fn evaluate_graph<T: Scalar>(
    graph: &Graph,
    params: &mut ParamStore<T>,
    inputs: &Inputs<T>,
    opts: &EvalOptions,
) -> Result<Values<T>> {
    let mut tensors: Vec<Tensor<T>> = Vec::with_capacity(graph.len());
    let mut bn_stats: Vec<Option<BnStats<T>>> = vec![None; graph.len()];

    for (id, node) in graph.nodes().iter().enumerate() {
        let out = eval_node(node, id, graph, params, inputs, opts, &tensors, &mut bn_stats)?;
        debug_assert_eq!(out.shape(), node.shape.as_slice(), "{} shape", node.op.name());
        if opts.checked && !out.is_finite() {
            return Err(Error::NonFinite {
                context: format!("node {id} ({})", node.op.name()),
            });
        }
        tensors.push(out);
    }

    Ok(Values {
        tensors,
        bn_stats,
        training: opts.training,
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_node<T: Scalar>(
    node: &Node,
    id: NodeId,
    graph: &Graph,
    params: &mut ParamStore<T>,
    inputs: &Inputs<T>,
    opts: &EvalOptions,
    done: &[Tensor<T>],
    bn_stats: &mut [Option<BnStats<T>>],
) -> Result<Tensor<T>> {
    let arg = |i: usize| &done[node.inputs[i]];
    match &node.op {
        Op::Input { name } => {
            let t = inputs
                .get(name)
                .ok_or_else(|| Error::UnboundInput(name.clone()))?;
            if t.shape() != node.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "input `{name}` bound with shape {:?}, declared {:?}",
                    t.shape(),
                    node.shape
                )));
            }
            Ok(t.clone())
        }
        Op::Param { name } => {
            let t = params.get(name)?;
            if t.shape() != node.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "param `{name}` has shape {:?}, graph declared {:?}",
                    t.shape(),
                    node.shape
                )));
            }
            Ok(t.clone())
        }
        Op::Conv2d { padding } => {
            let (x, w, b) = (arg(0), arg(1), arg(2));
            let d = conv_dims(x.shape(), w.shape(), *padding);
            let mut y = Tensor::zeros(node.shape.clone());
            kernels::conv2d_forward(x.data(), w.data(), Some(b.data()), &d, y.data_mut());
            Ok(y)
        }
        Op::Conv2dInputGrad { padding } => {
            let (gy, w) = (arg(0), arg(1));
            let d = kernels::ConvDims {
                batch: node.shape[0],
                cin: node.shape[1],
                h: node.shape[2],
                w: node.shape[3],
                cout: w.shape()[0],
                kh: w.shape()[2],
                kw: w.shape()[3],
                pad: *padding,
            };
            let mut gx = Tensor::zeros(node.shape.clone());
            kernels::conv2d_input_grad(gy.data(), w.data(), &d, gx.data_mut());
            Ok(gx)
        }
        Op::Linear => {
            let (x, w, b) = (arg(0), arg(1), arg(2));
            let (bsz, in_dim) = (x.shape()[0], x.shape()[1]);
            let out_dim = w.shape()[0];
            let mut y = Tensor::zeros(node.shape.clone());
            kernels::linear_forward(
                x.data(),
                w.data(),
                Some(b.data()),
                bsz,
                in_dim,
                out_dim,
                y.data_mut(),
            );
            Ok(y)
        }
        Op::LinearInputGrad => {
            let (gy, w) = (arg(0), arg(1));
            let (bsz, out_dim) = (gy.shape()[0], gy.shape()[1]);
            let in_dim = w.shape()[1];
            let mut gx = Tensor::zeros(node.shape.clone());
            // gx = gy @ w
            T::gemm(bsz, out_dim, in_dim, gy.data(), w.data(), gx.data_mut());
            Ok(gx)
        }
        Op::BatchNorm { eps, momentum } => {
            let x = arg(0);
            let (gamma, beta) = (arg(1), arg(2));
            let eps_t = T::of(*eps);
            let shape = x.shape().to_vec();
            let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            let m = bsz * plane;
            let m_t = T::of(m as f64);

            let (mean, var): (Vec<T>, Vec<T>) = if opts.training {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..bsz {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            s += x.data()[base + i];
                        }
                    }
                    let mu = s / m_t;
                    let mut v = T::zero();
                    for b in 0..bsz {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            let d = x.data()[base + i] - mu;
                            v += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = v / m_t;
                }
                if opts.update_running_stats {
                    let mom = T::of(*momentum);
                    let keep = T::one() - mom;
                    let rmean_name = param_name(graph, node.inputs[3])?;
                    let rvar_name = param_name(graph, node.inputs[4])?;
                    {
                        let rm = params.get_mut(&rmean_name)?;
                        for (r, &mu) in rm.data_mut().iter_mut().zip(&mean) {
                            *r = keep * *r + mom * mu;
                        }
                    }
                    {
                        let rv = params.get_mut(&rvar_name)?;
                        for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                            *r = keep * *r + mom * v;
                        }
                    }
                }
                (mean, var)
            } else {
                (arg(3).data().to_vec(), arg(4).data().to_vec())
            };

            let mut y = Tensor::zeros(shape.clone());
            for ch in 0..c {
                let inv = (var[ch] + eps_t).sqrt().recip();
                let g = gamma.data()[ch];
                let be = beta.data()[ch];
                for b in 0..bsz {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        y.data_mut()[base + i] = (x.data()[base + i] - mean[ch]) * inv * g + be;
                    }
                }
            }
            bn_stats[id] = Some(BnStats { mean, var });
            Ok(y)
        }
        Op::Relu => Ok(arg(0).map(|v| if v > T::zero() { v } else { T::zero() })),
        Op::LeakyRelu { slope } => {
            let s = T::of(*slope);
            Ok(arg(0).map(|v| if v > T::zero() { v } else { v * s }))
        }
        Op::Silu => Ok(arg(0).map(|v| v * sigmoid(v))),
        Op::Tanh => Ok(arg(0).map(|v| v.tanh())),
        Op::Sigmoid => Ok(arg(0).map(sigmoid)),
        Op::Softplus => Ok(arg(0).map(softplus)),
        Op::ActGradMask { kind } => {
            let k = *kind;
            Ok(arg(0).map(move |v| act_derivative(k, v)))
        }
        Op::UpsampleNearest2x => {
            let x = arg(0);
            let s = x.shape().to_vec();
            let mut y = Tensor::zeros(node.shape.clone());
            kernels::upsample_nearest_2x(x.data(), s[0] * s[1], s[2], s[3], y.data_mut());
            Ok(y)
        }
        Op::AvgPool2x2 => {
            let x = arg(0);
            let s = x.shape().to_vec();
            let mut y = Tensor::zeros(node.shape.clone());
            kernels::avg_pool_2x2(x.data(), s[0] * s[1], s[2], s[3], y.data_mut());
            Ok(y)
        }
        Op::AvgUnpool2x2 => {
            let x = arg(0);
            let s = x.shape().to_vec();
            let mut y = Tensor::zeros(node.shape.clone());
            kernels::avg_unpool_2x2(x.data(), s[0] * s[1], s[2], s[3], y.data_mut());
            Ok(y)
        }
        Op::MaxPool2x2 => {
            let x = arg(0);
            let s = x.shape().to_vec();
            let mut y = Tensor::zeros(node.shape.clone());
            kernels::max_pool_2x2(x.data(), s[0] * s[1], s[2], s[3], y.data_mut());
            Ok(y)
        }
        Op::Flatten | Op::Reshape { .. } => Ok(arg(0).reshaped(node.shape.clone())?),
        Op::Add => Ok(broadcast_zip(arg(0), arg(1), |a, b| a + b)),
        Op::Mul => Ok(broadcast_zip(arg(0), arg(1), |a, b| a * b)),
        Op::MulScalar { c } => {
            let c = T::of(*c);
            Ok(arg(0).map(|v| v * c))
        }
        Op::ConcatChannels => {
            let (a, b) = (arg(0), arg(1));
            let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
            let inner: usize = sa[2..].iter().product();
            let (ca, cb) = (sa[1] * inner, sb[1] * inner);
            let mut y = Tensor::zeros(node.shape.clone());
            for bi in 0..sa[0] {
                let dst = &mut y.data_mut()[bi * (ca + cb)..(bi + 1) * (ca + cb)];
                dst[..ca].copy_from_slice(&a.data()[bi * ca..(bi + 1) * ca]);
                dst[ca..].copy_from_slice(&b.data()[bi * cb..(bi + 1) * cb]);
            }
            Ok(y)
        }
        Op::SumPerSample => {
            let x = arg(0);
            let bsz = x.shape()[0];
            let inner = x.numel() / bsz;
            let mut y = Tensor::zeros(vec![bsz]);
            for b in 0..bsz {
                y.data_mut()[b] = x.data()[b * inner..(b + 1) * inner]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
            }
            Ok(y)
        }
        Op::MeanAll => {
            let x = arg(0);
            Ok(Tensor::scalar(x.mean()))
        }
        Op::SqrtEps { eps } => {
            let e = T::of(*eps);
            Ok(arg(0).map(|v| (v + e).sqrt()))
        }
        Op::SoftmaxCrossEntropy => {
            let (logits, labels) = (arg(0), arg(1));
            let (bsz, k) = (logits.shape()[0], logits.shape()[1]);
            let mut total = T::zero();
            for b in 0..bsz {
                let row = &logits.data()[b * k..(b + 1) * k];
                let label = labels.data()[b].as_f64();
                if label < 0.0 || label.fract() != 0.0 || label as usize >= k {
                    return Err(Error::InvalidArgument(format!(
                        "label {label} out of range for {k} classes"
                    )));
                }
                total += -(log_softmax_at(row, label as usize));
            }
            Ok(Tensor::scalar(total / T::of(bsz as f64)))
        }
        Op::Mse => {
            let (a, b) = (arg(0), arg(1));
            let n = T::of(a.numel() as f64);
            let mut s = T::zero();
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let d = x - y;
                s += d * d;
            }
            Ok(Tensor::scalar(s / n))
        }
    }
}

fn param_name(graph: &Graph, id: NodeId) -> Result<String> {
    match &graph.node(id).op {
        Op::Param { name } => Ok(name.clone()),
        other => Err(Error::Graph(format!(
            "batch-norm running statistics must be parameters, got {}",
            other.name()
        ))),
    }
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], pad: usize) -> kernels::ConvDims {
    kernels::ConvDims {
        batch: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: w[0],
        kh: w[2],
        kw: w[3],
        pad,
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // ln(1 + e^x), stable on both tails
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn act_derivative<T: Scalar>(kind: ActKind, v: T) -> T {
    match kind {
        ActKind::Relu => {
            if v > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        ActKind::LeakyRelu { slope } => {
            if v > T::zero() {
                T::one()
            } else {
                T::of(slope)
            }
        }
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], idx: usize) -> T {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let sum = row
        .iter()
        .fold(T::zero(), |a, &v| a + (v - max).exp());
    row[idx] - max - sum.ln()
}

/// Apply `f` elementwise with the broadcast rules of [`broadcast_shape`].
pub(crate) fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let shape = broadcast_shape(a.shape(), b.shape()).expect("checked at construction");
    let mut y = Tensor::zeros(shape);
    let ad = a.data();
    let bd = b.data();
    let yd = y.data_mut();
    if a.shape() == b.shape() {
        for i in 0..ad.len() {
            yd[i] = f(ad[i], bd[i]);
        }
    } else if b.shape() == [1] {
        let s = bd[0];
        for i in 0..ad.len() {
            yd[i] = f(ad[i], s);
        }
    } else if b.shape().len() == 1 {
        // per-sample
        let inner = ad.len() / b.shape()[0];
        for (bi, &s) in bd.iter().enumerate() {
            for i in 0..inner {
                yd[bi * inner + i] = f(ad[bi * inner + i], s);
            }
        }
    } else {
        // [B, C] over [B, C, H, W]
        let c = b.shape()[1];
        let plane = a.shape()[2] * a.shape()[3];
        for bi in 0..b.shape()[0] {
            for ch in 0..c {
                let s = bd[bi * c + ch];
                let base = (bi * c + ch) * plane;
                for i in 0..plane {
                    yd[base + i] = f(ad[base + i], s);
                }
            }
        }
    }
    y
}
