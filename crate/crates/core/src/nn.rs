//! Layer descriptors shared by the denoiser, GAN and classifier nets.
//!
//! A spec knows its parameter shapes (so architectures can be counted
//! without allocating), registers initialized parameters into a store,
//! and emits its forward nodes into a graph.

use crate::error::Result;
use crate::numerics::graph::{Graph, NodeId, Op};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// He-normal fan-in initialization: `N(0, 2/fan_in)`.
fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut RngStream) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::of(rng.next_normal_f64() * std);
    }
    t
}

fn unit_normal<T: Scalar>(shape: Vec<usize>, rng: &mut RngStream) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    t
}

#[derive(Debug, Clone)]
pub struct Conv2dSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub padding: usize,
    /// Store raw `N(0,1)` weights and rescale by `sqrt(2/fan_in)` at
    /// forward time (progressive-GAN equalized learning rate).
    pub equalized: bool,
}

impl Conv2dSpec {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Self {
        Conv2dSpec {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            padding,
            equalized: false,
        }
    }

    pub fn equalized(mut self) -> Self {
        self.equalized = true;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * (self.fan_in() + 1)
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) {
        let shape = vec![self.out_ch, self.in_ch, self.kernel, self.kernel];
        let w = if self.equalized {
            unit_normal(shape, rng)
        } else {
            he_normal(shape, self.fan_in(), rng)
        };
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.out_ch]));
    }

    pub fn emit(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = vec![self.out_ch, self.in_ch, self.kernel, self.kernel];
        let mut w = g.param(&format!("{}.w", self.name), shape)?;
        if self.equalized {
            let scale = (2.0 / self.fan_in() as f64).sqrt();
            w = g.push(Op::MulScalar { c: scale }, &[w])?;
        }
        let b = g.param(&format!("{}.b", self.name), vec![self.out_ch])?;
        g.push(Op::Conv2d { padding: self.padding }, &[x, w, b])
    }
}

#[derive(Debug, Clone)]
pub struct LinearSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub equalized: bool,
}

impl LinearSpec {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        LinearSpec {
            name: name.into(),
            in_dim,
            out_dim,
            equalized: false,
        }
    }

    pub fn equalized(mut self) -> Self {
        self.equalized = true;
        self
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) {
        let shape = vec![self.out_dim, self.in_dim];
        let w = if self.equalized {
            unit_normal(shape, rng)
        } else {
            he_normal(shape, self.in_dim, rng)
        };
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.out_dim]));
    }

    pub fn emit(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut w = g.param(&format!("{}.w", self.name), vec![self.out_dim, self.in_dim])?;
        if self.equalized {
            let scale = (2.0 / self.in_dim as f64).sqrt();
            w = g.push(Op::MulScalar { c: scale }, &[w])?;
        }
        let b = g.param(&format!("{}.b", self.name), vec![self.out_dim])?;
        g.push(Op::Linear, &[x, w, b])
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormSpec {
    pub name: String,
    pub channels: usize,
}

impl BatchNormSpec {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNormSpec {
            name: name.into(),
            channels,
        }
    }

    /// gamma + beta + running mean + running var (half of them state).
    pub fn param_count(&self) -> usize {
        4 * self.channels
    }

    pub fn non_trainable_count(&self) -> usize {
        2 * self.channels
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(&format!("{}.gamma", self.name), Tensor::ones(vec![self.channels]));
        store.insert(&format!("{}.beta", self.name), Tensor::zeros(vec![self.channels]));
        store.insert_state(
            &format!("{}.running_mean", self.name),
            Tensor::zeros(vec![self.channels]),
        );
        store.insert_state(
            &format!("{}.running_var", self.name),
            Tensor::ones(vec![self.channels]),
        );
    }

    pub fn emit(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let c = self.channels;
        let gamma = g.param(&format!("{}.gamma", self.name), vec![c])?;
        let beta = g.param(&format!("{}.beta", self.name), vec![c])?;
        let rm = g.param(&format!("{}.running_mean", self.name), vec![c])?;
        let rv = g.param(&format!("{}.running_var", self.name), vec![c])?;
        g.push(
            Op::BatchNorm {
                eps: 1e-5,
                momentum: 0.1,
            },
            &[x, gamma, beta, rm, rv],
        )
    }
}
