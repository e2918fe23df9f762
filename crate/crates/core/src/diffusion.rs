//! DDPM mathematics: noise schedule, forward (noising) process, training
//! objective and ancestral (reverse) sampling.
//!
//! Training uses the closed-form marginal `x_t = sqrt(a_bar_t) x_0 +
//! sqrt(1 - a_bar_t) eps`; sampling runs the per-step reverse update with
//! `sigma_t^2 = beta_t`.

use crate::denoiser::time_embed_batch;
use crate::error::{Error, Result};
use crate::numerics::eval::{evaluate_graph, EvalOptions, Inputs, Values};
use crate::numerics::grad::backpropagate;
use crate::numerics::graph::{Graph, NodeId, Op};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step noising coefficients, indexed by `t` in `1..=len()`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Scalar> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
}

/// `beta` interpolated linearly from `beta_start` to `beta_end` inclusive;
/// `alpha_t = 1 - beta_t` exactly and `a_bar_t` is the running product.
pub fn build_schedule<T: Scalar>(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>> {
    let ScheduleKind::Linear = kind;
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = Vec::with_capacity(steps);
    for i in 0..steps {
        let frac = if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        beta.push(T::of(beta_start + (beta_end - beta_start) * frac));
    }
    let alpha: Vec<T> = beta.iter().map(|&b| T::one() - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = T::one();
    for &a in &alpha {
        prod = prod * a;
        alpha_bar.push(prod);
    }
    if alpha_bar[steps - 1] <= T::zero() {
        return Err(Error::InvalidArgument("alpha_bar underflowed to zero".into()));
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "t = {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }
}

/// One noising step: `sqrt(alpha_t) x_prev + sqrt(1 - alpha_t) eps`.
pub fn forward_step<T: Scalar>(
    x_prev: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule<T>,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if x_prev.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "x {:?} vs eps {:?}",
            x_prev.shape(),
            eps.shape()
        )));
    }
    let a = schedule.alpha(t);
    let (sa, sn) = (a.sqrt(), (T::one() - a).sqrt());
    let data = x_prev
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    Ok(Tensor::from_vec(x_prev.shape().to_vec(), data))
}

/// Closed-form noising: `sqrt(a_bar_t) x_0 + sqrt(1 - a_bar_t) eps`.
pub fn forward_marginal<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule<T>,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (T::one() - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    Ok(Tensor::from_vec(x0.shape().to_vec(), data))
}

/// A sampled training batch: noised inputs, their timesteps and the noise
/// that produced them.
#[derive(Debug, Clone)]
pub struct DiffusionBatchSample<T: Scalar> {
    pub x_t: Tensor<T>,
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

/// Networks that predict the injected noise from `(x_t, t)`.
pub trait NoisePredictor<T: Scalar> {
    /// Width of the sinusoidal time embedding this predictor consumes.
    fn time_dim(&self) -> usize;

    /// Emit the prediction subgraph; output shape must equal `x_t`'s.
    fn emit(&self, g: &mut Graph, x_t: NodeId, temb: NodeId) -> Result<NodeId>;

    /// Hook for binding additional inputs from the training batch; used by
    /// test predictors that reconstruct the target analytically.
    fn bind_extras(
        &self,
        _batch: &DiffusionBatchSample<T>,
        _x0: &Tensor<T>,
        _schedule: &NoiseSchedule<T>,
        _inputs: &mut Inputs<T>,
    ) -> Result<()> {
        Ok(())
    }
}

/// Draw per-item `t ~ U{1..T}` (all timesteps first, then the noise
/// tensor, so the stream layout is stable) and form `x_t`.
pub fn sample_training_batch<T: Scalar>(
    x0: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> DiffusionBatchSample<T> {
    let batch = x0.shape()[0];
    let inner = x0.numel() / batch;
    let t: Vec<usize> = (0..batch).map(|_| 1 + rng.next_usize(schedule.len())).collect();
    let mut eps = Tensor::zeros(x0.shape().to_vec());
    rng.fill_normal(eps.data_mut());
    let mut x_t = Tensor::zeros(x0.shape().to_vec());
    for b in 0..batch {
        let ab = schedule.alpha_bar(t[b]);
        let (sa, sn) = (ab.sqrt(), (T::one() - ab).sqrt());
        for i in 0..inner {
            let idx = b * inner + i;
            x_t.data_mut()[idx] = sa * x0.data()[idx] + sn * eps.data()[idx];
        }
    }
    DiffusionBatchSample { x_t, t, eps }
}

fn build_loss_graph<T: Scalar>(
    model: &dyn NoisePredictor<T>,
    x_shape: &[usize],
) -> Result<(Graph, NodeId)> {
    let batch = x_shape[0];
    let mut g = Graph::new();
    let x_t = g.input("x_t", x_shape.to_vec())?;
    let temb = g.input("temb", vec![batch, model.time_dim()])?;
    let eps_hat = model.emit(&mut g, x_t, temb)?;
    if g.shape(eps_hat) != x_shape {
        return Err(Error::Shape(format!(
            "model output {:?} does not match input {:?}",
            g.shape(eps_hat),
            x_shape
        )));
    }
    let eps = g.input("eps", x_shape.to_vec())?;
    let loss = g.push(Op::Mse, &[eps_hat, eps])?;
    g.mark_output("eps_hat", eps_hat);
    g.mark_output("loss", loss);
    Ok((g, loss))
}

fn loss_inputs<T: Scalar>(
    model: &dyn NoisePredictor<T>,
    batch: &DiffusionBatchSample<T>,
    x0: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Inputs<T>> {
    let mut inputs = Inputs::new();
    inputs.set("x_t", batch.x_t.clone());
    inputs.set("temb", time_embed_batch(&batch.t, model.time_dim())?);
    inputs.set("eps", batch.eps.clone());
    model.bind_extras(batch, x0, schedule, &mut inputs)?;
    Ok(inputs)
}

/// `E || eps - eps_theta(x_t, t) ||^2` over one sampled batch (value only).
pub fn ddpm_loss<T: Scalar>(
    x0: &Tensor<T>,
    model: &dyn NoisePredictor<T>,
    params: &mut ParamStore<T>,
    schedule: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<T> {
    let batch = sample_training_batch(x0, schedule, rng);
    let (g, loss) = build_loss_graph(model, x0.shape())?;
    let inputs = loss_inputs(model, &batch, x0, schedule)?;
    let values = evaluate_graph(&g, params, &inputs, &EvalOptions::frozen_training())?;
    Ok(values.scalar(loss))
}

/// Same objective, but also backpropagates into the parameter store.
pub fn ddpm_loss_and_grads<T: Scalar>(
    x0: &Tensor<T>,
    model: &dyn NoisePredictor<T>,
    params: &mut ParamStore<T>,
    schedule: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<T> {
    let batch = sample_training_batch(x0, schedule, rng);
    let (g, loss) = build_loss_graph(model, x0.shape())?;
    let inputs = loss_inputs(model, &batch, x0, schedule)?;
    let values: Values<T> = evaluate_graph(&g, params, &inputs, &EvalOptions::training())?;
    let loss_val = values.scalar(loss);
    if !loss_val.is_finite() {
        return Err(Error::NonFinite {
            context: "ddpm loss".into(),
        });
    }
    backpropagate(&g, &values, loss, params)?;
    Ok(loss_val)
}

/// One reverse update from `x_t` to `x_{t-1}`:
/// `(x_t - ((1-alpha_t)/sqrt(1-a_bar_t)) eps_hat) / sqrt(alpha_t) + sigma_t z`
/// with `sigma_t = sqrt(beta_t)` for `t > 1` and `sigma_1 = 0`.
pub fn reverse_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coef = (T::one() - a) / (T::one() - ab).sqrt();
    let inv_sa = a.sqrt().recip();
    let sigma = if t > 1 { schedule.beta(t).sqrt() } else { T::zero() };
    let mut out = Tensor::zeros(x_t.shape().to_vec());
    for i in 0..out.numel() {
        let mean = (x_t.data()[i] - coef * eps_hat.data()[i]) * inv_sa;
        let z = if t > 1 { rng.next_normal() } else { T::zero() };
        out.data_mut()[i] = mean + sigma * z;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions<T> {
    /// Output clamp; pixel-domain sampling keeps the `[-1, 1]` default,
    /// non-image domains (the 2-D toy task) disable it.
    pub clamp: Option<(T, T)>,
    /// Samples are generated in deterministic chunks of this size.
    pub chunk: usize,
}

impl<T: Scalar> Default for SampleOptions<T> {
    fn default() -> Self {
        SampleOptions {
            clamp: Some((T::of(-1.0), T::one())),
            chunk: 64,
        }
    }
}

/// Ancestral sampling: start at `x_T ~ N(0, I)` and apply [`reverse_step`]
/// for `t = T..1`. Returns a `[count, ...item_shape]` tensor.
pub fn ancestral_sample<T: Scalar>(
    model: &dyn NoisePredictor<T>,
    params: &mut ParamStore<T>,
    schedule: &NoiseSchedule<T>,
    count: usize,
    item_shape: &[usize],
    rng: &mut RngStream,
    opts: &SampleOptions<T>,
) -> Result<Tensor<T>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let mut out_shape = vec![count];
    out_shape.extend_from_slice(item_shape);
    let mut out = Tensor::zeros(out_shape.clone());
    let inner: usize = item_shape.iter().product();

    let mut done = 0usize;
    let mut graphs: std::collections::HashMap<usize, (Graph, NodeId)> = Default::default();
    while done < count {
        let batch = opts.chunk.min(count - done);
        let mut shape = vec![batch];
        shape.extend_from_slice(item_shape);
        let (g, eps_hat_node) = match graphs.entry(batch) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                let mut g = Graph::new();
                let x_t = g.input("x_t", shape.clone())?;
                let temb = g.input("temb", vec![batch, model.time_dim()])?;
                let eps_hat = model.emit(&mut g, x_t, temb)?;
                v.insert((g, eps_hat))
            }
        };

        let mut x = Tensor::zeros(shape.clone());
        rng.fill_normal(x.data_mut());
        for t in (1..=schedule.len()).rev() {
            let temb = time_embed_batch(&vec![t; batch], model.time_dim())?;
            let inputs = Inputs::new().bind("x_t", x.clone()).bind("temb", temb);
            let values = evaluate_graph(g, params, &inputs, &EvalOptions::inference())?;
            let eps_hat = values.node(*eps_hat_node);
            x = reverse_step(&x, eps_hat, t, schedule, rng)?;
            x.assert_finite("ancestral sampling")?;
        }
        if let Some((lo, hi)) = opts.clamp {
            for v in x.data_mut() {
                *v = (*v).max(lo).min(hi);
            }
        }
        out.data_mut()[done * inner..(done + batch) * inner].copy_from_slice(x.data());
        done += batch;
    }
    Ok(out)
}
