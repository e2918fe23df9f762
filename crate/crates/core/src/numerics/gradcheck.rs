//! Finite-difference gradient verification (f64 mode).
//!
//! Compares analytic parameter gradients against central differences of
//! the loss. Runs in `f64`; `f32` differences drown in rounding noise.

use crate::error::Result;
use crate::numerics::eval::{evaluate_graph, EvalOptions, Inputs};
use crate::numerics::grad::backpropagate;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step, scaled by `max(1, |x|)` per coordinate.
    pub step: f64,
    /// Maximum allowed `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter (in order);
    /// `usize::MAX` checks everything.
    pub max_coords_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            tolerance: 1e-4,
            max_coords_per_param: usize::MAX,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl std::fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}[{}]: analytic {:.6e}, numeric {:.6e}, rel {:.3e}",
            self.param, self.coord, self.analytic, self.numeric, self.rel_error
        )
    }
}

/// Verify the analytic gradient of `loss` w.r.t. every trainable
/// parameter in `params`. Batch-norm statistics are frozen so the loss is
/// a pure function of the parameters. Returns all violations.
pub fn check_gradients(
    graph: &Graph,
    params: &mut ParamStore<f64>,
    inputs: &Inputs<f64>,
    loss: NodeId,
    cfg: &GradCheck,
) -> Result<Vec<GradCheckFailure>> {
    let opts = EvalOptions::frozen_training();
    let values = evaluate_graph(graph, params, inputs, &opts)?;
    backpropagate(graph, &values, loss, params)?;

    let names: Vec<String> = params
        .iter()
        .filter(|e| e.tensor.requires_grad())
        .map(|e| e.name.clone())
        .collect();

    let mut failures = Vec::new();
    for name in names {
        let analytic = params.get(&name)?.grad().unwrap().to_vec();
        let n = analytic.len().min(cfg.max_coords_per_param);
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            let h = cfg.step * orig.abs().max(1.0);

            params.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = evaluate_graph(graph, params, inputs, &opts)?.scalar(loss);
            params.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = evaluate_graph(graph, params, inputs, &opts)?.scalar(loss);
            params.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            let rel = (analytic[i] - numeric).abs() / denom;
            if rel > cfg.tolerance {
                failures.push(GradCheckFailure {
                    param: name.clone(),
                    coord: i,
                    analytic: analytic[i],
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(failures)
}

/// Panic with a readable report unless all checked gradients agree.
pub fn assert_gradients_match(
    graph: &Graph,
    params: &mut ParamStore<f64>,
    inputs: &Inputs<f64>,
    loss: NodeId,
    cfg: &GradCheck,
) {
    let failures = check_gradients(graph, params, inputs, loss, cfg).expect("gradcheck evaluation");
    assert!(
        failures.is_empty(),
        "gradient check failed ({} coords):\n{}",
        failures.len(),
        failures
            .iter()
            .take(10)
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    );
}
