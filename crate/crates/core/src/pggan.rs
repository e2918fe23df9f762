//! Progressive-growing GAN: per-class generator/discriminator pairs that
//! grow from 4x4 to the target resolution with fade-in blending,
//! equalized learning rates, and selectable logistic or Wasserstein
//! losses (with optional gradient penalty).
//!
//! The gradient penalty needs `d GP / d theta`, i.e. differentiating
//! through the discriminator's input gradient. That input gradient is
//! emitted *as part of the forward graph* (a reverse walk over the
//! discriminator layers using the adjoint ops `Conv2dInputGrad`,
//! `LinearInputGrad`, `AvgUnpool2x2` and activation masks), so one
//! ordinary backward pass delivers the exact second-order term.

use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, LinearSpec};
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::eval::{evaluate_graph, EvalOptions, Inputs};
use crate::numerics::grad::backpropagate;
use crate::numerics::graph::{ActKind, Graph, NodeId, Op};
use crate::numerics::kernels;
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;
use crate::selection::LabeledDataset;

pub const BASE_RESOLUTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Logistic,
    Wasserstein,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub target_resolution: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    /// Gradient-penalty weight; Wasserstein mode only, 0 disables.
    pub gp_lambda: f64,
    pub steps_per_stage: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Conv filter counts below / at-or-above 64-pixel resolution.
    pub filters_below_64: usize,
    pub filters_at_64_up: usize,
    /// Overrides both filter counts everywhere (small smoke runs).
    pub filter_override: Option<usize>,
    /// Use the non-saturating generator objective in logistic mode.
    pub non_saturating_g: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 64,
            target_resolution: 32,
            batch_size: 4,
            loss_mode: LossMode::Wasserstein,
            gp_lambda: 10.0,
            steps_per_stage: 600,
            lr: 1e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            filters_below_64: 128,
            filters_at_64_up: 64,
            filter_override: None,
            non_saturating_g: false,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
        }
        if self.latent_dim < 2 {
            return Err(Error::InvalidArgument("latent_dim must be at least 2".into()));
        }
        let r = self.target_resolution;
        if r < BASE_RESOLUTION || !(r / BASE_RESOLUTION).is_power_of_two() || r % BASE_RESOLUTION != 0 {
            return Err(Error::InvalidArgument(format!(
                "target_resolution must be 4 * 2^k, got {r}"
            )));
        }
        if self.steps_per_stage < 2 {
            return Err(Error::InvalidArgument("steps_per_stage must be at least 2".into()));
        }
        if self.lr <= 0.0 || self.gp_lambda < 0.0 {
            return Err(Error::InvalidArgument("bad lr or gp_lambda".into()));
        }
        Ok(())
    }

    pub fn filters_at(&self, resolution: usize) -> usize {
        if let Some(f) = self.filter_override {
            return f;
        }
        if resolution < 64 {
            self.filters_below_64
        } else {
            self.filters_at_64_up
        }
    }

    pub fn n_stages(&self) -> usize {
        (self.target_resolution / BASE_RESOLUTION).trailing_zeros() as usize + 1
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        BASE_RESOLUTION << stage
    }
}

/// Where progressive training currently stands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressiveStage {
    pub resolution: usize,
    pub fade_alpha: f64,
    pub steps_in_stage: usize,
}

impl ProgressiveStage {
    pub fn initial() -> Self {
        // the 4x4 stage has nothing to fade from
        ProgressiveStage {
            resolution: BASE_RESOLUTION,
            fade_alpha: 1.0,
            steps_in_stage: 0,
        }
    }
}

/// Add one resolution level. Requires the current fade to have finished
/// and the target resolution not to be exceeded.
pub fn grow_stage(stage: &ProgressiveStage, cfg: &GanConfig) -> Result<ProgressiveStage> {
    if stage.fade_alpha < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "cannot grow mid-fade (alpha = {})",
            stage.fade_alpha
        )));
    }
    if stage.resolution * 2 > cfg.target_resolution {
        return Err(Error::InvalidArgument(format!(
            "already at target resolution {}",
            cfg.target_resolution
        )));
    }
    Ok(ProgressiveStage {
        resolution: stage.resolution * 2,
        fade_alpha: 0.0,
        steps_in_stage: 0,
    })
}

/// Fade schedule within a stage: the first half ramps alpha linearly from
/// 0 to 1, the second half holds at 1. The initial 4x4 stage never fades.
pub fn fade_alpha_for_step(stage_idx: usize, step_in_stage: usize, steps_per_stage: usize) -> f64 {
    if stage_idx == 0 {
        return 1.0;
    }
    let half = (steps_per_stage / 2).max(1);
    (step_in_stage as f64 / half as f64).min(1.0)
}

// ---- losses ------------------------------------------------------------

/// Batch loss values in the conventional (reported) form.
///
/// Logistic mode takes probabilities in `(0,1)`:
/// `L_D = mean(ln d_real) + mean(ln(1 - d_fake))` (the discriminator
/// maximizes this) and `L_G = mean(ln(1 - d_fake))` (the generator
/// minimizes it). Wasserstein mode takes raw scores:
/// `L_D = mean(d_fake) - mean(d_real)`, `L_G = -mean(d_fake)`.
pub fn gan_loss(d_real: &[f64], d_fake: &[f64], mode: LossMode) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidArgument("empty score batch".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    match mode {
        LossMode::Logistic => {
            if d_real
                .iter()
                .chain(d_fake)
                .any(|&p| !(0.0..=1.0).contains(&p) || p == 0.0 || p == 1.0)
            {
                return Err(Error::InvalidArgument(
                    "logistic mode expects probabilities strictly inside (0,1)".into(),
                ));
            }
            let l_d = mean(&d_real.iter().map(|&p| p.ln()).collect::<Vec<_>>())
                + mean(&d_fake.iter().map(|&p| (1.0 - p).ln()).collect::<Vec<_>>());
            let l_g = mean(&d_fake.iter().map(|&p| (1.0 - p).ln()).collect::<Vec<_>>());
            Ok((l_d, l_g))
        }
        LossMode::Wasserstein => Ok((mean(d_fake) - mean(d_real), -mean(d_fake))),
    }
}

// ---- networks ----------------------------------------------------------

/// Generator: latent -> 4x4 base block -> one upsampling block per
/// resolution level -> 1x1 to-image conv with tanh. All layers equalized.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GanConfig,
    base_linear: LinearSpec,
    base_conv: Conv2dSpec,
    blocks: Vec<(Conv2dSpec, Conv2dSpec)>,
    to_rgb: Vec<Conv2dSpec>,
}

impl Generator {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let f4 = cfg.filters_at(BASE_RESOLUTION);
        let base_linear = LinearSpec::new("g.base.linear", cfg.latent_dim, f4 * 16).equalized();
        let base_conv = Conv2dSpec::new("g.base.conv", f4, f4, 3, 1).equalized();
        let mut blocks = Vec::new();
        let mut to_rgb = Vec::new();
        to_rgb.push(Conv2dSpec::new("g.to_rgb4", f4, 1, 1, 0).equalized());
        for s in 1..cfg.n_stages() {
            let r = cfg.stage_resolution(s);
            let (f_in, f_out) = (cfg.filters_at(r / 2), cfg.filters_at(r));
            blocks.push((
                Conv2dSpec::new(format!("g.block{r}.conv1"), f_in, f_out, 3, 1).equalized(),
                Conv2dSpec::new(format!("g.block{r}.conv2"), f_out, f_out, 3, 1).equalized(),
            ));
            to_rgb.push(Conv2dSpec::new(format!("g.to_rgb{r}"), f_out, 1, 1, 0).equalized());
        }
        Ok(Generator {
            cfg: cfg.clone(),
            base_linear,
            base_conv,
            blocks,
            to_rgb,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) {
        self.base_linear.register(store, rng);
        self.base_conv.register(store, rng);
        for ((c1, c2), rgb) in self.blocks.iter().zip(&self.to_rgb[1..]) {
            c1.register(store, rng);
            c2.register(store, rng);
            rgb.register(store, rng);
        }
        self.to_rgb[0].register(store, rng);
    }

    fn lrelu(g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.push(Op::LeakyRelu { slope: 0.2 }, &[x])
    }

    /// Features at each resolution up to `resolution`.
    fn emit_features(&self, g: &mut Graph, z: NodeId, resolution: usize) -> Result<Vec<NodeId>> {
        let f4 = self.cfg.filters_at(BASE_RESOLUTION);
        let h = self.base_linear.emit(g, z)?;
        let h = g.push(
            Op::Reshape {
                shape: vec![g.shape(h)[0], f4, 4, 4],
            },
            &[h],
        )?;
        let h = Self::lrelu(g, h)?;
        let h = self.base_conv.emit(g, h)?;
        let mut feat = Self::lrelu(g, h)?;
        let mut feats = vec![feat];
        let mut r = BASE_RESOLUTION;
        let mut idx = 0usize;
        while r < resolution {
            r *= 2;
            let up = g.push(Op::UpsampleNearest2x, &[feat])?;
            let (c1, c2) = &self.blocks[idx];
            let h = c1.emit(g, up)?;
            let h = Self::lrelu(g, h)?;
            let h = c2.emit(g, h)?;
            feat = Self::lrelu(g, h)?;
            feats.push(feat);
            idx += 1;
        }
        Ok(feats)
    }

    fn to_rgb_at(&self, resolution: usize) -> &Conv2dSpec {
        let stage = (resolution / BASE_RESOLUTION).trailing_zeros() as usize;
        &self.to_rgb[stage]
    }

    /// Image output at `resolution`. During a fade (`alpha` inputs given,
    /// `resolution > 4`) the output blends the new path with the
    /// upsampled previous-stage output:
    /// `alpha * new + (1 - alpha) * upsample(old)`.
    pub fn emit(
        &self,
        g: &mut Graph,
        z: NodeId,
        resolution: usize,
        fade: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId> {
        let feats = self.emit_features(g, z, resolution)?;
        let new_img = {
            let rgb = self.to_rgb_at(resolution).emit(g, *feats.last().unwrap())?;
            g.push(Op::Tanh, &[rgb])?
        };
        match fade {
            Some((alpha, one_minus)) if resolution > BASE_RESOLUTION => {
                let old_feat = feats[feats.len() - 2];
                let old_rgb = self.to_rgb_at(resolution / 2).emit(g, old_feat)?;
                let old_img = g.push(Op::Tanh, &[old_rgb])?;
                let old_up = g.push(Op::UpsampleNearest2x, &[old_img])?;
                let a = g.push(Op::Mul, &[new_img, alpha])?;
                let b = g.push(Op::Mul, &[old_up, one_minus])?;
                g.push(Op::Add, &[a, b])
            }
            _ => Ok(new_img),
        }
    }
}

/// Discriminator layer trace captured during emission, consumed by the
/// gradient-penalty builder.
#[derive(Debug, Clone, Default)]
pub struct DiscTrace {
    steps: Vec<TraceStep>,
}

/// One step of the discriminator pipeline recorded for adjoint emission.
#[derive(Debug, Clone)]
enum TraceStep {
    Conv { w_eff: NodeId, padding: usize },
    LeakyRelu { pre: NodeId },
    AvgPool,
    Flatten { unflat: Vec<usize> },
    Linear { w_eff: NodeId },
    Blend {
        alpha: NodeId,
        one_minus: NodeId,
        new: Vec<TraceStep>,
        old: Vec<TraceStep>,
    },
}

/// Emit the adjoint of a traced pipeline: given the gradient of the loss
/// with respect to the pipeline output, produce the gradient with respect
/// to the pipeline input, as graph nodes. Activation derivatives are
/// treated as locally constant.
fn emit_adjoint(g: &mut Graph, steps: &[TraceStep], seed: NodeId) -> Result<NodeId> {
    let mut grad = seed;
    for step in steps.iter().rev() {
        grad = match step {
            TraceStep::Linear { w_eff } => g.push(Op::LinearInputGrad, &[grad, *w_eff])?,
            TraceStep::Flatten { unflat } => g.push(
                Op::Reshape {
                    shape: unflat.clone(),
                },
                &[grad],
            )?,
            TraceStep::AvgPool => g.push(Op::AvgUnpool2x2, &[grad])?,
            TraceStep::LeakyRelu { pre } => {
                let mask = g.push(
                    Op::ActGradMask {
                        kind: ActKind::LeakyRelu { slope: 0.2 },
                    },
                    &[*pre],
                )?;
                g.push(Op::Mul, &[grad, mask])?
            }
            TraceStep::Conv { w_eff, padding } => {
                g.push(Op::Conv2dInputGrad { padding: *padding }, &[grad, *w_eff])?
            }
            TraceStep::Blend {
                alpha,
                one_minus,
                new,
                old,
            } => {
                let gn = g.push(Op::Mul, &[grad, *alpha])?;
                let gn = emit_adjoint(g, new, gn)?;
                let go = g.push(Op::Mul, &[grad, *one_minus])?;
                let go = emit_adjoint(g, old, go)?;
                g.push(Op::Add, &[gn, go])?
            }
        };
    }
    Ok(grad)
}

/// Discriminator: mirror of the generator, scoring images at the current
/// stage resolution. Emission also returns the layer trace used to build
/// the gradient-penalty subgraph.
#[derive(Debug, Clone)]
pub struct Discriminator {
    from_rgb: Vec<Conv2dSpec>,
    blocks: Vec<(Conv2dSpec, Conv2dSpec)>,
    final_conv: Conv2dSpec,
    final_linear: LinearSpec,
}

impl Discriminator {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let f4 = cfg.filters_at(BASE_RESOLUTION);
        let mut from_rgb = Vec::new();
        let mut blocks = Vec::new();
        from_rgb.push(Conv2dSpec::new("d.from_rgb4", 1, f4, 1, 0).equalized());
        for s in 1..cfg.n_stages() {
            let r = cfg.stage_resolution(s);
            let (f_r, f_half) = (cfg.filters_at(r), cfg.filters_at(r / 2));
            from_rgb.push(Conv2dSpec::new(format!("d.from_rgb{r}"), 1, f_r, 1, 0).equalized());
            blocks.push((
                Conv2dSpec::new(format!("d.block{r}.conv1"), f_r, f_r, 3, 1).equalized(),
                Conv2dSpec::new(format!("d.block{r}.conv2"), f_r, f_half, 3, 1).equalized(),
            ));
        }
        let final_conv = Conv2dSpec::new("d.final.conv", f4, f4, 3, 1).equalized();
        let final_linear = LinearSpec::new("d.final.linear", f4 * 16, 1).equalized();
        Ok(Discriminator {
            from_rgb,
            blocks,
            final_conv,
            final_linear,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) {
        for rgb in &self.from_rgb {
            rgb.register(store, rng);
        }
        for (c1, c2) in &self.blocks {
            c1.register(store, rng);
            c2.register(store, rng);
        }
        self.final_conv.register(store, rng);
        self.final_linear.register(store, rng);
    }

    fn stage_of(&self, resolution: usize) -> usize {
        (resolution / BASE_RESOLUTION).trailing_zeros() as usize
    }

    /// Emit an equalized conv and record it (plus its activation) in the
    /// trace.
    fn conv_lrelu(
        &self,
        g: &mut Graph,
        spec: &Conv2dSpec,
        x: NodeId,
        trace: &mut Vec<TraceStep>,
    ) -> Result<NodeId> {
        let pre = spec.emit(g, x)?;
        // recover the effective-weight node: conv node inputs are [x, w_eff, b]
        let w_eff = g.node(pre).inputs[1];
        trace.push(TraceStep::Conv {
            w_eff,
            padding: spec.padding,
        });
        trace.push(TraceStep::LeakyRelu { pre });
        g.push(Op::LeakyRelu { slope: 0.2 }, &[pre])
    }

    /// One downsampling block at resolution `r`: two convs then avg-pool.
    fn emit_block(
        &self,
        g: &mut Graph,
        r: usize,
        x: NodeId,
        trace: &mut Vec<TraceStep>,
    ) -> Result<NodeId> {
        let (c1, c2) = &self.blocks[self.stage_of(r) - 1];
        let h = self.conv_lrelu(g, c1, x, trace)?;
        let h = self.conv_lrelu(g, c2, h, trace)?;
        trace.push(TraceStep::AvgPool);
        g.push(Op::AvgPool2x2, &[h])
    }

    /// Score a batch of images at `resolution`; `fade` blends the fresh
    /// top block with the previous stage's input pathway.
    pub fn emit(
        &self,
        g: &mut Graph,
        x: NodeId,
        resolution: usize,
        fade: Option<(NodeId, NodeId)>,
    ) -> Result<(NodeId, DiscTrace)> {
        let mut trace = Vec::new();
        let stage = self.stage_of(resolution);
        let mut h;
        let mut r = resolution;
        if stage == 0 {
            h = self.conv_lrelu(g, &self.from_rgb[0], x, &mut trace)?;
        } else {
            match fade {
                Some((alpha, one_minus)) => {
                    let mut new_trace = Vec::new();
                    let hn = self.conv_lrelu(g, &self.from_rgb[stage], x, &mut new_trace)?;
                    let hn = self.emit_block(g, r, hn, &mut new_trace)?;

                    let mut old_trace = vec![TraceStep::AvgPool];
                    let xp = g.push(Op::AvgPool2x2, &[x])?;
                    let ho = self.conv_lrelu(g, &self.from_rgb[stage - 1], xp, &mut old_trace)?;

                    let a = g.push(Op::Mul, &[hn, alpha])?;
                    let b = g.push(Op::Mul, &[ho, one_minus])?;
                    h = g.push(Op::Add, &[a, b])?;
                    trace.push(TraceStep::Blend {
                        alpha,
                        one_minus,
                        new: new_trace,
                        old: old_trace,
                    });
                }
                None => {
                    h = self.conv_lrelu(g, &self.from_rgb[stage], x, &mut trace)?;
                    h = self.emit_block(g, r, h, &mut trace)?;
                }
            }
            r /= 2;
        }
        while r > BASE_RESOLUTION {
            h = self.emit_block(g, r, h, &mut trace)?;
            r /= 2;
        }
        h = self.conv_lrelu(g, &self.final_conv, h, &mut trace)?;
        let unflat = g.shape(h).to_vec();
        trace.push(TraceStep::Flatten { unflat });
        let flat = g.push(Op::Flatten, &[h])?;
        let lin = self.final_linear.emit(g, flat)?;
        let w_eff = g.node(lin).inputs[1];
        trace.push(TraceStep::Linear { w_eff });
        Ok((lin, DiscTrace { steps: trace }))
    }
}

/// Gradient-penalty subgraph over an already-emitted discriminator trace:
/// `lambda * mean((||d score / d x_hat||_2 - 1)^2)`. Needs two bound
/// inputs: `gp_seed` (ones `[B,1]`) and `gp_ones` (ones `[B]`).
fn emit_gradient_penalty(
    g: &mut Graph,
    trace: &DiscTrace,
    batch: usize,
    lambda: f64,
) -> Result<NodeId> {
    let seed = g.input("gp_seed", vec![batch, 1])?;
    let gx = emit_adjoint(g, &trace.steps, seed)?;
    let sq = g.push(Op::Mul, &[gx, gx])?;
    let ssum = g.push(Op::SumPerSample, &[sq])?;
    let norm = g.push(Op::SqrtEps { eps: 1e-12 }, &[ssum])?;
    let ones = g.input("gp_ones", vec![batch])?;
    let gp = g.push(Op::Mse, &[norm, ones])?;
    g.push(Op::MulScalar { c: lambda }, &[gp])
}

// ---- training ----------------------------------------------------------

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: usize,
    pub alpha: f64,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Append-only per-step training log; one row per optimizer iteration
/// (one discriminator update plus one generator update).
#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,alpha,d_loss,g_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.stage, r.alpha, r.d_loss, r.g_loss
            ));
        }
        out
    }
}

#[derive(Debug)]
pub struct GanTrainResult {
    /// Generator parameters (the persisted checkpoint).
    pub generator: ParamStore<f32>,
    /// Full parameter store (generator + discriminator).
    pub full: ParamStore<f32>,
    pub trace: LossTrace,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

struct StageGraphs {
    d_graph: Graph,
    d_loss: NodeId,
    d_scores_real: NodeId,
    d_scores_fake: NodeId,
    g_graph: Graph,
    g_loss: NodeId,
    uses_fade: bool,
    uses_gp: bool,
}

fn build_stage_graphs(
    gen: &Generator,
    disc: &Discriminator,
    cfg: &GanConfig,
    resolution: usize,
    stage_idx: usize,
) -> Result<StageGraphs> {
    let b = cfg.batch_size;
    let uses_fade = stage_idx > 0;
    let uses_gp = matches!(cfg.loss_mode, LossMode::Wasserstein) && cfg.gp_lambda > 0.0;
    let img_shape = vec![b, 1, resolution, resolution];

    // discriminator step: fake images enter as detached inputs
    let mut dg = Graph::new();
    let fade_nodes = |g: &mut Graph| -> Result<Option<(NodeId, NodeId)>> {
        if uses_fade {
            let a = g.input("alpha", vec![1])?;
            let om = g.input("one_minus_alpha", vec![1])?;
            Ok(Some((a, om)))
        } else {
            Ok(None)
        }
    };
    let fade = fade_nodes(&mut dg)?;
    let x_real = dg.input("x_real", img_shape.clone())?;
    let x_fake = dg.input("x_fake", img_shape.clone())?;
    let (s_real, _) = disc.emit(&mut dg, x_real, resolution, fade)?;
    let (s_fake, _) = disc.emit(&mut dg, x_fake, resolution, fade)?;
    let d_loss = match cfg.loss_mode {
        LossMode::Wasserstein => {
            let mf = dg.push(Op::MeanAll, &[s_fake])?;
            let mr = dg.push(Op::MeanAll, &[s_real])?;
            let neg = dg.push(Op::MulScalar { c: -1.0 }, &[mr])?;
            let base = dg.push(Op::Add, &[mf, neg])?;
            if uses_gp {
                let x_hat = dg.input("x_hat", img_shape.clone())?;
                let (_, hat_trace) = disc.emit(&mut dg, x_hat, resolution, fade)?;
                let gp = emit_gradient_penalty(&mut dg, &hat_trace, b, cfg.gp_lambda)?;
                dg.push(Op::Add, &[base, gp])?
            } else {
                base
            }
        }
        LossMode::Logistic => {
            // maximize ln s(s_r) + ln(1 - s(s_f)); minimized form uses
            // softplus identities
            let neg_r = dg.push(Op::MulScalar { c: -1.0 }, &[s_real])?;
            let a = dg.push(Op::Softplus, &[neg_r])?;
            let a = dg.push(Op::MeanAll, &[a])?;
            let bfl = dg.push(Op::Softplus, &[s_fake])?;
            let bfl = dg.push(Op::MeanAll, &[bfl])?;
            dg.push(Op::Add, &[a, bfl])?
        }
    };
    dg.mark_output("d_loss", d_loss);

    // generator step: latent flows through G into D
    let mut gg = Graph::new();
    let fade_g = fade_nodes(&mut gg)?;
    let z = gg.input("z", vec![b, cfg.latent_dim])?;
    let fake = gen.emit(&mut gg, z, resolution, fade_g)?;
    let (s_fake_g, _) = disc.emit(&mut gg, fake, resolution, fade_g)?;
    let g_loss = match cfg.loss_mode {
        LossMode::Wasserstein => {
            let m = gg.push(Op::MeanAll, &[s_fake_g])?;
            gg.push(Op::MulScalar { c: -1.0 }, &[m])?
        }
        LossMode::Logistic => {
            if cfg.non_saturating_g {
                let neg = gg.push(Op::MulScalar { c: -1.0 }, &[s_fake_g])?;
                let sp = gg.push(Op::Softplus, &[neg])?;
                gg.push(Op::MeanAll, &[sp])?
            } else {
                // minimize ln(1 - s(s_f)) = -softplus(s_f)
                let sp = gg.push(Op::Softplus, &[s_fake_g])?;
                let m = gg.push(Op::MeanAll, &[sp])?;
                gg.push(Op::MulScalar { c: -1.0 }, &[m])?
            }
        }
    };
    gg.mark_output("fake", fake);
    gg.mark_output("g_loss", g_loss);

    Ok(StageGraphs {
        d_graph: dg,
        d_loss,
        d_scores_real: s_real,
        d_scores_fake: s_fake,
        g_graph: gg,
        g_loss,
        uses_fade,
        uses_gp,
    })
}

/// Downsample every image to each stage resolution by repeated 2x2
/// average pooling.
fn build_pyramids(dataset: &LabeledDataset, cfg: &GanConfig) -> Result<Vec<Vec<Vec<f32>>>> {
    let full = dataset.height();
    let mut levels = Vec::new();
    let mut current: Vec<Vec<f32>> = dataset
        .records()
        .iter()
        .map(|r| r.pixels.data().to_vec())
        .collect();
    let mut res = full;
    while res > cfg.target_resolution {
        let mut next = Vec::with_capacity(current.len());
        for img in &current {
            let mut out = vec![0f32; (res / 2) * (res / 2)];
            kernels::avg_pool_2x2(img, 1, res, res, &mut out);
            next.push(out);
        }
        current = next;
        res /= 2;
    }
    let mut by_res = vec![current];
    while res > BASE_RESOLUTION {
        let prev = by_res.last().unwrap();
        let mut next = Vec::with_capacity(prev.len());
        for img in prev {
            let mut out = vec![0f32; (res / 2) * (res / 2)];
            kernels::avg_pool_2x2(img, 1, res, res, &mut out);
            next.push(out);
        }
        by_res.push(next);
        res /= 2;
    }
    by_res.reverse(); // index 0 = 4x4 .. last = target resolution
    Ok(levels.drain(..).chain(by_res).collect())
}

/// Train one per-class generator. Alternates one discriminator step with
/// one generator step; stages advance on the fixed schedule. Deterministic
/// for a fixed stream.
pub fn train_pggan(
    dataset: &LabeledDataset,
    cfg: &GanConfig,
    rng: &mut RngStream,
) -> Result<GanTrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty GAN training set".into()));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "dataset of {} images is smaller than batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let first_class = dataset.records()[0].class;
    if dataset.records().iter().any(|r| r.class != first_class) {
        return Err(Error::Dataset("GAN training set must be single-class".into()));
    }
    if dataset.height() != dataset.width() || !dataset.height().is_power_of_two() {
        return Err(Error::Dataset("GAN training images must be square power-of-two".into()));
    }
    if dataset.height() < cfg.target_resolution {
        return Err(Error::Dataset(format!(
            "images are {} px but target resolution is {}",
            dataset.height(),
            cfg.target_resolution
        )));
    }

    let gen = Generator::new(cfg)?;
    let disc = Discriminator::new(cfg)?;
    let mut store = ParamStore::<f32>::new();
    gen.register(&mut store, rng);
    disc.register(&mut store, rng);
    let adam_cfg = AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: 1e-8,
    };
    let mut adam_d = Adam::new(&store, adam_cfg);
    let mut adam_g = Adam::new(&store, adam_cfg);
    let lr = cfg.lr as f32;

    let pyramids = build_pyramids(dataset, cfg)?;
    let b = cfg.batch_size;
    let mut trace = LossTrace::default();
    let mut stage = ProgressiveStage::initial();
    let mut aborted = None;
    let mut global_step = 0usize;

    'stages: for stage_idx in 0..cfg.n_stages() {
        if stage_idx > 0 {
            stage = grow_stage(&stage, cfg)?;
        }
        let res = stage.resolution;
        let graphs = build_stage_graphs(&gen, &disc, cfg, res, stage_idx)?;
        let reals = &pyramids[stage_idx];
        let img_len = res * res;

        for step in 0..cfg.steps_per_stage {
            stage.fade_alpha = fade_alpha_for_step(stage_idx, step, cfg.steps_per_stage);
            stage.steps_in_stage = step;
            let alpha = stage.fade_alpha as f32;

            // -- discriminator update
            let mut real = Tensor::zeros(vec![b, 1, res, res]);
            for i in 0..b {
                let pick = rng.next_usize(reals.len());
                real.data_mut()[i * img_len..(i + 1) * img_len].copy_from_slice(&reals[pick]);
            }
            let mut z = Tensor::zeros(vec![b, cfg.latent_dim]);
            rng.fill_normal(z.data_mut());

            let mut g_inputs = Inputs::new();
            g_inputs.set("z", z.clone());
            if graphs.uses_fade {
                g_inputs.set("alpha", Tensor::scalar(alpha));
                g_inputs.set("one_minus_alpha", Tensor::scalar(1.0 - alpha));
            }
            let g_vals =
                evaluate_graph(&graphs.g_graph, &mut store, &g_inputs, &EvalOptions::inference())?;
            let fake = g_vals.output(&graphs.g_graph, "fake")?.clone();

            let mut d_inputs = Inputs::new();
            d_inputs.set("x_real", real.clone());
            d_inputs.set("x_fake", fake.clone());
            if graphs.uses_fade {
                d_inputs.set("alpha", Tensor::scalar(alpha));
                d_inputs.set("one_minus_alpha", Tensor::scalar(1.0 - alpha));
            }
            if graphs.uses_gp {
                let mut x_hat = Tensor::zeros(vec![b, 1, res, res]);
                for i in 0..b {
                    let eps = rng.next_f64() as f32;
                    for j in 0..img_len {
                        let idx = i * img_len + j;
                        x_hat.data_mut()[idx] =
                            eps * real.data()[idx] + (1.0 - eps) * fake.data()[idx];
                    }
                }
                d_inputs.set("x_hat", x_hat);
                d_inputs.set("gp_seed", Tensor::ones(vec![b, 1]));
                d_inputs.set("gp_ones", Tensor::ones(vec![b]));
            }
            let d_vals = evaluate_graph(
                &graphs.d_graph,
                &mut store,
                &d_inputs,
                &EvalOptions::training(),
            )?;
            let d_loss = d_vals.scalar(graphs.d_loss) as f64;
            let _ = (
                d_vals.node(graphs.d_scores_real),
                d_vals.node(graphs.d_scores_fake),
            );
            if !d_loss.is_finite() {
                aborted = Some(format!("non-finite d_loss at step {global_step}"));
                break 'stages;
            }
            backpropagate(&graphs.d_graph, &d_vals, graphs.d_loss, &mut store)?;
            adam_d.step_filtered(&mut store, lr, |n| n.starts_with("d."))?;

            // -- generator update
            let mut z = Tensor::zeros(vec![b, cfg.latent_dim]);
            rng.fill_normal(z.data_mut());
            let mut g_inputs = Inputs::new();
            g_inputs.set("z", z);
            if graphs.uses_fade {
                g_inputs.set("alpha", Tensor::scalar(alpha));
                g_inputs.set("one_minus_alpha", Tensor::scalar(1.0 - alpha));
            }
            let g_vals = evaluate_graph(
                &graphs.g_graph,
                &mut store,
                &g_inputs,
                &EvalOptions::training(),
            )?;
            let g_loss = g_vals.scalar(graphs.g_loss) as f64;
            if !g_loss.is_finite() {
                aborted = Some(format!("non-finite g_loss at step {global_step}"));
                break 'stages;
            }
            backpropagate(&graphs.g_graph, &g_vals, graphs.g_loss, &mut store)?;
            adam_g.step_filtered(&mut store, lr, |n| n.starts_with("g."))?;

            trace.rows.push(TraceRow {
                step: global_step,
                stage: res,
                alpha: stage.fade_alpha,
                d_loss,
                g_loss,
            });
            global_step += 1;
        }
        stage.fade_alpha = 1.0;
    }

    Ok(GanTrainResult {
        generator: store.subset_by_prefix("g."),
        full: store,
        trace,
        aborted,
    })
}

/// Sample images from a trained generator checkpoint at the target
/// resolution (post-fade topology).
pub fn sample_generator(
    gen: &Generator,
    params: &mut ParamStore<f32>,
    cfg: &GanConfig,
    count: usize,
    rng: &mut RngStream,
) -> Result<Tensor<f32>> {
    let res = cfg.target_resolution;
    let chunk = 64usize;
    let mut out = Tensor::zeros(vec![count, 1, res, res]);
    let img_len = res * res;
    let mut done = 0usize;
    let mut graphs: std::collections::HashMap<usize, (Graph, NodeId)> = Default::default();
    while done < count {
        let bsz = chunk.min(count - done);
        let (g, out_node) = match graphs.entry(bsz) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                let mut g = Graph::new();
                let z = g.input("z", vec![bsz, cfg.latent_dim])?;
                let img = gen.emit(&mut g, z, res, None)?;
                v.insert((g, img))
            }
        };
        let mut z = Tensor::zeros(vec![bsz, cfg.latent_dim]);
        rng.fill_normal(z.data_mut());
        let inputs = Inputs::new().bind("z", z);
        let vals = evaluate_graph(g, params, &inputs, &EvalOptions::inference())?;
        out.data_mut()[done * img_len..(done + bsz) * img_len]
            .copy_from_slice(vals.node(*out_node).data());
        done += bsz;
    }
    Ok(out)
}
