//! Noise-prediction networks: sinusoidal time embedding, a small U-Net
//! for images, and an MLP variant for the 2-D toy task.

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, LinearSpec};
use crate::numerics::graph::{Graph, NodeId, Op};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Sinusoidal timestep embedding:
/// `emb[2i] = sin(t w_i)`, `emb[2i+1] = cos(t w_i)`, `w_i = base^(-2i/dim)`.
#[derive(Debug, Clone, Copy)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "time embedding dim must be even and positive, got {dim}"
            )));
        }
        Ok(TimeEmbedding { dim, base: 10_000.0 })
    }
}

pub fn time_embed<T: Scalar>(t: usize, cfg: &TimeEmbedding) -> Vec<T> {
    let mut out = Vec::with_capacity(cfg.dim);
    for i in 0..cfg.dim / 2 {
        let omega = cfg.base.powf(-(2.0 * i as f64) / cfg.dim as f64);
        let arg = t as f64 * omega;
        out.push(T::of(arg.sin()));
        out.push(T::of(arg.cos()));
    }
    out
}

/// Stacked embeddings for a batch of timesteps: `[B, dim]`.
pub fn time_embed_batch<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let cfg = TimeEmbedding::new(dim)?;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed::<T>(t, &cfg));
    }
    Tensor::new(vec![ts.len(), dim], data)
}

/// Small U-Net configuration. `input_size` must be divisible by
/// `2^depth`; channels double per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 32,
            base_channels: 32,
            depth: 2,
            time_dim: 64,
            channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size % (1 << self.depth) != 0 {
            return Err(Error::InvalidArgument(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if self.base_channels == 0 || self.depth == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("all U-Net counts must be positive".into()));
        }
        TimeEmbedding::new(self.time_dim)?;
        Ok(())
    }
}

/// One conv block: `conv3x3 -> +time -> silu -> conv3x3 -> silu`, with the
/// time embedding injected through a learned linear projection.
#[derive(Debug, Clone)]
struct UNetBlock {
    conv1: Conv2dSpec,
    tproj: LinearSpec,
    conv2: Conv2dSpec,
}

impl UNetBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, time_dim: usize) -> Self {
        UNetBlock {
            conv1: Conv2dSpec::new(format!("{name}.conv1"), in_ch, out_ch, 3, 1),
            tproj: LinearSpec::new(format!("{name}.tproj"), time_dim, out_ch),
            conv2: Conv2dSpec::new(format!("{name}.conv2"), out_ch, out_ch, 3, 1),
        }
    }

    fn param_count(&self) -> usize {
        self.conv1.param_count() + self.tproj.param_count() + self.conv2.param_count()
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) {
        self.conv1.register(store, rng);
        self.tproj.register(store, rng);
        self.conv2.register(store, rng);
    }

    fn emit(&self, g: &mut Graph, x: NodeId, temb: NodeId) -> Result<NodeId> {
        let h = self.conv1.emit(g, x)?;
        let tp = self.tproj.emit(g, temb)?; // [B, out_ch]
        let h = g.push(Op::Add, &[h, tp])?;
        let h = g.push(Op::Silu, &[h])?;
        let h = self.conv2.emit(g, h)?;
        g.push(Op::Silu, &[h])
    }
}

/// Encoder/decoder U-Net with skip concatenation.
///
/// Channel plan for depth `D` and base width `C` (`c_l = C * 2^l`):
/// stem `conv(in, C)`; per encoder level `block(c_l, c_l)` then
/// `pool + conv(c_l, c_{l+1})`; bottleneck `block(c_D, c_D)`; per decoder
/// level `upsample + conv(c_{l+1}, c_l)`, concat the level-`l` skip, then
/// `block(2 c_l, c_l)`; head `conv(C, channels)`.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    stem: Conv2dSpec,
    enc: Vec<UNetBlock>,
    down: Vec<Conv2dSpec>,
    bottleneck: UNetBlock,
    up: Vec<Conv2dSpec>,
    dec: Vec<UNetBlock>,
    head: Conv2dSpec,
}

impl UNet {
    pub fn new(prefix: &str, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = |l: usize| cfg.base_channels << l;
        let stem = Conv2dSpec::new(format!("{prefix}.stem"), cfg.channels, c(0), 3, 1);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.depth {
            enc.push(UNetBlock::new(&format!("{prefix}.enc{l}"), c(l), c(l), cfg.time_dim));
            down.push(Conv2dSpec::new(
                format!("{prefix}.down{l}"),
                c(l),
                c(l + 1),
                3,
                1,
            ));
        }
        let bottleneck = UNetBlock::new(
            &format!("{prefix}.mid"),
            c(cfg.depth),
            c(cfg.depth),
            cfg.time_dim,
        );
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..cfg.depth).rev() {
            up.push(Conv2dSpec::new(
                format!("{prefix}.up{l}"),
                c(l + 1),
                c(l),
                3,
                1,
            ));
            dec.push(UNetBlock::new(
                &format!("{prefix}.dec{l}"),
                2 * c(l),
                c(l),
                cfg.time_dim,
            ));
        }
        let head = Conv2dSpec::new(format!("{prefix}.head"), c(0), cfg.channels, 3, 1);
        Ok(UNet {
            cfg,
            stem,
            enc,
            down,
            bottleneck,
            up,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Deterministic parameter count implied by the channel plan; asserted
    /// against the registered parameters in tests.
    pub fn expected_param_count(&self) -> usize {
        let mut n = self.stem.param_count() + self.head.param_count();
        for b in &self.enc {
            n += b.param_count();
        }
        for d in &self.down {
            n += d.param_count();
        }
        n += self.bottleneck.param_count();
        for u in &self.up {
            n += u.param_count();
        }
        for b in &self.dec {
            n += b.param_count();
        }
        n
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) {
        self.stem.register(store, rng);
        for (b, d) in self.enc.iter().zip(&self.down) {
            b.register(store, rng);
            d.register(store, rng);
        }
        self.bottleneck.register(store, rng);
        for (u, b) in self.up.iter().zip(&self.dec) {
            u.register(store, rng);
            b.register(store, rng);
        }
        self.head.register(store, rng);
    }
}

impl<T: Scalar> NoisePredictor<T> for UNet {
    fn time_dim(&self) -> usize {
        self.cfg.time_dim
    }

    fn emit(&self, g: &mut Graph, x_t: NodeId, temb: NodeId) -> Result<NodeId> {
        let mut h = self.stem.emit(g, x_t)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (block, downsample) in self.enc.iter().zip(&self.down) {
            h = block.emit(g, h, temb)?;
            skips.push(h);
            let pooled = g.push(Op::AvgPool2x2, &[h])?;
            h = downsample.emit(g, pooled)?;
        }
        h = self.bottleneck.emit(g, h, temb)?;
        for (up, block) in self.up.iter().zip(&self.dec) {
            let upsampled = g.push(Op::UpsampleNearest2x, &[h])?;
            h = up.emit(g, upsampled)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = g.push(Op::ConcatChannels, &[h, skip])?;
            h = block.emit(g, cat, temb)?;
        }
        self.head.emit(g, h)
    }
}

/// Toy denoiser for 2-D data: `concat(x, temb)` through two SiLU hidden
/// layers.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    pub in_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    l1: LinearSpec,
    l2: LinearSpec,
    l3: LinearSpec,
}

impl MlpDenoiser {
    pub fn new(prefix: &str, in_dim: usize, hidden: usize, time_dim: usize) -> Result<Self> {
        TimeEmbedding::new(time_dim)?;
        Ok(MlpDenoiser {
            in_dim,
            hidden,
            time_dim,
            l1: LinearSpec::new(format!("{prefix}.l1"), in_dim + time_dim, hidden),
            l2: LinearSpec::new(format!("{prefix}.l2"), hidden, hidden),
            l3: LinearSpec::new(format!("{prefix}.l3"), hidden, in_dim),
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) {
        self.l1.register(store, rng);
        self.l2.register(store, rng);
        self.l3.register(store, rng);
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count() + self.l3.param_count()
    }
}

impl<T: Scalar> NoisePredictor<T> for MlpDenoiser {
    fn time_dim(&self) -> usize {
        self.time_dim
    }

    fn emit(&self, g: &mut Graph, x_t: NodeId, temb: NodeId) -> Result<NodeId> {
        let cat = g.push(Op::ConcatChannels, &[x_t, temb])?;
        let h = self.l1.emit(g, cat)?;
        let h = g.push(Op::Silu, &[h])?;
        let h = self.l2.emit(g, h)?;
        let h = g.push(Op::Silu, &[h])?;
        self.l3.emit(g, h)
    }
}
