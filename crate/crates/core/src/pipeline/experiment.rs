//! The full experiment: a fixed composition of the disk-isolated stages.
//!
//! Random decisions draw from streams derived from the master seed with
//! fixed indices per stage, so a rerun with the same config reproduces
//! every emitted value bit for bit.

use std::path::Path;

use crate::denoiser::UNet;
use crate::diffusion::{build_schedule, ddpm_loss_and_grads, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::pipeline::config::{DdpmConfig, ExperimentConfig};
use crate::pipeline::report::{emit_report, ExperimentReport};
use crate::pipeline::stages;
use crate::selection::LabeledDataset;

/// DDPM training output: U-Net parameters plus the per-step loss trace.
pub struct DdpmTrainResult {
    pub params: ParamStore<f32>,
    pub unet: UNet,
    pub schedule: NoiseSchedule<f32>,
    pub losses: Vec<(usize, f64)>,
}

/// Train the epsilon-predicting U-Net on one class.
pub fn train_ddpm(
    class_set: &LabeledDataset,
    cfg: &DdpmConfig,
    rng: &mut RngStream,
) -> Result<DdpmTrainResult> {
    if class_set.is_empty() {
        return Err(Error::Dataset("empty DDPM training set".into()));
    }
    let mut unet_cfg = cfg.unet;
    if unet_cfg.input_size != class_set.height() {
        return Err(Error::Config {
            path: "ddpm.unet.input_size".into(),
            message: format!(
                "{} does not match corpus size {}",
                unet_cfg.input_size,
                class_set.height()
            ),
        });
    }
    unet_cfg.channels = 1;
    let unet = UNet::new("ddpm", unet_cfg)?;
    let mut params = ParamStore::new();
    unet.register(&mut params, rng);
    let schedule =
        build_schedule(ScheduleKind::Linear, cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let mut adam = Adam::new(&params, AdamConfig::default());
    let lr = cfg.lr as f32;

    let size = class_set.height();
    let plane = size * size;
    let mut order: Vec<usize> = (0..class_set.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x0 = Tensor::zeros(vec![chunk.len(), 1, size, size]);
            for (i, &idx) in chunk.iter().enumerate() {
                x0.data_mut()[i * plane..(i + 1) * plane]
                    .copy_from_slice(class_set.records()[idx].pixels.data());
            }
            let loss = ddpm_loss_and_grads(&x0, &unet, &mut params, &schedule, rng)?;
            adam.step(&mut params, lr)?;
            losses.push((step, loss as f64));
            step += 1;
        }
    }
    Ok(DdpmTrainResult {
        params,
        unet,
        schedule,
        losses,
    })
}

struct StageTimer {
    verbose: bool,
    start: std::time::Instant,
}

impl StageTimer {
    fn begin(verbose: bool, name: &str) -> Self {
        if verbose {
            eprintln!("[stage] {name} ...");
        }
        StageTimer {
            verbose,
            start: std::time::Instant::now(),
        }
    }

    fn done(self, name: &str) {
        if self.verbose {
            eprintln!(
                "[stage] {name} done in {:.1}s",
                self.start.elapsed().as_secs_f64()
            );
        }
    }
}

/// Execute the full protocol for one configuration. Artifacts land under
/// `config.out_dir`; the report is returned and also persisted.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with_options(config, false)
}

pub fn run_experiment_with_options(
    config: &ExperimentConfig,
    verbose: bool,
) -> Result<ExperimentReport> {
    config.validate()?;

    let t = StageTimer::begin(verbose, "gen-corpus");
    stages::stage_gen_corpus(config).map_err(|e| e.in_stage("corpus"))?;
    t.done("gen-corpus");

    let t = StageTimer::begin(verbose, "scenario");
    stages::stage_scenario(config).map_err(|e| e.in_stage("scenario"))?;
    t.done("scenario");

    let t = StageTimer::begin(verbose, "train-ddpm");
    stages::stage_train_ddpm(config)?;
    t.done("train-ddpm");

    let t = StageTimer::begin(verbose, "train-pggan");
    stages::stage_train_pggan(config)?;
    t.done("train-pggan");

    let t = StageTimer::begin(verbose, "synth");
    stages::stage_synth(config)?;
    t.done("synth");

    let t = StageTimer::begin(verbose, "fid");
    let (fid_rows, expert_rows) = stages::stage_fid(config).map_err(|e| e.in_stage("fid"))?;
    t.done("fid");

    let t = StageTimer::begin(verbose, "train-classifier");
    let rows = stages::stage_train_classifier(config, verbose)?;
    t.done("train-classifier");

    let mut report = ExperimentReport {
        rows,
        fid_rows,
        expert_rows,
        aggregates: vec![],
    };
    report
        .compute_aggregates()
        .map_err(|e| e.in_stage("report"))?;
    emit_report(&report, &config.out_dir.join("report")).map_err(|e| e.in_stage("report"))?;
    Ok(report)
}

/// Audit a finished experiment directory: train, test and synthetic id
/// sets must be pairwise disjoint.
pub fn audit_disjoint(out_dir: &Path) -> Result<()> {
    let read_ids = |p: &Path| -> Result<std::collections::HashSet<String>> {
        Ok(std::fs::read_to_string(p)?
            .lines()
            .map(String::from)
            .collect())
    };
    let train = read_ids(&out_dir.join("ids/train.txt"))?;
    let mut tests: Vec<std::collections::HashSet<String>> = Vec::new();
    for i in 0.. {
        let p = out_dir.join(format!("ids/test_{i}.txt"));
        if !p.exists() {
            break;
        }
        tests.push(read_ids(&p)?);
    }
    if tests.is_empty() {
        return Err(Error::Dataset("no test id lists found".into()));
    }
    for (i, t) in tests.iter().enumerate() {
        if !train.is_disjoint(t) {
            return Err(Error::Dataset(format!("train overlaps test_{i}")));
        }
        for (j, u) in tests.iter().enumerate().skip(i + 1) {
            if !t.is_disjoint(u) {
                return Err(Error::Dataset(format!("test_{i} overlaps test_{j}")));
            }
        }
    }
    // synthetic ids never appear in any test set
    for gen in ["ddpm", "pggan"] {
        let dir = out_dir.join("synth").join(gen);
        if !dir.exists() {
            continue;
        }
        let synth = crate::corpus::load_corpus(&dir)?;
        for id in synth.ids() {
            for (i, t) in tests.iter().enumerate() {
                if t.contains(id) {
                    return Err(Error::Dataset(format!(
                        "synthetic id `{id}` found in test_{i}"
                    )));
                }
            }
        }
    }
    Ok(())
}
