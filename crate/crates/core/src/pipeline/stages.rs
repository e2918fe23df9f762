//! Individually runnable pipeline stages. Every stage reads its inputs
//! from the experiment directory and persists its outputs there, so any
//! stage can be rerun from disk and the full experiment is simply their
//! composition.

use std::path::{Path, PathBuf};

use crate::classify::{
    build_custom_cnn, fit_classifier, train_and_evaluate, ExpertFeaturizer, TrainProtocol,
    TrainedClassifier,
};
use crate::corpus::{
    dequantize, generate_synthetic_corpus, load_checkpoint, load_corpus, quantize,
    save_checkpoint, save_corpus,
};
use crate::denoiser::UNet;
use crate::diffusion::{ancestral_sample, build_schedule, SampleOptions, ScheduleKind};
use crate::error::{Error, Result};
use crate::metrics::{
    expert_agreement, feature_stats, frechet_distance, PixelFeaturizer,
};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::derive_stream;
use crate::numerics::tensor::Tensor;
use crate::pggan::{sample_generator, train_pggan, Generator};
use crate::pipeline::config::{CorpusSource, ExperimentConfig, ExtractorKind};
use crate::pipeline::report::{ExpertRow, FidRow, RunRow, Variant};
use crate::pipeline::experiment::train_ddpm;
use crate::selection::{
    build_scenario, minority_class, mix_with_synthetic, write_id_list, LabeledDataset, Provenance,
    Record, Scenario, ScenarioKind,
};

// Stream indices per stage; classifier combinations hash in below 100.
pub(crate) const STREAM_CORPUS: u64 = 0;
pub(crate) const STREAM_SCENARIO: u64 = 1;
pub(crate) const STREAM_DDPM_TRAIN: u64 = 10;
pub(crate) const STREAM_PGGAN_TRAIN: u64 = 20;
pub(crate) const STREAM_DDPM_SYNTH: u64 = 30;
pub(crate) const STREAM_PGGAN_SYNTH: u64 = 40;
pub(crate) const STREAM_EXPERT: u64 = 50;
pub(crate) const STREAM_CLASSIFIER_BASE: u64 = 100;

/// Snap pixels to their persisted (u8-quantized) values so in-memory
/// datasets and artifacts reloaded from disk are identical.
pub(crate) fn snap_to_storage(dataset: &mut LabeledDataset) {
    let records: Vec<Record> = dataset
        .records()
        .iter()
        .map(|r| Record {
            id: r.id.clone(),
            class: r.class,
            pixels: r.pixels.map(|v| dequantize(quantize(v))),
        })
        .collect();
    let mut fresh = LabeledDataset::new(
        dataset.class_names().to_vec(),
        dataset.provenance(),
        dataset.height(),
        dataset.width(),
    );
    for r in records {
        fresh.push(r).expect("same geometry");
    }
    *dataset = fresh;
}

pub(crate) fn params_from_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, tensor) in load_checkpoint(path)? {
        store.insert_state(&name, tensor);
    }
    Ok(store)
}

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

/// Generate (or import) the corpus into `<out>/corpus`.
pub fn stage_gen_corpus(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let corpus = match &cfg.corpus {
        CorpusSource::Generated { n_per_class, size, seed } => {
            let seed = seed.unwrap_or(cfg.master_seed);
            let mut rng = derive_stream(seed, STREAM_CORPUS);
            let mut ds = generate_synthetic_corpus(*n_per_class, *size, &mut rng)?;
            snap_to_storage(&mut ds);
            save_corpus(&ds, &corpus_dir(cfg))?;
            ds
        }
        CorpusSource::Dir { path } => load_corpus(path)?,
    };
    corpus.check_unique_ids()?;
    check_geometry(cfg, &corpus)?;
    Ok(corpus)
}

/// Load the corpus a previous stage persisted (or the external directory).
pub fn resolve_corpus(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let dir = match &cfg.corpus {
        CorpusSource::Generated { .. } => corpus_dir(cfg),
        CorpusSource::Dir { path } => path.clone(),
    };
    if !dir.exists() {
        return Err(Error::Dataset(format!(
            "corpus directory {} not found (run gen-corpus first)",
            dir.display()
        )));
    }
    let corpus = load_corpus(&dir)?;
    check_geometry(cfg, &corpus)?;
    Ok(corpus)
}

fn check_geometry(cfg: &ExperimentConfig, corpus: &LabeledDataset) -> Result<()> {
    let size = corpus.height();
    if cfg.classifier.input_size != size {
        return Err(Error::Config {
            path: "classifier.input_size".into(),
            message: format!("{} does not match corpus size {size}", cfg.classifier.input_size),
        });
    }
    if cfg.pggan.target_resolution != size {
        return Err(Error::Config {
            path: "pggan.target_resolution".into(),
            message: format!(
                "{} does not match corpus size {size}",
                cfg.pggan.target_resolution
            ),
        });
    }
    if cfg.ddpm.unet.input_size != size {
        return Err(Error::Config {
            path: "ddpm.unet.input_size".into(),
            message: format!("{} does not match corpus size {size}", cfg.ddpm.unet.input_size),
        });
    }
    Ok(())
}

/// Build the train/test split and persist it with audit id lists.
pub fn stage_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    let corpus = resolve_corpus(cfg)?;
    let mut rng = derive_stream(cfg.master_seed, STREAM_SCENARIO);
    let scenario = build_scenario(&corpus, &cfg.scenario, &mut rng)?;
    let ids = cfg.out_dir.join("ids");
    std::fs::create_dir_all(&ids)?;
    save_corpus(&scenario.train, &cfg.out_dir.join("scenario/train"))?;
    write_id_list(&scenario.train, &ids.join("train.txt"))?;
    for (i, t) in scenario.test_sets.iter().enumerate() {
        save_corpus(t, &cfg.out_dir.join(format!("scenario/test_{i}")))?;
        write_id_list(t, &ids.join(format!("test_{i}.txt")))?;
    }
    Ok(scenario)
}

/// Reload a persisted scenario.
pub fn load_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    let train_dir = cfg.out_dir.join("scenario/train");
    if !train_dir.exists() {
        return Err(Error::Dataset(
            "scenario not found on disk (run the scenario stage first)".into(),
        ));
    }
    let train = load_corpus(&train_dir)?.with_provenance(Provenance::Train);
    let mut test_sets = Vec::new();
    for i in 0.. {
        let dir = cfg.out_dir.join(format!("scenario/test_{i}"));
        if !dir.exists() {
            break;
        }
        test_sets.push(load_corpus(&dir)?.with_provenance(Provenance::Test));
    }
    if test_sets.is_empty() {
        return Err(Error::Dataset("no persisted test sets".into()));
    }
    Ok(Scenario { train, test_sets })
}

fn losses_csv(losses: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (s, l) in losses {
        out.push_str(&format!("{s},{l}\n"));
    }
    out
}

/// Train one DDPM per class on the persisted scenario train set.
pub fn stage_train_ddpm(cfg: &ExperimentConfig) -> Result<()> {
    let scenario = load_scenario(cfg)?;
    let ckpt = cfg.out_dir.join("checkpoints");
    let traces = cfg.out_dir.join("traces");
    std::fs::create_dir_all(&ckpt)?;
    std::fs::create_dir_all(&traces)?;
    let by_class = scenario.train.indices_by_class();
    for (class, indices) in by_class.iter().enumerate() {
        let name = scenario.train.class_names()[class].clone();
        let class_set = scenario.train.subset(indices, Provenance::Train);
        let mut rng = derive_stream(cfg.master_seed, STREAM_DDPM_TRAIN + class as u64);
        let result = train_ddpm(&class_set, &cfg.ddpm, &mut rng)
            .map_err(|e| e.in_stage(&format!("train-ddpm:{name}")))?;
        save_checkpoint(&result.params.to_entries(), &ckpt.join(format!("ddpm_{name}.agb")))?;
        std::fs::write(traces.join(format!("ddpm_{name}.csv")), losses_csv(&result.losses))?;
    }
    Ok(())
}

/// Train one progressive GAN per class on the persisted scenario train set.
pub fn stage_train_pggan(cfg: &ExperimentConfig) -> Result<()> {
    let scenario = load_scenario(cfg)?;
    let ckpt = cfg.out_dir.join("checkpoints");
    let traces = cfg.out_dir.join("traces");
    std::fs::create_dir_all(&ckpt)?;
    std::fs::create_dir_all(&traces)?;
    let by_class = scenario.train.indices_by_class();
    for (class, indices) in by_class.iter().enumerate() {
        let name = scenario.train.class_names()[class].clone();
        let class_set = scenario.train.subset(indices, Provenance::Train);
        let mut rng = derive_stream(cfg.master_seed, STREAM_PGGAN_TRAIN + class as u64);
        let result = train_pggan(&class_set, &cfg.pggan, &mut rng)
            .map_err(|e| e.in_stage(&format!("train-pggan:{name}")))?;
        // the trace is written even when training aborted on a bad loss
        std::fs::write(traces.join(format!("pggan_{name}.csv")), result.trace.to_csv())?;
        if let Some(reason) = &result.aborted {
            return Err(Error::NonFinite {
                context: format!("PGGAN training aborted: {reason}"),
            }
            .in_stage(&format!("train-pggan:{name}")));
        }
        save_checkpoint(
            &result.generator.to_entries(),
            &ckpt.join(format!("pggan_{name}.agb")),
        )?;
    }
    Ok(())
}

fn synth_dataset_from_tensor(
    samples: &Tensor<f32>,
    class_names: &[String],
    class: usize,
    size: usize,
    prefix: &str,
    provenance: Provenance,
) -> Result<LabeledDataset> {
    let mut out = LabeledDataset::new(class_names.to_vec(), provenance, size, size);
    let plane = size * size;
    for i in 0..samples.shape()[0] {
        let pixels = samples.data()[i * plane..(i + 1) * plane].to_vec();
        out.push(Record {
            id: format!("{prefix}_{}_{i:05}", class_names[class]),
            class,
            pixels: Tensor::from_vec(vec![1, size, size], pixels),
        })?;
    }
    Ok(out)
}

/// Generate `synth_per_class` images per class per generator from the
/// persisted checkpoints.
pub fn stage_synth(cfg: &ExperimentConfig) -> Result<()> {
    let scenario = load_scenario(cfg)?;
    let class_names = scenario.train.class_names().to_vec();
    let size = scenario.train.height();
    let ckpt = cfg.out_dir.join("checkpoints");

    for (class, name) in class_names.iter().enumerate() {
        // DDPM
        let mut unet_cfg = cfg.ddpm.unet;
        unet_cfg.channels = 1;
        let unet = UNet::new("ddpm", unet_cfg)?;
        let mut params = params_from_checkpoint(&ckpt.join(format!("ddpm_{name}.agb")))
            .map_err(|e| e.in_stage(&format!("synth-ddpm:{name}")))?;
        let schedule = build_schedule::<f32>(
            ScheduleKind::Linear,
            cfg.ddpm.timesteps,
            cfg.ddpm.beta_start,
            cfg.ddpm.beta_end,
        )?;
        let mut rng = derive_stream(cfg.master_seed, STREAM_DDPM_SYNTH + class as u64);
        let samples = ancestral_sample(
            &unet,
            &mut params,
            &schedule,
            cfg.synth_per_class,
            &[1, size, size],
            &mut rng,
            &SampleOptions::default(),
        )
        .map_err(|e| e.in_stage(&format!("synth-ddpm:{name}")))?;
        let mut ds = synth_dataset_from_tensor(
            &samples,
            &class_names,
            class,
            size,
            "ddpm",
            Provenance::SyntheticDdpm,
        )?;
        snap_to_storage(&mut ds);
        save_corpus(&ds, &cfg.out_dir.join("synth/ddpm"))?;

        // PGGAN
        let generator = Generator::new(&cfg.pggan)?;
        let mut params = params_from_checkpoint(&ckpt.join(format!("pggan_{name}.agb")))
            .map_err(|e| e.in_stage(&format!("synth-pggan:{name}")))?;
        let mut rng = derive_stream(cfg.master_seed, STREAM_PGGAN_SYNTH + class as u64);
        let samples =
            sample_generator(&generator, &mut params, &cfg.pggan, cfg.synth_per_class, &mut rng)
                .map_err(|e| e.in_stage(&format!("synth-pggan:{name}")))?;
        let mut ds = synth_dataset_from_tensor(
            &samples,
            &class_names,
            class,
            size,
            "pggan",
            Provenance::SyntheticPggan,
        )?;
        snap_to_storage(&mut ds);
        save_corpus(&ds, &cfg.out_dir.join("synth/pggan"))?;
    }
    Ok(())
}

pub fn load_synth(cfg: &ExperimentConfig, generator: Variant) -> Result<LabeledDataset> {
    let sub = match generator {
        Variant::Ddpm => "synth/ddpm",
        Variant::Pggan => "synth/pggan",
        Variant::Original => {
            return Err(Error::InvalidArgument("`original` has no synthetic set".into()))
        }
    };
    let dir = cfg.out_dir.join(sub);
    if !dir.exists() {
        return Err(Error::Dataset(format!(
            "synthetic set {} not found (run the synth stage first)",
            dir.display()
        )));
    }
    let prov = match generator {
        Variant::Ddpm => Provenance::SyntheticDdpm,
        _ => Provenance::SyntheticPggan,
    };
    Ok(load_corpus(&dir)?.with_provenance(prov))
}

/// Train the expert (real data only) if its checkpoint is absent, then
/// load it.
pub fn expert_classifier(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<TrainedClassifier> {
    let path = cfg.out_dir.join("checkpoints/expert.agb");
    let arch = build_custom_cnn(cfg.classifier.input_size)?;
    if !path.exists() {
        let mut rng = derive_stream(cfg.master_seed, STREAM_EXPERT);
        let protocol = TrainProtocol {
            epochs: cfg.classifier.cnn_epochs,
            batch_size: cfg.classifier.batch_size,
            lr: cfg.classifier.lr,
            runs: 2, // single fit; the runs field is not used here
        };
        let fit = fit_classifier(
            crate::classify::ModelKind::CustomCnn,
            cfg.classifier.input_size,
            &scenario.train,
            &protocol,
            &mut rng,
        )?;
        std::fs::create_dir_all(path.parent().unwrap())?;
        save_checkpoint(&fit.model.store.to_entries(), &path)?;
        return Ok(fit.model);
    }
    // rebuild with proper trainability flags, then overwrite from disk
    let mut store = ParamStore::new();
    let mut rng = derive_stream(cfg.master_seed, STREAM_EXPERT);
    arch.register(&mut store, &mut rng);
    let entries = load_checkpoint(&path)?;
    for (name, tensor) in &entries {
        let dst = store.get_mut(name)?;
        if dst.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "expert checkpoint entry `{name}`: {:?} vs {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(tensor.data());
    }
    Ok(TrainedClassifier::new(arch, store))
}

/// Score both generators against the real per-class training images and
/// run the expert realism check.
pub fn stage_fid(cfg: &ExperimentConfig) -> Result<(Vec<FidRow>, Vec<ExpertRow>)> {
    let scenario = load_scenario(cfg)?;
    let class_names = scenario.train.class_names().to_vec();
    let by_class = scenario.train.indices_by_class();
    let mut expert = expert_classifier(cfg, &scenario).map_err(|e| e.in_stage("fid"))?;

    let mut fid_rows = Vec::new();
    let mut expert_rows = Vec::new();
    for (generator, set) in [
        (Variant::Ddpm, load_synth(cfg, Variant::Ddpm)?),
        (Variant::Pggan, load_synth(cfg, Variant::Pggan)?),
    ] {
        let synth_by_class = set.indices_by_class();
        for class in 0..class_names.len() {
            if synth_by_class[class].is_empty() {
                continue;
            }
            let real = scenario.train.subset(&by_class[class], Provenance::Train);
            let synth = set.subset(&synth_by_class[class], set.provenance());
            let fid = match cfg.fid_extractor {
                ExtractorKind::Pixels8 => {
                    let mut fz = PixelFeaturizer;
                    frechet_distance(&feature_stats(&real, &mut fz)?, &feature_stats(&synth, &mut fz)?)?
                }
                ExtractorKind::Expert => {
                    let mut fz = ExpertFeaturizer { expert: &mut expert };
                    frechet_distance(&feature_stats(&real, &mut fz)?, &feature_stats(&synth, &mut fz)?)?
                }
            };
            fid_rows.push(FidRow {
                generator,
                class: class_names[class].clone(),
                extractor: match cfg.fid_extractor {
                    ExtractorKind::Pixels8 => "pixels8".into(),
                    ExtractorKind::Expert => "expert-penultimate".into(),
                },
                fid,
            });
            expert_rows.push(ExpertRow {
                generator,
                class: class_names[class].clone(),
                agreement: expert_agreement(&mut expert, &synth, class)?,
            });
        }
    }
    Ok((fid_rows, expert_rows))
}

/// Train every configured model on {original, ddpm-mix, pggan-mix} for
/// the configured number of runs.
pub fn stage_train_classifier(cfg: &ExperimentConfig, verbose: bool) -> Result<Vec<RunRow>> {
    let scenario = load_scenario(cfg)?;
    let minority = minority_class(&scenario.train);
    let class_names = scenario.train.class_names().to_vec();
    let ddpm_synth = load_synth(cfg, Variant::Ddpm)?;
    let pggan_synth = load_synth(cfg, Variant::Pggan)?;

    // synthetic additions: both classes in the small scenario, the
    // minority only in the imbalanced scenario
    let add_counts: Vec<usize> = (0..class_names.len())
        .map(|c| match cfg.scenario.kind {
            ScenarioKind::Small => cfg.synth_per_class,
            ScenarioKind::Imbalanced if c == minority => cfg.synth_per_class,
            ScenarioKind::Imbalanced => 0,
        })
        .collect();
    let split_by_class = |set: &LabeledDataset| -> Vec<LabeledDataset> {
        set.indices_by_class()
            .iter()
            .map(|idx| set.subset(idx, set.provenance()))
            .collect()
    };
    let ddpm_sets = split_by_class(&ddpm_synth);
    let pggan_sets = split_by_class(&pggan_synth);
    let ddpm_mix = mix_with_synthetic(&scenario.train, &ddpm_sets.iter().collect::<Vec<_>>(), &add_counts)?;
    let pggan_mix =
        mix_with_synthetic(&scenario.train, &pggan_sets.iter().collect::<Vec<_>>(), &add_counts)?;

    let mut rows = Vec::new();
    for (model_idx, &kind) in cfg.classifier.models.iter().enumerate() {
        for (variant_idx, (variant, train_set)) in [
            (Variant::Original, &scenario.train),
            (Variant::Ddpm, &ddpm_mix),
            (Variant::Pggan, &pggan_mix),
        ]
        .into_iter()
        .enumerate()
        {
            let protocol = TrainProtocol {
                epochs: cfg.classifier.epochs_for(kind),
                batch_size: cfg.classifier.batch_size,
                lr: cfg.classifier.lr,
                runs: cfg.runs,
            };
            let seed = derive_stream(
                cfg.master_seed,
                STREAM_CLASSIFIER_BASE + (model_idx * 10 + variant_idx) as u64,
            )
            .next_u64();
            let metrics = train_and_evaluate(
                kind,
                cfg.classifier.input_size,
                train_set,
                &scenario.test_sets,
                &protocol,
                minority,
                seed,
            )
            .map_err(|e| e.in_stage(&format!("train-classifier:{kind}:{variant}")))?;
            for (run, m) in metrics.iter().enumerate() {
                rows.push(RunRow {
                    model: kind.to_string(),
                    scenario: cfg.scenario.kind,
                    sampling: cfg.scenario.sampling,
                    variant,
                    run,
                    accuracy: m.accuracy,
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                });
            }
            if verbose {
                let accs: Vec<f64> = metrics.iter().map(|m| m.accuracy).collect();
                eprintln!("[stage]   {kind} {variant}: acc {accs:?}");
            }
        }
    }
    Ok(rows)
}
