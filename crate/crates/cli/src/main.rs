//! Command-line driver for the experiment pipeline.
//!
//! Each subcommand runs one stage against the experiment directory named
//! in the config (`experiment` runs them all). Exit code 0 on success;
//! failures print a stage-tagged diagnostic to stderr.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use augbench_core::pipeline::{
    self, audit_disjoint, parse_config, reaggregate_report_dir, run_experiment_with_options,
    write_fid_files, write_runs_file, ExperimentConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "augbench",
    about = "DDPM/PGGAN augmentation study on small and imbalanced image datasets",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (strict JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print stage progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or import) the corpus into `<out>/corpus`.
    GenCorpus,
    /// Build the train/test scenario split with audit id lists.
    Scenario,
    /// Train one DDPM per class on the persisted scenario.
    TrainDdpm,
    /// Train one progressive GAN per class on the persisted scenario.
    TrainPggan,
    /// Sample synthetic images from the persisted generator checkpoints.
    Synth,
    /// Score generators with FID and the expert realism check.
    Fid,
    /// Train classifiers on original and mixed datasets.
    TrainClassifier,
    /// Run every stage end to end and emit the report.
    Experiment,
    /// Re-aggregate report CSVs into summary files.
    Report,
    /// Verify train/test/synthetic id disjointness of a finished run.
    Audit,
}

fn load_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            parse_config(&text)?
        }
        None => parse_config("{}")?,
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() {
    let args = Args::parse();
    if let Err(e) = run(&args) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    match args.command {
        Command::GenCorpus => {
            let corpus = pipeline::stage_gen_corpus(&cfg)?;
            println!(
                "corpus: {} images, {} classes, {}x{} -> {}",
                corpus.len(),
                corpus.class_names().len(),
                corpus.height(),
                corpus.width(),
                cfg.out_dir.join("corpus").display()
            );
        }
        Command::Scenario => {
            let scenario = pipeline::stage_scenario(&cfg)?;
            println!(
                "scenario: train {:?}, {} test set(s) -> {}",
                scenario.train.class_counts(),
                scenario.test_sets.len(),
                cfg.out_dir.join("scenario").display()
            );
        }
        Command::TrainDdpm => {
            pipeline::stage_train_ddpm(&cfg)?;
            println!("ddpm checkpoints -> {}", cfg.out_dir.join("checkpoints").display());
        }
        Command::TrainPggan => {
            pipeline::stage_train_pggan(&cfg)?;
            println!("pggan checkpoints -> {}", cfg.out_dir.join("checkpoints").display());
        }
        Command::Synth => {
            pipeline::stage_synth(&cfg)?;
            println!(
                "{} synthetic images per class per generator -> {}",
                cfg.synth_per_class,
                cfg.out_dir.join("synth").display()
            );
        }
        Command::Fid => {
            let (fid_rows, expert_rows) = pipeline::stage_fid(&cfg)?;
            write_fid_files(&fid_rows, &expert_rows, &cfg.out_dir.join("report"))?;
            for r in &fid_rows {
                println!("fid {} {} ({}): {:.4}", r.generator, r.class, r.extractor, r.fid);
            }
            for r in &expert_rows {
                println!("expert {} {}: {:.3}", r.generator, r.class, r.agreement);
            }
        }
        Command::TrainClassifier => {
            let rows = pipeline::stage_train_classifier(&cfg, args.verbose)?;
            write_runs_file(&rows, &cfg.out_dir.join("report"))?;
            println!(
                "{} run rows -> {}",
                rows.len(),
                cfg.out_dir.join("report/runs.csv").display()
            );
        }
        Command::Experiment => {
            let report = run_experiment_with_options(&cfg, args.verbose)?;
            audit_disjoint(&cfg.out_dir)?;
            println!(
                "experiment complete: {} run rows, {} fid rows -> {}",
                report.rows.len(),
                report.fid_rows.len(),
                cfg.out_dir.join("report").display()
            );
            let txt = std::fs::read_to_string(cfg.out_dir.join("report/summary.txt"))?;
            print!("{txt}");
        }
        Command::Report => {
            let report = reaggregate_report_dir(&cfg.out_dir.join("report"))?;
            println!(
                "re-aggregated {} rows into {}",
                report.rows.len(),
                cfg.out_dir.join("report/summary.json").display()
            );
        }
        Command::Audit => {
            audit_disjoint(&cfg.out_dir)?;
            println!("audit ok: train/test/synthetic ids are disjoint");
        }
    }
    Ok(())
}
