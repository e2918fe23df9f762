//! End-to-end orchestration: build scenarios, train generators,
//! synthesize, score FID and expert agreement, train classifiers on
//! baseline and mixed datasets, aggregate multi-run statistics, and emit
//! reports. Everything is a pure function of `(config, master_seed)`.

mod config;
mod experiment;
mod report;
mod stages;

pub use config::{
    parse_config, ClassifierConfig, CorpusSource, DdpmConfig, ExperimentConfig, ExtractorKind,
};
pub use experiment::{
    audit_disjoint, run_experiment, run_experiment_with_options, train_ddpm, DdpmTrainResult,
};
pub use stages::{
    expert_classifier, load_scenario, load_synth, resolve_corpus, stage_fid, stage_gen_corpus,
    stage_scenario, stage_synth, stage_train_classifier, stage_train_ddpm, stage_train_pggan,
};
pub use report::{
    emit_report, parse_expert_csv, parse_fid_csv, parse_runs_csv, reaggregate_report_dir,
    write_fid_files, write_runs_file,
    Aggregate, ExperimentReport, ExpertRow, FidRow, RunRow, Variant,
};
