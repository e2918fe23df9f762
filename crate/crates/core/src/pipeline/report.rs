//! Report rows, aggregates and file emission.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{format_aggregate, run_stats};
use crate::selection::{SamplingMethod, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Ddpm,
    Pggan,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::Ddpm, Variant::Pggan];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Ddpm => "ddpm",
            Variant::Pggan => "pggan",
        }
    }

    fn parse(s: &str) -> Result<Variant> {
        match s {
            "original" => Ok(Variant::Original),
            "ddpm" => Ok(Variant::Ddpm),
            "pggan" => Ok(Variant::Pggan),
            other => Err(Error::Format {
                path: "runs.csv".into(),
                message: format!("unknown variant `{other}`"),
            }),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One classifier run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunRow {
    pub model: String,
    pub scenario: ScenarioKind,
    pub sampling: SamplingMethod,
    pub variant: Variant,
    pub run: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One FID measurement of a generator's output against the real class.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FidRow {
    pub generator: Variant,
    pub class: String,
    pub extractor: String,
    pub fid: f64,
}

/// Expert-classifier agreement with the intended class of synthetics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ExpertRow {
    pub generator: Variant,
    pub class: String,
    pub agreement: f64,
}

/// Mean and sample std of one metric over the runs of (model, variant).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Aggregate {
    pub model: String,
    pub variant: Variant,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<RunRow>,
    pub fid_rows: Vec<FidRow>,
    pub expert_rows: Vec<ExpertRow>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    /// Recompute mean/std aggregates from the run rows.
    pub fn compute_aggregates(&mut self) -> Result<()> {
        self.aggregates.clear();
        let mut combos: Vec<(String, Variant)> = Vec::new();
        for r in &self.rows {
            if !combos.iter().any(|(m, v)| m == &r.model && *v == r.variant) {
                combos.push((r.model.clone(), r.variant));
            }
        }
        for (model, variant) in combos {
            let select: Vec<&RunRow> = self
                .rows
                .iter()
                .filter(|r| r.model == model && r.variant == variant)
                .collect();
            for (metric, get) in [
                ("accuracy", (|r: &RunRow| r.accuracy) as fn(&RunRow) -> f64),
                ("precision", |r| r.precision),
                ("recall", |r| r.recall),
                ("f1", |r| r.f1),
            ] {
                let values: Vec<f64> = select.iter().map(|r| get(r)).collect();
                let agg = run_stats(&values)?;
                self.aggregates.push(Aggregate {
                    model: model.clone(),
                    variant,
                    metric: metric.to_string(),
                    mean: agg.mean,
                    std: agg.std,
                });
            }
        }
        Ok(())
    }

    pub fn aggregate_for(&self, model: &str, variant: Variant, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.model == model && a.variant == variant && a.metric == metric)
    }
}

fn runs_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("model,scenario,sampling,variant,run,accuracy,precision,recall,f1\n");
    for r in &report.rows {
        let scenario = match r.scenario {
            ScenarioKind::Small => "small",
            ScenarioKind::Imbalanced => "imbalanced",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.model, scenario, r.sampling, r.variant, r.run, r.accuracy, r.precision, r.recall, r.f1
        ));
    }
    out
}

/// Inverse of the `runs.csv` writer; row values round-trip exactly.
pub fn parse_runs_csv(text: &str) -> Result<Vec<RunRow>> {
    let fail = |message: String| Error::Format {
        path: "runs.csv".into(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fail("empty file".into()))?;
    if header != "model,scenario,sampling,variant,run,accuracy,precision,recall,f1" {
        return Err(fail(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(fail(format!("line {}: expected 9 fields", i + 2)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| fail(format!("bad number `{s}`")))
        };
        rows.push(RunRow {
            model: f[0].to_string(),
            scenario: match f[1] {
                "small" => ScenarioKind::Small,
                "imbalanced" => ScenarioKind::Imbalanced,
                other => return Err(fail(format!("unknown scenario `{other}`"))),
            },
            sampling: match f[2] {
                "random" => SamplingMethod::Random,
                "greedy_k" => SamplingMethod::GreedyK,
                other => return Err(fail(format!("unknown sampling `{other}`"))),
            },
            variant: Variant::parse(f[3])?,
            run: f[4]
                .parse()
                .map_err(|_| fail(format!("bad run index `{}`", f[4])))?,
            accuracy: num(f[5])?,
            precision: num(f[6])?,
            recall: num(f[7])?,
            f1: num(f[8])?,
        });
    }
    Ok(rows)
}

fn fid_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("generator,class,extractor,fid\n");
    for r in &report.fid_rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.generator, r.class, r.extractor, r.fid
        ));
    }
    out
}

pub fn parse_fid_csv(text: &str) -> Result<Vec<FidRow>> {
    let fail = |message: String| Error::Format {
        path: "fid.csv".into(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("generator,class,extractor,fid") {
        return Err(fail("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(fail(format!("expected 4 fields in `{line}`")));
        }
        rows.push(FidRow {
            generator: Variant::parse(f[0])?,
            class: f[1].to_string(),
            extractor: f[2].to_string(),
            fid: f[3].parse().map_err(|_| fail(format!("bad fid `{}`", f[3])))?,
        });
    }
    Ok(rows)
}

fn expert_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("generator,class,agreement\n");
    for r in &report.expert_rows {
        out.push_str(&format!("{},{},{}\n", r.generator, r.class, r.agreement));
    }
    out
}

pub fn parse_expert_csv(text: &str) -> Result<Vec<ExpertRow>> {
    let fail = |message: String| Error::Format {
        path: "expert.csv".into(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("generator,class,agreement") {
        return Err(fail("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(fail(format!("expected 3 fields in `{line}`")));
        }
        rows.push(ExpertRow {
            generator: Variant::parse(f[0])?,
            class: f[1].to_string(),
            agreement: f[2]
                .parse()
                .map_err(|_| fail(format!("bad agreement `{}`", f[2])))?,
        });
    }
    Ok(rows)
}

/// Persist run rows alone (the standalone `train-classifier` stage).
pub fn write_runs_file(rows: &[RunRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let report = ExperimentReport {
        rows: rows.to_vec(),
        ..Default::default()
    };
    std::fs::write(dir.join("runs.csv"), runs_csv(&report))?;
    Ok(())
}

/// Persist FID and expert rows alone (the standalone `fid` stage).
pub fn write_fid_files(fid_rows: &[FidRow], expert_rows: &[ExpertRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let report = ExperimentReport {
        fid_rows: fid_rows.to_vec(),
        expert_rows: expert_rows.to_vec(),
        ..Default::default()
    };
    std::fs::write(dir.join("fid.csv"), fid_csv(&report))?;
    std::fs::write(dir.join("expert.csv"), expert_csv(&report))?;
    Ok(())
}

/// Rebuild a report from the CSVs in a report directory and re-emit the
/// aggregate files (the standalone `report` stage).
pub fn reaggregate_report_dir(dir: &Path) -> Result<ExperimentReport> {
    let runs = std::fs::read_to_string(dir.join("runs.csv"))?;
    let mut report = ExperimentReport {
        rows: parse_runs_csv(&runs)?,
        ..Default::default()
    };
    let fid_path = dir.join("fid.csv");
    if fid_path.exists() {
        report.fid_rows = parse_fid_csv(&std::fs::read_to_string(fid_path)?)?;
    }
    let expert_path = dir.join("expert.csv");
    if expert_path.exists() {
        report.expert_rows = parse_expert_csv(&std::fs::read_to_string(expert_path)?)?;
    }
    report.compute_aggregates()?;
    emit_report(&report, dir)?;
    Ok(report)
}

fn summary_txt(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str("accuracy (mean over runs, sample std)\n");
    let mut models: Vec<&str> = Vec::new();
    for a in &report.aggregates {
        if !models.contains(&a.model.as_str()) {
            models.push(&a.model);
        }
    }
    for model in models {
        out.push_str(&format!("{model}:\n"));
        for variant in Variant::ALL {
            if let Some(a) = report.aggregate_for(model, variant, "accuracy") {
                let agg = crate::metrics::RunAggregate {
                    values: vec![],
                    mean: a.mean,
                    std: a.std,
                };
                out.push_str(&format!(
                    "  {:<9} {}\n",
                    variant.as_str(),
                    format_aggregate(&agg)
                ));
            }
        }
    }
    if !report.fid_rows.is_empty() {
        out.push_str("\nFID (lower is closer to the real class)\n");
        for r in &report.fid_rows {
            out.push_str(&format!(
                "  {:<6} {:<10} {:<8} {:.4}\n",
                r.generator.as_str(),
                r.class,
                r.extractor,
                r.fid
            ));
        }
    }
    if !report.expert_rows.is_empty() {
        out.push_str("\nexpert agreement with intended class\n");
        for r in &report.expert_rows {
            out.push_str(&format!(
                "  {:<6} {:<10} {:.3}\n",
                r.generator.as_str(),
                r.class,
                r.agreement
            ));
        }
    }
    out
}

/// Write `runs.csv`, `fid.csv`, `summary.json` and `summary.txt` into
/// `dir`. Refuses to emit an empty report.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to emit a report without run rows".into(),
        ));
    }
    let mut complete = report.clone();
    complete.compute_aggregates()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("runs.csv"), runs_csv(&complete))?;
    std::fs::write(dir.join("fid.csv"), fid_csv(&complete))?;
    std::fs::write(dir.join("expert.csv"), expert_csv(&complete))?;
    let json = serde_json::json!({
        "aggregates": complete.aggregates,
        "fid": complete.fid_rows,
        "expert_agreement": complete.expert_rows,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&json)?)?;
    std::fs::write(dir.join("summary.txt"), summary_txt(&complete))?;
    Ok(())
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidArgument(format!("json: {e}"))
    }
}
