//! Evaluation runs, their on-disk layout, error diagnosis over stored
//! predictions and side-by-side comparison of finished runs.
//!
//! A run directory holds:
//!
//! - `config.json`: the run configuration, including the dataset digest
//! - `records.jsonl`: one scored record per sample, in dataset order
//! - `timings.jsonl`: wall-clock latency per sample, kept apart so records
//!   stay byte-identical across reruns
//! - `transcript.jsonl`: every prompt and reply, sorted by sample and stage
//! - `aggregate.{json,csv,txt}`: task, dimension and overall scores
//! - `diagnosis.{json,csv,txt}`: written by `diagnose`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::scripted::{OracleResponder, ScriptedBackend, SynthesisMode};
use crate::agent::{run_sample, MapConfig, Runtime, Strategy, TranscriptEntry};
use crate::dataset::{Sample, Target};
use crate::diagnosis::{
    classify, diagnosis_histogram, pearson, spearman, DiagnosisContext, DiagnosisLabel, HistogramRow,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, Aggregate, ScoreRecord};
use crate::task::{AnswerFormat, Dimension, Task};

/// Flag that turns prediction storage off; named in diagnosis errors.
pub const SKIP_PREDICTIONS_FLAG: &str = "--skip-predictions";
const MEAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub strategy: Strategy,
    pub map: MapConfig,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub segmenter: String,
    pub workers: usize,
    pub seed: u64,
    /// Tasks evaluated; the aggregate expects each of them.
    pub tasks: Vec<Task>,
    pub store_predictions: bool,
}

impl RunConfig {
    /// Checks everything that can be known before the first backend call.
    pub fn validate(&self, samples: &[Sample]) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.workers == 0 {
            return bad("--workers must be at least 1".into());
        }
        if self.map.side == 0 {
            return bad("--crop-size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.map.suppression_iou) {
            return bad("suppression IoU must lie in [0, 1]".into());
        }
        if self.strategy.is_oracle() && !self.map.allow_oracle {
            return bad(format!("strategy {} reads the ground truth; pass --oracle to run it", self.strategy));
        }
        if self.strategy == Strategy::QueryCrop {
            if let Some(s) = samples.iter().find(|s| s.explicit_regions().is_empty()) {
                return bad(format!(
                    "query-crop needs an explicit region, but sample {} ({}) has none; restrict --tasks to RD, RC, CRC",
                    s.id, s.task
                ));
            }
        }
        if samples.is_empty() {
            return bad("no samples to evaluate".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub sample_id: String,
    pub calls: usize,
    pub seconds: f64,
}

pub struct EvalOutput {
    pub records: Vec<ScoreRecord>,
    pub timings: Vec<Timing>,
}

/// Samples of `tasks`, in dataset order.
pub fn select_tasks(samples: Vec<Sample>, tasks: &[Task]) -> Vec<Sample> {
    samples.into_iter().filter(|s| tasks.contains(&s.task)).collect()
}

/// Runs every sample on a pool of `cfg.workers` threads. Records come back
/// in input order whatever the scheduling.
pub fn evaluate(samples: &[Sample], rt: Runtime, cfg: &RunConfig) -> Result<EvalOutput> {
    use rayon::prelude::*;
    cfg.validate(samples)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<(ScoreRecord, Timing)>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let start = Instant::now();
                let mut rec = run_sample(rt, s, cfg.strategy, &cfg.map)?;
                let seconds = start.elapsed().as_secs_f64();
                if !cfg.store_predictions {
                    rec.prediction = None;
                }
                log::debug!("{}: score {:.4}, {} calls", s.id, rec.raw_score, rec.calls);
                let timing = Timing {
                    sample_id: s.id.clone(),
                    calls: rec.calls,
                    seconds,
                };
                Ok((rec, timing))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(samples.len());
    let mut timings = Vec::with_capacity(samples.len());
    for r in results {
        let (rec, t) = r?;
        records.push(rec);
        timings.push(t);
    }
    Ok(EvalOutput { records, timings })
}

/// Fails unless the overall score is the mean of the task scores.
pub fn check_macro_mean(agg: &Aggregate) -> Result<()> {
    let n = agg.tasks.len();
    let mean = (n > 0).then(|| agg.tasks.iter().map(|t| t.raw).sum::<f64>() / n as f64);
    let consistent = match (mean, agg.overall_raw) {
        (Some(m), Some(o)) => (m - o).abs() <= MEAN_TOLERANCE,
        (None, None) => true,
        _ => false,
    };
    if consistent {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "overall {:?} is not the macro-mean {:?} of {n} task scores",
            agg.overall_raw, mean
        )))
    }
}

/// Contents of `aggregate.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub side: u32,
    pub policy: String,
    pub protocol: String,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub oracle: bool,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub samples: usize,
    pub mean_calls: f64,
    pub calls_by_task: BTreeMap<Task, f64>,
    pub aggregate: Aggregate,
}

pub fn summarize(cfg: &RunConfig, records: &[ScoreRecord]) -> Result<RunSummary> {
    let agg = aggregate(records, &cfg.tasks);
    check_macro_mean(&agg)?;
    let mut calls: BTreeMap<Task, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = calls.entry(r.task).or_default();
        e.0 += r.calls;
        e.1 += 1;
    }
    let total: usize = records.iter().map(|r| r.calls).sum();
    Ok(RunSummary {
        strategy: cfg.strategy,
        side: cfg.map.side,
        policy: cfg.map.policy.to_string(),
        protocol: cfg.map.convention.to_string(),
        backend: cfg.backend.clone(),
        model: cfg.model.clone(),
        oracle: cfg.strategy.is_oracle(),
        dataset: cfg.dataset.clone(),
        dataset_sha256: cfg.dataset_sha256.clone(),
        samples: records.len(),
        mean_calls: if records.is_empty() { 0.0 } else { total as f64 / records.len() as f64 },
        calls_by_task: calls.into_iter().map(|(t, (c, n))| (t, c as f64 / n as f64)).collect(),
        aggregate: agg,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

/// Refuses output locations inside the dataset's directory.
fn check_outside_dataset(out: &Path, dataset: &Path) -> Result<()> {
    let data_dir = dataset.parent().map(Path::to_path_buf).unwrap_or_default();
    let abs = |p: &Path| -> PathBuf {
        let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
        fs::canonicalize(p).unwrap_or_else(|_| std::env::current_dir().unwrap_or_default().join(p))
    };
    fs::create_dir_all(out)?;
    if abs(out).starts_with(abs(&data_dir)) {
        return Err(Error::Config(format!(
            "output directory {} lies inside the dataset directory {}; choose another --out",
            out.display(),
            data_dir.display()
        )));
    }
    Ok(())
}

/// Writes a complete run directory and returns its summary.
pub fn write_run(dir: &Path, cfg: &RunConfig, output: &EvalOutput, transcript: &[TranscriptEntry]) -> Result<RunSummary> {
    check_outside_dataset(dir, &cfg.dataset)?;
    let summary = summarize(cfg, &output.records)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    write_jsonl(&dir.join("records.jsonl"), &output.records)?;
    write_jsonl(&dir.join("timings.jsonl"), &output.timings)?;
    write_jsonl(&dir.join("transcript.jsonl"), transcript)?;
    fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write_aggregate_csv(&dir.join("aggregate.csv"), &summary)?;
    fs::write(dir.join("aggregate.txt"), aggregate_text(&summary))?;
    Ok(summary)
}

fn write_aggregate_csv(path: &Path, s: &RunSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    w.write_record(["level", "name", "samples", "raw", "score", "calls"]).map_err(std::io::Error::from)?;
    for t in &s.aggregate.tasks {
        let calls = s.calls_by_task.get(&t.task).map_or(String::new(), |c| format!("{c:.4}"));
        w.write_record([
            "task".to_string(),
            t.task.to_string(),
            t.samples.to_string(),
            t.raw.to_string(),
            format!("{:.2}", t.display),
            calls,
        ])
        .map_err(std::io::Error::from)?;
    }
    for d in &s.aggregate.dimensions {
        w.write_record([
            "dimension".to_string(),
            d.dimension.to_string(),
            d.tasks.to_string(),
            d.raw.map_or(String::new(), |v| v.to_string()),
            d.display.map_or(String::new(), |v| format!("{v:.2}")),
            String::new(),
        ])
        .map_err(std::io::Error::from)?;
    }
    w.write_record([
        "overall".to_string(),
        "overall".to_string(),
        s.samples.to_string(),
        s.aggregate.overall_raw.map_or(String::new(), |v| v.to_string()),
        s.aggregate.overall.map_or(String::new(), |v| format!("{v:.2}")),
        format!("{:.4}", s.mean_calls),
    ])
    .map_err(std::io::Error::from)?;
    w.flush()?;
    Ok(())
}

fn opt2(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

pub fn aggregate_text(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "strategy {}  side {}  policy {}  protocol {}  backend {}{}",
        s.strategy,
        s.side,
        s.policy,
        s.protocol,
        s.backend,
        if s.oracle { "  [ORACLE: reads ground truth]" } else { "" }
    );
    let _ = writeln!(out, "dataset {} (sha256 {})", s.dataset.display(), s.dataset_sha256);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<6} {:<34} {:>7} {:>8} {:>7}", "task", "name", "samples", "score", "calls");
    for t in &s.aggregate.tasks {
        let _ = writeln!(
            out,
            "{:<6} {:<34} {:>7} {:>8.2} {:>7.2}",
            t.task.code(),
            t.task.name(),
            t.samples,
            t.display,
            s.calls_by_task.get(&t.task).copied().unwrap_or(0.0)
        );
    }
    for m in &s.aggregate.missing {
        let _ = writeln!(out, "{:<6} {:<34} {:>7} {:>8}", m.code(), m.name(), 0, "-");
    }
    let _ = writeln!(out);
    for d in &s.aggregate.dimensions {
        let _ = writeln!(out, "{:<41} {:>7} {:>8}", d.dimension.name(), d.tasks, opt2(d.display));
    }
    let _ = writeln!(
        out,
        "{:<41} {:>7} {:>8} {:>7.2}",
        "overall",
        s.samples,
        opt2(s.aggregate.overall),
        s.mean_calls
    );
    out
}

/// A finished run read back from disk.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub summary: RunSummary,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Config(format!("{} is not a finished run ({name}: {e})", dir.display())))
        };
        Ok(LoadedRun {
            dir: dir.to_path_buf(),
            config: serde_json::from_str(&read("config.json")?)?,
            summary: serde_json::from_str(&read("aggregate.json")?)?,
        })
    }

    pub fn records(&self) -> Result<Vec<ScoreRecord>> {
        read_jsonl(&self.dir.join("records.jsonl"))
    }

    /// Column label: directory name plus strategy.
    pub fn label(&self) -> String {
        let name = self.dir.file_name().map_or_else(|| self.dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        format!("{name} ({})", self.summary.strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRow {
    pub sample_id: String,
    pub task: Task,
    pub label: DiagnosisLabel,
    pub iou: f64,
    pub best_overlap_object_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleCorrelation {
    pub samples: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub run: String,
    pub strategy: Strategy,
    pub success_iou: f64,
    pub histogram: Vec<HistogramRow>,
    pub by_task: BTreeMap<Task, Vec<HistogramRow>>,
    /// Single-target grounding samples without scene annotations.
    pub skipped: usize,
    /// Target side length (square root of box area) against score.
    pub scale: ScaleCorrelation,
    pub rows: Vec<DiagnosisRow>,
}

/// Side length of a single-box target.
pub fn target_side(sample: &Sample) -> Option<f64> {
    match &sample.target {
        Target::Boxes(bs) if bs.len() == 1 => Some(bs[0].area().sqrt()),
        _ => None,
    }
}

/// Classifies every single-box grounding record that carries a stored
/// prediction and computes the size/score correlation.
pub fn diagnose(run: &LoadedRun, records: &[ScoreRecord], samples: &[Sample], success_iou: f64) -> Result<DiagnosisReport> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut rows = Vec::new();
    let mut skipped = 0;
    let (mut sides, mut scores) = (Vec::new(), Vec::new());
    let mut considered = 0;
    for r in records.iter().filter(|r| r.task.dimension() == Dimension::Grounding) {
        let sample = by_id.get(r.sample_id.as_str()).ok_or_else(|| {
            Error::Config(format!("record {} is not in the dataset; pass the dataset the run used", r.sample_id))
        })?;
        let Some(side) = target_side(sample) else { continue };
        considered += 1;
        sides.push(side);
        scores.push(r.raw_score);
        if sample.task.answer_format() != AnswerFormat::Box {
            continue;
        }
        let Some(pred) = &r.prediction else {
            return Err(Error::Config(format!(
                "record {} in {} has no stored prediction; rerun `microeval eval` without {SKIP_PREDICTIONS_FLAG}",
                r.sample_id,
                run.dir.display()
            )));
        };
        let Some(ctx) = DiagnosisContext::from_sample(sample) else {
            skipped += 1;
            continue;
        };
        let d = classify(pred, &ctx, success_iou);
        rows.push(DiagnosisRow {
            sample_id: r.sample_id.clone(),
            task: r.task,
            label: d.label,
            iou: d.iou,
            best_overlap_object_id: d.best_overlap_object_id,
        });
    }
    if considered == 0 {
        return Err(Error::Config(format!("{} holds no single-target grounding records", run.dir.display())));
    }
    let labels: Vec<DiagnosisLabel> = rows.iter().map(|r| r.label).collect();
    let mut by_task: BTreeMap<Task, Vec<DiagnosisLabel>> = BTreeMap::new();
    for r in &rows {
        by_task.entry(r.task).or_default().push(r.label);
    }
    let (p, s) = (pearson(&sides, &scores), spearman(&sides, &scores));
    let note = p.as_ref().err().or(s.as_ref().err()).map(ToString::to_string);
    Ok(DiagnosisReport {
        run: run.dir.display().to_string(),
        strategy: run.summary.strategy,
        success_iou,
        histogram: diagnosis_histogram(&labels),
        by_task: by_task.into_iter().map(|(t, l)| (t, diagnosis_histogram(&l))).collect(),
        skipped,
        scale: ScaleCorrelation {
            samples: sides.len(),
            pearson: p.ok(),
            spearman: s.ok(),
            note,
        },
        rows,
    })
}

pub fn diagnosis_text(d: &DiagnosisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run {}  strategy {}  success IoU {}", d.run, d.strategy, d.success_iou);
    let _ = writeln!(out, "classified {} predictions ({} skipped without scene annotations)", d.rows.len(), d.skipped);
    let _ = write!(out, "\n{:<8}", "label");
    let _ = write!(out, " {:>9}", "all");
    for t in d.by_task.keys() {
        let _ = write!(out, " {:>9}", t.code());
    }
    let _ = writeln!(out);
    for (i, row) in d.histogram.iter().enumerate() {
        let _ = write!(out, "{:<8} {:>8.2}%", row.label.code(), row.percent);
        for h in d.by_task.values() {
            let _ = write!(out, " {:>8.2}%", h[i].percent);
        }
        let _ = writeln!(out);
    }
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let _ = writeln!(
        out,
        "\ntarget side vs score over {} samples: Pearson {}, Spearman {}",
        d.scale.samples,
        fmt(d.scale.pearson),
        fmt(d.scale.spearman)
    );
    if let Some(n) = &d.scale.note {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

/// Writes `diagnosis.{json,csv,txt}` into the run directory.
pub fn write_diagnosis(dir: &Path, d: &DiagnosisReport) -> Result<()> {
    fs::write(dir.join("diagnosis.json"), serde_json::to_string_pretty(d)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("diagnosis.csv")).map_err(std::io::Error::from)?;
    w.write_record(["sample_id", "task", "label", "iou", "best_overlap_object_id"]).map_err(std::io::Error::from)?;
    for r in &d.rows {
        w.write_record([
            r.sample_id.clone(),
            r.task.to_string(),
            r.label.to_string(),
            format!("{:.6}", r.iou),
            r.best_overlap_object_id.map_or(String::new(), |i| i.to_string()),
        ])
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    fs::write(dir.join("diagnosis.txt"), diagnosis_text(d))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub label: String,
    pub oracle: bool,
    pub dataset_sha256: String,
    pub mean_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    /// Display scores (x100), one per column.
    pub values: Vec<Option<f64>>,
    pub raw: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<Column>,
    pub rows: Vec<ComparisonRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn compare(runs: &[LoadedRun]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    for r in runs {
        check_macro_mean(&r.summary.aggregate)?;
    }
    let columns: Vec<Column> = runs
        .iter()
        .map(|r| Column {
            label: r.label(),
            oracle: r.summary.oracle,
            dataset_sha256: r.summary.dataset_sha256.clone(),
            mean_calls: r.summary.mean_calls,
        })
        .collect();
    let mut tasks: Vec<Task> = runs
        .iter()
        .flat_map(|r| r.summary.aggregate.tasks.iter().map(|t| t.task))
        .collect();
    tasks.sort_by_key(|t| Task::ALL.iter().position(|x| x == t));
    tasks.dedup();
    let mut rows: Vec<ComparisonRow> = tasks
        .iter()
        .map(|&task| {
            let cell = |r: &LoadedRun| r.summary.aggregate.task(task).map(|t| (t.display, t.raw));
            ComparisonRow {
                name: task.code().to_string(),
                values: runs.iter().map(|r| cell(r).map(|c| c.0)).collect(),
                raw: runs.iter().map(|r| cell(r).map(|c| c.1)).collect(),
            }
        })
        .collect();
    for d in Dimension::ALL {
        let cell = |r: &LoadedRun| r.summary.aggregate.dimensions.iter().find(|x| x.dimension == d).cloned();
        rows.push(ComparisonRow {
            name: d.name().to_string(),
            values: runs.iter().map(|r| cell(r).and_then(|c| c.display)).collect(),
            raw: runs.iter().map(|r| cell(r).and_then(|c| c.raw)).collect(),
        });
    }
    rows.push(ComparisonRow {
        name: "overall".into(),
        values: runs.iter().map(|r| r.summary.aggregate.overall).collect(),
        raw: runs.iter().map(|r| r.summary.aggregate.overall_raw).collect(),
    });
    let hashes: std::collections::BTreeSet<&str> = columns.iter().map(|c| c.dataset_sha256.as_str()).collect();
    let warning = (hashes.len() > 1).then(|| {
        format!(
            "WARNING: runs were evaluated on {} different datasets; scores are not comparable",
            hashes.len()
        )
    });
    Ok(Comparison { columns, rows, warning })
}

pub fn comparison_text(c: &Comparison) -> String {
    let mut out = String::new();
    if let Some(w) = &c.warning {
        let _ = writeln!(out, "{w}\n");
    }
    let width = c.columns.iter().map(|col| col.label.len() + 2).max().unwrap_or(8).max(10);
    let _ = write!(out, "{:<28}", "");
    for col in &c.columns {
        let label = if col.oracle { format!("{}*", col.label) } else { col.label.clone() };
        let _ = write!(out, " {label:>width$}");
    }
    let _ = writeln!(out);
    for row in &c.rows {
        let _ = write!(out, "{:<28}", row.name);
        for v in &row.values {
            let _ = write!(out, " {:>width$}", opt2(*v));
        }
        let _ = writeln!(out);
    }
    let _ = write!(out, "{:<28}", "calls per sample");
    for col in &c.columns {
        let _ = write!(out, " {:>width$.2}", col.mean_calls);
    }
    let _ = writeln!(out);
    if c.columns.iter().any(|col| col.oracle) {
        let _ = writeln!(out, "\n* oracle run: crops are placed using the ground truth; not a fair evaluation");
    }
    out
}

pub fn write_comparison(out: &Path, c: &Comparison) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.json"), serde_json::to_string_pretty(c)? + "\n")?;
    fs::write(out.join("comparison.txt"), comparison_text(c))?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv")).map_err(std::io::Error::from)?;
    let header: Vec<String> = std::iter::once("row".to_string())
        .chain(c.columns.iter().map(|col| if col.oracle { format!("{} [oracle]", col.label) } else { col.label.clone() }))
        .collect();
    w.write_record(&header).map_err(std::io::Error::from)?;
    for row in &c.rows {
        let rec: Vec<String> = std::iter::once(row.name.clone())
            .chain(row.values.iter().map(|v| v.map_or(String::new(), |v| format!("{v:.2}"))))
            .collect();
        w.write_record(&rec).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Built-in test doubles selectable from the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptSpec {
    /// Ground truth at every stage.
    Oracle,
    /// Ground truth locally; synthesis repeats the evidence.
    OracleEcho,
    /// Replies `null` to everything.
    Null,
    /// Always answers this option letter.
    Letter(char),
    /// Replays a recorded transcript.
    Transcript(PathBuf),
}

impl std::str::FromStr for ScriptSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let letter = s.strip_prefix("letter-").and_then(|l| {
            let mut c = l.chars();
            match (c.next(), c.next()) {
                (Some(ch), None) if ch.is_ascii_uppercase() => Some(ch),
                _ => None,
            }
        });
        Ok(match (s, letter) {
            ("oracle", _) => ScriptSpec::Oracle,
            ("oracle-echo", _) => ScriptSpec::OracleEcho,
            ("null", _) => ScriptSpec::Null,
            (_, Some(c)) => ScriptSpec::Letter(c),
            _ if s.starts_with("letter-") => {
                return Err(Error::Config(format!("{s:?}: expected letter-X with X in A-Z")))
            }
            _ => ScriptSpec::Transcript(PathBuf::from(s)),
        })
    }
}

impl ScriptSpec {
    pub fn backend(&self, samples: &[Sample], cfg: &MapConfig) -> Result<ScriptedBackend> {
        Ok(match self {
            ScriptSpec::Oracle => OracleResponder::new(samples, cfg, SynthesisMode::GroundTruth).backend(),
            ScriptSpec::OracleEcho => OracleResponder::new(samples, cfg, SynthesisMode::EchoEvidence).backend(),
            ScriptSpec::Null => ScriptedBackend::constant("null"),
            ScriptSpec::Letter(c) => ScriptedBackend::constant(format!("Final answer: {c}")),
            ScriptSpec::Transcript(p) => ScriptedBackend::from_transcript(p)?,
        })
    }

    pub fn name(&self) -> String {
        match self {
            ScriptSpec::Oracle => "scripted:oracle".into(),
            ScriptSpec::OracleEcho => "scripted:oracle-echo".into(),
            ScriptSpec::Null => "scripted:null".into(),
            ScriptSpec::Letter(c) => format!("scripted:letter-{c}"),
            ScriptSpec::Transcript(p) => format!("scripted:{}", p.display()),
        }
    }
}

/// Writes `text` to stdout, ignoring a closed pipe.
pub fn print(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}
