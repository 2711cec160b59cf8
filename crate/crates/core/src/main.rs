use std::path::PathBuf;
use std::sync::Arc;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microeval::agent::http::{HttpBackend, HttpSegmenter};
use microeval::agent::{BoxFillSegmenter, MapConfig, ModelBackend, Recorder, RoiPolicy, Runtime, Segmenter, Strategy};
use microeval::coords::Convention;
use microeval::dataset::{file_sha256, load_dataset, FileImageStore};
use microeval::diagnosis::DEFAULT_SUCCESS_IOU;
use microeval::report::{self, LoadedRun, RunConfig, ScriptSpec};
use microeval::task::Task;
use microeval::taskgen::{generate, write_generated, GenerateConfig, SceneParams};
use microeval::{Error, Result};

#[derive(Parser)]
#[command(name = "microeval", version, about = "Micro-target perception benchmark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    Generate(GenerateArgs),
    /// Evaluate a backend on a dataset and write a run directory.
    Eval(EvalArgs),
    /// Classify grounding errors of a finished run.
    Diagnose(DiagnoseArgs),
    /// Compare finished runs side by side.
    Report(ReportArgs),
}

/// Comma-separated task codes.
#[derive(Clone)]
struct TaskList(Vec<Task>);

fn parse_tasks(s: &str) -> Result<TaskList> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<_>>().map(TaskList)
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated task codes; all sixteen by default.
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<TaskList>,
    #[arg(long, default_value_t = 10)]
    dev: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Samples derived per task from one scene, at most.
    #[arg(long, default_value_t = 2)]
    per_scene: usize,
    #[arg(long, default_value_t = 4096)]
    width: u32,
    #[arg(long, default_value_t = 3072)]
    height: u32,
    #[arg(long, default_value_t = 48)]
    objects: usize,
    /// Allow one image to serve several splits.
    #[arg(long)]
    shared_images: bool,
    /// Write records and manifest only.
    #[arg(long)]
    no_images: bool,
    #[arg(long, default_value_t = 5000)]
    max_scenes: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Split file (JSON lines); images resolve relative to its directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// map, native, resize-N, query-crop, oracle-crop-N or sliding-window-N.
    #[arg(long, default_value = "map")]
    strategy: Strategy,
    /// Chat-completions endpoint; the token is read from MICROEVAL_API_KEY.
    #[arg(long)]
    backend_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Built-in backend: oracle, oracle-echo, null, letter-X, or a transcript file to replay.
    #[arg(long, conflicts_with = "backend_url")]
    scripted: Option<String>,
    /// Box-prompted segmentation endpoint; box fill when unset.
    #[arg(long)]
    segmenter_url: Option<String>,
    #[arg(long, default_value_t = 1024)]
    crop_size: u32,
    #[arg(long, default_value = "task-adaptive")]
    roi_policy: RoiPolicy,
    #[arg(long, default_value = "thousand")]
    protocol: Convention,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Permit strategies that read the ground truth.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<TaskList>,
    /// Leave predictions out of the records; diagnosis then cannot run.
    #[arg(long)]
    skip_predictions: bool,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    run: PathBuf,
    /// Dataset the run used; taken from the run configuration when unset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SUCCESS_IOU)]
    success_iou: f64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Directory for comparison.{txt,csv,json}; printed only when unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let tasks = a.tasks.map_or_else(|| Task::ALL.to_vec(), |t| t.0);
    let mut cfg = GenerateConfig::balanced(a.seed, &tasks, a.dev, a.val, a.test);
    cfg.scene = SceneParams {
        width: a.width,
        height: a.height,
        objects: a.objects,
        ..SceneParams::default()
    };
    cfg.per_scene = a.per_scene;
    cfg.disjoint_images = !a.shared_images;
    cfg.max_scenes = a.max_scenes;
    let generated = generate(&cfg)?;
    let manifest = write_generated(&generated, &cfg, &a.out, !a.no_images)?;
    for (split, counts) in &manifest.counts {
        let total: usize = counts.values().sum();
        report::print(&format!("{split}: {total} samples\n"));
    }
    report::print(&format!("{} images in {}\n", manifest.images, a.out.display()));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let samples = load_dataset(&a.dataset)?;
    let tasks = a.tasks.clone().map_or_else(
        || Task::ALL.into_iter().filter(|t| samples.iter().any(|s| s.task == *t)).collect(),
        |t| t.0,
    );
    let samples = report::select_tasks(samples, &tasks);
    let map = MapConfig {
        side: a.crop_size,
        policy: a.roi_policy,
        convention: a.protocol,
        allow_oracle: a.oracle,
        ..MapConfig::default()
    };
    let (backend, name): (Arc<dyn ModelBackend>, String) = match (&a.scripted, &a.backend_url) {
        (Some(spec), _) => {
            let spec: ScriptSpec = spec.parse()?;
            (Arc::new(spec.backend(&samples, &map)?), spec.name())
        }
        (None, Some(url)) => {
            let model = a
                .model
                .clone()
                .ok_or_else(|| Error::Config("--backend-url needs --model".into()))?;
            let b = HttpBackend::new(url.clone(), model);
            let name = b.name();
            (Arc::new(b), name)
        }
        (None, None) => return Err(Error::Config("pass --backend-url with --model, or --scripted".into())),
    };
    let segmenter: Box<dyn Segmenter> = match &a.segmenter_url {
        Some(url) => Box::new(HttpSegmenter::new(url.clone())),
        None => Box::new(BoxFillSegmenter),
    };
    let cfg = RunConfig {
        dataset: a.dataset.clone(),
        dataset_sha256: file_sha256(&a.dataset)?,
        strategy: a.strategy,
        map,
        backend: name,
        backend_url: a.backend_url.clone(),
        model: a.model.clone(),
        segmenter: a.segmenter_url.clone().unwrap_or_else(|| "box-fill".into()),
        workers: a.workers,
        seed: a.seed,
        tasks,
        store_predictions: !a.skip_predictions,
    };
    cfg.validate(&samples)?;
    let recorder = Recorder::new(backend);
    let images = FileImageStore::for_dataset(&a.dataset, a.workers.max(1) * 2);
    let rt = Runtime::new(&recorder, segmenter.as_ref(), &images);
    let output = report::evaluate(&samples, rt, &cfg)?;
    let summary = report::write_run(&a.out, &cfg, &output, &recorder.entries())?;
    report::print(&report::aggregate_text(&summary));
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    let run = LoadedRun::load(&a.run)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| run.config.dataset.clone());
    let samples = load_dataset(&dataset)?;
    if file_sha256(&dataset)? != run.config.dataset_sha256 {
        log::warn!("{} changed since the run was made", dataset.display());
    }
    let d = report::diagnose(&run, &run.records()?, &samples, a.success_iou)?;
    report::write_diagnosis(&a.run, &d)?;
    report::print(&report::diagnosis_text(&d));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let runs = a.runs.iter().map(|p| LoadedRun::load(p)).collect::<Result<Vec<_>>>()?;
    let c = report::compare(&runs)?;
    if let Some(out) = &a.out {
        report::write_comparison(out, &c)?;
    }
    if let Some(w) = &c.warning {
        log::warn!("{w}");
    }
    report::print(&report::comparison_text(&c));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Quota(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
