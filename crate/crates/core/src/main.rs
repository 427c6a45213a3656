use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use attrinet::checkpoint::load_model;
use attrinet::classifier::{calibrate_thresholds, ThresholdTable};
use attrinet::dataset::{
    contaminate, make_synthetic, read_injection_log, ContaminationSpec, Dataset, SyntheticConfig, INJECTION_LOG_FILE,
    MANIFEST_FILE,
};
use attrinet::explain::{export_global, export_local, global_explain, local_explain};
use attrinet::guidance::GuidanceMode;
use attrinet::losses::Term;
use attrinet::metrics::Magnitude;
use attrinet::report::{report, ExplanationSource, MetricSet, ReportConfig};
use attrinet::trainer::{configure_threads_from_env, validation_auc, TrainConfig, Trainer};
use attrinet::Error;

const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Parser, Debug)]
#[command(name = "attrinet", version, about = "Interpretable multi-label classification with class attribution maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-label dataset.
    MakeSynthetic(MakeSyntheticArgs),
    /// Copy a dataset, stamping a text tag on a fraction of one class's positives.
    Contaminate(ContaminateArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Compute evaluation metrics for a checkpoint.
    Eval(EvalArgs),
    /// Export local and global explanations.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
struct MakeSyntheticArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long)]
    co_occurrence: Option<f64>,
    #[arg(long)]
    annotated_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ContaminateArgs {
    /// Source dataset directory or manifest.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "class")]
    class: String,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value = "CXR-ROOM1")]
    text: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    guidance: Option<GuidanceMode>,
    /// Comma list of loss terms to disable: adv, cls, reg, ctr, gd.
    #[arg(long, value_delimiter = ',', value_parser = parse_term)]
    ablation: Vec<Term>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    /// Continue from a checkpoint written by an earlier run in the same output directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `all` or a comma list of auc, class, disease, confounder.
    #[arg(long)]
    metrics: Option<String>,
    /// Thresholds JSON; calibrated on the evaluation data when absent.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Injection log of the contaminated training set.
    #[arg(long)]
    injection_log: Option<PathBuf>,
    #[arg(long, value_parser = parse_magnitude)]
    magnitude: Option<Magnitude>,
    #[arg(long, value_parser = parse_source)]
    source: Option<ExplanationSource>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Record id to explain; repeatable.
    #[arg(long = "image")]
    images: Vec<String>,
    /// Restrict local explanations to one class.
    #[arg(long = "class")]
    class: Option<String>,
    #[arg(long = "global")]
    global: bool,
    #[arg(long)]
    flip_sign: bool,
    #[arg(long, default_value = "explain")]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown guidance mode `{s}`"))
}

fn parse_term(s: &str) -> Result<Term, String> {
    Term::parse(s).ok_or_else(|| format!("unknown loss term `{s}`"))
}

fn parse_magnitude(s: &str) -> Result<Magnitude, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| format!("unknown magnitude `{s}`"))
}

fn parse_source(s: &str) -> Result<ExplanationSource, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown source `{s}`"))
}

/// Merged command configuration; flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    dataset: Option<PathBuf>,
    validation: Option<PathBuf>,
    out: Option<PathBuf>,
    image_size: Option<usize>,
    injection_log: Option<PathBuf>,
    thresholds: Option<PathBuf>,
    train: TrainConfig,
    report: ReportConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())).into())
    }

    fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join(EFFECTIVE_CONFIG), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn required<'a, T>(v: &'a Option<T>, name: &str) -> anyhow::Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::InvalidConfig(format!("missing `{name}` (flag or config key)")).into())
}

fn class_index(names: &[String], class: &str) -> anyhow::Result<usize> {
    names
        .iter()
        .position(|n| n == class)
        .or_else(|| class.parse::<usize>().ok().filter(|&i| i < names.len()))
        .ok_or_else(|| Error::UnknownClass { row: 0, class: class.to_string() }.into())
}

fn cmd_make_synthetic(a: MakeSyntheticArgs) -> anyhow::Result<()> {
    let defaults = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        num_samples: a.n,
        num_classes: a.classes,
        size: a.size,
        seed: a.seed,
        prevalence: a.prevalence.unwrap_or(defaults.prevalence),
        co_occurrence: a.co_occurrence.unwrap_or(defaults.co_occurrence),
        annotated_fraction: a.annotated_fraction.unwrap_or(defaults.annotated_fraction),
    };
    let manifest = make_synthetic(&cfg, &a.out)?;
    write_json(&a.out.join(EFFECTIVE_CONFIG), &cfg)?;
    log::info!("wrote {} samples to {}", cfg.num_samples, manifest.display());
    Ok(())
}

fn cmd_contaminate(a: ContaminateArgs) -> anyhow::Result<()> {
    let src = manifest_path(&a.dataset);
    if a.out.exists() && std::fs::canonicalize(&a.out)? == std::fs::canonicalize(src.parent().unwrap_or(Path::new(".")))? {
        bail!(Error::InvalidConfig("contaminate must write to a new directory".into()));
    }
    let names = attrinet::dataset::read_manifest_classes(&src)?;
    let class = class_index(&names, &a.class)?;
    let size = first_image_side(&src)?;
    let spec = ContaminationSpec::centered_top(class, a.fraction, &a.text, size);
    spec.validate()?;
    let outcome = contaminate(&src, &a.out, &spec, a.seed)?;
    #[derive(Serialize)]
    struct Echo<'a> {
        source: &'a Path,
        seed: u64,
        spec: &'a ContaminationSpec,
    }
    write_json(&a.out.join(EFFECTIVE_CONFIG), &Echo { source: &src, seed: a.seed, spec: &spec })?;
    log::info!("tagged {} images; log at {}", outcome.entries.len(), outcome.log.display());
    Ok(())
}

fn first_image_side(manifest: &Path) -> anyhow::Result<usize> {
    let names = attrinet::dataset::read_manifest_classes(manifest)?;
    let records = attrinet::dataset::load_manifest(manifest, &names)?;
    let first = records.first().ok_or_else(|| Error::InvalidConfig("empty manifest".into()))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let img = attrinet::dataset::load_gray(&root.join(&first.image_path))?;
    Ok(img.width())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.dataset = a.dataset.or(cfg.dataset);
    cfg.validation = a.validation.or(cfg.validation);
    cfg.out = a.out.or(cfg.out);
    cfg.image_size = a.size.or(cfg.image_size);
    if let Some(mode) = a.guidance {
        cfg.train.guidance.mode = mode;
    }
    if !a.ablation.is_empty() {
        cfg.train.loss_weights = cfg.train.loss_weights.ablate(&a.ablation);
    }
    if let Some(s) = a.steps {
        cfg.train.generator_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let out = required(&cfg.out, "out")?.clone();
    let size = cfg.image_size.unwrap_or(64);
    let train_set = Dataset::open(&manifest_path(required(&cfg.dataset, "dataset")?), size)?;
    let validation = cfg.validation.as_ref().map(|v| Dataset::open(&manifest_path(v), size)).transpose()?;
    cfg.echo(&out)?;

    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, &train_set, validation.as_ref(), &cfg.train, &out)?,
        None => Trainer::new(&train_set, validation.as_ref(), &cfg.train, &out)?,
    };
    let outcome = trainer.run()?;
    log::info!("final checkpoint {}", outcome.final_checkpoint.display());

    let mut summary = serde_json::json!({
        "final_checkpoint": outcome.final_checkpoint,
        "best_checkpoint": outcome.best_checkpoint,
        "loss_log": outcome.loss_log,
    });
    if let Some(v) = &validation {
        let (net, _) = load_model(&outcome.best_checkpoint)?;
        let probs = net.predict(v.all_pixels(), 32)?;
        let scores: Vec<Vec<f64>> = (0..net.num_classes())
            .map(|c| Vec::<f64>::try_from(&probs.select(1, c as i64).to_kind(tch::Kind::Double)))
            .collect::<Result<_, _>>()?;
        let labels: Vec<Vec<u8>> = v.records().iter().map(|r| r.labels.clone()).collect();
        let table = calibrate_thresholds(net.class_names(), &scores, &labels)?;
        let path = out.join("thresholds.json");
        table.save(&path)?;
        summary["thresholds"] = serde_json::json!(path);
        summary["validation_auc"] = serde_json::json!(validation_auc(&net, v)?);
    }
    write_json(&out.join("summary.json"), &summary)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.dataset = a.dataset.or(cfg.dataset);
    cfg.out = a.out.or(cfg.out);
    cfg.injection_log = a.injection_log.or(cfg.injection_log);
    cfg.thresholds = a.thresholds.or(cfg.thresholds);
    if let Some(m) = &a.metrics {
        cfg.report.metrics = MetricSet::parse(m)?;
    }
    if let Some(m) = a.magnitude {
        cfg.report.magnitude = m;
    }
    if let Some(s) = a.source {
        cfg.report.source = s;
    }
    if let Some(s) = a.seed {
        cfg.report.seed = s;
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    cfg.out = Some(out.clone());
    let (net, header) = load_model(&a.checkpoint)?;
    let data = Dataset::open(&manifest_path(required(&cfg.dataset, "dataset")?), header.height)?;
    let thresholds = cfg.thresholds.as_ref().map(|p| ThresholdTable::load(p, net.class_names())).transpose()?;
    let tags = match &cfg.injection_log {
        Some(p) => read_injection_log(p)?,
        None => {
            let beside = data.root().join(INJECTION_LOG_FILE);
            if beside.exists() {
                read_injection_log(&beside)?
            } else {
                Vec::new()
            }
        }
    };
    cfg.echo(&out)?;
    let r = report(&net, &data, thresholds.as_ref(), &tags, &cfg.report)?;
    for p in r.write(&out)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> anyhow::Result<()> {
    if a.images.is_empty() && !a.global {
        bail!(Error::InvalidConfig("nothing to explain: pass --image and/or --global".into()));
    }
    let (net, header) = load_model(&a.checkpoint)?;
    write_json(
        &a.out.join(EFFECTIVE_CONFIG),
        &serde_json::json!({
            "checkpoint": a.checkpoint, "dataset": a.dataset, "images": a.images,
            "class": a.class, "global": a.global, "flip_sign": a.flip_sign,
        }),
    )?;
    if !a.images.is_empty() {
        let data = Dataset::open(&manifest_path(required(&a.dataset, "dataset")?), header.height)?;
        let classes: Vec<usize> = match &a.class {
            Some(c) => vec![class_index(net.class_names(), c)?],
            None => (0..net.num_classes()).collect(),
        };
        for id in &a.images {
            let idx = data.index_of(id).ok_or_else(|| Error::InvalidConfig(format!("no record `{id}` in dataset")))?;
            let x = data.image(idx);
            let pixels = attrinet::grid::Grid::from_tensor(&x)?;
            for &c in &classes {
                let e = local_explain(&net, &x, c)?.remove(0);
                export_local(&a.out, id, &net.class_names()[c], &pixels, &e, a.flip_sign)?;
            }
        }
    }
    if a.global {
        export_global(&a.out, net.class_names(), &global_explain(&net)?)?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NaNLoss { .. }) => 4,
        Some(Error::InvalidConfig(_)) => 2,
        Some(e) if e.is_data_error() => 3,
        Some(Error::Io { .. }) | Some(Error::Json(_)) | Some(Error::Checkpoint(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeSynthetic(a) => cmd_make_synthetic(a),
        Command::Contaminate(a) => cmd_contaminate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
