use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use kdf_core::data::{
    holdout, read_fer_csv, read_image_folder, synthetic_fer_rows, write_fer_csv,
    write_image_folder, DatasetStats, Emotion, ImageSpec, Sample, Split,
};
use kdf_core::distill::DistillConfig;
use kdf_core::metrics::{bench_latency, compare, evaluate, memory_report, BenchReport, Evaluation};
use kdf_core::train::{fit, Teacher};
use kdf_core::zoo::{self, model_size, reference_total, LayerPlan, Model, ModelConfig, ModelSize};
use serde::Serialize;
use serde_json::json;

use crate::config::{DataFormat, RunConfig};
use crate::manifest::{fingerprint, write_json, write_text, Fingerprint, RunManifest};
use crate::RunArgs;

const EVAL_BATCH: usize = 64;

/// Bad invocation or missing input; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError::new(msg).into()
}

fn parse_format(s: &str) -> Result<DataFormat> {
    match s {
        "csv" => Ok(DataFormat::Csv),
        "folder" => Ok(DataFormat::Folder),
        _ => Err(usage(format!("format must be csv or folder, got {s:?}"))),
    }
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

/// Defaults, then `--config`, then `--preset`, then `--set`, then flags.
pub fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut errors = Vec::new();
    if let Some(path) = &run.config {
        let text =
            fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        errors.extend(cfg.apply_text(&text, &path.display().to_string()));
    }
    if let Some(p) = &run.preset {
        errors.extend(cfg.apply([("preset", p.as_str())], "--preset"));
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for s in &run.set {
        match s.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => errors.push(format!("--set: expected KEY=VALUE, got {s:?}")),
        }
    }
    let flags = [
        ("data", run.data.as_ref().map(|p| p.display().to_string())),
        ("format", run.format.clone()),
        ("batch_size", text(&run.batch_size)),
        ("epochs", text(&run.epochs)),
        ("lr", text(&run.lr)),
        ("momentum", text(&run.momentum)),
        ("plateau_factor", text(&run.plateau_factor)),
        ("plateau_patience", text(&run.plateau_patience)),
        ("seed", text(&run.seed)),
        ("flip_prob", text(&run.flip_prob)),
        ("temperature", text(&run.temperature)),
        ("alpha", text(&run.alpha)),
        ("hard_weight", text(&run.hard_weight)),
        ("deterministic", text(&run.deterministic)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    }
    errors.extend(cfg.apply(
        pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        "command line",
    ));
    if errors.is_empty() {
        errors.extend(cfg.problems());
    }
    if !errors.is_empty() {
        return Err(usage(format!(
            "invalid configuration:\n  {}",
            errors.join("\n  ")
        )));
    }
    Ok(cfg)
}

fn read_samples(path: &Path, format: DataFormat, spec: &ImageSpec) -> Result<Vec<Sample>> {
    if !path.exists() {
        return Err(usage(format!(
            "data path {} does not exist",
            path.display()
        )));
    }
    match format {
        DataFormat::Csv => {
            if path.is_dir() {
                return Err(usage(format!(
                    "{} is a directory; pass --format folder",
                    path.display()
                )));
            }
            Ok(read_fer_csv(path, spec)?)
        }
        DataFormat::Folder => {
            let data = read_image_folder(path, spec)?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            Ok(data.samples)
        }
    }
}

fn by_split(samples: Vec<Sample>) -> BTreeMap<Split, Vec<Sample>> {
    let mut m: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.split).or_default().push(s);
    }
    m
}

/// Training samples, validation samples, and the labeled evaluation splits.
struct Prepared {
    train: Vec<Sample>,
    val: Vec<Sample>,
    val_name: String,
    evals: Vec<(String, Vec<Sample>)>,
}

/// CSV: Training trains, PublicTest validates, PublicTest and PrivateTest are
/// both reported. Folder: a seeded holdout of train validates, test is reported.
/// Without a validation split the holdout fraction of Training is used.
fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| usage("no dataset; pass --data <PATH>"))?;
    let spec = ImageSpec::from_shape(cfg.model.input_shape);
    let mut splits = by_split(read_samples(path, cfg.format, &spec)?);
    let train = splits.remove(&Split::Training).unwrap_or_default();
    if train.is_empty() {
        return Err(usage(format!("{} has no Training samples", path.display())));
    }
    let public = splits.get(&Split::PublicTest).cloned().unwrap_or_default();
    let (train, val, val_name) = if !public.is_empty() {
        (train, public, "PublicTest".to_string())
    } else if cfg.val_fraction > 0.0 {
        let (t, v) = holdout(train, cfg.val_fraction, cfg.train.seed);
        (t, v, "holdout".to_string())
    } else {
        (train, Vec::new(), String::new())
    };
    let evals = splits
        .into_iter()
        .map(|(s, v)| (s.name().to_string(), v))
        .collect();
    Ok(Prepared {
        train,
        val,
        val_name,
        evals,
    })
}

fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    if !path.is_file() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    zoo::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_teacher(path: &Path, student: &ModelConfig) -> Result<Model<f32>> {
    let teacher = load_checkpoint(path)?;
    let t = &teacher.config;
    if t.input_shape != student.input_shape {
        return Err(usage(format!(
            "teacher input shape {:?} differs from student {:?}",
            t.input_shape, student.input_shape
        )));
    }
    if t.num_classes != student.num_classes {
        return Err(usage(format!(
            "teacher has {} classes, student {}",
            t.num_classes, student.num_classes
        )));
    }
    Ok(teacher)
}

fn write_evaluations(out: &Path, evals: &[(String, Evaluation)]) -> Result<()> {
    for (name, e) in evals {
        write_text(
            &out.join(format!("confusion_{name}.csv")),
            &e.confusion.to_csv(),
        )?;
    }
    Ok(())
}

fn eval_map(evals: &[(String, Evaluation)]) -> BTreeMap<String, &Evaluation> {
    evals.iter().map(|(n, e)| (n.clone(), e)).collect()
}

fn print_evaluations(evals: &[(String, Evaluation)]) {
    for (name, e) in evals {
        say!(
            "{name}: accuracy {:.2}% over {} samples",
            e.accuracy,
            e.samples
        );
    }
}

fn inputs_of(cfg: &RunConfig) -> Result<Vec<Fingerprint>> {
    let mut v = Vec::new();
    for p in [&cfg.data, &cfg.teacher].into_iter().flatten() {
        v.extend(fingerprint(p)?);
    }
    Ok(v)
}

pub fn train(run: &RunArgs, out: &Path) -> Result<()> {
    let cfg = resolve(run)?;
    execute(&cfg, false, out)
}

pub fn distill(run: &RunArgs, teacher: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut cfg = resolve(run)?;
    if teacher.is_some() {
        cfg.teacher = teacher;
    }
    if cfg.teacher.is_none() {
        return Err(usage("distill requires --teacher <CKPT>"));
    }
    execute(&cfg, true, out)
}

/// Train (or distill), then write report.json, report.csv, model.ckpt,
/// confusion_<split>.csv, timings.json and manifest.json into `out`.
fn execute(cfg: &RunConfig, distilling: bool, out: &Path) -> Result<()> {
    let teacher = if distilling {
        let path = cfg
            .teacher
            .as_ref()
            .ok_or_else(|| usage("distill requires --teacher <CKPT>"))?;
        Some(load_teacher(path, &cfg.model)?)
    } else {
        None
    };
    let data = prepare(cfg)?;
    let inputs = inputs_of(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let started = Instant::now();
    let mut model = Model::build(&cfg.model, cfg.train.seed)?;
    let frozen = teacher.as_ref().map(|m| Teacher {
        model: m,
        distill: cfg.distill.clone(),
    });
    let fitted = fit(
        &mut model,
        &data.train,
        &data.val,
        &cfg.train,
        frozen.as_ref(),
    )
    .with_context(|| format!("training {}", cfg.model.name))?;
    let mut report = fitted.report;
    report.checkpoint = Some("model.ckpt".into());
    zoo::save(&fitted.best, out.join("model.ckpt"))?;

    let mut evals = Vec::new();
    if !data.val.is_empty() && data.val_name == "holdout" {
        evals.push((
            "holdout".to_string(),
            evaluate(&fitted.best, &data.val, EVAL_BATCH)?,
        ));
    }
    for (name, samples) in &data.evals {
        evals.push((name.clone(), evaluate(&fitted.best, samples, EVAL_BATCH)?));
    }
    let command = if distilling { "distill" } else { "train" };
    write_json(
        &out.join("report.json"),
        &json!({
            "command": command,
            "model": cfg.model.name,
            "parameters": model_size(&fitted.best).parameters,
            "teacher": teacher.as_ref().map(|t| t.config.name.clone()),
            "train_samples": data.train.len(),
            "validation": {"source": data.val_name, "samples": data.val.len()},
            "train": report,
            "evaluations": eval_map(&evals),
        }),
    )?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_evaluations(out, &evals)?;
    write_json(
        &out.join("timings.json"),
        &json!({"epoch_seconds": report.epoch_seconds, "total_seconds": started.elapsed().as_secs_f64()}),
    )?;
    RunManifest::new(command, cfg.to_text(), cfg.train.seed, inputs).write(out)?;

    let best = report.epochs.get(report.best_epoch.saturating_sub(1));
    say!(
        "{command} {}: {} epochs, best epoch {} (train accuracy {:.2}%)",
        cfg.model.name,
        report.epochs.len(),
        report.best_epoch,
        best.map_or(0.0, |e| e.train_accuracy)
    );
    print_evaluations(&evals);
    say!("wrote {}", out.display());
    Ok(())
}

pub fn stats(data: &Path, format: &str, out: Option<&Path>, as_json: bool) -> Result<()> {
    let samples = read_samples(
        data,
        parse_format(format)?,
        &ImageSpec::from_shape([1, 8, 8]),
    )?;
    let stats = DatasetStats::from_samples(&samples);
    if as_json {
        say!("{}", serde_json::to_string_pretty(&stats.to_json())?);
    } else {
        say_raw!("{}", stats_table(&stats));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("stats.json"), &stats.to_json())?;
        write_text(&dir.join("stats.csv"), &stats.to_csv())?;
    }
    Ok(())
}

fn stats_table(stats: &DatasetStats) -> String {
    let mut s = format!("{:<12}", "Split");
    for e in Emotion::ALL {
        s.push_str(&format!("{:>10}", e.to_string()));
    }
    s.push_str(&format!("{:>10}\n", "Total"));
    for &split in stats.splits.keys() {
        s.push_str(&format!("{:<12}", split.name()));
        for n in stats.counts(split) {
            s.push_str(&format!("{n:>10}"));
        }
        s.push_str(&format!("{:>10}\n", stats.total(split)));
    }
    s.push_str(&format!("{:<12}", "All"));
    for e in Emotion::ALL {
        let n: usize = stats.splits.values().map(|c| c[e.index()]).sum();
        s.push_str(&format!("{n:>10}"));
    }
    s.push_str(&format!("{:>10}\n", stats.grand_total()));
    s
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    format: &str,
    split: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let wanted = match split {
        Some(s) => Some(Split::parse(s).ok_or_else(|| usage(format!("unknown split {s:?}")))?),
        None => None,
    };
    let spec = ImageSpec::from_shape(model.config.input_shape);
    let splits = by_split(read_samples(data, parse_format(format)?, &spec)?);
    let mut evals = Vec::new();
    for (s, samples) in &splits {
        let selected = match wanted {
            Some(w) => *s == w,
            None => *s != Split::Training,
        };
        if selected {
            evals.push((s.name().to_string(), evaluate(&model, samples, EVAL_BATCH)?));
        }
    }
    if evals.is_empty() {
        let which = wanted.map_or("evaluation".to_string(), |w| w.name().to_string());
        return Err(usage(format!("{} has no {which} samples", data.display())));
    }
    say!("model {}", model.config.name);
    for (name, e) in &evals {
        say!(
            "{name}: accuracy {:.2}% over {} samples",
            e.accuracy,
            e.samples
        );
        for (e_name, acc) in Emotion::ALL.iter().zip(&e.per_class_accuracy) {
            say!("  {:<9} {acc:.2}%", e_name.name());
        }
        say_raw!("{}", e.confusion.to_csv());
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(
            &dir.join("report.json"),
            &json!({"model": model.config.name, "evaluations": eval_map(&evals)}),
        )?;
        write_evaluations(dir, &evals)?;
    }
    Ok(())
}

fn model_from(spec: &str) -> Result<Model<f32>> {
    if let Some(cfg) = ModelConfig::preset(spec) {
        return Ok(Model::build(&cfg, 0)?);
    }
    if Path::new(spec).is_file() {
        return load_checkpoint(Path::new(spec));
    }
    Err(usage(format!(
        "{spec:?} is neither a preset (resemotenet, student_a, student_b, student_c) nor a checkpoint file"
    )))
}

pub fn bench(
    models: &[String],
    latency: Option<(usize, usize)>,
    data: Option<&Path>,
    format: &str,
    out: Option<&Path>,
) -> Result<()> {
    let defaults = ["resemotenet", "student_a", "student_b"].map(String::from);
    let models = if models.is_empty() {
        &defaults[..]
    } else {
        models
    };
    let format = parse_format(format)?;
    let mut reports = Vec::new();
    for spec in models {
        let model = model_from(spec)?;
        let mut r = BenchReport::new(&model);
        let mut memory = memory_report(&model)?;
        match latency {
            Some((warmup, runs)) => {
                if runs == 0 {
                    return Err(usage("--runs must be at least 1"));
                }
                r.latency = Some(bench_latency(
                    &model,
                    model.config.input_shape,
                    warmup,
                    runs,
                )?);
            }
            // Peak RSS is a runtime measurement too; leaving it out keeps the output reproducible.
            None => memory.peak_resident_bytes = None,
        }
        r.memory = Some(memory);
        if let Some(path) = data {
            let spec = ImageSpec::from_shape(model.config.input_shape);
            let held: Vec<Sample> = read_samples(path, format, &spec)?
                .into_iter()
                .filter(|s| s.split != Split::Training)
                .collect();
            if held.is_empty() {
                return Err(usage(format!(
                    "{} has no evaluation samples",
                    path.display()
                )));
            }
            r.evaluation = Some(evaluate(&model, &held, EVAL_BATCH)?);
        }
        reports.push(r);
    }
    for r in &reports {
        say!("{}", size_line(&r.model, &r.size));
    }
    let summaries: Vec<_> = reports.iter().map(BenchReport::summary).collect();
    let comparison = if summaries.len() >= 2 {
        Some(compare(&summaries)?)
    } else {
        None
    };
    if let Some(c) = &comparison {
        say!("");
        say_raw!("{}", c.to_text());
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(
            &dir.join("report.json"),
            &json!({"models": reports, "comparison": comparison}),
        )?;
        if let Some(c) = &comparison {
            write_text(&dir.join("report.csv"), &c.to_csv())?;
        }
    }
    Ok(())
}

fn size_line(name: &str, size: &ModelSize) -> String {
    format!(
        "{name}: {} parameters, {} bytes, {:.2} MB, {:.2} MiB",
        size.parameters,
        size.bytes,
        size.decimal_mb(),
        size.mib()
    )
}

#[derive(Serialize)]
struct InspectLayer<'a> {
    #[serde(flatten)]
    layer: &'a LayerPlan,
    cumulative_trainable: u64,
}

pub fn inspect(
    config: Option<&Path>,
    preset: Option<&str>,
    checkpoint: Option<&Path>,
    as_json: bool,
) -> Result<()> {
    let cfg = match (config, preset, checkpoint) {
        (_, _, Some(ckpt)) => load_checkpoint(ckpt)?.config,
        (Some(path), _, _) => {
            let run = RunArgs {
                config: Some(path.to_path_buf()),
                ..RunArgs::default()
            };
            resolve(&run)?.model
        }
        (None, p, None) => {
            let name = p.unwrap_or("resemotenet");
            ModelConfig::preset(name).ok_or_else(|| usage(format!("unknown preset {name:?}")))?
        }
    };
    let plan = cfg.plan()?;
    let mut cumulative = 0;
    let layers: Vec<InspectLayer> = plan
        .iter()
        .map(|l| {
            cumulative += l.params.trainable;
            InspectLayer {
                layer: l,
                cumulative_trainable: cumulative,
            }
        })
        .collect();
    let trainable: u64 = plan.iter().map(|l| l.params.trainable).sum();
    let buffers: u64 = plan.iter().map(|l| l.params.buffers).sum();
    let size = ModelSize::from_parameters(trainable);
    let reference = reference_total(&cfg.name);
    let delta = reference.map(|r| trainable as i64 - r as i64);

    if as_json {
        let v = json!({
            "model": cfg.name,
            "input_shape": cfg.input_shape,
            "layers": layers,
            "trainable": trainable,
            "buffers": buffers,
            "reference": reference,
            "delta": delta,
            "bytes": size.bytes,
            "mb": size.decimal_mb(),
            "mib": size.mib(),
        });
        say!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    say!("model {} input {:?}", cfg.name, cfg.input_shape);
    say!(
        "{:<22} {:<20} {:<16} {:>12} {:>8} {:>12}",
        "layer",
        "kind",
        "output",
        "trainable",
        "buffers",
        "cumulative"
    );
    for l in &layers {
        let shape = format!("{:?}", l.layer.output_shape);
        say!(
            "{:<22} {:<20} {:<16} {:>12} {:>8} {:>12}",
            l.layer.name,
            l.layer.kind,
            shape,
            l.layer.params.trainable,
            l.layer.params.buffers,
            l.cumulative_trainable
        );
    }
    say!("trainable parameters: {trainable}");
    say!("batch-norm buffers: {buffers}");
    match (reference, delta) {
        (Some(r), Some(0)) => say!("reference total {r}: match"),
        (Some(r), Some(d)) => say!("reference total {r}: differs by {d:+}"),
        _ => say!("no reference total for {:?}", cfg.name),
    }
    say!("{}", size_line(&cfg.name, &size));
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct SweepRow {
    temperature: f64,
    alpha: f64,
    hard_weight: f64,
    best_epoch: usize,
    best_metric: f64,
    final_train_accuracy: f64,
    accuracies: BTreeMap<String, f64>,
    checkpoint: String,
}

fn worker_cap() -> Result<Option<usize>> {
    match std::env::var("KDF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!(
                "KDF_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

/// One distillation per grid point, results in grid order whatever the job count.
pub fn sweep(
    run: &RunArgs,
    teacher: &Path,
    temperatures: &[f64],
    alphas: &[f64],
    jobs: usize,
    out: &Path,
) -> Result<()> {
    let mut cfg = resolve(run)?;
    cfg.teacher = Some(teacher.to_path_buf());
    let teacher_model = load_teacher(teacher, &cfg.model)?;
    let data = prepare(&cfg)?;
    let grid: Vec<(f64, f64)> = temperatures
        .iter()
        .flat_map(|&t| alphas.iter().map(move |&a| (t, a)))
        .collect();
    if grid.is_empty() {
        return Err(usage("empty sweep grid"));
    }
    for &(t, a) in &grid {
        DistillConfig::new(t, a)
            .validate(cfg.model.num_classes)
            .map_err(|e| usage(e.to_string()))?;
    }
    let jobs = match worker_cap()? {
        Some(cap) => jobs.min(cap),
        None => jobs,
    }
    .clamp(1, grid.len());
    let inputs = inputs_of(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let row = sweep_point(&cfg, &teacher_model, &data, grid[i], out);
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every grid point runs"))
        .collect::<Result<Vec<_>>>()?;

    let split_names: Vec<String> = rows[0].accuracies.keys().cloned().collect();
    let mut csv =
        String::from("temperature,alpha,hard_weight,best_epoch,best_metric,final_train_accuracy");
    for n in &split_names {
        csv.push_str(&format!(",{n}_accuracy"));
    }
    csv.push_str(",checkpoint\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}",
            r.temperature,
            r.alpha,
            r.hard_weight,
            r.best_epoch,
            r.best_metric,
            r.final_train_accuracy
        ));
        for n in &split_names {
            csv.push_str(&format!(",{}", r.accuracies[n]));
        }
        csv.push_str(&format!(",{}\n", r.checkpoint));
    }
    write_text(&out.join("report.csv"), &csv)?;
    write_json(
        &out.join("report.json"),
        &json!({"model": cfg.model.name, "teacher": teacher_model.config.name, "rows": rows}),
    )?;
    RunManifest::new("sweep", cfg.to_text(), cfg.train.seed, inputs).write(out)?;
    say_raw!("{csv}");
    Ok(())
}

fn sweep_point(
    cfg: &RunConfig,
    teacher: &Model<f32>,
    data: &Prepared,
    (t, a): (f64, f64),
    out: &Path,
) -> Result<SweepRow> {
    let distill = DistillConfig::new(t, a);
    let frozen = Teacher {
        model: teacher,
        distill: distill.clone(),
    };
    let mut model = Model::build(&cfg.model, cfg.train.seed)?;
    let fitted = fit(
        &mut model,
        &data.train,
        &data.val,
        &cfg.train,
        Some(&frozen),
    )
    .with_context(|| format!("distilling at temperature {t}, alpha {a}"))?;
    let dir_name = format!("t{t}_a{a}");
    let dir = out.join(&dir_name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    zoo::save(&fitted.best, dir.join("model.ckpt"))?;
    write_text(&dir.join("report.csv"), &fitted.report.to_csv())?;
    let mut accuracies = BTreeMap::new();
    if !data.val.is_empty() && data.val_name == "holdout" {
        accuracies.insert(
            "holdout".to_string(),
            evaluate(&fitted.best, &data.val, EVAL_BATCH)?.accuracy,
        );
    }
    for (name, samples) in &data.evals {
        accuracies.insert(
            name.clone(),
            evaluate(&fitted.best, samples, EVAL_BATCH)?.accuracy,
        );
    }
    let report = &fitted.report;
    Ok(SweepRow {
        temperature: t,
        alpha: a,
        hard_weight: distill.hard_weight,
        best_epoch: report.best_epoch,
        best_metric: report.best_metric,
        final_train_accuracy: report.epochs.last().map_or(0.0, |e| e.train_accuracy),
        accuracies,
        checkpoint: format!("{dir_name}/model.ckpt"),
    })
}

pub fn fixture(
    kind: &str,
    per_class: usize,
    eval_per_class: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if per_class == 0 {
        return Err(usage("--per-class must be at least 1"));
    }
    match kind {
        "csv" => {
            let mut rows = synthetic_fer_rows(per_class, Split::Training, seed);
            if eval_per_class > 0 {
                rows.extend(synthetic_fer_rows(
                    eval_per_class,
                    Split::PublicTest,
                    seed + 1,
                ));
                rows.extend(synthetic_fer_rows(
                    eval_per_class,
                    Split::PrivateTest,
                    seed + 2,
                ));
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            let file =
                fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = std::io::BufWriter::new(file);
            write_fer_csv(&mut w, &rows).with_context(|| format!("writing {}", out.display()))?;
            say!("wrote {} rows to {}", rows.len(), out.display());
        }
        "folder" => {
            write_image_folder(out, per_class, 48, seed)?;
            say!(
                "wrote {} images per class and split under {}",
                per_class,
                out.display()
            );
        }
        other => bail!(usage(format!(
            "fixture kind must be csv or folder, got {other:?}"
        ))),
    }
    Ok(())
}

/// Check every recorded input against its fingerprint, then rerun the job.
pub fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let m = RunManifest::read(manifest).map_err(|e| usage(format!("{e:#}")))?;
    let distilling = match m.command.as_str() {
        "train" => false,
        "distill" => true,
        other => return Err(usage(format!("cannot replay a {other:?} run"))),
    };
    let mut cfg = RunConfig::default();
    let errors = cfg.apply_text(&m.config, &manifest.display().to_string());
    if !errors.is_empty() {
        return Err(usage(format!("manifest config: {}", errors.join("; "))));
    }
    let now = inputs_of(&cfg)?;
    if now != m.inputs {
        let changed: Vec<String> = m
            .inputs
            .iter()
            .filter(|f| !now.contains(f))
            .map(|f| f.path.clone())
            .collect();
        return Err(usage(format!(
            "inputs changed since the recorded run: {}",
            changed.join(", ")
        )));
    }
    execute(&cfg, distilling, out)
}
