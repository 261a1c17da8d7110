//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mirror_align::io::{
    read_checkpoint, read_dataset, read_json, write_checkpoint, write_dataset, write_json,
    write_representations, write_text, DatasetManifest,
};
use mirror_align::probing::probe;
use mirror_align::probing::CurveInput;
use mirror_align::training::{ee_outcomes, EpochMetrics};
use mirror_align::{
    alignment_curve, generate_dataset, run_ablation, split_dataset, subset_alignment, train_au,
    train_ee, train_joint, AUModel, AblationGrid, Dataset, EEModel, ProbeConfig, Representations,
    Split, SuccessRule, TrainConfig, TrainRun,
};
use serde::{Deserialize, Serialize};

use crate::args::{
    AblateArgs, Cli, Command, CurveArgs, DumpArgs, GenArgs, ModelSource, ProbeArgs, ReportArgs,
    SplitArg, SubsetArgs, TrainArgs,
};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::settings::{apply_probe, apply_train, FileConfig, FAST_EPOCHS};

pub const THREADS_ENV: &str = "MIRROR_ALIGN_THREADS";
pub const SUMMARY_FILE: &str = "summary.json";

/// Which task models a training command produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[allow(clippy::enum_variant_names)]
pub enum RunKind {
    TrainAu,
    TrainEe,
    TrainJoint,
}

impl RunKind {
    fn command(self) -> &'static str {
        match self {
            RunKind::TrainAu => "train-au",
            RunKind::TrainEe => "train-ee",
            RunKind::TrainJoint => "train-joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub tag: String,
    pub fraction: f64,
    pub epoch: usize,
    pub file: PathBuf,
}

/// `summary.json` of a training command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: RunKind,
    pub seed: u64,
    pub effective_batch: usize,
    pub steps_per_epoch: usize,
    pub epochs_completed: usize,
    pub last: Option<EpochMetrics>,
    pub divergence: Option<String>,
    pub checkpoints: Vec<CheckpointRecord>,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => gen(&file, a),
        Command::TrainAu(a) => train(&file, a, RunKind::TrainAu),
        Command::TrainEe(a) => train(&file, a, RunKind::TrainEe),
        Command::TrainJoint(a) => train(&file, a, RunKind::TrainJoint),
        Command::Probe(a) => probe_cmd(&file, a),
        Command::Curve(a) => curve(&file, a),
        Command::Subsets(a) => subsets(&file, a),
        Command::Ablate(a) => ablate(&file, a),
        Command::DumpEmbeddings(a) => dump(a),
        Command::Report(a) => report(a),
    }
}

/// Writes the manifest, runs `body`, then rewrites the manifest with the
/// outcome and every output the body registered.
fn with_manifest(
    out: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce(&mut RunManifest) -> Result<()>,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    manifest.write(out)?;
    let result = body(&mut manifest);
    match &result {
        Ok(()) => manifest.status = crate::manifest::Status::Ok,
        Err(e) => {
            manifest.status = crate::manifest::Status::Failed;
            manifest.error = Some(format!("{e:#}"));
        }
    }
    manifest.write(out)?;
    result
}

fn to_value<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

fn load_dataset(path: &Path, manifest: &mut RunManifest) -> Result<Dataset> {
    manifest.input(path)?;
    Ok(read_dataset(path)?)
}

fn gen(file: &FileConfig, args: GenArgs) -> Result<()> {
    let mut section = file.gen.clone();
    if let Some(seed) = args.seed {
        section.config.seed = seed;
    }
    if let Some(f) = args.test_fraction {
        section.test_fraction = f;
    }
    let manifest = RunManifest::new("gen", Some(section.config.seed), to_value(&section)?);
    with_manifest(&args.out, manifest, |m| {
        let ds = split_dataset(
            &generate_dataset(&section.config)?,
            section.test_fraction,
            section.config.seed,
        )?;
        for w in &ds.warnings {
            eprintln!("warning: {w}");
        }
        let data_path = args.out.join("dataset.bin");
        let checksum = write_dataset(&data_path, &ds)?;
        m.output(&data_path, checksum.clone());
        let info_path = args.out.join("dataset.json");
        let info = write_json(&info_path, &DatasetManifest::describe(&ds, checksum))?;
        m.output(&info_path, info);
        Ok(())
    })
}

fn train(file: &FileConfig, args: TrainArgs, kind: RunKind) -> Result<()> {
    let cfg = apply_train(file.train.clone(), &args.train);
    cfg.validate()?;
    let mut manifest = RunManifest::new(kind.command(), Some(cfg.seed), to_value(&cfg)?);
    let ds = load_dataset(&args.data, &mut manifest)?;
    with_manifest(&args.out, manifest, |m| {
        let run = match kind {
            RunKind::TrainAu => train_au(&ds, &cfg)?,
            RunKind::TrainEe => train_ee(&ds, &cfg)?,
            RunKind::TrainJoint => train_joint(&ds, &cfg)?,
        };
        write_run(&args.out, kind, &cfg, &run, m)?;
        if let Some(msg) = &run.divergence {
            bail!(
                "{msg}; last finite checkpoints kept in {}",
                args.out.display()
            );
        }
        Ok(())
    })
}

fn write_run(
    out: &Path,
    kind: RunKind,
    cfg: &TrainConfig,
    run: &TrainRun,
    m: &mut RunManifest,
) -> Result<()> {
    let metrics_path = out.join("metrics.csv");
    m.output(
        &metrics_path,
        write_text(&metrics_path, &run.metrics.to_csv())?,
    );
    let mut records = Vec::new();
    for ckpt in &run.checkpoints {
        let rel = PathBuf::from("checkpoints").join(format!("{}.model", ckpt.tag));
        let path = out.join(&rel);
        m.output(&path, write_checkpoint(&path, ckpt)?);
        records.push(CheckpointRecord {
            tag: ckpt.tag.clone(),
            fraction: ckpt.fraction,
            epoch: ckpt.epoch,
            file: rel,
        });
    }
    let summary = TrainSummary {
        kind,
        seed: cfg.seed,
        effective_batch: run.metrics.effective_batch,
        steps_per_epoch: run.metrics.steps_per_epoch,
        epochs_completed: run.metrics.epochs.len(),
        last: run.metrics.last().cloned(),
        divergence: run.divergence.clone(),
        checkpoints: records,
    };
    let path = out.join(SUMMARY_FILE);
    m.output(&path, write_json(&path, &summary)?);
    Ok(())
}

/// Task models at one checkpoint tag, gathered from one or more runs.
struct LoadedModels {
    au: AUModel,
    ee: EEModel,
    fraction: f64,
    success: SuccessRule,
}

fn load_models(source: &ModelSource, tag: &str, m: &mut RunManifest) -> Result<LoadedModels> {
    let (mut au, mut ee, mut fraction, mut success) = (None, None, 0.0, SuccessRule::default());
    for dir in &source.runs {
        let path = dir.join("checkpoints").join(format!("{tag}.model"));
        m.input(&path)?;
        let ckpt = read_checkpoint(&path)?;
        fraction = ckpt.fraction;
        if au.is_none() {
            au = ckpt.au;
        }
        if ee.is_none() && ckpt.ee.is_some() {
            ee = ckpt.ee;
            success = ckpt.config.success;
        }
    }
    let runs = source
        .runs
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let au =
        au.with_context(|| format!("no understanding model at checkpoint `{tag}` in {runs}"))?;
    let ee = ee.with_context(|| format!("no execution model at checkpoint `{tag}` in {runs}"))?;
    Ok(LoadedModels {
        au,
        ee,
        fraction,
        success,
    })
}

fn resolve_probe(
    file: &FileConfig,
    overrides: &crate::args::ProbeOverrides,
) -> Result<ProbeConfig> {
    let cfg = apply_probe(file.probe.clone(), overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn cache_representations(
    out: &Path,
    ds: &Dataset,
    reps: &Representations,
    outcomes: &[bool],
    tag: &str,
    m: &mut RunManifest,
) -> Result<()> {
    let (pu, pe) = write_representations(&out.join("reps"), tag, ds, reps, Some(outcomes), tag)?;
    for p in [pu, pe] {
        let checksum = mirror_align::io::file_checksum(&p)?;
        m.output(&p, checksum);
    }
    Ok(())
}

fn probe_cmd(file: &FileConfig, args: ProbeArgs) -> Result<()> {
    let cfg = resolve_probe(file, &args.probe)?;
    let mut manifest = RunManifest::new("probe", Some(cfg.seed), to_value(&cfg)?);
    let ds = load_dataset(&args.source.data, &mut manifest)?;
    let models = load_models(&args.source, &args.checkpoint, &mut manifest)?;
    with_manifest(&args.out, manifest, |m| {
        let reps = Representations::compute(&models.au, &models.ee, &ds, cfg.tap)?;
        let outcomes = ee_outcomes(&models.ee, &ds, &models.success)?;
        cache_representations(&args.out, &ds, &reps, &outcomes, &args.checkpoint, m)?;
        let eval_split = match args.split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
        let report = probe(
            &reps,
            &ds,
            &ds.split_ids(Split::Train),
            &ds.split_ids(eval_split),
            &cfg,
            &args.checkpoint,
        )?;
        let path = args.out.join("probe_report.json");
        m.output(&path, write_json(&path, &report)?);
        println!(
            "checkpoint {}: recall@1 {:.4} (chance {:.4}), MI bound {:.4} nats",
            report.checkpoint, report.recall_at_1, report.chance, report.mi_lower_bound
        );
        Ok(())
    })
}

fn shared_tags(runs: &[PathBuf]) -> Result<Vec<String>> {
    let mut tags: Option<Vec<String>> = None;
    for dir in runs {
        let summary: TrainSummary = read_json(&dir.join(SUMMARY_FILE))?;
        let here: Vec<String> = summary.checkpoints.into_iter().map(|c| c.tag).collect();
        tags = Some(match tags {
            None => here,
            Some(prev) => prev.into_iter().filter(|t| here.contains(t)).collect(),
        });
    }
    Ok(tags.unwrap_or_default())
}

fn curve(file: &FileConfig, args: CurveArgs) -> Result<()> {
    let cfg = resolve_probe(file, &args.probe)?;
    let mut manifest = RunManifest::new("curve", Some(cfg.seed), to_value(&cfg)?);
    let ds = load_dataset(&args.source.data, &mut manifest)?;
    let mut loaded = Vec::new();
    for tag in shared_tags(&args.source.runs)? {
        let models = load_models(&args.source, &tag, &mut manifest)?;
        loaded.push((tag, models));
    }
    loaded.sort_by(|a, b| a.1.fraction.total_cmp(&b.1.fraction));
    with_manifest(&args.out, manifest, |m| {
        for (tag, models) in &loaded {
            let reps = Representations::compute(&models.au, &models.ee, &ds, cfg.tap)?;
            let outcomes = ee_outcomes(&models.ee, &ds, &models.success)?;
            cache_representations(&args.out, &ds, &reps, &outcomes, tag, m)?;
        }
        let inputs: Vec<CurveInput<'_>> = loaded
            .iter()
            .map(|(tag, models)| CurveInput {
                tag,
                fraction: models.fraction,
                au: &models.au,
                ee: &models.ee,
            })
            .collect();
        let points = alignment_curve(&inputs, &ds, &cfg)?;
        let mut csv = String::from("tag,fraction,recall_at_1,mi_lower_bound\n");
        for p in &points {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                p.tag, p.fraction, p.recall_at_1, p.mi_lower_bound
            ));
        }
        let csv_path = args.out.join("curve.csv");
        m.output(&csv_path, write_text(&csv_path, &csv)?);
        let json_path = args.out.join("curve.json");
        m.output(&json_path, write_json(&json_path, &points)?);
        print!("{csv}");
        Ok(())
    })
}

fn subsets(file: &FileConfig, args: SubsetArgs) -> Result<()> {
    let cfg = resolve_probe(file, &args.probe)?;
    let mut manifest = RunManifest::new("subsets", Some(cfg.seed), to_value(&cfg)?);
    let ds = load_dataset(&args.source.data, &mut manifest)?;
    let models = load_models(&args.source, &args.checkpoint, &mut manifest)?;
    with_manifest(&args.out, manifest, |m| {
        let reps = Representations::compute(&models.au, &models.ee, &ds, cfg.tap)?;
        let outcomes = ee_outcomes(&models.ee, &ds, &models.success)?;
        let report = subset_alignment(&ds, &reps, &outcomes, &cfg)?;
        let path = args.out.join("subsets.json");
        m.output(&path, write_json(&path, &report)?);
        let side = |s: &Option<mirror_align::probing::SubsetSide>| {
            s.as_ref()
                .map_or_else(|| "n/a".to_string(), |s| format!("{:.4}", s.recall_at_1))
        };
        println!(
            "{} samples per subset: success recall@1 {}, failure recall@1 {}",
            report.sample_count,
            side(&report.success),
            side(&report.failure)
        );
        Ok(())
    })
}

/// Worker-thread cap from the environment, if set.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be a positive integer, got `{v}`");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Serialize)]
struct AblationConfig<'a> {
    base: &'a TrainConfig,
    strategies: Vec<&'static str>,
    temperatures: &'a [f64],
    seeds: &'a [u64],
    fast: bool,
}

fn ablate(file: &FileConfig, args: AblateArgs) -> Result<()> {
    let mut base = file.train.clone();
    if args.fast && args.epochs.is_none() {
        base.epochs = FAST_EPOCHS;
    }
    let overrides = crate::args::TrainOverrides {
        lambda_ee: args.lambda_ee,
        lambda_align: args.lambda_align,
        dz: args.dz,
        epochs: args.epochs,
        batch: args.batch,
        au_freq: args.au_freq,
        stop_grad_encoders: args.stop_grad_encoders,
        ..Default::default()
    };
    let base = apply_train(base, &overrides);
    base.validate()?;
    let grid = AblationGrid {
        strategies: args.strategies.iter().map(|&s| s.into()).collect(),
        temperatures: args.temps.clone(),
        seeds: args.seeds.clone(),
        threads: thread_cap()?,
    };
    let config = AblationConfig {
        base: &base,
        strategies: grid.strategies.iter().map(|s| s.as_str()).collect(),
        temperatures: &grid.temperatures,
        seeds: &grid.seeds,
        fast: args.fast,
    };
    let mut manifest = RunManifest::new("ablate", grid.seeds.first().copied(), to_value(&config)?);
    let ds = load_dataset(&args.data, &mut manifest)?;
    with_manifest(&args.out, manifest, |m| {
        let table = run_ablation(&ds, &base, &grid)?;
        let csv = table.to_csv();
        let csv_path = args.out.join("ablation.csv");
        m.output(&csv_path, write_text(&csv_path, &csv)?);
        let json_path = args.out.join("ablation.json");
        m.output(&json_path, write_json(&json_path, &table)?);
        for cell in table.cells.iter().flatten().filter(|c| c.failed()) {
            eprintln!(
                "warning: cell {} tau {} failed: {}",
                cell.strategy,
                cell.temperature,
                cell.failures.join("; ")
            );
        }
        print!("{csv}");
        Ok(())
    })
}

fn dump(args: DumpArgs) -> Result<()> {
    let mut manifest = RunManifest::new(
        "dump-embeddings",
        None,
        serde_json::json!({ "checkpoint": args.checkpoint }),
    );
    let ds = load_dataset(&args.source.data, &mut manifest)?;
    let models = load_models(&args.source, &args.checkpoint, &mut manifest)?;
    with_manifest(&args.out, manifest, |m| {
        let reps = Representations::compute(&models.au, &models.ee, &ds, Default::default())?;
        let outcomes = ee_outcomes(&models.ee, &ds, &models.success)?;
        let (pu, pe) = write_representations(
            &args.out,
            "embeddings",
            &ds,
            &reps,
            Some(&outcomes),
            &args.checkpoint,
        )?;
        for p in [pu, pe] {
            let checksum = mirror_align::io::file_checksum(&p)?;
            m.output(&p, checksum);
        }
        Ok(())
    })
}

/// Result files that `report` collects from a command's output directory.
const REPORTABLE: [&str; 5] = [
    SUMMARY_FILE,
    "probe_report.json",
    "subsets.json",
    "curve.json",
    "ablation.json",
];

#[derive(Debug, Serialize)]
struct ReportEntry {
    dir: PathBuf,
    command: String,
    seed: Option<u64>,
    results: serde_json::Map<String, serde_json::Value>,
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report(args: ReportArgs) -> Result<()> {
    let mut manifest = RunManifest::new("report", None, serde_json::json!({ "runs": args.runs }));
    let mut entries = Vec::new();
    for dir in &args.runs {
        let run_manifest_path = dir.join(MANIFEST_FILE);
        manifest.input(&run_manifest_path)?;
        let run: RunManifest = read_json(&run_manifest_path)?;
        let mut results = serde_json::Map::new();
        for name in REPORTABLE {
            let path = dir.join(name);
            if path.exists() {
                manifest.input(&path)?;
                results.insert(name.to_string(), read_json(&path)?);
            }
        }
        entries.push(ReportEntry {
            dir: dir.clone(),
            command: run.command,
            seed: run.seed,
            results,
        });
    }
    with_manifest(&args.out, manifest, |m| {
        let mut csv =
            String::from("run,command,seed,au_accuracy,ee_success,mi_lower_bound,recall_at_1\n");
        for e in &entries {
            let get = |file: &str, pointer: &str| {
                e.results
                    .get(file)
                    .and_then(|v| v.pointer(pointer))
                    .and_then(|v| v.as_f64())
            };
            let mi = get(SUMMARY_FILE, "/last/mi_lower_bound")
                .or_else(|| get("probe_report.json", "/mi_lower_bound"));
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.dir.display(),
                e.command,
                e.seed.map(|s| s.to_string()).unwrap_or_default(),
                csv_field(get(SUMMARY_FILE, "/last/au_accuracy")),
                csv_field(get(SUMMARY_FILE, "/last/ee_success")),
                csv_field(mi),
                csv_field(get("probe_report.json", "/recall_at_1")),
            ));
        }
        let csv_path = args.out.join("report.csv");
        m.output(&csv_path, write_text(&csv_path, &csv)?);
        let json_path = args.out.join("report.json");
        m.output(&json_path, write_json(&json_path, &entries)?);
        print!("{csv}");
        Ok(())
    })
}
