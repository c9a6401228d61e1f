//! `sweepguide`: generate phantom cohorts, plan folds, train, evaluate,
//! benchmark and serve the guidance models.

mod config;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{merge, need, QualityMix};
use sweepguide_core::dataio::{
    list_volumes, load_fold_plan, save_fold_plan, save_sweep, split_folds, split_with_holdout,
    PatientMeta, PreprocessConfig, SweepManifest,
};
use sweepguide_core::guidance::{self, GuidanceEngine, ReplayConfig, ServeMode, ServerConfig};
use sweepguide_core::labels::{ClassSet, DirectionClass, PositionClass};
use sweepguide_core::models::{Model, Topology};
use sweepguide_core::phantom::{generate_cohort, generate_phantom, generate_sweep, CohortConfig, PhantomConfig};
use sweepguide_core::stats::plot_data_csv;
use sweepguide_core::train::{cross_validate, evaluate, predict_volumes, Dataset, TrainConfig};

#[derive(Parser)]
#[command(name = "sweepguide", version, about = "Assisted probe positioning for prostate ultrasound sweeps")]
struct Cli {
    /// JSON file supplying any flag; flags given on the command line win.
    /// Keys may sit at the top level or under a section named after the
    /// subcommand ("phantom-gen", "dataset-folds", "train", ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom data.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Dataset bookkeeping.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Cross-validated training.
    Train(TrainArgs),
    /// Metrics of one checkpoint on held-out volumes.
    Eval(EvalArgs),
    /// Streams frames to connected clients with live guidance.
    Serve(ServeArgs),
    /// Replays one stored sweep through the guidance engine.
    Replay(ReplayArgs),
    /// Per-frame latency distribution of the guidance engine.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Generates a cohort of swept, observer-labelled volumes.
    Gen(GenArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Writes a patient-level fold plan.
    Folds(FoldsArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
struct GenArgs {
    #[arg(long)]
    n_patients: Option<u32>,
    #[arg(long)]
    volumes_per_patient: Option<u32>,
    /// Shares of quality grades 0..3, e.g. 0.1,0.2,0.3,0.4
    #[arg(long)]
    quality_mix: Option<QualityMix>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    observers: Option<usize>,
    /// Observer noise in degrees.
    #[arg(long)]
    sigma_obs: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct FoldsArgs {
    /// Sweep store produced by `phantom gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hold out one of this many stratified parts as a test set; 0 keeps
    /// every patient in the folds.
    #[arg(long)]
    holdout: Option<usize>,
    /// Defaults to DATA/folds.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct TrainArgs {
    /// single | sequence
    #[arg(long)]
    model: Option<Topology>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to DATA/folds.json.
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disables training-time augmentation.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_augment: Option<bool>,
    /// Full training configuration; config file only.
    #[arg(skip)]
    training: Option<TrainConfig>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct EvalArgs {
    /// A checkpoint directory, e.g. OUT/fold0.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Minimum consensus for a frame to count: 0.667 or 1.0.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evaluate the held-out patients of this fold plan. Without it, every
    /// patient the checkpoint never saw is used.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Writes per-volume probability-versus-angle CSVs here.
    #[arg(long)]
    plots: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct ServeArgs {
    /// live-sim | replay
    #[arg(long)]
    mode: Option<ServeMode>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    host: Option<String>,
    /// Stored sweep for replay mode; a fresh phantom sweep otherwise.
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long)]
    fps: Option<f64>,
    /// Starting probe angle in live-sim mode.
    #[arg(long)]
    theta0: Option<f64>,
    #[arg(long)]
    phantom_seed: Option<u64>,
    #[arg(long)]
    quality: Option<u8>,
    /// Consecutive Stop predictions needed for "aligned".
    #[arg(long)]
    hysteresis: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct ReplayArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Session log, one JSON record per line.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    hysteresis: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes the JSON report here as well as to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => Some(config::load(path)?),
        None => None,
    };
    let file = file.as_ref();
    match cli.command {
        Command::Phantom {
            command: PhantomCommand::Gen(a),
        } => phantom_gen(merge(a, file, "phantom-gen")?),
        Command::Dataset {
            command: DatasetCommand::Folds(a),
        } => dataset_folds(merge(a, file, "dataset-folds")?),
        Command::Train(a) => train(merge(a, file, "train")?),
        Command::Eval(a) => eval(merge(a, file, "eval")?),
        Command::Serve(a) => serve(merge(a, file, "serve")?),
        Command::Replay(a) => replay(merge(a, file, "replay")?),
        Command::Bench(a) => bench(merge(a, file, "bench")?),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn phantom_gen(a: GenArgs) -> Result<()> {
    let out = need(a.out, "--out")?;
    let defaults = CohortConfig::default();
    let cohort = CohortConfig {
        n_patients: a.n_patients.unwrap_or(defaults.n_patients),
        volumes_per_patient: a.volumes_per_patient.unwrap_or(defaults.volumes_per_patient),
        quality_mix: match a.quality_mix {
            Some(m) => m.shares()?,
            None => defaults.quality_mix,
        },
        observers: a.observers.unwrap_or(defaults.observers),
        sigma_obs_deg: a.sigma_obs.unwrap_or(defaults.sigma_obs_deg),
        seed: a.seed.unwrap_or(defaults.seed),
        base: PhantomConfig {
            frames_per_sweep: a.frames.unwrap_or(defaults.base.frames_per_sweep),
            ..defaults.base.clone()
        },
        ..defaults
    };
    let sweeps = generate_cohort(&cohort)?;
    for s in &sweeps {
        save_sweep(&out.join(format!("p{:03}_v{:02}", s.patient_id, s.volume_id)), s)?;
    }
    write(&out.join("cohort.json"), &serde_json::to_string_pretty(&cohort)?)?;
    println!("wrote {} volumes of {} patients to {}", sweeps.len(), cohort.n_patients, out.display());
    Ok(())
}

/// Patients of a sweep store, from the manifests alone.
fn store_patients(data: &Path) -> Result<Vec<PatientMeta>> {
    let mut out: Vec<PatientMeta> = Vec::new();
    for dir in list_volumes(data)? {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: SweepManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match out.iter_mut().find(|p| p.patient_id == m.patient_id) {
            Some(p) => p.volumes.push(name),
            None => out.push(PatientMeta {
                patient_id: m.patient_id,
                quality: m.quality,
                volumes: vec![name],
            }),
        }
    }
    if out.is_empty() {
        bail!("no volumes under {}", data.display());
    }
    out.sort_by_key(|p| p.patient_id);
    Ok(out)
}

fn dataset_folds(a: FoldsArgs) -> Result<()> {
    let data = need(a.data, "--data")?;
    let patients = store_patients(&data)?;
    let (k, seed) = (a.k.unwrap_or(4), a.seed.unwrap_or(0));
    let plan = match a.holdout.unwrap_or(5) {
        0 => split_folds(&patients, k, seed)?,
        parts => split_with_holdout(&patients, parts, k, seed)?,
    };
    let out = a.out.unwrap_or_else(|| data.join("folds.json"));
    save_fold_plan(&out, &plan)?;
    for f in &plan.folds {
        println!("fold {}: patients {:?}", f.index, f.patient_ids());
    }
    println!("test: patients {:?}", plan.test_patients);
    println!("wrote {}", out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let topology = need(a.model, "--model")?;
    let data = need(a.data, "--data")?;
    let out = need(a.out, "--out")?;
    let plan = load_fold_plan(&a.folds.unwrap_or_else(|| data.join("folds.json")))?;
    let mut cfg = a.training.unwrap_or_else(|| TrainConfig {
        optimizer: sweepguide_core::tensor::AdamConfig {
            learning_rate: 1e-3,
            ..Default::default()
        },
        ..TrainConfig::default()
    });
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_augment == Some(true) {
        cfg.augmentation = sweepguide_core::dataio::AugmentConfig::none();
    }
    let dataset = Dataset::load(&data, &cfg.preprocess)?;
    let known: Vec<u32> = dataset.volumes.iter().map(|v| v.patient_id).collect();
    if let Some(missing) = plan.folds.iter().flat_map(|f| f.patient_ids()).find(|p| !known.contains(p)) {
        bail!("fold plan names patient {missing}, which is not in {}", data.display());
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (_, report) = cross_validate(topology, &dataset, &plan, &cfg, Some(&out))?;
    for f in &report.folds {
        println!(
            "fold {}: position {} direction {} ({:.0}s)",
            f.fold,
            pct(f.position.accuracy),
            pct(f.direction.accuracy),
            f.seconds
        );
    }
    println!(
        "pooled validation: position {} direction {}; checkpoints in {}",
        pct(report.pooled_position_accuracy),
        pct(report.pooled_direction_accuracy),
        out.display()
    );
    Ok(())
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{:.1}%", 100.0 * v))
}

fn ids_from(training: &serde_json::Value, key: &str) -> Vec<u32> {
    training
        .get(key)
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

fn eval(a: EvalArgs) -> Result<()> {
    let checkpoint = need(a.checkpoint, "--checkpoint")?;
    let data = need(a.data, "--data")?;
    let report_path = need(a.report, "--report")?;
    let threshold = a.threshold.unwrap_or(1.0);
    if !(threshold > 0.0 && threshold <= 1.0) {
        bail!("threshold {threshold} must lie in (0, 1]");
    }
    let (model, manifest) = Model::load(&checkpoint)?;
    let preprocess: PreprocessConfig = manifest
        .training
        .get("preprocess")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let mut seen = ids_from(&manifest.training, "train_patients");
    seen.extend(ids_from(&manifest.training, "val_patients"));
    let dataset = Dataset::load(&data, &preprocess)?;
    let test: Vec<u32> = match a.folds {
        Some(path) => load_fold_plan(&path)?.test_patients,
        None => {
            let mut ids: Vec<u32> = dataset.patients().iter().map(|p| p.patient_id).filter(|p| !seen.contains(p)).collect();
            ids.dedup();
            ids
        }
    };
    let volumes = dataset.subset(&test);
    if volumes.is_empty() {
        bail!("no held-out volumes to evaluate");
    }
    let report = evaluate(&model, &seen, &volumes, threshold)?;
    write(&report_path, &serde_json::to_string_pretty(&report)?)?;
    if let Some(dir) = a.plots {
        for p in predict_volumes(&model, &volumes)? {
            let pos: Vec<_> = p.predictions.iter().map(|x| x.0).collect();
            let dir_p: Vec<_> = p.predictions.iter().map(|x| x.1).collect();
            write(
                &dir.join(format!("{}_position.csv", p.name)),
                &plot_data_csv(&p.angles, &pos, PositionClass::SYMBOLS),
            )?;
            write(
                &dir.join(format!("{}_direction.csv", p.name)),
                &plot_data_csv(&p.angles, &dir_p, DirectionClass::SYMBOLS),
            )?;
        }
    }
    println!(
        "{} volumes, threshold {threshold}: position {} ({} frames), direction {} ({} frames), angular mean |Δ| {}°",
        report.volumes,
        pct(report.position.accuracy),
        report.position.retained,
        pct(report.direction.accuracy),
        report.direction.retained,
        report
            .angular
            .mean_abs_diff_deg
            .map_or_else(|| "n/a".into(), |d| format!("{d:.2}"))
    );
    println!("wrote {}", report_path.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let host = a.host.unwrap_or_else(|| "127.0.0.1".into());
    let port = a.port.unwrap_or(8765);
    let bind: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
    let defaults = ServerConfig::default();
    let cfg = ServerConfig {
        mode: a.mode.unwrap_or(ServeMode::LiveSim),
        checkpoint: need(a.checkpoint, "--checkpoint")?,
        bind,
        hysteresis_k: a.hysteresis.unwrap_or(defaults.hysteresis_k),
        phantom: PhantomConfig {
            seed: a.phantom_seed.unwrap_or(0),
            quality: a.quality.unwrap_or(3),
            ..PhantomConfig::default()
        },
        initial_theta_deg: a.theta0.unwrap_or(defaults.initial_theta_deg),
        sweep: a.sweep,
        replay_fps: a.fps.unwrap_or(defaults.replay_fps),
        ..defaults
    };
    let handle = guidance::serve(&cfg).context("refusing to start")?;
    println!("serving on {} (tcp ndjson and websocket)", handle.local_addr());
    handle.wait();
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let checkpoint = need(a.checkpoint, "--checkpoint")?;
    let sweep = need(a.sweep, "--sweep")?;
    let cfg = ReplayConfig {
        hysteresis_k: a.hysteresis.unwrap_or(3),
        fps: a.fps,
    };
    let log = guidance::run_replay(&sweep, &checkpoint, &cfg)?;
    if let Some(path) = a.log {
        log.save(&path)?;
        println!("wrote {}", path.display());
    }
    let aligned = log
        .records
        .iter()
        .find(|r| r.recommendation == guidance::Recommendation::Aligned);
    println!(
        "{} frames, {} predictions, first aligned at {}",
        log.records.len(),
        log.predictions(),
        aligned.map_or_else(|| "never".into(), |r| format!("{:.2}°", r.sweep_angle_deg))
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let checkpoint = need(a.checkpoint, "--checkpoint")?;
    let mut engine = GuidanceEngine::from_checkpoint(&checkpoint, 3)?;
    let phantom = generate_phantom(PhantomConfig {
        seed: a.seed.unwrap_or(0),
        ..PhantomConfig::default()
    })?;
    let sweep = generate_sweep(&phantom, phantom.config().frames_per_sweep)?;
    let report = guidance::bench(&mut engine, &sweep, a.n.unwrap_or(1000))?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = a.report {
        write(&path, &text)?;
    }
    println!("{text}");
    Ok(())
}
