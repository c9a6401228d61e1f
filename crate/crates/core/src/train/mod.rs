//! Cross-validated training of both topologies, evaluation and reports.

mod dataset;
mod eval;

pub use dataset::{prepare_volume, Dataset, PreparedVolume};
pub use eval::{
    compare_models, evaluate, evaluate_predictions, predict_volumes, AgreementReport, ClassSetAgreement, EvalReport,
    ModelComparison, VolumePredictions,
};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{class_weights, AugmentConfig, AugmentParams, DataError, FoldPlan, PreprocessConfig, WINDOW};
use crate::models::{BackboneConfig, Logits, Model, ModelError, Topology};
use crate::stats::{accuracy_at_threshold, MetricsReport, StatsError};
use crate::tensor::{adam_step, AdamConfig, Graph, NodeId, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch}: {source}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        #[source]
        source: TensorError,
    },
    #[error("patients {0:?} appear in both the training and the evaluation set")]
    Overlap(Vec<u32>),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub folds: usize,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneConfig,
    /// Consensus threshold for the per-epoch validation accuracies.
    pub validation_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let preprocess = PreprocessConfig::default();
        Self {
            epochs: 100,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            folds: 4,
            seed: 0,
            augmentation: AugmentConfig::scaled_to(preprocess.crop_size),
            preprocess,
            backbone: BackboneConfig::default(),
            validation_threshold: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.backbone.input_side != self.preprocess.crop_size {
            return Err(TrainError::Config(format!(
                "backbone expects {} px inputs but preprocessing crops to {}",
                self.backbone.input_side, self.preprocess.crop_size
            )));
        }
        self.optimizer
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub position_accuracy: Option<f64>,
    pub direction_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_patients: Vec<u32>,
    pub val_patients: Vec<u32>,
    pub position_weights: [f64; 3],
    pub direction_weights: [f64; 3],
    pub epochs: Vec<EpochRecord>,
    /// Validation metrics of the final-epoch model.
    pub position: MetricsReport,
    pub direction: MetricsReport,
    /// Epoch with the best mean validation accuracy (1-based).
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Final-epoch and best-validation models of one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub model: Model,
    pub best: Model,
    pub report: FoldReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub topology: Topology,
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    /// Σ correct / Σ retained over all validation folds.
    pub pooled_position_accuracy: Option<f64>,
    pub pooled_direction_accuracy: Option<f64>,
    pub seconds: f64,
}

impl CvReport {
    /// `epoch,fold,loss,pos_acc,dir_acc` rows.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,fold,loss,pos_acc,dir_acc\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for f in &self.folds {
            for e in &f.epochs {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    e.epoch,
                    f.fold,
                    e.loss,
                    opt(e.position_accuracy),
                    opt(e.direction_accuracy)
                );
            }
        }
        s
    }
}

/// Samples one step of training sees: single-frame models take independent
/// frames, sequence models a run of consecutive windows of one volume.
enum Batch {
    Frames(Vec<(usize, usize)>),
    Windows { volume: usize, first_end: usize, count: usize },
}

fn sample_frames(topology: Topology, v: &PreparedVolume) -> std::ops::Range<usize> {
    match topology {
        Topology::Single => 0..v.len(),
        Topology::Sequence => WINDOW - 1..v.len(),
    }
}

fn plan_batches(topology: Topology, volumes: &[&PreparedVolume], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    match topology {
        Topology::Single => {
            let mut all: Vec<(usize, usize)> = volumes
                .iter()
                .enumerate()
                .flat_map(|(i, v)| (0..v.len()).map(move |f| (i, f)))
                .collect();
            all.shuffle(rng);
            all.chunks(batch).map(|c| Batch::Frames(c.to_vec())).collect()
        }
        Topology::Sequence => {
            let mut out = Vec::new();
            for (i, v) in volumes.iter().enumerate() {
                let ends = sample_frames(topology, v);
                let mut first = ends.start;
                while first < ends.end {
                    let count = batch.min(ends.end - first);
                    out.push(Batch::Windows {
                        volume: i,
                        first_end: first,
                        count,
                    });
                    first += count;
                }
            }
            out.shuffle(rng);
            out
        }
    }
}

fn label_weights(topology: Topology, volumes: &[&PreparedVolume]) -> Result<([f64; 3], [f64; 3]), TrainError> {
    let mut pos = [0usize; 3];
    let mut dir = [0usize; 3];
    for v in volumes {
        for i in sample_frames(topology, v) {
            pos[v.position[i].argmax()] += 1;
            dir[v.direction[i].argmax()] += 1;
        }
    }
    let prop = |c: [usize; 3]| {
        let n: usize = c.iter().sum();
        c.map(|k| k as f64 / n.max(1) as f64)
    };
    Ok((class_weights(prop(pos))?, class_weights(prop(dir))?))
}

/// Records the weighted two-branch loss of one batch; returns the loss node.
fn batch_loss(
    model: &Model,
    g: &mut Graph,
    volumes: &[&PreparedVolume],
    batch: &Batch,
    weights: &([f64; 3], [f64; 3]),
    augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
) -> Result<NodeId, ModelError> {
    let mut targets: Vec<(usize, usize)> = Vec::new();
    let logits: Logits = match (model, batch) {
        (Model::Single(m), Batch::Frames(frames)) => {
            let mut aug = augment;
            let images: Vec<Vec<f64>> = frames
                .iter()
                .map(|&(v, f)| {
                    let vol = volumes[v];
                    match aug.as_mut() {
                        Some((cfg, rng)) => AugmentParams::sample(*rng, cfg).apply(&vol.images[f], vol.side, vol.side),
                        None => vol.images[f].clone(),
                    }
                })
                .collect();
            let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
            let poses: Vec<[f64; 6]> = frames.iter().map(|&(v, f)| volumes[v].poses[f]).collect();
            targets.extend(frames.iter().copied());
            m.logits(g, &refs, &poses)?
        }
        (
            Model::Sequence(m),
            &Batch::Windows {
                volume,
                first_end,
                count,
            },
        ) => {
            let vol = volumes[volume];
            let lo = first_end + 1 - WINDOW;
            let hi = first_end + count;
            // one draw per batch: every frame of a window moves together
            let params = augment.map(|(cfg, rng)| AugmentParams::sample(rng, cfg));
            let images: Vec<Vec<f64>> = (lo..hi)
                .map(|f| match &params {
                    Some(p) => p.apply(&vol.images[f], vol.side, vol.side),
                    None => vol.images[f].clone(),
                })
                .collect();
            let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
            let x = m.step_inputs(g, &refs, &vol.poses[lo..hi])?;
            let windows: Vec<Vec<usize>> = (first_end..hi)
                .map(|end| (end + 1 - WINDOW - lo..=end - lo).collect())
                .collect();
            targets.extend((first_end..hi).map(|e| (volume, e)));
            m.head(g, x, &windows)?
        }
        _ => return Err(ModelError::Config("batch kind does not match the topology".into())),
    };
    let scale = 1.0 / targets.len() as f64;
    let branch = |g: &mut Graph, logits: NodeId, pick: &dyn Fn(&PreparedVolume, usize) -> [f64; 3], w: &[f64; 3]| {
        let mut t = Vec::with_capacity(targets.len() * 3);
        let mut rw = Vec::with_capacity(targets.len());
        for &(v, f) in &targets {
            let p = pick(volumes[v], f);
            let cls = crate::labels::ClassDistribution::new(p).map(|d| d.argmax()).unwrap_or(0);
            t.extend(p);
            rw.push(w[cls] * scale);
        }
        g.softmax_cross_entropy(logits, &t, &rw)
    };
    let lp = branch(g, logits.position, &|v, f| v.position[f].probs(), &weights.0)?;
    let ld = branch(g, logits.direction, &|v, f| v.direction[f].probs(), &weights.1)?;
    Ok(g.add(lp, ld)?)
}

fn validation_metrics(
    model: &Model,
    volumes: &[&PreparedVolume],
    threshold: f64,
) -> Result<(MetricsReport, MetricsReport), TrainError> {
    let preds = predict_volumes(model, volumes)?;
    let report = evaluate_predictions(model.topology(), &preds, volumes, threshold)?;
    Ok((report.position, report.direction))
}

fn patient_ids(volumes: &[&PreparedVolume]) -> Vec<u32> {
    let mut ids: Vec<u32> = volumes.iter().map(|v| v.patient_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

pub(crate) fn check_disjoint(a: &[u32], b: &[u32]) -> Result<(), TrainError> {
    let shared: Vec<u32> = a.iter().copied().filter(|p| b.contains(p)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Overlap(shared))
    }
}

/// Trains `model` on `train` for `config.epochs` epochs, validating on `val`
/// after every epoch.
pub fn train_fold(
    mut model: Model,
    train: &[&PreparedVolume],
    val: &[&PreparedVolume],
    config: &TrainConfig,
    fold: usize,
) -> Result<FoldOutcome, TrainError> {
    config.validate()?;
    let topology = model.topology();
    let train_patients = patient_ids(train);
    let val_patients = patient_ids(val);
    check_disjoint(&train_patients, &val_patients)?;
    if train.is_empty() {
        return Err(TrainError::Config("no training volumes".into()));
    }
    let weights = label_weights(topology, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let started = Instant::now();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best = (f64::NEG_INFINITY, 0, model.clone());
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let batches = plan_batches(topology, train, config.batch_size, &mut rng);
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let nonfinite = |source| TrainError::NonFinite { epoch, batch: bi, source };
            let mut g = Graph::new();
            let loss = match batch_loss(&model, &mut g, train, batch, &weights, Some((&config.augmentation, &mut rng))) {
                Err(ModelError::Tensor(e @ TensorError::NonFinite { .. })) => return Err(nonfinite(e)),
                other => other?,
            };
            total += g.value(loss).item();
            g.backward(loss, model.store_mut()).map_err(|e| match e {
                TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. } => nonfinite(e),
                other => TrainError::Model(other.into()),
            })?;
            adam_step(model.store_mut(), &config.optimizer).map_err(nonfinite)?;
        }
        let (pos, dir) = if val.is_empty() {
            (None, None)
        } else {
            let (p, d) = validation_metrics(&model, val, config.validation_threshold)?;
            (p.accuracy, d.accuracy)
        };
        let record = EpochRecord {
            epoch,
            loss: total / batches.len() as f64,
            position_accuracy: pos,
            direction_accuracy: dir,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "fold {fold} epoch {epoch}: loss {:.4} pos {:?} dir {:?} ({:.1}s)",
            record.loss,
            pos,
            dir,
            record.seconds
        );
        let score = pos.unwrap_or(0.0) + dir.unwrap_or(0.0);
        if score > best.0 {
            best = (score, epoch, model.clone());
        }
        epochs.push(record);
    }
    let (position, direction) = if val.is_empty() {
        let empty = accuracy_at_threshold(&[], &[], config.validation_threshold)?;
        (empty.clone(), empty)
    } else {
        validation_metrics(&model, val, config.validation_threshold)?
    };
    Ok(FoldOutcome {
        model,
        best: best.2,
        report: FoldReport {
            fold,
            train_patients,
            val_patients,
            position_weights: weights.0,
            direction_weights: weights.1,
            epochs,
            position,
            direction,
            best_epoch: best.1,
            seconds: started.elapsed().as_secs_f64(),
        },
    })
}

fn pooled(reports: &[&MetricsReport]) -> Option<f64> {
    let retained: u64 = reports.iter().map(|r| r.confusion.n()).sum();
    let correct: u64 = reports.iter().map(|r| r.confusion.trace()).sum();
    (retained > 0).then(|| correct as f64 / retained as f64)
}

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    std::fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains one model per fold of `plan`. With `out`, writes
/// `fold{i}/` (final checkpoint), `fold{i}/best/`, `report.json` and
/// `curves.csv` there.
pub fn cross_validate(
    topology: Topology,
    dataset: &Dataset,
    plan: &FoldPlan,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<(Vec<FoldOutcome>, CvReport), TrainError> {
    config.validate()?;
    let started = Instant::now();
    let mut outcomes = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        let val_ids = fold.patient_ids();
        let train_ids = plan.training_patients(fold.index);
        let model = Model::new(topology, config.backbone.clone(), config.seed.wrapping_add(fold.index as u64))?;
        let mut outcome = train_fold(
            model,
            &dataset.subset(&train_ids),
            &dataset.subset(&val_ids),
            config,
            fold.index,
        )?;
        if let Some(dir) = out {
            let training = serde_json::json!({
                "fold": fold.index,
                "epochs": config.epochs,
                "seed": config.seed,
                "train_patients": outcome.report.train_patients,
                "val_patients": outcome.report.val_patients,
                "preprocess": config.preprocess,
            });
            let fold_dir = dir.join(format!("fold{}", fold.index));
            outcome.model.save(&fold_dir, training.clone())?;
            let mut best_training = training;
            best_training["best_epoch"] = outcome.report.best_epoch.into();
            outcome.best.save(&fold_dir.join("best"), best_training)?;
        }
        outcomes.push(outcome);
    }
    let pos: Vec<&MetricsReport> = outcomes.iter().map(|o| &o.report.position).collect();
    let dir: Vec<&MetricsReport> = outcomes.iter().map(|o| &o.report.direction).collect();
    let report = CvReport {
        topology,
        config: config.clone(),
        folds: outcomes.iter().map(|o| o.report.clone()).collect(),
        pooled_position_accuracy: pooled(&pos),
        pooled_direction_accuracy: pooled(&dir),
        seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        write_file(
            &dir.join("report.json"),
            &serde_json::to_string_pretty(&report).expect("report serialises"),
        )?;
        write_file(&dir.join("curves.csv"), &report.curves_csv())?;
    }
    Ok((outcomes, report))
}
