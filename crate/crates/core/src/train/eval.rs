use serde::{Deserialize, Serialize};

use super::{check_disjoint, PreparedVolume, TrainError};
use crate::dataio::WINDOW;
use crate::labels::{ClassDistribution, ClassSet, DirectionClass, PositionClass};
use crate::models::{Model, Prediction, Topology};
use crate::stats::{
    accuracy_at_threshold, angular_report, consensus_centre, estimate_centre_angle, fleiss_kappa, mcnemar,
    specific_agreement, williams_index, AgreementTable, AngularReport, McNemar, MetricsReport, WilliamsIndex,
    THRESHOLD_TOLERANCE,
};

/// Model outputs for frames `WINDOW−1..n` of one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumePredictions {
    pub name: String,
    pub patient_id: u32,
    /// Index of the first scored frame.
    pub first_frame: usize,
    pub angles: Vec<f64>,
    pub predictions: Vec<Prediction>,
}

pub fn predict_volumes(model: &Model, volumes: &[&PreparedVolume]) -> Result<Vec<VolumePredictions>, TrainError> {
    volumes
        .iter()
        .map(|v| {
            let predictions = model.predict_volume(&v.image_refs(), &v.poses)?;
            Ok(VolumePredictions {
                name: v.name.clone(),
                patient_id: v.patient_id,
                first_frame: WINDOW - 1,
                angles: v.angles[WINDOW - 1..].to_vec(),
                predictions,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSetAgreement {
    /// Among the observers only.
    pub fleiss_observers: Option<f64>,
    /// Observers plus the model as one more rater.
    pub fleiss_with_model: Option<f64>,
    /// Per class, observers plus model; `None` where undefined.
    pub specific_agreement: [Option<f64>; 3],
    pub williams: Option<WilliamsIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub observers: usize,
    pub items: usize,
    pub position: ClassSetAgreement,
    pub direction: ClassSetAgreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub topology: Topology,
    pub threshold: f64,
    pub volumes: usize,
    pub position: MetricsReport,
    pub direction: MetricsReport,
    /// Present when every volume carries at least two observers.
    pub agreement: Option<AgreementReport>,
    pub angular: AngularReport,
}

fn class_set_agreement(model: &[usize], observers: &[Vec<usize>]) -> ClassSetAgreement {
    let obs: Vec<&[usize]> = observers.iter().map(Vec::as_slice).collect();
    let mut with_model = obs.clone();
    with_model.push(model);
    let table = |cols: &[&[usize]]| AgreementTable::from_raters(cols, 3).ok();
    let all = table(&with_model);
    ClassSetAgreement {
        fleiss_observers: table(&obs).and_then(|t| fleiss_kappa(&t).ok()),
        fleiss_with_model: all.as_ref().and_then(|t| fleiss_kappa(t).ok()),
        specific_agreement: std::array::from_fn(|c| all.as_ref().and_then(|t| specific_agreement(t, c).ok())),
        williams: williams_index(model, &obs).ok(),
    }
}

fn agreement(preds: &[VolumePredictions], volumes: &[&PreparedVolume]) -> Option<AgreementReport> {
    let observers = volumes.iter().map(|v| v.observers.len()).min()?;
    if observers < 2 || volumes.iter().any(|v| v.observers.len() != observers) {
        return None;
    }
    let mut model_pos = Vec::new();
    let mut model_dir = Vec::new();
    let mut obs_pos = vec![Vec::new(); observers];
    let mut obs_dir = vec![Vec::new(); observers];
    for (p, v) in preds.iter().zip(volumes) {
        for (k, (pp, pd)) in p.predictions.iter().enumerate() {
            let f = p.first_frame + k;
            model_pos.push(pp.argmax());
            model_dir.push(pd.argmax());
            for (o, votes) in v.observers.iter().enumerate() {
                obs_pos[o].push(votes.position[f].index());
                obs_dir[o].push(votes.direction[f].index());
            }
        }
    }
    Some(AgreementReport {
        observers,
        items: model_pos.len(),
        position: class_set_agreement(&model_pos, &obs_pos),
        direction: class_set_agreement(&model_dir, &obs_dir),
    })
}

/// Scores stored predictions against the volumes' consensus labels.
pub fn evaluate_predictions(
    topology: Topology,
    preds: &[VolumePredictions],
    volumes: &[&PreparedVolume],
    threshold: f64,
) -> Result<EvalReport, TrainError> {
    if preds.len() != volumes.len() {
        return Err(TrainError::Config(format!(
            "{} prediction sets for {} volumes",
            preds.len(),
            volumes.len()
        )));
    }
    let mut pos_pred = Vec::new();
    let mut dir_pred = Vec::new();
    let mut pos_label: Vec<ClassDistribution> = Vec::new();
    let mut dir_label: Vec<ClassDistribution> = Vec::new();
    let mut angular = Vec::new();
    for (p, v) in preds.iter().zip(volumes) {
        let frames = p.first_frame..p.first_frame + p.predictions.len();
        pos_pred.extend(p.predictions.iter().map(|x| x.0.argmax()));
        dir_pred.extend(p.predictions.iter().map(|x| x.1.argmax()));
        pos_label.extend_from_slice(&v.position[frames.clone()]);
        dir_label.extend_from_slice(&v.direction[frames]);
        let dirs: Vec<DirectionClass> = p
            .predictions
            .iter()
            .map(|x| DirectionClass::from_index(x.1.argmax()).expect("argmax < 3"))
            .collect();
        let consensus = if v.observers.is_empty() {
            // without observers the ground-truth band stands in for consensus
            let c: Vec<usize> = (0..v.len())
                .filter(|&i| v.truth_position[i] == PositionClass::Centre)
                .collect();
            c.first().zip(c.last()).map(|(a, b)| (v.angles[*a] + v.angles[*b]) / 2.0)
        } else {
            consensus_centre(&v.observers, &v.angles)
        };
        angular.push((v.name.clone(), estimate_centre_angle(&dirs, &p.angles), consensus));
    }
    Ok(EvalReport {
        topology,
        threshold,
        volumes: volumes.len(),
        position: accuracy_at_threshold(&pos_pred, &pos_label, threshold)?,
        direction: accuracy_at_threshold(&dir_pred, &dir_label, threshold)?,
        agreement: agreement(preds, volumes),
        angular: angular_report(angular),
    })
}

/// Full metrics of `model` on `volumes`, refusing volumes of patients the
/// model was trained on.
pub fn evaluate(
    model: &Model,
    trained_on: &[u32],
    volumes: &[&PreparedVolume],
    threshold: f64,
) -> Result<EvalReport, TrainError> {
    let mut test: Vec<u32> = volumes.iter().map(|v| v.patient_id).collect();
    test.dedup();
    check_disjoint(trained_on, &test)?;
    let preds = predict_volumes(model, volumes)?;
    evaluate_predictions(model.topology(), &preds, volumes, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub threshold: f64,
    /// A = first model, B = second model.
    pub position: McNemar,
    pub direction: McNemar,
    pub position_accuracy: (Option<f64>, Option<f64>),
    pub direction_accuracy: (Option<f64>, Option<f64>),
}

/// Paired McNemar tests on the frames retained at `threshold`.
pub fn compare_models(
    a: &[VolumePredictions],
    b: &[VolumePredictions],
    volumes: &[&PreparedVolume],
    threshold: f64,
) -> Result<ModelComparison, TrainError> {
    let mut pos = (Vec::new(), Vec::new());
    let mut dir = (Vec::new(), Vec::new());
    for ((pa, pb), v) in a.iter().zip(b).zip(volumes) {
        if pa.first_frame != pb.first_frame || pa.predictions.len() != pb.predictions.len() {
            return Err(TrainError::Config(format!("{}: predictions cover different frames", v.name)));
        }
        for (k, (xa, xb)) in pa.predictions.iter().zip(&pb.predictions).enumerate() {
            let f = pa.first_frame + k;
            let keep = |l: &ClassDistribution| l.max() >= threshold - THRESHOLD_TOLERANCE;
            if keep(&v.position[f]) {
                let t = v.position[f].argmax();
                pos.0.push(xa.0.argmax() == t);
                pos.1.push(xb.0.argmax() == t);
            }
            if keep(&v.direction[f]) {
                let t = v.direction[f].argmax();
                dir.0.push(xa.1.argmax() == t);
                dir.1.push(xb.1.argmax() == t);
            }
        }
    }
    let acc = |v: &[bool]| (!v.is_empty()).then(|| v.iter().filter(|&&c| c).count() as f64 / v.len() as f64);
    Ok(ModelComparison {
        threshold,
        position: mcnemar(&pos.0, &pos.1)?,
        direction: mcnemar(&dir.0, &dir.1)?,
        position_accuracy: (acc(&pos.0), acc(&pos.1)),
        direction_accuracy: (acc(&dir.0), acc(&dir.1)),
    })
}
