use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::labels::{DirectionClass, PositionClass};
use crate::phantom::ObserverVotes;

/// Midpoint angle of the longest run of consecutive Stop predictions; of
/// equally long runs the earliest wins.
pub fn estimate_centre_angle(directions: &[DirectionClass], angles: &[f64]) -> Result<f64, StatsError> {
    if directions.len() != angles.len() {
        return Err(StatsError::Length(format!(
            "{} predictions for {} angles",
            directions.len(),
            angles.len()
        )));
    }
    if directions.is_empty() {
        return Err(StatsError::Empty("sweep"));
    }
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < directions.len() {
        if directions[i] != DirectionClass::Stop {
            i += 1;
            continue;
        }
        let start = i;
        while i < directions.len() && directions[i] == DirectionClass::Stop {
            i += 1;
        }
        if best.is_none_or(|(s, e)| i - start > e - s) {
            best = Some((start, i));
        }
    }
    let (s, e) = best.ok_or(StatsError::NoStop)?;
    Ok((angles[s] + angles[e - 1]) / 2.0)
}

/// Midpoint angle of the frames every observer labelled Centre; `None` when
/// there is no such frame.
pub fn consensus_centre(observers: &[ObserverVotes], angles: &[f64]) -> Option<f64> {
    if observers.is_empty() {
        return None;
    }
    let unanimous: Vec<usize> = (0..angles.len())
        .filter(|&i| observers.iter().all(|o| o.position.get(i) == Some(&PositionClass::Centre)))
        .collect();
    Some((angles[*unanimous.first()?] + angles[*unanimous.last()?]) / 2.0)
}

/// Mean and sample standard deviation of `|estimate − consensus|`. The
/// deviation is `None` for a single pair.
pub fn angular_uncertainty(estimates: &[f64], consensus: &[f64]) -> Result<(f64, Option<f64>), StatsError> {
    if estimates.len() != consensus.len() {
        return Err(StatsError::Length(format!("{} estimates for {} centres", estimates.len(), consensus.len())));
    }
    if estimates.is_empty() {
        return Err(StatsError::Empty("no volumes"));
    }
    let d: Vec<f64> = estimates.iter().zip(consensus).map(|(a, b)| (a - b).abs()).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.len() > 1).then(|| (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok((mean, std))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularEntry {
    pub volume: String,
    pub estimate_deg: f64,
    pub consensus_deg: f64,
    pub abs_diff_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularReport {
    pub entries: Vec<AngularEntry>,
    pub mean_abs_diff_deg: Option<f64>,
    pub std_abs_diff_deg: Option<f64>,
    /// Volumes where the model never predicted Stop.
    pub excluded_no_estimate: Vec<String>,
    /// Volumes without a unanimous Centre frame.
    pub excluded_no_consensus: Vec<String>,
}

/// Collects per-volume `(name, estimate, consensus)` triples into a report,
/// excluding and listing volumes where either side is missing.
pub fn angular_report(volumes: Vec<(String, Result<f64, StatsError>, Option<f64>)>) -> AngularReport {
    let mut report = AngularReport {
        entries: Vec::new(),
        mean_abs_diff_deg: None,
        std_abs_diff_deg: None,
        excluded_no_estimate: Vec::new(),
        excluded_no_consensus: Vec::new(),
    };
    for (volume, estimate, consensus) in volumes {
        match (estimate, consensus) {
            (_, None) => report.excluded_no_consensus.push(volume),
            (Err(_), Some(_)) => report.excluded_no_estimate.push(volume),
            (Ok(e), Some(c)) => report.entries.push(AngularEntry {
                volume,
                estimate_deg: e,
                consensus_deg: c,
                abs_diff_deg: (e - c).abs(),
            }),
        }
    }
    let est: Vec<f64> = report.entries.iter().map(|e| e.estimate_deg).collect();
    let con: Vec<f64> = report.entries.iter().map(|e| e.consensus_deg).collect();
    if let Ok((m, s)) = angular_uncertainty(&est, &con) {
        report.mean_abs_diff_deg = Some(m);
        report.std_abs_diff_deg = s;
    }
    report
}
