//! Evaluation statistics: threshold-filtered classification metrics,
//! McNemar's test, inter-rater agreement and angular analysis.
//!
//! Statistics that are undefined for the given input (a class never
//! predicted, raters that never disagree, ...) come back as `None` or
//! [`StatsError::Undefined`]; they are never reported as zero.

mod agreement;
mod angular;
mod metrics;

pub use agreement::{fleiss_kappa, specific_agreement, williams_index, AgreementTable, WilliamsIndex};
pub use angular::{
    angular_report, angular_uncertainty, consensus_centre, estimate_centre_angle, AngularEntry, AngularReport,
};
pub use metrics::{
    accuracy_at_threshold, mcnemar, mcnemar_counts, plot_data_csv, precision_recall_f1, ClassMetrics,
    ConfusionMatrix, McNemar, MetricsReport, THRESHOLD_TOLERANCE,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("statistic undefined: {0}")]
    Undefined(&'static str),
    #[error("class id {class} outside 0..{categories}")]
    BadClass { class: usize, categories: usize },
    #[error("no frame predicted Stop; no centre estimate")]
    NoStop,
}
