use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, DataError};

/// What the fold planner needs to know about one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    pub patient_id: u32,
    /// Quality stratum, usually the grade of the patient's first volume.
    pub quality: u8,
    pub volumes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPatient {
    pub patient_id: u32,
    pub volumes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub patients: Vec<FoldPatient>,
}

impl Fold {
    pub fn patient_ids(&self) -> Vec<u32> {
        self.patients.iter().map(|p| p.patient_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
    /// Patients held out of every fold for final testing.
    #[serde(default)]
    pub test_patients: Vec<u32>,
}

impl FoldPlan {
    /// Patient ids outside fold `i`.
    pub fn training_patients(&self, i: usize) -> Vec<u32> {
        self.folds
            .iter()
            .filter(|f| f.index != i)
            .flat_map(|f| f.patient_ids())
            .collect()
    }
}

/// Patient-level folds, size-balanced and stratified by quality.
///
/// Patients are shuffled within each quality stratum, the strata are laid end
/// to end, and the resulting list is dealt round-robin. Fold sizes then differ
/// by at most one, and so do the per-fold counts of every stratum.
pub fn split_folds(patients: &[PatientMeta], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k == 0 || patients.len() < k {
        return Err(DataError::TooFewPatients {
            patients: patients.len(),
            folds: k,
        });
    }
    let mut strata: BTreeMap<u8, Vec<&PatientMeta>> = BTreeMap::new();
    for p in patients {
        strata.entry(p.quality).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(patients.len());
    for group in strata.values_mut() {
        group.sort_by_key(|p| p.patient_id);
        group.shuffle(&mut rng);
        order.extend(group.iter().copied());
    }
    let mut folds: Vec<Fold> = (0..k).map(|index| Fold { index, patients: Vec::new() }).collect();
    for (i, p) in order.into_iter().enumerate() {
        folds[i % k].patients.push(FoldPatient {
            patient_id: p.patient_id,
            volumes: p.volumes.clone(),
        });
    }
    Ok(FoldPlan {
        k,
        seed,
        folds,
        test_patients: Vec::new(),
    })
}

/// Holds out one of `holdout_parts` stratified parts as a test set, then
/// splits the remaining patients into `k` folds.
pub fn split_with_holdout(patients: &[PatientMeta], holdout_parts: usize, k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    let outer = split_folds(patients, holdout_parts, seed)?;
    let test = outer.folds[0].patient_ids();
    let rest: Vec<PatientMeta> = patients
        .iter()
        .filter(|p| !test.contains(&p.patient_id))
        .cloned()
        .collect();
    let mut plan = split_folds(&rest, k, seed)?;
    plan.test_patients = test;
    plan.test_patients.sort_unstable();
    Ok(plan)
}

pub fn save_fold_plan(path: &Path, plan: &FoldPlan) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(plan).expect("fold plan serialises");
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_fold_plan(path: &Path) -> Result<FoldPlan, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
