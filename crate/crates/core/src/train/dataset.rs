use std::path::Path;

use crate::dataio::{list_volumes, load_sweep, preprocess, DataError, PatientMeta, PreprocessConfig};
use crate::labels::{encode_consensus, ClassDistribution, ClassSet, DirectionClass, PositionClass};
use crate::phantom::{ObserverVotes, SweepVolume};

/// A sweep after preprocessing, with its consensus targets.
#[derive(Debug, Clone)]
pub struct PreparedVolume {
    /// Directory name in the store, e.g. `p003_v01`.
    pub name: String,
    pub patient_id: u32,
    pub volume_id: u32,
    pub quality: u8,
    pub side: usize,
    pub images: Vec<Vec<f64>>,
    pub poses: Vec<[f64; 6]>,
    pub angles: Vec<f64>,
    /// Observer consensus (ground truth when the sweep has no observers).
    pub position: Vec<ClassDistribution>,
    pub direction: Vec<ClassDistribution>,
    pub truth_position: Vec<PositionClass>,
    pub truth_direction: Vec<DirectionClass>,
    pub observers: Vec<ObserverVotes>,
    pub theta_centre_deg: f64,
}

impl PreparedVolume {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_refs(&self) -> Vec<&[f64]> {
        self.images.iter().map(Vec::as_slice).collect()
    }
}

fn consensus<C: ClassSet + Copy>(votes: &[&[C]], truth: &[C], i: usize) -> ClassDistribution {
    if votes.is_empty() {
        return ClassDistribution::one_hot(truth[i].index());
    }
    let ids: Vec<usize> = votes.iter().map(|v| v[i].index()).collect();
    encode_consensus(&ids).expect("votes are valid class ids")
}

pub fn prepare_volume(sweep: &SweepVolume, config: &PreprocessConfig) -> Result<PreparedVolume, DataError> {
    let mut images = Vec::with_capacity(sweep.len());
    let mut side = config.crop_size;
    for f in &sweep.frames {
        let p = preprocess(&f.image, f.height, f.width, config)?;
        side = p.side;
        images.push(p.image);
    }
    let pos_votes: Vec<&[PositionClass]> = sweep.observers.iter().map(|o| o.position.as_slice()).collect();
    let dir_votes: Vec<&[DirectionClass]> = sweep.observers.iter().map(|o| o.direction.as_slice()).collect();
    Ok(PreparedVolume {
        name: format!("p{:03}_v{:02}", sweep.patient_id, sweep.volume_id),
        patient_id: sweep.patient_id,
        volume_id: sweep.volume_id,
        quality: sweep.quality,
        side,
        poses: sweep.frames.iter().map(|f| f.pose.to_array()).collect(),
        angles: sweep.angles(),
        position: (0..sweep.len()).map(|i| consensus(&pos_votes, &sweep.position, i)).collect(),
        direction: (0..sweep.len()).map(|i| consensus(&dir_votes, &sweep.direction, i)).collect(),
        truth_position: sweep.position.clone(),
        truth_direction: sweep.direction.clone(),
        observers: sweep.observers.clone(),
        theta_centre_deg: sweep.geometry.theta_c_deg,
        images,
    })
}

/// All preprocessed volumes of a sweep store, in directory order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub volumes: Vec<PreparedVolume>,
}

impl Dataset {
    pub fn load(root: &Path, config: &PreprocessConfig) -> Result<Self, DataError> {
        let mut volumes = Vec::new();
        for dir in list_volumes(root)? {
            volumes.push(prepare_volume(&load_sweep(&dir)?, config)?);
        }
        Ok(Self { volumes })
    }

    pub fn from_sweeps(sweeps: &[SweepVolume], config: &PreprocessConfig) -> Result<Self, DataError> {
        Ok(Self {
            volumes: sweeps.iter().map(|s| prepare_volume(s, config)).collect::<Result<_, _>>()?,
        })
    }

    /// One entry per patient; the stratum is the quality of the patient's
    /// first volume.
    pub fn patients(&self) -> Vec<PatientMeta> {
        let mut out: Vec<PatientMeta> = Vec::new();
        for v in &self.volumes {
            match out.iter_mut().find(|p| p.patient_id == v.patient_id) {
                Some(p) => p.volumes.push(v.name.clone()),
                None => out.push(PatientMeta {
                    patient_id: v.patient_id,
                    quality: v.quality,
                    volumes: vec![v.name.clone()],
                }),
            }
        }
        out.sort_by_key(|p| p.patient_id);
        out
    }

    /// Volumes belonging to the given patients, in dataset order.
    pub fn subset(&self, patients: &[u32]) -> Vec<&PreparedVolume> {
        self.volumes.iter().filter(|v| patients.contains(&v.patient_id)).collect()
    }
}
