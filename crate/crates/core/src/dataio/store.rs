//! Sweep store: one directory per volume holding `manifest.json`,
//! `frames.bin` (little-endian f32, frame-major, row-major rows) and
//! `poses.bin` (little-endian f32, six per frame: x, y, z, θx, θy, θz).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DataError};
use crate::labels::{DirectionClass, PositionClass};
use crate::phantom::{Frame, LabelGeometry, ObserverVotes, Pose, SweepVolume};

pub const SWEEP_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub schema_version: u32,
    pub patient_id: u32,
    pub volume_id: u32,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_size_mm: f64,
    pub arc_deg: f64,
    pub quality: u8,
    pub theta_centre_deg: f64,
    pub delta_centre_deg: f64,
    pub half_extent_deg: f64,
    pub sweep_angles_deg: Vec<f64>,
    pub position_labels: Vec<PositionClass>,
    pub direction_labels: Vec<DirectionClass>,
    pub observers: Vec<ObserverVotes>,
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<(), DataError> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: expected * 4,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn save_sweep(dir: &Path, sweep: &SweepVolume) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (height, width) = sweep.frames.first().map_or((0, 0), |f| (f.height, f.width));
    let manifest = SweepManifest {
        schema_version: SWEEP_SCHEMA,
        patient_id: sweep.patient_id,
        volume_id: sweep.volume_id,
        n_frames: sweep.len(),
        height,
        width,
        pixel_size_mm: sweep.pixel_size_mm,
        arc_deg: sweep.arc_deg,
        quality: sweep.quality,
        theta_centre_deg: sweep.geometry.theta_c_deg,
        delta_centre_deg: sweep.geometry.delta_c_deg,
        half_extent_deg: sweep.geometry.half_extent_deg,
        sweep_angles_deg: sweep.angles(),
        position_labels: sweep.position.clone(),
        direction_labels: sweep.direction.clone(),
        observers: sweep.observers.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    write_f32s(
        &dir.join("frames.bin"),
        sweep.frames.iter().flat_map(|f| f.image.iter().copied()),
    )?;
    write_f32s(
        &dir.join("poses.bin"),
        sweep.frames.iter().flat_map(|f| f.pose.to_array().map(|v| v as f32)),
    )
}

fn manifest_error(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Manifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn load_sweep(dir: &Path) -> Result<SweepVolume, DataError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: SweepManifest = serde_json::from_str(&text).map_err(|e| manifest_error(&path, e.to_string()))?;
    if m.schema_version != SWEEP_SCHEMA {
        return Err(manifest_error(&path, format!("unsupported schema_version {}", m.schema_version)));
    }
    let n = m.n_frames;
    let lists = [
        ("sweep_angles_deg", m.sweep_angles_deg.len()),
        ("position_labels", m.position_labels.len()),
        ("direction_labels", m.direction_labels.len()),
    ];
    for (name, len) in lists {
        if len != n {
            return Err(manifest_error(&path, format!("{name} has {len} entries for {n} frames")));
        }
    }
    for (i, o) in m.observers.iter().enumerate() {
        if o.position.len() != n || o.direction.len() != n {
            return Err(manifest_error(&path, format!("observer {i} votes do not cover {n} frames")));
        }
    }
    let pixels = m.height * m.width;
    let images = read_f32s(&dir.join("frames.bin"), n * pixels)?;
    let poses = read_f32s(&dir.join("poses.bin"), n * 6)?;
    let frames = (0..n)
        .map(|i| {
            let p: [f64; 6] = std::array::from_fn(|k| poses[i * 6 + k] as f64);
            Frame {
                image: images[i * pixels..(i + 1) * pixels].to_vec(),
                height: m.height,
                width: m.width,
                pose: Pose::from_array(p),
                sweep_angle_deg: m.sweep_angles_deg[i],
            }
        })
        .collect();
    Ok(SweepVolume {
        patient_id: m.patient_id,
        volume_id: m.volume_id,
        quality: m.quality,
        pixel_size_mm: m.pixel_size_mm,
        arc_deg: m.arc_deg,
        geometry: LabelGeometry {
            theta_c_deg: m.theta_centre_deg,
            delta_c_deg: m.delta_centre_deg,
            half_extent_deg: m.half_extent_deg,
        },
        frames,
        position: m.position_labels,
        direction: m.direction_labels,
        observers: m.observers,
    })
}

/// Volume directories (those holding a `manifest.json`) under a dataset root,
/// sorted by name.
pub fn list_volumes(root: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.join("manifest.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
