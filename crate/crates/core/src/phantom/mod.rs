//! Synthetic prostate phantoms swept by a rotating sagittal imaging plane.
//!
//! Geometry: the transducer pivots about the lateral image axis. A plane at
//! sweep angle `φ` contains that axis, so a point at depth `s` in the plane
//! sits `s·sin(φ − θc)` out of the plane through the prostate centre, where
//! `θc` is the centre angle. The prostate is an axis-aligned ellipsoid with
//! semi-axes `a` (lateral), `b` (depth) and `c` (elevation) centred at depth
//! `d` along the centre plane.
//!
//! Sweeps run right to left, i.e. by increasing angle. A frame left of the
//! centre (smaller angle) needs the probe rotated toward larger angles, which
//! is labelled [`DirectionClass::Left`].

mod dataset;
mod observer;
mod render;

pub use dataset::{assign_qualities, generate_cohort, CohortConfig};
pub use observer::{simulate_observer, ObserverVotes};
pub use render::render_bscan;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{DirectionClass, PositionClass};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom geometry: {0}")]
    Geometry(String),
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("angle {angle}° outside the {arc}° arc")]
    AngleOutsideArc { angle: f64, arc: f64 },
    #[error("a sweep needs at least 10 frames, got {0}")]
    TooFewFrames(usize),
}

/// Probe pose as recorded by the tracker: millimetres and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
}

impl Pose {
    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.theta_x, self.theta_y, self.theta_z]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
            theta_x: a[3],
            theta_y: a[4],
            theta_z: a[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Ellipsoid semi-axes (lateral, depth, elevation) in mm.
    pub semi_axes_mm: [f64; 3],
    /// Distance from the pivot axis to the prostate centre.
    pub pivot_distance_mm: f64,
    /// Fixed centre angle; drawn from `arc/2 ± centre_spread_deg` when absent.
    pub theta_c_deg: Option<f64>,
    pub centre_spread_deg: f64,
    /// Half-width of the Centre band.
    pub delta_c_deg: f64,
    /// Image quality grade, 0 (worst) to 3.
    pub quality: u8,
    pub arc_deg: f64,
    pub frames_per_sweep: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_size_mm: f64,
    pub seed: u64,
    /// Lifts the clinical frame-count and pixel-size ranges.
    pub desk_scale: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            semi_axes_mm: [15.0, 11.5, 14.0],
            pivot_distance_mm: 50.0,
            theta_c_deg: None,
            centre_spread_deg: 12.0,
            delta_c_deg: 3.0,
            quality: 3,
            arc_deg: 60.0,
            frames_per_sweep: 150,
            height: 96,
            width: 96,
            pixel_size_mm: 0.5,
            seed: 0,
            desk_scale: false,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let [a, b, c] = self.semi_axes_mm;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(PhantomError::Geometry(format!("semi-axes must be positive: {:?}", self.semi_axes_mm)));
        }
        if self.pivot_distance_mm <= a.max(b).max(c) {
            return Err(PhantomError::Geometry(format!(
                "pivot distance {} mm must exceed every semi-axis {:?}",
                self.pivot_distance_mm, self.semi_axes_mm
            )));
        }
        if self.quality > 3 {
            return Err(PhantomError::Config(format!("quality {} not in 0..=3", self.quality)));
        }
        if !(self.arc_deg > 0.0 && self.arc_deg < 180.0) {
            return Err(PhantomError::Config(format!("arc {}°", self.arc_deg)));
        }
        if !(self.delta_c_deg > 0.0) || self.centre_spread_deg < 0.0 {
            return Err(PhantomError::Config("centre band and spread must be positive".into()));
        }
        if self.height == 0 || self.width == 0 || !(self.pixel_size_mm > 0.0) {
            return Err(PhantomError::Config("empty raster".into()));
        }
        if !self.desk_scale {
            if !(134..=164).contains(&self.frames_per_sweep) {
                return Err(PhantomError::Config(format!(
                    "frames_per_sweep {} outside 134..=164",
                    self.frames_per_sweep
                )));
            }
            if !(0.3..=0.5).contains(&self.pixel_size_mm) {
                return Err(PhantomError::Config(format!("pixel size {} mm outside 0.3..=0.5", self.pixel_size_mm)));
            }
        }
        if let Some(t) = self.theta_c_deg {
            if !(0.0..=self.arc_deg).contains(&t) {
                return Err(PhantomError::AngleOutsideArc {
                    angle: t,
                    arc: self.arc_deg,
                });
            }
        }
        let extent = intersection_half_extent(self.semi_axes_mm, self.pivot_distance_mm);
        if self.delta_c_deg >= extent {
            return Err(PhantomError::Geometry(format!(
                "centre band ±{}° exceeds the {extent:.2}° intersection half-extent",
                self.delta_c_deg
            )));
        }
        Ok(())
    }
}

/// Half-angle over which the sweeping plane intersects the ellipsoid.
///
/// The plane at offset `Δ` from the centre plane meets the ellipsoid iff
/// `(d² − b²)·tan²Δ ≤ c²`.
pub fn intersection_half_extent(semi_axes: [f64; 3], pivot_distance: f64) -> f64 {
    let [_, b, c] = semi_axes;
    (c / (pivot_distance * pivot_distance - b * b).sqrt()).atan().to_degrees()
}

/// A small ellipsoidal structure placed relative to the prostate centre in
/// (lateral, depth, elevation) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub centre_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    /// Additive echogenicity at full visibility; negative darkens.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    config: PhantomConfig,
    theta_c: f64,
    lateral_offset_mm: f64,
    features: Vec<Feature>,
    speckle_seed: u64,
    pose_origin: [f64; 6],
    anatomy: bool,
}

pub fn generate_phantom(config: PhantomConfig) -> Result<Phantom, PhantomError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mid = config.arc_deg / 2.0;
    let drawn: f64 = rng.random_range(-1.0..=1.0) * config.centre_spread_deg;
    let theta_c = config.theta_c_deg.unwrap_or(mid + drawn);
    if !(0.0..=config.arc_deg).contains(&theta_c) {
        return Err(PhantomError::Config(format!(
            "centre spread places θc = {theta_c}° outside the arc"
        )));
    }
    let lateral_offset_mm = rng.random_range(-2.0..=2.0);
    let [a, b, _] = config.semi_axes_mm;
    let d = config.pivot_distance_mm;
    // elevation half-thickness that keeps midline structures visible only
    // within about one centre band of the centre plane
    let thin = d * (config.delta_c_deg + 0.5).to_radians().sin();
    let features = vec![
        // urethra: a bright tube along the lateral axis through the gland
        Feature {
            centre_mm: [0.0, rng.random_range(-0.15..0.15) * b, 0.0],
            semi_axes_mm: [0.8 * a, 1.2, thin],
            gain: 1.4,
        },
        // penile bulb, beyond the inferior end
        Feature {
            centre_mm: [-(a + 3.5), 0.45 * b, 0.0],
            semi_axes_mm: [4.5, 3.5, 1.3 * thin],
            gain: 0.9,
        },
        // seminal vesicle, superior and posterior
        Feature {
            centre_mm: [a + 2.0, -0.6 * b, 0.0],
            semi_axes_mm: [5.0, 2.5, 1.3 * thin],
            gain: -0.55,
        },
    ];
    let speckle_seed = rng.random();
    let pose_origin = [
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(-3.0..3.0),
        0.0,
        rng.random_range(-3.0..3.0),
    ];
    Ok(Phantom {
        config,
        theta_c,
        lateral_offset_mm,
        features,
        speckle_seed,
        pose_origin,
        anatomy: true,
    })
}

impl Phantom {
    pub fn config(&self) -> &PhantomConfig {
        &self.config
    }

    /// True centre angle in degrees.
    pub fn theta_c(&self) -> f64 {
        self.theta_c
    }

    pub fn delta_c(&self) -> f64 {
        self.config.delta_c_deg
    }

    pub fn quality(&self) -> u8 {
        self.config.quality
    }

    pub fn arc(&self) -> f64 {
        self.config.arc_deg
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    /// Half-angle of the plane–ellipsoid intersection around `θc`.
    pub fn half_extent(&self) -> f64 {
        intersection_half_extent(self.config.semi_axes_mm, self.config.pivot_distance_mm)
    }

    pub fn label_geometry(&self) -> LabelGeometry {
        LabelGeometry {
            theta_c_deg: self.theta_c,
            delta_c_deg: self.config.delta_c_deg,
            half_extent_deg: self.half_extent(),
        }
    }

    /// The same phantom with the prostate and all features removed: pure speckle.
    pub fn background_only(&self) -> Phantom {
        Phantom {
            anatomy: false,
            ..self.clone()
        }
    }

    /// Same anatomy and speckle at a different quality grade.
    pub fn with_quality(&self, quality: u8) -> Result<Phantom, PhantomError> {
        let config = PhantomConfig {
            quality,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Phantom { config, ..self.clone() })
    }

    fn check_angle(&self, angle: f64) -> Result<(), PhantomError> {
        if (0.0..=self.config.arc_deg).contains(&angle) {
            Ok(())
        } else {
            Err(PhantomError::AngleOutsideArc {
                angle,
                arc: self.config.arc_deg,
            })
        }
    }

    /// Analytic area (mm²) of the plane–ellipsoid cross-section; zero when the
    /// plane misses the gland.
    pub fn cross_section_area_mm2(&self, angle: f64) -> f64 {
        let [a, b, c] = self.config.semi_axes_mm;
        let d = self.config.pivot_distance_mm;
        let delta = (angle - self.theta_c).to_radians();
        let (sn, cs) = delta.sin_cos();
        // F(x, s) = (x/a)² + ((s·cosΔ − d)/b)² + (s·sinΔ/c)², quadratic in s
        let q = cs * cs / (b * b) + sn * sn / (c * c);
        let lin = d * cs / (b * b);
        let k = d * d / (b * b) - lin * lin / q;
        if k >= 1.0 {
            return 0.0;
        }
        std::f64::consts::PI * a * (1.0 - k) / q.sqrt()
    }

    /// Image-plane geometry for one pixel: (lateral, depth offset, elevation)
    /// relative to the prostate centre.
    pub(crate) fn pixel_coords(&self, angle: f64, row: usize, col: usize) -> [f64; 3] {
        let cfg = &self.config;
        let ps = cfg.pixel_size_mm;
        let x = (col as f64 + 0.5 - cfg.width as f64 / 2.0) * ps - self.lateral_offset_mm;
        let s = cfg.pivot_distance_mm - cfg.height as f64 * ps / 2.0 + (row as f64 + 0.5) * ps;
        let delta = (angle - self.theta_c).to_radians();
        [x, s * delta.cos() - cfg.pivot_distance_mm, s * delta.sin()]
    }

    /// Normalised ellipsoid radius² of a point; < 1 inside the gland.
    pub(crate) fn gland_radius2(&self, p: [f64; 3]) -> f64 {
        let [a, b, c] = self.config.semi_axes_mm;
        (p[0] / a).powi(2) + (p[1] / b).powi(2) + (p[2] / c).powi(2)
    }

    pub(crate) fn pose_origin(&self) -> [f64; 6] {
        self.pose_origin
    }

    pub(crate) fn speckle_seed(&self) -> u64 {
        self.speckle_seed
    }

    pub(crate) fn has_anatomy(&self) -> bool {
        self.anatomy
    }

    pub(crate) fn quality_knobs(&self) -> QualityKnobs {
        QualityKnobs::for_grade(self.config.quality)
    }

    /// Mean intensity of the rim band minus the mean of the gland interior,
    /// read from a rendered frame. `None` when the plane misses the gland.
    pub fn rim_contrast(&self, frame: &Frame) -> Option<f64> {
        let (mut rim, mut nr, mut inner, mut ni) = (0.0, 0usize, 0.0, 0usize);
        for row in 0..frame.height {
            for col in 0..frame.width {
                let r2 = self.gland_radius2(self.pixel_coords(frame.sweep_angle_deg, row, col));
                let v = frame.image[row * frame.width + col] as f64;
                let dist = (r2.sqrt() - 1.0).abs();
                if dist < render::RIM_WIDTH {
                    rim += v;
                    nr += 1;
                } else if r2 < 0.6 {
                    inner += v;
                    ni += 1;
                }
            }
        }
        (nr > 0 && ni > 0).then(|| rim / nr as f64 - inner / ni as f64)
    }

    /// Pixel mask of the gland cross-section at an angle.
    pub fn gland_mask(&self, angle: f64) -> Vec<bool> {
        let cfg = &self.config;
        let mut mask = Vec::with_capacity(cfg.height * cfg.width);
        for row in 0..cfg.height {
            for col in 0..cfg.width {
                mask.push(self.gland_radius2(self.pixel_coords(angle, row, col)) < 1.0);
            }
        }
        mask
    }
}

/// Everything needed to reproduce the label rules for a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelGeometry {
    pub theta_c_deg: f64,
    pub delta_c_deg: f64,
    pub half_extent_deg: f64,
}

impl LabelGeometry {
    pub fn position(&self, angle: f64) -> PositionClass {
        let off = (angle - self.theta_c_deg).abs();
        if off <= self.delta_c_deg {
            PositionClass::Centre
        } else if off <= self.half_extent_deg {
            PositionClass::Periphery
        } else {
            PositionClass::Outside
        }
    }

    pub fn direction(&self, angle: f64) -> DirectionClass {
        if self.position(angle) == PositionClass::Centre {
            DirectionClass::Stop
        } else if angle < self.theta_c_deg {
            DirectionClass::Left
        } else {
            DirectionClass::Right
        }
    }
}

pub fn ground_truth_position(phantom: &Phantom, angle: f64) -> PositionClass {
    phantom.label_geometry().position(angle)
}

pub fn ground_truth_direction(phantom: &Phantom, angle: f64) -> DirectionClass {
    phantom.label_geometry().direction(angle)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct QualityKnobs {
    pub rim_gain: f64,
    pub noise_sigma: f64,
    pub interior_echo: f64,
    pub feature_visibility: f64,
}

impl QualityKnobs {
    fn for_grade(q: u8) -> Self {
        let q = q.min(3) as usize;
        Self {
            rim_gain: [0.25, 0.6, 1.1, 1.7][q],
            noise_sigma: [0.10, 0.07, 0.045, 0.02][q],
            interior_echo: [0.78, 0.68, 0.58, 0.5][q],
            feature_visibility: [0.3, 0.55, 0.8, 1.0][q],
        }
    }
}

/// One B-scan with its tracked pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Row-major `height × width`, values in [0, 1]. Rows run shallow to deep.
    pub image: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub pose: Pose,
    pub sweep_angle_deg: f64,
}

/// A right-to-left sweep with its ground truth and any observer votes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepVolume {
    pub patient_id: u32,
    pub volume_id: u32,
    pub quality: u8,
    pub pixel_size_mm: f64,
    pub arc_deg: f64,
    pub geometry: LabelGeometry,
    pub frames: Vec<Frame>,
    pub position: Vec<PositionClass>,
    pub direction: Vec<DirectionClass>,
    pub observers: Vec<ObserverVotes>,
}

impl SweepVolume {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.sweep_angle_deg).collect()
    }
}

/// Uniformly spaced frames over the full arc, right to left.
pub fn generate_sweep(phantom: &Phantom, n_frames: usize) -> Result<SweepVolume, PhantomError> {
    if n_frames < 10 {
        return Err(PhantomError::TooFewFrames(n_frames));
    }
    let arc = phantom.arc();
    let step = arc / (n_frames - 1) as f64;
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let angle = if i + 1 == n_frames { arc } else { i as f64 * step };
        frames.push(render_bscan(phantom, angle)?);
    }
    let geometry = phantom.label_geometry();
    let position = frames.iter().map(|f| geometry.position(f.sweep_angle_deg)).collect();
    let direction = frames.iter().map(|f| geometry.direction(f.sweep_angle_deg)).collect();
    Ok(SweepVolume {
        patient_id: 0,
        volume_id: 0,
        quality: phantom.quality(),
        pixel_size_mm: phantom.config.pixel_size_mm,
        arc_deg: arc,
        geometry,
        frames,
        position,
        direction,
        observers: Vec::new(),
    })
}
