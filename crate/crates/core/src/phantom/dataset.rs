use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_phantom, generate_sweep, simulate_observer, PhantomConfig, PhantomError, SweepVolume};

/// A synthetic cohort: patients with their own anatomy and image quality,
/// each swept a few times and labelled by simulated observers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_patients: u32,
    pub volumes_per_patient: u32,
    /// Share of patients at quality grades 0..=3.
    pub quality_mix: [f64; 4],
    pub observers: usize,
    pub sigma_obs_deg: f64,
    /// Relative spread of each semi-axis between patients.
    pub anatomy_jitter: f64,
    pub seed: u64,
    /// Template for every volume; seed, quality and semi-axes are overridden.
    pub base: PhantomConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 20,
            volumes_per_patient: 2,
            quality_mix: [0.1, 0.2, 0.3, 0.4],
            observers: 3,
            sigma_obs_deg: 2.0,
            anatomy_jitter: 0.1,
            seed: 0,
            base: PhantomConfig::default(),
        }
    }
}

/// Grades for `n` patients matching `mix` as closely as whole patients allow
/// (largest remainders), in random order.
pub fn assign_qualities(n: usize, mix: [f64; 4], rng: &mut impl Rng) -> Result<Vec<u8>, PhantomError> {
    let total: f64 = mix.iter().sum();
    if mix.iter().any(|&m| !(m >= 0.0)) || !(total > 0.0) {
        return Err(PhantomError::Config(format!("quality mix {mix:?}")));
    }
    let exact = mix.map(|m| m / total * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - counts.iter().sum::<usize>();
    for &q in order.iter().take(short) {
        counts[q] += 1;
    }
    let mut grades: Vec<u8> = (0..4u8).flat_map(|q| std::iter::repeat_n(q, counts[q as usize])).collect();
    grades.shuffle(rng);
    Ok(grades)
}

/// Renders every volume of the cohort. Patient ids run from 0, volume ids
/// from 0 within each patient.
pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<SweepVolume>, PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grades = assign_qualities(config.n_patients as usize, config.quality_mix, &mut rng)?;
    let mut out = Vec::with_capacity((config.n_patients * config.volumes_per_patient) as usize);
    for (patient, &quality) in grades.iter().enumerate() {
        let j = config.anatomy_jitter.abs();
        let semi_axes = config
            .base
            .semi_axes_mm
            .map(|s| s * (1.0 + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 }));
        for volume in 0..config.volumes_per_patient {
            let phantom = generate_phantom(PhantomConfig {
                seed: rng.random(),
                quality,
                semi_axes_mm: semi_axes,
                ..config.base.clone()
            })?;
            let mut sweep = generate_sweep(&phantom, config.base.frames_per_sweep)?;
            sweep.patient_id = patient as u32;
            sweep.volume_id = volume;
            for _ in 0..config.observers {
                let votes = simulate_observer(&sweep, config.sigma_obs_deg, &mut rng);
                sweep.observers.push(votes);
            }
            out.push(sweep);
        }
    }
    Ok(out)
}
