use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Frame, Phantom, PhantomError, Pose};

/// Half-width of the bright capsule rim in normalised ellipsoid radius.
pub(crate) const RIM_WIDTH: f64 = 0.07;
/// Mean display intensity of unit-echogenicity tissue.
const BASE_LEVEL: f64 = 0.3;
/// Mean of a unit-scale Rayleigh variate, √(π/2).
const RAYLEIGH_MEAN: f64 = 1.253_314_137_315_500_3;

fn frame_rng(seed: u64, angle: f64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ angle.to_bits().rotate_left(17));
    rng.set_stream(stream);
    rng
}

/// Smoothed Rayleigh speckle with unit mean.
fn speckle(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            (re * re + im * im).sqrt()
        })
        .collect();
    // separable [1 2 1]/4 blur with clamped edges
    let taps = [(-1isize, 0.25), (0, 0.5), (1, 0.25)];
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = taps
                .iter()
                .map(|&(o, k)| k * raw[r * w + (c as isize + o).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = taps
                .iter()
                .map(|&(o, k)| k * tmp[(r as isize + o).clamp(0, h as isize - 1) as usize * w + c])
                .sum::<f64>()
                / RAYLEIGH_MEAN;
        }
    }
    out
}

fn echogenicity(phantom: &Phantom, p: [f64; 3]) -> f64 {
    let knobs = phantom.quality_knobs();
    let r2 = phantom.gland_radius2(p);
    let r = r2.sqrt();
    let mut echo = if r < 1.0 { knobs.interior_echo } else { 1.0 };
    echo += knobs.rim_gain * (-((r - 1.0) / RIM_WIDTH).powi(2)).exp();
    for f in phantom.features() {
        let q: f64 = (0..3).map(|k| ((p[k] - f.centre_mm[k]) / f.semi_axes_mm[k]).powi(2)).sum();
        if q < 1.0 {
            echo += f.gain * knobs.feature_visibility * (1.0 - q);
        }
    }
    echo.max(0.0)
}

/// Renders the B-scan at one sweep angle.
///
/// Deterministic in (phantom, angle): speckle, noise and pose jitter are all
/// seeded from the phantom seed and the angle.
pub fn render_bscan(phantom: &Phantom, angle: f64) -> Result<Frame, PhantomError> {
    phantom.check_angle(angle)?;
    let cfg = phantom.config();
    let (h, w) = (cfg.height, cfg.width);
    let knobs = phantom.quality_knobs();
    let mut rng = frame_rng(phantom.speckle_seed(), angle, 0);
    let tex = speckle(&mut rng, h, w);
    let mut image = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let echo = if phantom.has_anatomy() {
                echogenicity(phantom, phantom.pixel_coords(angle, row, col))
            } else {
                1.0
            };
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * knobs.noise_sigma;
            let v = BASE_LEVEL * echo * tex[row * w + col] + noise;
            image.push(v.clamp(0.0, 1.0) as f32);
        }
    }

    let mut jitter = frame_rng(phantom.speckle_seed(), angle, 1);
    let o = phantom.pose_origin();
    let mut mm = || jitter.random_range(-0.5..=0.5);
    let (dx, dy, dz) = (mm(), mm(), mm());
    let mut deg = || jitter.random_range(-0.2..=0.2);
    let (ax, ay, az) = (deg(), deg(), deg());
    // the tracker reports single precision
    let pose = Pose::from_array(
        [
            o[0] + dx,
            o[1] + dy,
            o[2] + dz,
            o[3] + ax,
            (angle + ay).clamp(0.0, cfg.arc_deg),
            o[5] + az,
        ]
        .map(|v| v as f32 as f64),
    );
    Ok(Frame {
        image,
        height: h,
        width: w,
        pose,
        sweep_angle_deg: angle,
    })
}
