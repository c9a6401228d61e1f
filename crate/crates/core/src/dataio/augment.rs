use rand::Rng;
use serde::{Deserialize, Serialize};

/// Bounds for the random in-plane transforms applied to training images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
}

impl Default for AugmentConfig {
    /// Clinical magnitudes at the full 224-pixel crop.
    fn default() -> Self {
        Self {
            max_rotation_deg: 45.0,
            max_translation_px: 20.0,
            horizontal_flip: true,
            vertical_flip: true,
        }
    }
}

impl AugmentConfig {
    /// No-op transform.
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_translation_px: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
        }
    }

    /// Default magnitudes with the translation scaled from a 224-pixel crop
    /// to `crop` pixels.
    pub fn scaled_to(crop: usize) -> Self {
        Self {
            max_translation_px: 20.0 * crop as f64 / 224.0,
            ..Self::default()
        }
    }
}

/// One concrete draw of the transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shift_x: 0.0,
            shift_y: 0.0,
            flip_horizontal: false,
            flip_vertical: false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, config: &AugmentConfig) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(config.max_rotation_deg);
        let shift_x = sym(config.max_translation_px);
        let shift_y = sym(config.max_translation_px);
        Self {
            rotation_deg,
            shift_x,
            shift_y,
            flip_horizontal: config.horizontal_flip && rng.random_bool(0.5),
            flip_vertical: config.vertical_flip && rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Rotates about the image centre, shifts, then flips. Pixels that map
    /// from outside the source are filled with 0.
    pub fn apply(&self, image: &[f64], height: usize, width: usize) -> Vec<f64> {
        if self.is_identity() {
            return image.to_vec();
        }
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let mut out = vec![0.0; height * width];
        for r in 0..height {
            for c in 0..width {
                let (mut y, mut x) = (r as f64 - cy, c as f64 - cx);
                if self.flip_vertical {
                    y = -y;
                }
                if self.flip_horizontal {
                    x = -x;
                }
                y -= self.shift_y;
                x -= self.shift_x;
                // inverse rotation
                let sx = cos * x + sin * y + cx;
                let sy = -sin * x + cos * y + cy;
                out[r * width + c] = bilinear(image, height, width, sy, sx);
            }
        }
        out
    }
}

fn bilinear(image: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| image[r * w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Applies a random transform to an image. Labels pass through untouched:
/// in-plane motion does not change which anatomy the plane cuts or which way
/// the probe must rotate.
pub fn augment<L, R: Rng + ?Sized>(
    image: &[f64],
    height: usize,
    width: usize,
    labels: L,
    rng: &mut R,
    config: &AugmentConfig,
) -> (Vec<f64>, L) {
    let params = AugmentParams::sample(rng, config);
    (params.apply(image, height, width), labels)
}
