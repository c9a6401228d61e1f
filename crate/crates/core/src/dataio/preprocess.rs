use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub downsample_factor: f64,
    pub crop_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 1.5,
            crop_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// `crop_size × crop_size`, row-major, zero mean and unit variance.
    pub image: Vec<f64>,
    pub side: usize,
    /// Set when the input was constant and normalisation was impossible.
    pub degenerate: bool,
}

fn downsample(image: &[f64], h: usize, w: usize, factor: f64) -> (Vec<f64>, usize, usize) {
    let oh = (h as f64 / factor).floor() as usize;
    let ow = (w as f64 / factor).floor() as usize;
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let y = ((r as f64 + 0.5) * factor - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..ow {
            let x = ((c as f64 + 0.5) * factor - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let at = |rr: usize, cc: usize| image[rr * w + cc];
            out.push(
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1)),
            );
        }
    }
    (out, oh, ow)
}

/// Bilinear downsample, centre crop, per-image z-score.
pub fn preprocess(image: &[f32], height: usize, width: usize, config: &PreprocessConfig) -> Result<Preprocessed, DataError> {
    if image.len() != height * width {
        return Err(DataError::Shape(format!("{} pixels for {height}x{width}", image.len())));
    }
    if !(config.downsample_factor >= 1.0) {
        return Err(DataError::Shape(format!("downsample factor {}", config.downsample_factor)));
    }
    let src: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let (small, sh, sw) = downsample(&src, height, width, config.downsample_factor);
    let side = config.crop_size;
    if side == 0 || side > sh || side > sw {
        return Err(DataError::ImageTooSmall {
            needed: format!("{side}x{side} crop"),
            found: format!("{sh}x{sw} after downsampling {height}x{width}"),
        });
    }
    let (top, left) = ((sh - side) / 2, (sw - side) / 2);
    let mut crop = Vec::with_capacity(side * side);
    for r in top..top + side {
        crop.extend_from_slice(&small[r * sw + left..r * sw + left + side]);
    }
    let n = crop.len() as f64;
    let mean = crop.iter().sum::<f64>() / n;
    let var = crop.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        log::warn!("constant frame passed to preprocess; emitting zeros");
        return Ok(Preprocessed {
            image: vec![0.0; side * side],
            side,
            degenerate: true,
        });
    }
    for v in &mut crop {
        *v = (*v - mean) / std;
    }
    Ok(Preprocessed {
        image: crop,
        side,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn desk_raster_shape() {
        let img: Vec<f32> = (0..96 * 96).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect();
        let out = preprocess(&img, 96, 96, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.side, 64);
        assert_eq!(out.image.len(), 64 * 64);
        assert!(!out.degenerate);
    }

    #[test]
    fn constant_input_flags_zeros() {
        let out = preprocess(&vec![0.4; 96 * 96], 96, 96, &PreprocessConfig::default()).unwrap();
        assert!(out.degenerate);
        assert!(out.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_must_fit() {
        let cfg = PreprocessConfig {
            crop_size: 65,
            ..PreprocessConfig::default()
        };
        assert!(matches!(
            preprocess(&vec![0.5; 96 * 96], 96, 96, &cfg),
            Err(DataError::ImageTooSmall { .. })
        ));
    }

    proptest! {
        #[test]
        fn output_is_standardised(seed in 0u64..1000) {
            let img: Vec<f32> = (0..96 * 96)
                .map(|i| (((i as u64 + 1) * (seed * 2654435761 + 97)) % 1009) as f32 / 1009.0)
                .collect();
            let out = preprocess(&img, 96, 96, &PreprocessConfig::default()).unwrap();
            prop_assume!(!out.degenerate);
            let n = out.image.len() as f64;
            let mean = out.image.iter().sum::<f64>() / n;
            let std = (out.image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }
}
