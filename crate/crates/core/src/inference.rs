//! Closed-set prediction plus smoothed energy anomaly maps.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::losses::energy;
use crate::rpl::RplModule;
use crate::segnet::{argmax_classes, SegNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    /// Odd kernel width; 1 disables smoothing.
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { kernel_size: 7, sigma: 1.0 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return config_err(format!("kernel size must be odd and positive, got {}", self.kernel_size));
        }
        if !(self.sigma > 0.0) {
            return config_err(format!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Sampled 1-D Gaussian normalised to sum to one.
pub fn gaussian_kernel(cfg: &SmoothingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let r = (cfg.kernel_size / 2) as f64;
    let k: Vec<f64> = (0..cfg.kernel_size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * cfg.sigma * cfg.sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / sum).collect())
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian smoothing of an `h x w` map with reflect padding.
pub fn gaussian_smooth(raw: &[f64], h: usize, w: usize, cfg: &SmoothingConfig) -> Result<Vec<f64>> {
    if raw.len() != h * w {
        return shape_err(format!("map of {} values is not {h}x{w}", raw.len()));
    }
    let k = gaussian_kernel(cfg)?;
    if k.len() == 1 {
        return Ok(raw.to_vec());
    }
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * raw[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    Ok(out)
}

/// Per-pixel anomaly scores; higher means more anomalous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyMap {
    pub h: usize,
    pub w: usize,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub smoothing: SmoothingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Closed-set classes in `1..=C`, from the frozen path.
    pub class_map: Vec<u8>,
    pub scores: EnergyMap,
}

/// Anomaly maps from arbitrary logits, one per batch item.
pub fn energy_maps(logits: &Tensor, cfg: &SmoothingConfig) -> Result<Vec<EnergyMap>> {
    cfg.validate()?;
    let e = energy(logits)?;
    let per = logits.h * logits.w;
    e.chunks_exact(per)
        .map(|raw| {
            Ok(EnergyMap {
                h: logits.h,
                w: logits.w,
                raw: raw.to_vec(),
                smoothed: gaussian_smooth(raw, logits.h, logits.w, cfg)?,
                smoothing: *cfg,
            })
        })
        .collect()
}

/// Class maps from the frozen path and energy scores from the residual path.
pub fn predict(seg: &SegNet, rpl: &RplModule, images: &Tensor, cfg: &SmoothingConfig) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let fwd = rpl.forward_residual(seg, images)?;
    let classes = argmax_classes(fwd.logits_tilde());
    let maps = energy_maps(fwd.logits_hat(), cfg)?;
    let per = images.h * images.w;
    Ok(maps
        .into_iter()
        .zip(classes.chunks_exact(per))
        .map(|(scores, c)| Prediction { class_map: c.to_vec(), scores })
        .collect())
}

/// Min-max normalisation to bytes for display. A constant map becomes zero.
pub fn normalize_for_display(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpl::{build_rpl, RplConfig};
    use crate::segnet::{build_segnet, ArchConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()
    }

    #[test]
    fn impulse_matches_closed_form_kernel() {
        let mut raw = vec![0.0; 25];
        raw[12] = 1.0;
        let cfg = SmoothingConfig { kernel_size: 3, sigma: 1.0 };
        let out = gaussian_smooth(&raw, 5, 5, &cfg).unwrap();
        let e = (-0.5f64).exp();
        let z = 1.0 + 2.0 * e;
        let k = [e / z, 1.0 / z, e / z];
        for dy in 0..3 {
            for dx in 0..3 {
                let v = out[(1 + dy) * 5 + 1 + dx];
                assert!((v - k[dy] * k[dx]).abs() < 1e-15);
            }
        }
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn identity_constant_and_even_kernel() {
        let raw = random_map(1, 36);
        assert_eq!(gaussian_smooth(&raw, 6, 6, &SmoothingConfig { kernel_size: 1, sigma: 1.0 }).unwrap(), raw);
        let c = gaussian_smooth(&[2.5; 36], 6, 6, &SmoothingConfig::default()).unwrap();
        assert!(c.iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(gaussian_smooth(&raw, 6, 6, &SmoothingConfig { kernel_size: 4, sigma: 1.0 }).is_err());
        assert!(gaussian_smooth(&raw, 6, 6, &SmoothingConfig { kernel_size: 3, sigma: 0.0 }).is_err());
        assert!(gaussian_smooth(&raw, 5, 6, &SmoothingConfig::default()).is_err());
    }

    #[test]
    fn linearity_and_max_bound() {
        let a = random_map(2, 100);
        let b = random_map(3, 100);
        let cfg = SmoothingConfig::default();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (sa, sb, ss) = (
            gaussian_smooth(&a, 10, 10, &cfg).unwrap(),
            gaussian_smooth(&b, 10, 10, &cfg).unwrap(),
            gaussian_smooth(&sum, 10, 10, &cfg).unwrap(),
        );
        for i in 0..100 {
            assert!((ss[i] - sa[i] - sb[i]).abs() < 1e-12);
        }
        let max_raw = a.iter().copied().fold(f64::MIN, f64::max);
        assert!(sa.iter().all(|&v| v <= max_raw + 1e-9));
    }

    #[test]
    fn smoothing_roughly_preserves_the_mean() {
        let raw = random_map(4, 32 * 32);
        let out = gaussian_smooth(&raw, 32, 32, &SmoothingConfig::default()).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&raw) - mean(&out)).abs() < 0.05);
    }

    #[test]
    fn reflection_handles_tiny_maps() {
        let out = gaussian_smooth(&[1.0, 3.0], 1, 2, &SmoothingConfig { kernel_size: 7, sigma: 2.0 }).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && (1.0..=3.0).contains(v)));
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn zero_residual_scores_equal_frozen_energy() {
        let mut seg = build_segnet(&ArchConfig::default()).unwrap();
        seg.freeze();
        let mut rpl = build_rpl(&seg, &RplConfig::default()).unwrap();
        rpl.zero_output();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::from_vec(1, 64, 64, 3, (0..64 * 64 * 3).map(|_| rng.gen()).collect()).unwrap();
        let cfg = SmoothingConfig { kernel_size: 1, sigma: 1.0 };
        let p = predict(&seg, &rpl, &img, &cfg).unwrap();
        let frozen = seg.forward(&img).unwrap();
        assert_eq!(p[0].scores.raw, energy(&frozen.logits).unwrap());
        assert_eq!(p[0].class_map, argmax_classes(&frozen.logits));
        assert!(p[0].class_map.iter().all(|&c| (1..=4).contains(&c)));
    }

    #[test]
    fn display_normalisation() {
        assert_eq!(normalize_for_display(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
        assert_eq!(normalize_for_display(&[3.0, 3.0]), vec![0, 0]);
    }
}
