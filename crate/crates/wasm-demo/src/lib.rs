//! Browser bindings for three interactive views: outlier-exposure mixing,
//! energy maps with Gaussian smoothing, and ROC/PR metrics on synthetic scores.
//!
//! Images cross the boundary as flat RGBA byte arrays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use rpl_core::inference::{gaussian_smooth, SmoothingConfig};
use rpl_core::losses::log_sum_exp;
use rpl_core::metrics::{auprc, auroc, f1_star, fpr_at_95tpr, pr_curve, roc_curve, ScoredPixels};
use rpl_core::nn::normal;
use rpl_core::synthdata::{
    fit_outlier, generate_inlier_dataset, generate_outlier_dataset, mix_oe, DatasetConfig, Image, LabelMap, Split,
};

fn js_err(e: rpl_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba_from_image(img: &Image) -> Vec<u8> {
    img.data
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2]].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).into_iter().chain([255]))
        .collect()
}

fn rgba_from_labels(label: &LabelMap, outlier: u8) -> Vec<u8> {
    const COLOURS: [[u8; 3]; 5] = [[0, 0, 0], [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25]];
    label
        .data
        .iter()
        .flat_map(|&l| {
            let c = if l == outlier { [255, 255, 255] } else { COLOURS[l as usize % COLOURS.len()] };
            [c[0], c[1], c[2], 255]
        })
        .collect()
}

/// Maps values through a blue-to-red ramp after min-max normalisation.
fn rgba_heat(values: &[f64]) -> Vec<u8> {
    rpl_core::inference::normalize_for_display(values)
        .into_iter()
        .flat_map(|b| {
            let t = b as f64 / 255.0;
            [(255.0 * t) as u8, (255.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8, 255]
        })
        .collect()
}

/// Small cached pools of generated inlier scenes and outlier objects.
#[wasm_bindgen]
pub struct OeExplorer {
    cfg: DatasetConfig,
    inliers: Vec<rpl_core::synthdata::InlierSample>,
    outliers: Vec<rpl_core::synthdata::OutlierSample>,
    size: usize,
    image: Vec<u8>,
    labels: Vec<u8>,
    mask: Vec<u8>,
    outlier_image: Vec<u8>,
    outlier_fraction: f64,
}

#[wasm_bindgen]
impl OeExplorer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<OeExplorer, JsError> {
        let cfg = DatasetConfig { seed, train_count: 8, outlier_train_count: 8, ..DatasetConfig::default() };
        let inliers = generate_inlier_dataset(&cfg, Split::Train).map_err(js_err)?;
        let outliers = generate_outlier_dataset(&cfg, Split::Train).map_err(js_err)?;
        let size = inliers[0].label.h;
        Ok(Self {
            cfg,
            inliers,
            outliers,
            size,
            image: vec![],
            labels: vec![],
            mask: vec![],
            outlier_image: vec![],
            outlier_fraction: 0.0,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pool_size(&self) -> usize {
        self.inliers.len()
    }

    /// Composites outlier `outlier_index` at `scale` into scene `inlier_index`.
    pub fn mix(&mut self, inlier_index: usize, outlier_index: usize, scale: f64, placement_seed: u64) -> Result<(), JsError> {
        let inl = &self.inliers[inlier_index % self.inliers.len()];
        let out = fit_outlier(&self.outliers[outlier_index % self.outliers.len()], self.size);
        let oe = mix_oe(inl, &out, scale, placement_seed, self.cfg.outlier_label).map_err(js_err)?;
        self.image = rgba_from_image(&oe.image);
        self.labels = rgba_from_labels(&oe.label, self.cfg.outlier_label);
        self.mask = oe.mask.data.iter().flat_map(|&m| [m * 255, m * 255, m * 255, 255]).collect();
        self.outlier_image = rgba_from_image(&out.image);
        self.outlier_fraction = oe.mask.data.iter().filter(|&&m| m == 1).count() as f64 / oe.mask.data.len() as f64;
        Ok(())
    }

    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    pub fn outlier_image(&self) -> Vec<u8> {
        self.outlier_image.clone()
    }

    pub fn outlier_fraction(&self) -> f64 {
        self.outlier_fraction
    }
}

/// Free energy `-log sum exp` of a logit vector.
#[wasm_bindgen]
pub fn energy_of(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

/// A synthetic `size x size` energy map: confident inliers (low energy) with
/// a disc of high-energy pixels and per-pixel noise, before and after smoothing.
#[wasm_bindgen]
pub struct EnergyExplorer {
    size: usize,
    raw: Vec<f64>,
    smoothed: Vec<f64>,
}

#[wasm_bindgen]
impl EnergyExplorer {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, radius: f64, noise: f64, seed: u64) -> EnergyExplorer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = size as f64 / 2.0;
        let raw: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
                let inside = (y - c).powi(2) + (x - c).powi(2) <= radius * radius;
                // four logits: one dominant class for inliers, flat for the disc
                let logits: Vec<f64> = if inside {
                    (0..4).map(|_| noise * normal(&mut rng)).collect()
                } else {
                    (0..4).map(|k| if k == 0 { 6.0 } else { 0.0 } + noise * normal(&mut rng)).collect()
                };
                -log_sum_exp(&logits)
            })
            .collect();
        Self { size, smoothed: raw.clone(), raw }
    }

    pub fn smooth(&mut self, kernel_size: usize, sigma: f64) -> Result<(), JsError> {
        let cfg = SmoothingConfig { kernel_size, sigma };
        self.smoothed = gaussian_smooth(&self.raw, self.size, self.size, &cfg).map_err(js_err)?;
        Ok(())
    }

    pub fn raw_rgba(&self) -> Vec<u8> {
        rgba_heat(&self.raw)
    }

    pub fn smoothed_rgba(&self) -> Vec<u8> {
        rgba_heat(&self.smoothed)
    }

    pub fn raw_values(&self) -> Vec<f64> {
        self.raw.clone()
    }

    pub fn smoothed_values(&self) -> Vec<f64> {
        self.smoothed.clone()
    }
}

/// Metrics over Gaussian inlier/outlier score populations.
#[wasm_bindgen]
pub struct MetricsExplorer {
    values: [f64; 4],
    roc: Vec<f64>,
    pr: Vec<f64>,
}

#[wasm_bindgen]
impl MetricsExplorer {
    /// `separation` is the outlier mean in units of the common spread.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, outlier_fraction: f64, separation: f64, seed: u64) -> Result<MetricsExplorer, JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n.max(2);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(outlier_fraction.clamp(0.0, 1.0)) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores = labels.iter().map(|&l| normal(&mut rng) + separation * l as f64).collect();
        let sp = ScoredPixels::new(scores, labels).map_err(js_err)?;
        let values = [
            fpr_at_95tpr(&sp).map_err(js_err)?,
            auprc(&sp).map_err(js_err)?,
            auroc(&sp).map_err(js_err)?,
            f1_star(&sp).map_err(js_err)?,
        ];
        let flat = |pts: Vec<(f64, f64)>| pts.into_iter().flat_map(|(a, b)| [a, b]).collect();
        Ok(Self { values, roc: flat(roc_curve(&sp).map_err(js_err)?), pr: flat(pr_curve(&sp).map_err(js_err)?) })
    }

    /// `[FPR95, AuPRC, AuROC, F1*]`.
    pub fn values(&self) -> Vec<f64> {
        self.values.to_vec()
    }

    /// Interleaved `(fpr, tpr)` points.
    pub fn roc(&self) -> Vec<f64> {
        self.roc.clone()
    }

    /// Interleaved `(recall, precision)` points.
    pub fn pr(&self) -> Vec<f64> {
        self.pr.clone()
    }
}
