//! Independent oracles shared by the integration suites and the acceptance binary.
//! Each check returns `Err(description)` on the first disagreement.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpl_core::metrics::{auprc, auroc, f1_star, fpr_at_95tpr, ScoredPixels};
use rpl_core::nn::ParamSet;
use rpl_core::rpl::{build_rpl, ProjectorKind, RplConfig, RplModule};
use rpl_core::segnet::{build_segnet, ArchConfig, SegNet};
use rpl_core::train::{compute_step, Batch, TrainConfig};
use rpl_core::Tensor;

pub type Check = Result<(), String>;

pub const METRIC_TOL: f64 = 1e-12;
pub const FD_EPS: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this absolute error both sides are treated as zero.
pub const FD_ABS_FLOOR: f64 = 1e-9;

pub fn oracle_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1.0;
            if sp > sn {
                num += 1.0;
            } else if sp == sn {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// `(threshold, tp, fp)` for every distinct score, strictest first, by direct counting.
pub fn oracle_thresholds(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let tp = scores.iter().zip(labels).filter(|(s, &l)| **s >= t && l == 1).count();
            let fp = scores.iter().zip(labels).filter(|(s, &l)| **s >= t && l == 0).count();
            (t, tp, fp)
        })
        .collect()
}

pub fn oracle_auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev = 0.0;
    let mut area = 0.0;
    for (_, tp, fp) in oracle_thresholds(scores, labels) {
        let r = tp as f64 / p;
        if tp + fp > 0 {
            area += (r - prev) * tp as f64 / (tp + fp) as f64;
        }
        prev = r;
    }
    area
}

pub fn oracle_fpr95(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let (_, _, fp) = oracle_thresholds(scores, labels)
        .into_iter()
        .filter(|&(_, tp, _)| tp as f64 / p >= 0.95)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    fp as f64 / n
}

pub fn oracle_f1(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count();
    oracle_thresholds(scores, labels)
        .into_iter()
        .map(|(_, tp, fp)| if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + (p - tp)) as f64 })
        .fold(0.0, f64::max)
}

/// All four metrics against their oracles on one instance.
pub fn metrics_match_oracles(scores: &[f64], labels: &[u8]) -> Check {
    let sp = ScoredPixels::new(scores.to_vec(), labels.to_vec()).map_err(|e| e.to_string())?;
    let pairs = [
        ("auroc", auroc(&sp), oracle_auroc(scores, labels)),
        ("auprc", auprc(&sp), oracle_auprc(scores, labels)),
        ("fpr95", fpr_at_95tpr(&sp), oracle_fpr95(scores, labels)),
        ("f1", f1_star(&sp), oracle_f1(scores, labels)),
    ];
    for (name, got, want) in pairs {
        let got = got.map_err(|e| e.to_string())?;
        if (got - want).abs() >= METRIC_TOL {
            return Err(format!("{name}: {got} vs oracle {want} on scores {scores:?} labels {labels:?}"));
        }
    }
    Ok(())
}

/// Every labelling of N = 2..=12 pixels with at least one of each class,
/// once with distinct and once with heavily tied scores.
pub fn exhaustive_metric_instances() -> Check {
    for n in 2..=12usize {
        let distinct: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let tied: Vec<f64> = (0..n).map(|i| ((i * 7) % 4) as f64).collect();
        for bits in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos == 0 || pos == n {
                continue;
            }
            metrics_match_oracles(&distinct, &labels)?;
            metrics_match_oracles(&tied, &labels)?;
        }
    }
    Ok(())
}

/// `count` random instances; odd instances draw from a handful of levels to force ties.
pub fn random_metric_instances(count: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..count {
        let n = rng.gen_range(2..300);
        let levels = if k % 2 == 0 { 1_000_000 } else { rng.gen_range(2..8) };
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        metrics_match_oracles(&scores, &labels)?;
    }
    Ok(())
}

pub fn fd_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err < FD_ABS_FLOOR || err / analytic.abs().max(numeric.abs()) < FD_REL_TOL
}

pub fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize, scale: f64) -> Tensor {
    let data = (0..n * h * w * c).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(n, h, w, c, data).unwrap()
}

/// A random binary mask with both values present.
pub fn random_mask(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut m: Vec<u8> = (0..len).map(|_| rng.gen_bool(0.3) as u8).collect();
    m[0] = 0;
    m[1] = 1;
    m
}

/// Every coordinate of `grad` against central differences of `f` around `x`.
pub fn tensor_grad_matches(x: &Tensor, grad: &Tensor, f: impl Fn(&Tensor) -> f64) -> Check {
    for i in 0..x.data.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data[i] += FD_EPS;
        m.data[i] -= FD_EPS;
        let numeric = (f(&p) - f(&m)) / (2.0 * FD_EPS);
        if !fd_close(grad.data[i], numeric) {
            return Err(format!("coordinate {i}: analytic {} numeric {numeric}", grad.data[i]));
        }
    }
    Ok(())
}

/// A frozen model, an adapter and an 8x8 batch of four pairs. Biases are
/// lifted off zero so no ReLU sits at its kink, and the head is randomly
/// initialised so gradients reach the main layers.
pub fn small_setup(projector: ProjectorKind) -> (SegNet, RplModule, Batch) {
    let mut seg = build_segnet(&ArchConfig::default()).unwrap();
    seg.visit_mut("", &mut |name, p| {
        if name.ends_with("bias") {
            p.iter_mut().for_each(|v| *v = 0.05);
        }
    });
    seg.freeze();
    let cfg = RplConfig { projector, zero_init_head: false, ..RplConfig::default() };
    let mut rpl = build_rpl(&seg, &cfg).unwrap();
    rpl.visit_mut("", &mut |name, p| {
        if name.ends_with("bias") {
            p.iter_mut().for_each(|v| *v = 0.1);
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 4;
    let oe_images = random_tensor(&mut rng, n, 8, 8, 3, 1.0);
    let out_images = random_tensor(&mut rng, n, 8, 8, 3, 1.0);
    // Mixed masks so every contrastive cell is populated at the 1x1 embedding grid.
    let mut oe_mask = Vec::new();
    let mut out_mask = Vec::new();
    for b in 0..n {
        oe_mask.extend((0..64).map(|i| ((i / 8 + b) % 2) as u8));
        out_mask.extend((0..64).map(|i| ((i % 8 + b) % 2) as u8));
    }
    (seg, rpl, Batch { oe_images, oe_mask, out_images, out_mask })
}

pub fn set_flat(rpl: &mut RplModule, values: &[f64]) {
    let mut at = 0;
    rpl.visit_mut("", &mut |_, p| {
        p.copy_from_slice(&values[at..at + p.len()]);
        at += p.len();
    });
}

/// The composite training objective against central differences: one random
/// direction over all adapter parameters, then the three largest-gradient
/// coordinates of every buffer.
pub fn composite_gradient_matches(cfg: &TrainConfig, projector: ProjectorKind) -> Check {
    let (seg, rpl, batch) = small_setup(projector);
    let out = compute_step(&seg, &rpl, &batch, cfg, 0).map_err(|e| e.to_string())?;
    if !out.report.total.is_finite() {
        return Err("non-finite objective".into());
    }
    if cfg.corocl && out.report.l_corocl <= 0.0 {
        return Err("contrastive term inactive".into());
    }
    let grad = out.grads.flatten();
    let theta = rpl.flatten();
    let loss_at = |v: &[f64]| {
        let mut r = rpl.clone();
        set_flat(&mut r, v);
        compute_step(&seg, &r, &batch, cfg, 0).unwrap().report.total
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dir: Vec<f64> = (0..theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shift = |s: f64| theta.iter().zip(&dir).map(|(t, d)| t + s * d).collect::<Vec<_>>();
    let numeric = (loss_at(&shift(FD_EPS)) - loss_at(&shift(-FD_EPS))) / (2.0 * FD_EPS);
    let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
    if !fd_close(analytic, numeric) {
        return Err(format!("directional: analytic {analytic} numeric {numeric}"));
    }
    let mut offset = 0;
    let mut buffers = Vec::new();
    out.grads.visit("", &mut |name, p| {
        buffers.push((name, offset, p.len()));
        offset += p.len();
    });
    for (name, start, len) in buffers {
        let mut idx: Vec<usize> = (start..start + len).collect();
        idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        for &i in idx.iter().take(3) {
            let (mut p, mut m) = (theta.clone(), theta.clone());
            p[i] += FD_EPS;
            m[i] -= FD_EPS;
            let numeric = (loss_at(&p) - loss_at(&m)) / (2.0 * FD_EPS);
            if !fd_close(grad[i], numeric) {
                return Err(format!("{name}[{}]: analytic {} numeric {numeric}", i - start, grad[i]));
            }
        }
    }
    Ok(())
}

/// One composite step leaves every frozen parameter untouched and produces
/// gradients only under adapter names.
pub fn frozen_parameters_untouched() -> Check {
    let (seg, rpl, batch) = small_setup(ProjectorKind::SingleLayer);
    let before = seg.flatten();
    let checksum = seg.checksum();
    let out = compute_step(&seg, &rpl, &batch, &TrainConfig::default(), 0).map_err(|e| e.to_string())?;
    let mut frozen_names = Vec::new();
    seg.visit("", &mut |n, _| frozen_names.push(n));
    let mut grad_names = Vec::new();
    out.grads.visit("", &mut |n, _| grad_names.push(n));
    if let Some(g) = grad_names.iter().find(|g| frozen_names.contains(g)) {
        return Err(format!("gradient under frozen name {g}"));
    }
    if let Some(g) = grad_names.iter().find(|g| !(g.starts_with("rpl_a.") || g.starts_with("rpl_b.") || g.starts_with("proj."))) {
        return Err(format!("gradient outside adapter groups: {g}"));
    }
    if seg.flatten() != before || seg.checksum() != checksum {
        return Err("frozen parameters changed".into());
    }
    seg.verify_frozen().map_err(|e| e.to_string())
}
