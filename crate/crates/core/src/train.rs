//! Adapter training, evaluation and ablation sweeps.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corocl::{ablation_variants, corocl_loss, downsample_mask, sample_embeddings, SamplingConfig};
use crate::error::{config_err, Error, Result};
use crate::inference::{energy_maps, SmoothingConfig};
use crate::losses::{energy, rpl_loss, LossConfig, LossReport, OutlierObjective};
use crate::metrics::{miou, MetricsReport, ScoredPixels};
use crate::nn::ParamSet;
use crate::optim::{poly_lr, Sgd};
use crate::rpl::{build_rpl, ProjectorKind, RplModule, GROUP_PROJ, GROUP_RPL_B};
use crate::segnet::{argmax_classes, build_segnet, pretrain_segnet, ArchConfig, PretrainConfig, SegNet};
use crate::synthdata::{
    derive_seed, generate_inlier_dataset, generate_outlier_dataset, validation_inliers, validation_oe_set,
    DatasetConfig, InlierSample, OeSample, OeSampler, Split,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Base learning rate of the main layers.
    pub lr: f64,
    /// Learning-rate multiplier for the output head and projector.
    pub head_lr_multiplier: f64,
    /// Learning-rate multiplier for the projector.
    pub projector_lr_multiplier: f64,
    pub poly_power: f64,
    pub momentum: f64,
    /// Rescales the adapter gradient to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: OutlierObjective,
    /// Entropy dis-similarity term in the inlier loss.
    pub dissimilarity: bool,
    pub corocl: bool,
    pub corocl_weight: f64,
    /// Train the adapter output directly instead of the residual sum.
    pub direct: bool,
    pub sampling: SamplingConfig,
    pub loss: LossConfig,
    pub smoothing: SmoothingConfig,
    pub rpl: crate::rpl::RplConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            head_lr_multiplier: 10.0,
            projector_lr_multiplier: 10.0,
            poly_power: 0.9,
            momentum: 0.9,
            grad_clip: 0.0,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            objective: OutlierObjective::PositiveEnergy,
            dissimilarity: true,
            corocl: true,
            corocl_weight: 1.0,
            direct: false,
            sampling: SamplingConfig { budget: 64, ..Default::default() },
            loss: LossConfig::default(),
            smoothing: SmoothingConfig::default(),
            rpl: crate::rpl::RplConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.head_lr_multiplier > 0.0) {
            return config_err("head_lr_multiplier must be positive");
        }
        if !(self.projector_lr_multiplier > 0.0) {
            return config_err("projector_lr_multiplier must be positive");
        }
        if self.steps == 0 {
            return config_err("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.grad_clip >= 0.0) {
            return config_err("grad_clip must be nonnegative");
        }
        if !(self.corocl_weight >= 0.0) {
            return config_err("corocl_weight must be nonnegative");
        }
        self.sampling.validate()?;
        self.loss.validate()?;
        self.smoothing.validate()
    }

    /// Learning rate of the main layers at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        poly_lr(self.lr, step, self.steps, self.poly_power)
    }

    fn lr_scale(&self, name: &str) -> f64 {
        if name.starts_with(GROUP_RPL_B) {
            self.head_lr_multiplier
        } else if name.starts_with(GROUP_PROJ) {
            self.projector_lr_multiplier
        } else {
            1.0
        }
    }
}

/// One training batch: OE composites and the vanilla outlier images they
/// were built from, each with its binary outlier mask.
#[derive(Clone, Debug)]
pub struct Batch {
    pub oe_images: Tensor,
    pub oe_mask: Vec<u8>,
    pub out_images: Tensor,
    pub out_mask: Vec<u8>,
}

impl Batch {
    pub fn draw(sampler: &OeSampler<'_>, seed: u64, step: usize, size: usize) -> Result<Self> {
        let p = sampler.cfg.outlier_label;
        let mut oe = Vec::with_capacity(size);
        let mut out = Vec::with_capacity(size);
        let (mut oe_mask, mut out_mask) = (Vec::new(), Vec::new());
        for b in 0..size {
            let pair = sampler.draw(seed, (step * size + b) as u64)?;
            oe.push(pair.oe.image.to_tensor());
            oe_mask.extend_from_slice(&pair.oe.mask.data);
            out.push(pair.vanilla.image.to_tensor());
            out_mask.extend(pair.vanilla.label.data.iter().map(|&l| (l == p) as u8));
        }
        Ok(Self { oe_images: Tensor::stack(&oe)?, oe_mask, out_images: Tensor::stack(&out)?, out_mask })
    }
}

/// Objective value and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: RplModule,
}

/// Evaluates `l_rpl + w * l_corocl` and its gradient w.r.t. the adapter.
/// The frozen model is only read.
pub fn compute_step(seg: &SegNet, rpl: &RplModule, batch: &Batch, cfg: &TrainConfig, step: usize) -> Result<StepOutput> {
    let seg_cache = seg.forward(&batch.oe_images)?;
    let z_oe = seg_cache.z().clone();
    let main_oe = rpl.main.forward(&z_oe)?;
    let res = if cfg.direct {
        rpl.direct(seg, &seg_cache, main_oe)?
    } else {
        rpl.residual(seg, &seg_cache, main_oe)?
    };
    let l = rpl_loss(&res.logits, &seg_cache.logits, &batch.oe_mask, &cfg.loss, cfg.objective, cfg.dissimilarity)?;
    let mut grads = rpl.zeros_like();
    let mut d_feat_oe = rpl.residual_backward(seg, &res, &l.grad, &mut grads)?;
    let mut report = LossReport {
        step,
        lr: cfg.lr_at(step),
        l_in: l.l_in,
        l_out: l.l_out,
        l_rpl: l.l_rpl,
        inlier_pixels: l.inlier_pixels,
        outlier_pixels: l.outlier_pixels,
        ..Default::default()
    };
    if cfg.corocl && cfg.corocl_weight > 0.0 {
        let z_out = seg.encode(&batch.out_images)?.pop().expect("encoder has stages");
        let main_out = rpl.main.forward(&z_out)?;
        let n = batch.oe_images.n;
        let feats = Tensor::stack(&[res.main.out.clone(), main_out.out.clone()])?;
        let proj = rpl.project_embeddings(&feats)?;
        let (emb_oe, emb_out) = proj.embeddings.split_batch(n)?;
        let (h, w) = (batch.oe_images.h, batch.oe_images.w);
        let mask_oe = downsample_mask(&batch.oe_mask, n, h, w, emb_oe.h, emb_oe.w);
        let mask_out = downsample_mask(&batch.out_mask, batch.out_images.n, h, w, emb_out.h, emb_out.w);
        let sampling = SamplingConfig { seed: derive_seed(cfg.sampling.seed ^ cfg.seed, 0x636c, step as u64), ..cfg.sampling.clone() };
        let sampled = sample_embeddings(&emb_oe, &mask_oe, &emb_out, &mask_out, &sampling)?;
        let c = corocl_loss(&sampled.anchors, &sampled.contrastives, cfg.loss.tau)?;
        report.l_corocl = c.value;
        report.cell_sizes = sampled.cell_sizes.to_vec();
        let mut d_oe = Tensor::zeros(emb_oe.n, emb_oe.h, emb_oe.w, emb_oe.c);
        let mut d_out = Tensor::zeros(emb_out.n, emb_out.h, emb_out.w, emb_out.c);
        sampled.anchors.scatter(&c.d_anchors, &mut d_oe, &mut d_out);
        sampled.contrastives.scatter(&c.d_contrastives, &mut d_oe, &mut d_out);
        let mut d_emb = Tensor::stack(&[d_oe, d_out])?;
        d_emb.scale(cfg.corocl_weight);
        let d_feats = rpl.project_backward(&proj, &d_emb, &mut grads)?;
        let (d_proj_oe, d_proj_out) = d_feats.split_batch(n)?;
        d_feat_oe.add_assign(&d_proj_oe)?;
        rpl.main_backward(&z_out, &main_out, &d_proj_out, &mut grads)?;
    }
    rpl.main_backward(&z_oe, &res.main, &d_feat_oe, &mut grads)?;
    report.total = report.l_rpl + cfg.corocl_weight * report.l_corocl;
    Ok(StepOutput { report, grads })
}

/// Mean/spread of raw energies split by ground truth, with the
/// standardised mean difference `(mu_out - mu_in) / sqrt((s_in^2 + s_out^2) / 2)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub inlier_mean: f64,
    pub inlier_std: f64,
    pub outlier_mean: f64,
    pub outlier_std: f64,
    pub separation: f64,
}

impl EnergyStats {
    pub fn from_scores(sp: &ScoredPixels) -> Self {
        let stats = |label: u8| {
            let v: Vec<f64> = sp.scores.iter().zip(&sp.labels).filter(|(_, &l)| l == label).map(|(s, _)| *s).collect();
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (im, is) = stats(0);
        let (om, os) = stats(1);
        let pooled = ((is * is + os * os) / 2.0).sqrt();
        let separation = if pooled > 0.0 { (om - im) / pooled } else { 0.0 };
        Self { inlier_mean: im, inlier_std: is, outlier_mean: om, outlier_std: os, separation }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Anomaly metrics on the held-out OE split (smoothed energy scores),
    /// with the closed-set mIoU on the held-out inlier split.
    pub metrics: MetricsReport,
    /// Raw (unsmoothed) energy statistics on the OE split.
    pub energy: EnergyStats,
    /// SHA-256 over every closed-set class map produced.
    pub class_map_digest: String,
}

/// Held-out evaluation data, generated once per dataset configuration.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub oe: Vec<OeSample>,
    pub inliers: Vec<InlierSample>,
}

impl EvalData {
    pub fn new(cfg: &DatasetConfig) -> Result<Self> {
        Ok(Self { oe: validation_oe_set(cfg)?, inliers: validation_inliers(cfg)? })
    }
}

const EVAL_BATCH: usize = 8;

/// Raw and smoothed energy scores plus labels over the OE split.
pub fn score_split(seg: &SegNet, rpl: &RplModule, oe: &[OeSample], smoothing: &SmoothingConfig, direct: bool) -> Result<(ScoredPixels, ScoredPixels)> {
    if oe.is_empty() {
        return config_err("evaluation split is empty");
    }
    let (mut raw, mut smooth) = (ScoredPixels::default(), ScoredPixels::default());
    for chunk in oe.chunks(EVAL_BATCH) {
        let images = Tensor::stack(&chunk.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>())?;
        let fwd = if direct { rpl.forward_direct(seg, &images)? } else { rpl.forward_residual(seg, &images)? };
        let maps = energy_maps(fwd.logits_hat(), smoothing)?;
        for (map, s) in maps.iter().zip(chunk) {
            raw.extend(&ScoredPixels::new(map.raw.clone(), s.mask.data.clone())?);
            smooth.extend(&ScoredPixels::new(map.smoothed.clone(), s.mask.data.clone())?);
        }
    }
    Ok((raw, smooth))
}

/// Closed-set class maps of the frozen path on inlier scenes.
pub fn closed_set_maps(seg: &SegNet, inliers: &[InlierSample]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(inliers.len());
    for chunk in inliers.chunks(EVAL_BATCH) {
        let images = Tensor::stack(&chunk.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>())?;
        let classes = argmax_classes(&seg.forward(&images)?.logits);
        out.extend(classes.chunks_exact(images.h * images.w).map(<[u8]>::to_vec));
    }
    Ok(out)
}

pub fn closed_set_miou(seg: &SegNet, inliers: &[InlierSample]) -> Result<f64> {
    let maps = closed_set_maps(seg, inliers)?;
    let pred: Vec<u8> = maps.concat();
    let gt: Vec<u8> = inliers.iter().flat_map(|s| s.label.data.iter().copied()).collect();
    miou(&pred, &gt, seg.num_classes(), None)
}

pub fn evaluate(seg: &SegNet, rpl: &RplModule, data: &EvalData, smoothing: &SmoothingConfig, direct: bool) -> Result<EvalReport> {
    if data.inliers.is_empty() {
        return config_err("evaluation split is empty");
    }
    let (raw, smooth) = score_split(seg, rpl, &data.oe, smoothing, direct)?;
    let mut metrics = MetricsReport::from_scores(&smooth)?;
    let maps = closed_set_maps(seg, &data.inliers)?;
    let gt: Vec<u8> = data.inliers.iter().flat_map(|s| s.label.data.iter().copied()).collect();
    metrics.miou = Some(miou(&maps.concat(), &gt, seg.num_classes(), None)?);
    let mut h = Sha256::new();
    for m in &maps {
        h.update(m);
    }
    let class_map_digest = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(EvalReport { metrics, energy: EnergyStats::from_scores(&raw), class_map_digest })
}

/// Everything needed to audit and replay one adapter training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub dataset: DatasetConfig,
    pub segnet_checksum: String,
    pub losses: Vec<LossReport>,
    pub eval: Option<EvalReport>,
    pub crate_version: String,
}

impl RunRecord {
    /// The per-step log, one JSON object per line.
    pub fn loss_log(&self) -> String {
        self.losses.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// Observes training progress; called after every step.
pub trait Progress {
    fn step(&mut self, report: &LossReport);
}

impl Progress for () {
    fn step(&mut self, _: &LossReport) {}
}

impl<F: FnMut(&LossReport)> Progress for F {
    fn step(&mut self, report: &LossReport) {
        self(report)
    }
}

/// Trains an adapter against a frozen model. The frozen checksum is
/// verified before the first and after every step.
pub fn train_rpl(
    seg: &SegNet,
    dataset: &DatasetConfig,
    cfg: &TrainConfig,
    progress: &mut dyn Progress,
) -> Result<(RunRecord, RplModule)> {
    cfg.validate()?;
    dataset.validate()?;
    seg.verify_frozen()?;
    let checksum = seg.frozen_checksum.clone().expect("verified");
    let inliers = generate_inlier_dataset(dataset, Split::Train)?;
    let outliers = generate_outlier_dataset(dataset, Split::Train)?;
    let sampler = OeSampler::new(dataset, &inliers, &outliers)?;
    let rpl_cfg = crate::rpl::RplConfig { seed: derive_seed(cfg.rpl.seed, 0x72706c, cfg.seed), ..cfg.rpl.clone() };
    let mut rpl = build_rpl(seg, &rpl_cfg)?;
    let needs_projector = cfg.corocl && cfg.corocl_weight > 0.0;
    if !needs_projector {
        rpl.discard_projector();
    }
    let mut opt = Sgd::new(cfg.momentum);
    let data_seed = derive_seed(dataset.seed, 0x7472, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = Batch::draw(&sampler, data_seed, step, cfg.batch_size)?;
        let out = compute_step(seg, &rpl, &batch, cfg, step)?;
        if !out.report.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}: {}", out.report.to_json_line())));
        }
        let mut grads = out.grads;
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut rpl, &grads, out.report.lr, &|name| cfg.lr_scale(name));
        seg.verify_frozen()?;
        progress.step(&out.report);
        losses.push(out.report);
    }
    let record = RunRecord {
        config: cfg.clone(),
        dataset: dataset.clone(),
        segnet_checksum: checksum,
        losses,
        eval: None,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok((record, rpl))
}

/// Scales `grads` so its global L2 norm is at most `max_norm` (0 disables).
pub fn clip_global_norm(grads: &mut RplModule, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0;
    grads.visit("", &mut |_, g| sq += g.iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        grads.visit_mut("", &mut |_, g| g.iter_mut().for_each(|v| *v *= f));
    }
}

/// Closed-set pre-training on the inlier training split.
pub fn pretrain(dataset: &DatasetConfig, arch: &ArchConfig, cfg: &PretrainConfig) -> Result<SegNet> {
    dataset.validate()?;
    let train = generate_inlier_dataset(dataset, Split::Train)?;
    let arch = ArchConfig { num_classes: dataset.num_classes, ..arch.clone() };
    Ok(pretrain_segnet(build_segnet(&arch)?, &train, cfg)?.model)
}

/// One row configuration of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub config: TrainConfig,
    /// `false` evaluates a freshly built adapter without training.
    pub train: bool,
}

fn arm(name: &str, config: TrainConfig) -> Arm {
    Arm { name: name.to_string(), config, train: true }
}

/// The squared hinge's gradient grows with the margin violation; at the
/// shared learning rate it diverges within the first hundred steps.
pub const HINGE_LR_SCALE: f64 = 0.1;

/// Loss-component ablation rows: untrained baseline, squared-hinge energy,
/// positive energy, +dis-similarity, +contrastive, and direct output.
/// The hinge row runs at `HINGE_LR_SCALE` times the base learning rate.
pub fn table5_arms(base: &TrainConfig) -> Vec<Arm> {
    let plain = TrainConfig { dissimilarity: false, corocl: false, direct: false, ..base.clone() };
    vec![
        Arm { name: "untrained".into(), config: plain.clone(), train: false },
        arm("hinge", TrainConfig { objective: OutlierObjective::HingeEnergy, lr: base.lr * HINGE_LR_SCALE, ..plain.clone() }),
        arm("pe", TrainConfig { objective: OutlierObjective::PositiveEnergy, ..plain.clone() }),
        arm("pe+ds", TrainConfig { dissimilarity: true, ..plain.clone() }),
        arm("pe+ds+corocl", TrainConfig { dissimilarity: true, corocl: true, ..plain.clone() }),
        arm("direct", TrainConfig { dissimilarity: true, corocl: true, direct: true, ..plain }),
    ]
}

/// Anchor/contrastive source variants, full objective.
pub fn sampling_arms(base: &TrainConfig) -> Vec<Arm> {
    ablation_variants(&base.sampling)
        .into_iter()
        .map(|(name, sampling)| arm(&name, TrainConfig { corocl: true, sampling, ..base.clone() }))
        .collect()
}

/// Embedding-depth sweep.
pub fn embed_dim_arms(base: &TrainConfig, dims: &[usize]) -> Vec<Arm> {
    dims.iter()
        .map(|&d| {
            let rpl = crate::rpl::RplConfig { embed_dim: Some(d), ..base.rpl.clone() };
            arm(&format!("R={d}"), TrainConfig { corocl: true, rpl, ..base.clone() })
        })
        .collect()
}

/// Projector architecture comparison.
pub fn projector_arms(base: &TrainConfig) -> Vec<Arm> {
    [
        ("single-layer", ProjectorKind::SingleLayer),
        ("two-layer", ProjectorKind::TwoLayer { batch_norm: false }),
        ("two-layer+bn", ProjectorKind::TwoLayer { batch_norm: true }),
    ]
    .into_iter()
    .map(|(name, projector)| {
        let rpl = crate::rpl::RplConfig { projector, ..base.rpl.clone() };
        arm(name, TrainConfig { corocl: true, rpl, ..base.clone() })
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub eval: Option<EvalReport>,
    /// Set when the run failed; the suite continues.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Median of `f` over the successful seeds of `arm`.
    pub fn median(&self, arm: &str, f: impl Fn(&EvalReport) -> f64) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.arm == arm).filter_map(|r| r.eval.as_ref()).map(&f).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
    }

    /// Plain-text table in row order: FPR95, AuPRC, AuROC, F1*, separation.
    pub fn render(&self) -> String {
        let mut s = format!("{:<36} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "arm", "seed", "FPR95", "AuPRC", "AuROC", "F1*", "sep");
        for r in &self.rows {
            match (&r.eval, &r.error) {
                (Some(e), _) => s.push_str(&format!(
                    "{:<36} {:>5} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.3}\n",
                    r.arm,
                    r.seed,
                    100.0 * e.metrics.fpr95,
                    100.0 * e.metrics.auprc,
                    100.0 * e.metrics.auroc,
                    100.0 * e.metrics.f1_star,
                    e.energy.separation
                )),
                (None, err) => s.push_str(&format!("{:<36} {:>5} failed: {}\n", r.arm, r.seed, err.as_deref().unwrap_or("?"))),
            }
        }
        s
    }
}

/// Runs one arm for one seed: trains (unless the arm is a baseline) and
/// evaluates.
pub fn run_arm(seg: &SegNet, dataset: &DatasetConfig, data: &EvalData, arm: &Arm, seed: u64) -> Result<EvalReport> {
    let cfg = TrainConfig { seed, ..arm.config.clone() };
    let rpl = if arm.train {
        train_rpl(seg, dataset, &cfg, &mut ())?.1
    } else {
        cfg.validate()?;
        build_rpl(seg, &crate::rpl::RplConfig { seed: derive_seed(cfg.rpl.seed, 0x72706c, seed), ..cfg.rpl.clone() })?
    };
    evaluate(seg, &rpl, data, &cfg.smoothing, cfg.direct)
}

/// Every arm under every seed, with shared seeds across arms.
pub fn ablation_suite(
    seg: &SegNet,
    dataset: &DatasetConfig,
    data: &EvalData,
    arms: &[Arm],
    seeds: &[u64],
    progress: &mut dyn FnMut(&AblationRow),
) -> AblationTable {
    let mut table = AblationTable::default();
    for a in arms {
        for &seed in seeds {
            let row = match run_arm(seg, dataset, data, a, seed) {
                Ok(e) => AblationRow { arm: a.name.clone(), seed, eval: Some(e), error: None },
                Err(e) => AblationRow { arm: a.name.clone(), seed, eval: None, error: Some(e.to_string()) },
            };
            progress(&row);
            table.rows.push(row);
        }
    }
    table
}

/// Fixed-width energy histogram for inlier and outlier pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub inlier: Vec<usize>,
    pub outlier: Vec<usize>,
}

impl Histogram {
    /// Values outside `[lo, hi]` are clamped into the edge bins.
    pub fn new(sp: &ScoredPixels, bins: usize, lo: f64, hi: f64) -> Self {
        let mut h = Self { lo, hi, inlier: vec![0; bins.max(1)], outlier: vec![0; bins.max(1)] };
        let n = h.inlier.len();
        for (&s, &l) in sp.scores.iter().zip(&sp.labels) {
            let t = if hi > lo { (s - lo) / (hi - lo) } else { 0.0 };
            let idx = ((t * n as f64).floor().max(0.0) as usize).min(n - 1);
            if l == 1 {
                h.outlier[idx] += 1;
            } else {
                h.inlier[idx] += 1;
            }
        }
        h
    }

    /// Range spanning all scores.
    pub fn auto(sp: &ScoredPixels, bins: usize) -> Self {
        let lo = sp.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sp.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(sp, bins, lo.min(hi), hi.max(lo))
    }

    pub fn total(&self) -> usize {
        self.inlier.iter().sum::<usize>() + self.outlier.iter().sum::<usize>()
    }
}

/// Raw energy scores of the frozen model alone, for reference.
pub fn frozen_energy(seg: &SegNet, images: &Tensor) -> Result<Vec<f64>> {
    energy(&seg.forward(images)?.logits)
}
