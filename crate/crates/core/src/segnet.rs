//! The closed-set segmentation network.
//!
//! Layout: a strided convolutional encoder, a multi-dilation feature block
//! (parallel dilated convolutions, concatenated and fused), a skip projection
//! from an intermediate encoder stage, and a pointwise classification head
//! applied to `[upsampled features ++ skip]`. Logits are bilinearly upsampled
//! to the input resolution.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, Error, Result};
use crate::losses::cross_entropy;
use crate::nn::{join, relu, relu_backward, upsample_bilinear, upsample_bilinear_backward, Conv2d, ParamSet};
use crate::optim::Adam;
use crate::synthdata::{augment_crop, derive_seed, InlierSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of each stride-2 encoder stage; the last is `Z`.
    pub encoder_channels: Vec<usize>,
    /// Encoder stage whose output feeds the skip projection.
    pub skip_stage: usize,
    pub dilations: Vec<usize>,
    pub branch_channels: usize,
    /// Feature-block output width `K`.
    pub feature_channels: usize,
    pub skip_channels: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 4,
            encoder_channels: vec![16, 32, 64],
            skip_stage: 1,
            dilations: vec![1, 2, 4],
            branch_channels: 16,
            feature_channels: 32,
            skip_channels: 16,
            head_hidden: 32,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("branch_channels", self.branch_channels),
            ("feature_channels", self.feature_channels),
            ("skip_channels", self.skip_channels),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{name} must be positive"));
        }
        if self.encoder_channels.len() < 2 || self.encoder_channels.contains(&0) {
            return config_err("encoder needs at least two stages with positive widths");
        }
        if self.skip_stage + 1 >= self.encoder_channels.len() {
            return config_err("skip stage must precede the last encoder stage");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return config_err("feature block needs at least one positive dilation rate");
        }
        Ok(())
    }

    /// Width of the head input: `K + skip`.
    pub fn head_input_channels(&self) -> usize {
        self.feature_channels + self.skip_channels
    }

    pub fn z_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }
}

/// Parallel dilated 3x3 convolutions, concatenated, fused by a 1x1
/// convolution. Every conv is followed by ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

#[derive(Clone, Debug)]
pub struct FeatureBlockCache {
    pub branch_out: Vec<Tensor>,
    pub concat: Tensor,
    pub out: Tensor,
}

impl FeatureBlock {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, branch_ch: usize, out_ch: usize, dilations: &[usize], rng: &mut R) -> Self {
        let branches = dilations.iter().map(|&d| Conv2d::new(in_ch, branch_ch, 3, 1, d, rng)).collect();
        let fuse = Conv2d::pointwise(branch_ch * dilations.len(), out_ch, rng);
        Self { branches, fuse }
    }

    pub fn zeros_like(&self) -> Self {
        Self { branches: self.branches.iter().map(Conv2d::zeros_like).collect(), fuse: self.fuse.zeros_like() }
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.out_ch
    }

    pub fn forward(&self, z: &Tensor) -> Result<FeatureBlockCache> {
        let branch_out = self
            .branches
            .iter()
            .map(|b| b.forward(z).map(relu))
            .collect::<Result<Vec<_>>>()?;
        let mut concat = branch_out[0].clone();
        for b in &branch_out[1..] {
            concat = Tensor::concat_channels(&concat, b)?;
        }
        let out = relu(self.fuse.forward(&concat)?);
        Ok(FeatureBlockCache { branch_out, concat, out })
    }

    pub fn backward(
        &self,
        z: &Tensor,
        cache: &FeatureBlockCache,
        dout: &Tensor,
        mut grad: Option<&mut FeatureBlock>,
        want_dz: bool,
    ) -> Result<Option<Tensor>> {
        let d_pre = relu_backward(&cache.out, dout.clone());
        let d_concat = self
            .fuse
            .backward(&cache.concat, &d_pre, grad.as_deref_mut().map(|g| &mut g.fuse), true)?
            .expect("requested");
        let mut dz: Option<Tensor> = None;
        let mut rest = d_concat;
        for (i, branch) in self.branches.iter().enumerate() {
            let (d_branch, tail) = rest.split_channels(branch.out_ch)?;
            rest = tail;
            let d_branch = relu_backward(&cache.branch_out[i], d_branch);
            let g = grad.as_deref_mut().map(|g| &mut g.branches[i]);
            if let Some(d) = branch.backward(z, &d_branch, g, want_dz)? {
                match dz.as_mut() {
                    Some(acc) => acc.add_assign(&d)?,
                    None => dz = Some(d),
                }
            }
        }
        Ok(dz)
    }
}

impl ParamSet for FeatureBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{i}")), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }

    fn visit_shapes(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit_shapes(&join(prefix, &format!("branch{i}")), f);
        }
        self.fuse.visit_shapes(&join(prefix, "fuse"), f);
    }
}

/// Pointwise classification head: 1x1 conv, ReLU, 1x1 conv to `C` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHead {
    pub hidden: Conv2d,
    pub classifier: Conv2d,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    pub input: Tensor,
    pub hidden: Tensor,
    pub logits: Tensor,
}

impl SegHead {
    pub fn forward(&self, input: Tensor) -> Result<HeadCache> {
        let hidden = relu(self.hidden.forward(&input)?);
        let logits = self.classifier.forward(&hidden)?;
        Ok(HeadCache { input, hidden, logits })
    }

    /// Returns the gradient w.r.t. the head input.
    pub fn backward(&self, cache: &HeadCache, dlogits: &Tensor, mut grad: Option<&mut SegHead>) -> Result<Tensor> {
        let dh = self
            .classifier
            .backward(&cache.hidden, dlogits, grad.as_deref_mut().map(|g| &mut g.classifier), true)?
            .expect("requested");
        let dh = relu_backward(&cache.hidden, dh);
        Ok(self
            .hidden
            .backward(&cache.input, &dh, grad.map(|g| &mut g.hidden), true)?
            .expect("requested"))
    }
}

impl ParamSet for SegHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }

    fn visit_shapes(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>)) {
        self.hidden.visit_shapes(&join(prefix, "hidden"), f);
        self.classifier.visit_shapes(&join(prefix, "classifier"), f);
    }
}

/// Parameter groups of the closed-set model.
pub const GROUP_FCN: &str = "fcn";
pub const GROUP_ASPP: &str = "aspp";
pub const GROUP_SEG: &str = "seg";

/// Closed-set segmentation parameters, partitioned into the encoder
/// (`fcn`), the feature block (`aspp`) and the decoder/head (`seg`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNet {
    pub arch: ArchConfig,
    pub encoder: Vec<Conv2d>,
    pub aspp: FeatureBlock,
    pub skip: Conv2d,
    pub head: SegHead,
    /// Set by [`SegNet::freeze`]; checked throughout adapter training.
    pub frozen_checksum: Option<String>,
}

/// Everything the residual adapter needs from one closed-set forward pass.
#[derive(Clone, Debug)]
pub struct SegForwardCache {
    pub input: Tensor,
    /// Post-ReLU output of each encoder stage; the last one is `z`.
    pub stages: Vec<Tensor>,
    pub aspp: FeatureBlockCache,
    pub skip: Tensor,
    /// `[upsample(aspp) ++ skip]`, the head input of the closed-set path.
    pub head_input: Tensor,
    pub head: HeadCache,
    /// Closed-set logits at input resolution.
    pub logits: Tensor,
}

impl SegForwardCache {
    pub fn z(&self) -> &Tensor {
        self.stages.last().expect("encoder has stages")
    }
}

pub fn build_segnet(arch: &ArchConfig) -> Result<SegNet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
    let mut encoder = Vec::with_capacity(arch.encoder_channels.len());
    let mut prev = arch.in_channels;
    for &ch in &arch.encoder_channels {
        encoder.push(Conv2d::new(prev, ch, 3, 2, 1, &mut rng));
        prev = ch;
    }
    let aspp = FeatureBlock::new(prev, arch.branch_channels, arch.feature_channels, &arch.dilations, &mut rng);
    let skip = Conv2d::pointwise(arch.encoder_channels[arch.skip_stage], arch.skip_channels, &mut rng);
    let head = SegHead {
        hidden: Conv2d::pointwise(arch.head_input_channels(), arch.head_hidden, &mut rng),
        classifier: Conv2d::pointwise(arch.head_hidden, arch.num_classes, &mut rng),
    };
    Ok(SegNet { arch: arch.clone(), encoder, aspp, skip, head, frozen_checksum: None })
}

impl SegNet {
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            encoder: self.encoder.iter().map(Conv2d::zeros_like).collect(),
            aspp: self.aspp.zeros_like(),
            skip: self.skip.zeros_like(),
            head: SegHead { hidden: self.head.hidden.zeros_like(), classifier: self.head.classifier.zeros_like() },
            frozen_checksum: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Encoder stages only.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        if image.c != self.arch.in_channels {
            return shape_err(format!("expected {} input channels, got {}", self.arch.in_channels, image.c));
        }
        let mut stages: Vec<Tensor> = Vec::with_capacity(self.encoder.len());
        for conv in &self.encoder {
            let x = stages.last().unwrap_or(image);
            stages.push(relu(conv.forward(x)?));
        }
        Ok(stages)
    }

    /// `[upsample(features) ++ relu(skip(stage))]`.
    pub fn decoder_input(&self, features: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = upsample_bilinear(features, skip.h, skip.w);
        Tensor::concat_channels(&up, skip)
    }

    /// The closed-set forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<SegForwardCache> {
        let stages = self.encode(image)?;
        let z = stages.last().expect("nonempty");
        let aspp = self.aspp.forward(z)?;
        let skip = relu(self.skip.forward(&stages[self.arch.skip_stage])?);
        let head_input = self.decoder_input(&aspp.out, &skip)?;
        let head = self.head.forward(head_input.clone())?;
        let logits = upsample_bilinear(&head.logits, image.h, image.w);
        Ok(SegForwardCache { input: image.clone(), stages, aspp, skip, head_input, head, logits })
    }

    /// Full backward pass, used only for closed-set pre-training.
    pub fn backward(&self, cache: &SegForwardCache, dlogits: &Tensor, grad: &mut SegNet) -> Result<()> {
        let dlow = upsample_bilinear_backward(dlogits, cache.head.logits.h, cache.head.logits.w);
        let dh = self.head.backward(&cache.head, &dlow, Some(&mut grad.head))?;
        let (d_up, d_skip) = dh.split_channels(self.arch.feature_channels)?;
        let z = cache.z();
        let d_feat = upsample_bilinear_backward(&d_up, z.h, z.w);
        let mut dz = self
            .aspp
            .backward(z, &cache.aspp, &d_feat, Some(&mut grad.aspp), true)?
            .expect("requested");
        let d_skip = relu_backward(&cache.skip, d_skip);
        let skip_in = &cache.stages[self.arch.skip_stage];
        let d_skip_stage = self.skip.backward(skip_in, &d_skip, Some(&mut grad.skip), true)?.expect("requested");
        for i in (0..self.encoder.len()).rev() {
            if i == self.arch.skip_stage {
                dz.add_assign(&d_skip_stage)?;
            }
            let d_pre = relu_backward(&cache.stages[i], dz);
            let input = if i == 0 { &cache.input } else { &cache.stages[i - 1] };
            let want = i > 0;
            match self.encoder[i].backward(input, &d_pre, Some(&mut grad.encoder[i]), want)? {
                Some(d) => dz = d,
                None => break,
            }
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit("", &mut |name, values| {
            hasher.update(name.as_bytes());
            hasher.update((values.len() as u64).to_le_bytes());
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        });
        hex(&hasher.finalize())
    }

    /// Records the parameter checksum. The model is treated as immutable
    /// from here on.
    pub fn freeze(&mut self) {
        self.frozen_checksum = Some(self.checksum());
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_checksum.is_some()
    }

    /// Fails with [`Error::Invariant`] if the parameters no longer match the
    /// recorded checksum.
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_checksum {
            None => Err(Error::Invariant("segmentation model was never frozen".into())),
            Some(expected) => {
                let actual = self.checksum();
                if &actual == expected {
                    Ok(())
                } else {
                    Err(Error::Invariant(format!("frozen checksum drift: {expected} -> {actual}")))
                }
            }
        }
    }

    /// Parameter group tag for a parameter name.
    pub fn group_of(name: &str) -> &'static str {
        match name.split('.').next() {
            Some(GROUP_FCN) => GROUP_FCN,
            Some(GROUP_ASPP) => GROUP_ASPP,
            _ => GROUP_SEG,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ParamSet for SegNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        for (i, c) in self.encoder.iter().enumerate() {
            c.visit(&join(prefix, &format!("{GROUP_FCN}.conv{i}")), f);
        }
        self.aspp.visit(&join(prefix, GROUP_ASPP), f);
        self.skip.visit(&join(prefix, &format!("{GROUP_SEG}.skip")), f);
        self.head.visit(&join(prefix, GROUP_SEG), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, c) in self.encoder.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("{GROUP_FCN}.conv{i}")), f);
        }
        self.aspp.visit_mut(&join(prefix, GROUP_ASPP), f);
        self.skip.visit_mut(&join(prefix, &format!("{GROUP_SEG}.skip")), f);
        self.head.visit_mut(&join(prefix, GROUP_SEG), f);
    }

    fn visit_shapes(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>)) {
        for (i, c) in self.encoder.iter().enumerate() {
            c.visit_shapes(&join(prefix, &format!("{GROUP_FCN}.conv{i}")), f);
        }
        self.aspp.visit_shapes(&join(prefix, GROUP_ASPP), f);
        self.skip.visit_shapes(&join(prefix, &format!("{GROUP_SEG}.skip")), f);
        self.head.visit_shapes(&join(prefix, GROUP_SEG), f);
    }
}

/// Per-pixel argmax as 1-based class indices.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    logits
        .rows()
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            (best + 1) as u8
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1200, batch_size: 8, lr: 3e-3, crop_size: 64, seed: 0 }
    }
}

/// Result of closed-set pre-training.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: SegNet,
    pub losses: Vec<f64>,
}

/// Cross-entropy training of the closed-set model on inlier scenes. The
/// returned model is frozen (its checksum recorded).
pub fn pretrain_segnet(mut model: SegNet, dataset: &[InlierSample], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if cfg.steps > 0 && dataset.is_empty() {
        return config_err("pre-training needs a nonempty dataset");
    }
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return config_err("batch_size and lr must be positive");
    }
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7365_67, step as u64));
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size * cfg.crop_size * cfg.crop_size);
        for _ in 0..cfg.batch_size {
            let sample = dataset.choose(&mut rng).expect("nonempty");
            let (crop, _) = augment_crop(sample, cfg.crop_size, rng.gen())?;
            images.push(crop.image.to_tensor());
            targets.extend(crop.label.data.iter().map(|&l| l as usize - 1));
        }
        let batch = Tensor::stack(&images)?;
        let cache = model.forward(&batch)?;
        let ce = cross_entropy(&cache.logits, &targets)?;
        if !ce.value.is_finite() {
            return Err(Error::Training(format!("closed-set loss diverged at step {step}")));
        }
        losses.push(ce.value);
        let mut grad = model.zeros_like();
        model.backward(&cache, &ce.grad, &mut grad)?;
        let lr = crate::optim::poly_lr(cfg.lr, step, cfg.steps, 0.9);
        opt.step(&mut model, &grad, lr);
    }
    model.freeze();
    Ok(PretrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_input_gives_finite_full_resolution_logits() {
        let net = build_segnet(&ArchConfig::default()).unwrap();
        let cache = net.forward(&Tensor::zeros(1, 64, 64, 3)).unwrap();
        assert_eq!(cache.logits.shape(), [1, 64, 64, 4]);
        assert!(cache.logits.is_finite());
        assert_eq!(cache.z().shape(), [1, 8, 8, 64]);
        assert_eq!(cache.head_input.shape(), [1, 16, 16, 48]);
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_segnet(&ArchConfig::default()).unwrap();
        let b = build_segnet(&ArchConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = build_segnet(&ArchConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn inconsistent_plans_fail_to_build() {
        for arch in [
            ArchConfig { dilations: vec![], ..Default::default() },
            ArchConfig { encoder_channels: vec![16], ..Default::default() },
            ArchConfig { skip_stage: 2, ..Default::default() },
            ArchConfig { feature_channels: 0, ..Default::default() },
        ] {
            assert!(matches!(build_segnet(&arch), Err(Error::Config(_))));
        }
    }

    #[test]
    fn wrong_channel_count_is_an_input_error() {
        let net = build_segnet(&ArchConfig::default()).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(1, 64, 64, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_items_are_independent() {
        let net = build_segnet(&ArchConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::from_vec(1, 32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen()).collect()).unwrap();
        let pair = Tensor::stack(&[img.clone(), img.clone()]).unwrap();
        let out = net.forward(&pair).unwrap().logits;
        assert_eq!(out.item(0), out.item(1));
        assert_eq!(out.item(0), net.forward(&img).unwrap().logits);
    }

    /// The impulse response of the dilated feature block grows with the
    /// largest dilation rate: a single active pixel reaches `1 + 2 * d_max`
    /// positions per axis.
    #[test]
    fn feature_block_receptive_field_matches_dilations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (dilations, expected) in [(vec![1], 3), (vec![1, 2], 5), (vec![1, 2, 4], 9)] {
            let mut block = FeatureBlock::new(1, 2, 1, &dilations, &mut rng);
            // Positive weights so no ReLU hides any tap.
            block.visit_mut("", &mut |name, p| {
                if name.ends_with("weight") {
                    p.iter_mut().for_each(|v| *v = v.abs() + 0.1);
                }
            });
            let mut impulse = Tensor::zeros(1, 21, 21, 1);
            impulse.data[10 * 21 + 10] = 1.0;
            let base = block.forward(&Tensor::zeros(1, 21, 21, 1)).unwrap().out;
            let out = block.forward(&impulse).unwrap().out;
            let touched: Vec<(usize, usize)> = (0..21)
                .flat_map(|y| (0..21).map(move |x| (y, x)))
                .filter(|&(y, x)| (out.at(0, y, x, 0) - base.at(0, y, x, 0)).abs() > 0.0)
                .collect();
            let ys: Vec<usize> = touched.iter().map(|p| p.0).collect();
            let extent = ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1;
            assert_eq!(extent, expected, "dilations {dilations:?}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = ArchConfig {
            encoder_channels: vec![3, 4, 5],
            branch_channels: 2,
            feature_channels: 3,
            skip_channels: 2,
            head_hidden: 3,
            num_classes: 3,
            ..Default::default()
        };
        let mut net = build_segnet(&arch).unwrap();
        // Zero biases put pre-activations of dead channels exactly on the ReLU kink.
        net.visit_mut("", &mut |name, p| {
            if name.ends_with("bias") {
                p.iter_mut().for_each(|v| *v = 0.05);
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::from_vec(1, 16, 16, 3, (0..16 * 16 * 3).map(|_| rng.gen()).collect()).unwrap();
        let targets: Vec<usize> = (0..256).map(|_| rng.gen_range(0..3)).collect();
        let loss = |n: &SegNet| cross_entropy(&n.forward(&img).unwrap().logits, &targets).unwrap().value;
        let cache = net.forward(&img).unwrap();
        let ce = cross_entropy(&cache.logits, &targets).unwrap();
        let mut grad = net.zeros_like();
        net.backward(&cache, &ce.grad, &mut grad).unwrap();
        let mut analytic = Vec::new();
        grad.visit("", &mut |name, g| analytic.push((name, g.to_vec())));
        let h = 1e-6;
        for (name, g) in &analytic {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let perturb = |delta: f64| {
                    let mut n = net.clone();
                    n.visit_mut("", &mut |nm, p| {
                        if &nm == name {
                            p[idx] += delta;
                        }
                    });
                    loss(&n)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let scale = fd.abs().max(g[idx].abs()).max(1e-6);
                assert!((fd - g[idx]).abs() / scale < 1e-4, "{name}[{idx}]: fd {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn checksum_detects_drift() {
        let mut net = build_segnet(&ArchConfig::default()).unwrap();
        assert!(matches!(net.verify_frozen(), Err(Error::Invariant(_))));
        net.freeze();
        net.verify_frozen().unwrap();
        net.head.classifier.bias[0] += 1e-12;
        assert!(matches!(net.verify_frozen(), Err(Error::Invariant(_))));
    }

    #[test]
    fn zero_pretraining_steps_leave_params_unchanged() {
        let net = build_segnet(&ArchConfig::default()).unwrap();
        let before = net.checksum();
        let out = pretrain_segnet(net, &[], &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(out.model.checksum(), before);
        assert_eq!(out.model.frozen_checksum.as_deref(), Some(before.as_str()));
    }

    #[test]
    fn parameter_groups() {
        let net = build_segnet(&ArchConfig::default()).unwrap();
        let mut groups = std::collections::BTreeSet::new();
        net.visit("", &mut |name, _| {
            groups.insert(SegNet::group_of(&name));
        });
        assert_eq!(groups.into_iter().collect::<Vec<_>>(), vec![GROUP_ASPP, GROUP_FCN, GROUP_SEG]);
    }
}
