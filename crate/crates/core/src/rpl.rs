//! The residual adapter: trainable main layers and an output head whose
//! result is added to the frozen head input, plus the contrastive projector.
//!
//! The frozen model is only ever borrowed immutably here; gradients are
//! produced for adapter parameters alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    join, l2_normalize, l2_normalize_backward, relu, relu_backward, upsample_bilinear, upsample_bilinear_backward,
    BatchNorm, BatchNormCache, Conv2d, ParamSet,
};
use crate::segnet::{FeatureBlock, FeatureBlockCache, HeadCache, SegForwardCache, SegNet};
use crate::tensor::Tensor;

pub const GROUP_RPL_A: &str = "rpl_a";
pub const GROUP_RPL_B: &str = "rpl_b";
pub const GROUP_PROJ: &str = "proj";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ProjectorKind {
    /// One 1x1 convolution.
    SingleLayer,
    /// 1x1 conv, optional batch norm, ReLU, 1x1 conv.
    TwoLayer { batch_norm: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RplConfig {
    /// Embedding depth; `None` uses the head-input width.
    pub embed_dim: Option<usize>,
    pub projector: ProjectorKind,
    pub projector_bias: bool,
    /// Initialise the output head to zero so the untrained adapter is an
    /// exact identity; `false` uses fan-in scaled (He) initialisation.
    pub zero_init_head: bool,
    pub seed: u64,
}

impl Default for RplConfig {
    fn default() -> Self {
        Self { embed_dim: None, projector: ProjectorKind::SingleLayer, projector_bias: true, zero_init_head: true, seed: 11 }
    }
}

/// Maps residual features to unit-norm embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub first: Conv2d,
    pub norm: Option<BatchNorm>,
    pub second: Option<Conv2d>,
    /// When false the biases stay at zero and are not trained.
    pub bias: bool,
}

#[derive(Clone, Debug)]
pub struct ProjectorCache {
    pub input: Tensor,
    pub first: Tensor,
    pub norm: Option<BatchNormCache>,
    pub hidden: Option<Tensor>,
    pub raw: Tensor,
    pub norms: Vec<f64>,
    /// Unit-norm embeddings, one row per pixel.
    pub embeddings: Tensor,
}

impl Projector {
    fn new(in_ch: usize, dim: usize, kind: ProjectorKind, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let (first, norm, second) = match kind {
            ProjectorKind::SingleLayer => (Conv2d::pointwise(in_ch, dim, rng), None, None),
            ProjectorKind::TwoLayer { batch_norm } => (
                Conv2d::pointwise(in_ch, in_ch, rng),
                batch_norm.then(|| BatchNorm::new(in_ch)),
                Some(Conv2d::pointwise(in_ch, dim, rng)),
            ),
        };
        let mut p = Self { first, norm, second, bias };
        if !bias {
            p.first.bias.iter_mut().for_each(|v| *v = 0.0);
            if let Some(s) = p.second.as_mut() {
                s.bias.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p
    }

    fn zeros_like(&self) -> Self {
        Self {
            first: self.first.zeros_like(),
            norm: self.norm.as_ref().map(BatchNorm::zeros_like),
            second: self.second.as_ref().map(Conv2d::zeros_like),
            bias: self.bias,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.second.as_ref().unwrap_or(&self.first).out_ch
    }

    pub fn forward(&self, input: &Tensor) -> Result<ProjectorCache> {
        let first = self.first.forward(input)?;
        let (raw, norm, hidden) = match &self.second {
            None => (first.clone(), None, None),
            Some(second) => {
                let (normed, cache) = match &self.norm {
                    Some(bn) => {
                        let (o, c) = bn.forward(&first)?;
                        (o, Some(c))
                    }
                    None => (first.clone(), None),
                };
                let hidden = relu(normed);
                (second.forward(&hidden)?, cache, Some(hidden))
            }
        };
        let (embeddings, norms) = l2_normalize(&raw);
        Ok(ProjectorCache { input: input.clone(), first, norm, hidden, raw, norms, embeddings })
    }

    /// Returns the gradient w.r.t. the projector input.
    pub fn backward(&self, cache: &ProjectorCache, d_emb: &Tensor, grad: &mut Projector) -> Result<Tensor> {
        let d_raw = l2_normalize_backward(&cache.embeddings, &cache.norms, d_emb);
        let d_first = match (&self.second, &cache.hidden) {
            (Some(second), Some(hidden)) => {
                let d_hidden = second
                    .backward(hidden, &d_raw, grad.second.as_mut(), true)?
                    .expect("requested");
                let d_normed = relu_backward(hidden, d_hidden);
                match (&self.norm, &cache.norm) {
                    (Some(bn), Some(bc)) => bn.backward(bc, &d_normed, grad.norm.as_mut()),
                    _ => d_normed,
                }
            }
            _ => d_raw,
        };
        let dx = self.first.backward(&cache.input, &d_first, Some(&mut grad.first), true)?.expect("requested");
        if !self.bias {
            grad.first.bias.iter_mut().for_each(|v| *v = 0.0);
            if let Some(s) = grad.second.as_mut() {
                s.bias.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(dx)
    }
}

impl ParamSet for Projector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(join(prefix, "first.weight"), &self.first.weight);
        if self.bias {
            f(join(prefix, "first.bias"), &self.first.bias);
        }
        if let Some(bn) = &self.norm {
            bn.visit(&join(prefix, "norm"), f);
        }
        if let Some(s) = &self.second {
            f(join(prefix, "second.weight"), &s.weight);
            if self.bias {
                f(join(prefix, "second.bias"), &s.bias);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "first.weight"), &mut self.first.weight);
        if self.bias {
            f(join(prefix, "first.bias"), &mut self.first.bias);
        }
        if let Some(bn) = &mut self.norm {
            bn.visit_mut(&join(prefix, "norm"), f);
        }
        if let Some(s) = &mut self.second {
            f(join(prefix, "second.weight"), &mut s.weight);
            if self.bias {
                f(join(prefix, "second.bias"), &mut s.bias);
            }
        }
    }

    fn visit_shapes(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>)) {
        let conv = |c: &Conv2d| vec![c.kernel, c.kernel, c.in_ch, c.out_ch];
        f(join(prefix, "first.weight"), conv(&self.first));
        if self.bias {
            f(join(prefix, "first.bias"), vec![self.first.out_ch]);
        }
        if let Some(bn) = &self.norm {
            bn.visit_shapes(&join(prefix, "norm"), f);
        }
        if let Some(s) = &self.second {
            f(join(prefix, "second.weight"), conv(s));
            if self.bias {
                f(join(prefix, "second.bias"), vec![s.out_ch]);
            }
        }
    }
}

/// Adapter parameters. `projector` is `None` once it has been discarded
/// after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RplModule {
    /// Main layers, architecturally identical to the frozen feature block.
    pub main: FeatureBlock,
    /// Linear output head from feature width to head-input width.
    pub head: Conv2d,
    pub projector: Option<Projector>,
    pub config: RplConfig,
}

/// Cache of the adapter's residual path for one batch.
#[derive(Clone, Debug)]
pub struct ResidualCache {
    pub main: FeatureBlockCache,
    /// Output-head result at feature resolution.
    pub residual: Tensor,
    /// Frozen head input plus the upsampled residual.
    pub head: HeadCache,
    /// Residual logits at image resolution.
    pub logits: Tensor,
}

/// Full residual forward pass over one image batch.
#[derive(Clone, Debug)]
pub struct RplForward {
    /// The frozen path, whose logits are the closed-set prediction.
    pub seg: SegForwardCache,
    pub residual: ResidualCache,
}

impl RplForward {
    pub fn logits_tilde(&self) -> &Tensor {
        &self.seg.logits
    }

    pub fn logits_hat(&self) -> &Tensor {
        &self.residual.logits
    }

    /// Residual features from the main layers.
    pub fn features(&self) -> &Tensor {
        &self.residual.main.out
    }
}

pub fn build_rpl(seg: &SegNet, cfg: &RplConfig) -> Result<RplModule> {
    let k = seg.aspp.out_channels();
    let width = seg.arch.head_input_channels();
    let dim = cfg.embed_dim.unwrap_or(width);
    if dim == 0 {
        return config_err("embedding depth must be positive");
    }
    if seg.head.hidden.in_ch != width {
        return shape_err(format!("head expects {} channels, plan gives {width}", seg.head.hidden.in_ch));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Conv2d::pointwise(k, width, &mut rng);
    if cfg.zero_init_head {
        head = head.zeros_like();
    }
    let projector = Projector::new(k, dim, cfg.projector, cfg.projector_bias, &mut rng);
    Ok(RplModule { main: seg.aspp.clone(), head, projector: Some(projector), config: cfg.clone() })
}

impl RplModule {
    pub fn zeros_like(&self) -> Self {
        Self {
            main: self.main.zeros_like(),
            head: self.head.zeros_like(),
            projector: self.projector.as_ref().map(Projector::zeros_like),
            config: self.config.clone(),
        }
    }

    /// Zeroes the output head, making the adapter an exact identity.
    pub fn zero_output(&mut self) {
        self.head = self.head.zeros_like();
    }

    pub fn discard_projector(&mut self) {
        self.projector = None;
    }

    pub fn group_of(name: &str) -> &'static str {
        match name.split('.').next() {
            Some(GROUP_RPL_A) => GROUP_RPL_A,
            Some(GROUP_RPL_B) => GROUP_RPL_B,
            _ => GROUP_PROJ,
        }
    }

    fn check_seg(&self, seg: &SegNet) -> Result<()> {
        if self.main.branches.len() != seg.aspp.branches.len()
            || self.main.branches[0].in_ch != seg.arch.z_channels()
            || self.head.out_ch != seg.arch.head_input_channels()
        {
            return shape_err("adapter does not match the frozen model's channel plan");
        }
        Ok(())
    }

    /// Residual path given a frozen forward pass and main-layer output.
    pub fn residual(&self, seg: &SegNet, seg_cache: &SegForwardCache, main: FeatureBlockCache) -> Result<ResidualCache> {
        let residual = self.head.forward(&main.out)?;
        let hi = &seg_cache.head_input;
        let up = upsample_bilinear(&residual, hi.h, hi.w);
        let head = seg.head.forward(hi.add(&up)?)?;
        let logits = upsample_bilinear(&head.logits, seg_cache.input.h, seg_cache.input.w);
        Ok(ResidualCache { main, residual, head, logits })
    }

    /// `y_hat = head([aspp(z) ++ skip] + up(b(a(z))))` next to the frozen
    /// prediction.
    pub fn forward_residual(&self, seg: &SegNet, image: &Tensor) -> Result<RplForward> {
        self.check_seg(seg)?;
        let seg_cache = seg.forward(image)?;
        let main = self.main.forward(seg_cache.z())?;
        let residual = self.residual(seg, &seg_cache, main)?;
        Ok(RplForward { seg: seg_cache, residual })
    }

    /// Gradient of a loss on the residual logits w.r.t. the main-layer
    /// output. Accumulates output-head gradients into `grad`.
    pub fn residual_backward(
        &self,
        seg: &SegNet,
        cache: &ResidualCache,
        dlogits: &Tensor,
        grad: &mut RplModule,
    ) -> Result<Tensor> {
        let dlow = upsample_bilinear_backward(dlogits, cache.head.logits.h, cache.head.logits.w);
        let d_in = seg.head.backward(&cache.head, &dlow, None)?;
        let d_res = upsample_bilinear_backward(&d_in, cache.residual.h, cache.residual.w);
        Ok(self
            .head
            .backward(&cache.main.out, &d_res, Some(&mut grad.head), true)?
            .expect("requested"))
    }

    /// Accumulates main-layer gradients for `d_features` at `z`.
    pub fn main_backward(&self, z: &Tensor, cache: &FeatureBlockCache, d_features: &Tensor, grad: &mut RplModule) -> Result<()> {
        self.main.backward(z, cache, d_features, Some(&mut grad.main), false)?;
        Ok(())
    }

    pub fn project_embeddings(&self, features: &Tensor) -> Result<ProjectorCache> {
        match &self.projector {
            Some(p) => p.forward(features),
            None => config_err("projector was discarded"),
        }
    }

    pub fn project_backward(&self, cache: &ProjectorCache, d_emb: &Tensor, grad: &mut RplModule) -> Result<Tensor> {
        match (&self.projector, grad.projector.as_mut()) {
            (Some(p), Some(g)) => p.backward(cache, d_emb, g),
            _ => config_err("projector was discarded"),
        }
    }

    /// Direct-output ablation: the frozen head applied to the upsampled
    /// adapter output alone, without the closed-set features.
    pub fn direct(&self, seg: &SegNet, seg_cache: &SegForwardCache, main: FeatureBlockCache) -> Result<ResidualCache> {
        let residual = self.head.forward(&main.out)?;
        let hi = &seg_cache.head_input;
        let up = upsample_bilinear(&residual, hi.h, hi.w);
        let head = seg.head.forward(up)?;
        let logits = upsample_bilinear(&head.logits, seg_cache.input.h, seg_cache.input.w);
        Ok(ResidualCache { main, residual, head, logits })
    }

    pub fn forward_direct(&self, seg: &SegNet, image: &Tensor) -> Result<RplForward> {
        self.check_seg(seg)?;
        let seg_cache = seg.forward(image)?;
        let main = self.main.forward(seg_cache.z())?;
        let residual = self.direct(seg, &seg_cache, main)?;
        Ok(RplForward { seg: seg_cache, residual })
    }
}

impl ParamSet for RplModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        self.main.visit(&join(prefix, GROUP_RPL_A), f);
        self.head.visit(&join(prefix, GROUP_RPL_B), f);
        if let Some(p) = &self.projector {
            p.visit(&join(prefix, GROUP_PROJ), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.main.visit_mut(&join(prefix, GROUP_RPL_A), f);
        self.head.visit_mut(&join(prefix, GROUP_RPL_B), f);
        if let Some(p) = &mut self.projector {
            p.visit_mut(&join(prefix, GROUP_PROJ), f);
        }
    }

    fn visit_shapes(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>)) {
        self.main.visit_shapes(&join(prefix, GROUP_RPL_A), f);
        self.head.visit_shapes(&join(prefix, GROUP_RPL_B), f);
        if let Some(p) = &self.projector {
            p.visit_shapes(&join(prefix, GROUP_PROJ), f);
        }
    }
}
