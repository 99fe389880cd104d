//! Context-robust contrastive learning over pixel embeddings.
//!
//! Embeddings come from two contexts: outlier-exposure composites (`Oe`) and
//! the raw outlier images they were cut from (`Out`). Rows are grouped into
//! cells by context and class, sampled into an anchor set and a contrastive
//! set, and scored with a per-pair InfoNCE whose denominator holds the
//! matched positive and every negative, but no other positives.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Oe,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Inlier,
    Outlier,
}

impl Class {
    pub fn from_mask(m: u8) -> Self {
        if m == 1 {
            Class::Outlier
        } else {
            Class::Inlier
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub context: Context,
    pub class: Class,
}

impl Cell {
    pub const OE_IN: Cell = Cell { context: Context::Oe, class: Class::Inlier };
    pub const OE_OUT: Cell = Cell { context: Context::Oe, class: Class::Outlier };
    pub const OUT_IN: Cell = Cell { context: Context::Out, class: Class::Inlier };
    pub const OUT_OUT: Cell = Cell { context: Context::Out, class: Class::Outlier };

    pub fn both_classes(context: Context) -> [Cell; 2] {
        [Cell { context, class: Class::Inlier }, Cell { context, class: Class::Outlier }]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Rows drawn per cell.
    pub budget: usize,
    pub anchor_cells: Vec<Cell>,
    pub contrastive_cells: Vec<Cell>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::from_contexts(&[Context::Oe], &[Context::Oe, Context::Out], 512, 0)
    }
}

impl SamplingConfig {
    pub fn from_contexts(anchors: &[Context], contrastives: &[Context], budget: usize, seed: u64) -> Self {
        Self {
            budget,
            anchor_cells: anchors.iter().flat_map(|&c| Cell::both_classes(c)).collect(),
            contrastive_cells: contrastives.iter().flat_map(|&c| Cell::both_classes(c)).collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return config_err("sampling budget must be at least 1");
        }
        if self.anchor_cells.is_empty() || self.contrastive_cells.is_empty() {
            return config_err("anchor and contrastive cell lists must be nonempty");
        }
        Ok(())
    }
}

/// The five anchor/contrastive source combinations of the sampling
/// ablation, default row included.
pub fn ablation_variants(base: &SamplingConfig) -> Vec<(String, SamplingConfig)> {
    use Context::{Oe, Out};
    let with = |anchor: Vec<Cell>, contrastive: Vec<Cell>| SamplingConfig {
        anchor_cells: anchor,
        contrastive_cells: contrastive,
        ..base.clone()
    };
    let cells = |ctx: &[Context]| ctx.iter().flat_map(|&c| Cell::both_classes(c)).collect::<Vec<_>>();
    vec![
        ("anchor=oe contrast=oe".into(), with(cells(&[Oe]), cells(&[Oe]))),
        ("anchor=out contrast=out".into(), with(cells(&[Out]), cells(&[Out]))),
        (
            "anchor=oe contrast=oe+out-inlier".into(),
            with(cells(&[Oe]), vec![Cell::OE_IN, Cell::OE_OUT, Cell::OUT_IN]),
        ),
        ("anchor=oe contrast=oe+out".into(), with(cells(&[Oe]), cells(&[Oe, Out]))),
        ("anchor=both contrast=both".into(), with(cells(&[Oe, Out]), cells(&[Oe, Out]))),
    ]
}

/// Where a sampled row came from: its context and its row index within that
/// context's embedding map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelRef {
    pub context: Context,
    pub row: usize,
}

/// Sampled unit-norm rows with class tags and provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingBatch {
    pub dim: usize,
    /// `len x dim`, row-major.
    pub vectors: Vec<f64>,
    pub classes: Vec<Class>,
    pub sources: Vec<PixelRef>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Builds a batch from explicit rows, each given a distinct provenance.
    pub fn from_rows(dim: usize, rows: &[(Vec<f64>, Class)], context: Context) -> Self {
        let mut b = Self { dim, ..Default::default() };
        for (i, (v, c)) in rows.iter().enumerate() {
            assert_eq!(v.len(), dim, "row width");
            b.vectors.extend_from_slice(v);
            b.classes.push(*c);
            b.sources.push(PixelRef { context, row: i });
        }
        b
    }

    fn push(&mut self, emb: &Tensor, class: Class, src: PixelRef) {
        self.vectors.extend_from_slice(&emb.data[src.row * emb.c..(src.row + 1) * emb.c]);
        self.classes.push(class);
        self.sources.push(src);
    }

    /// Adds row gradients `d` (same layout as `vectors`) into the embedding
    /// gradient maps they were sampled from.
    pub fn scatter(&self, d: &[f64], d_oe: &mut Tensor, d_out: &mut Tensor) {
        for (i, src) in self.sources.iter().enumerate() {
            let target = match src.context {
                Context::Oe => &mut *d_oe,
                Context::Out => &mut *d_out,
            };
            let dst = &mut target.data[src.row * self.dim..(src.row + 1) * self.dim];
            dst.iter_mut().zip(&d[i * self.dim..(i + 1) * self.dim]).for_each(|(a, b)| *a += b);
        }
    }
}

/// Result of [`sample_embeddings`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub anchors: EmbeddingBatch,
    pub contrastives: EmbeddingBatch,
    /// Pixels available per cell, in the order oe-in, oe-out, out-in, out-out.
    pub cell_sizes: [usize; 4],
}

fn cell_index(cell: Cell) -> usize {
    (cell.context == Context::Out) as usize * 2 + (cell.class == Class::Outlier) as usize
}

/// Nearest-neighbour downsampling of an `n x h x w` binary mask.
pub fn downsample_mask(mask: &[u8], n: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    assert_eq!(mask.len(), n * h * w, "mask size");
    let mut out = Vec::with_capacity(n * th * tw);
    for b in 0..n {
        for y in 0..th {
            // centre of the target cell mapped back to the source grid
            let sy = ((2 * y + 1) * h / (2 * th)).min(h - 1);
            for x in 0..tw {
                let sx = ((2 * x + 1) * w / (2 * tw)).min(w - 1);
                out.push(mask[(b * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Draws up to `budget` rows per configured cell. A cell with at least
/// `budget` pixels is sampled without replacement; a smaller nonempty cell
/// is sampled with replacement up to `budget`; an empty cell is skipped.
pub fn sample_embeddings(
    emb_oe: &Tensor,
    mask_oe: &[u8],
    emb_out: &Tensor,
    mask_out: &[u8],
    cfg: &SamplingConfig,
) -> Result<Sampled> {
    cfg.validate()?;
    if emb_oe.c != emb_out.c {
        return shape_err(format!("embedding widths {} and {}", emb_oe.c, emb_out.c));
    }
    if mask_oe.len() != emb_oe.pixels() || mask_out.len() != emb_out.pixels() {
        return shape_err("masks must be at embedding resolution");
    }
    let mut members: [Vec<usize>; 4] = Default::default();
    for (context, mask) in [(Context::Oe, mask_oe), (Context::Out, mask_out)] {
        for (row, &m) in mask.iter().enumerate() {
            members[cell_index(Cell { context, class: Class::from_mask(m) })].push(row);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |cells: &[Cell]| {
        let mut batch = EmbeddingBatch { dim: emb_oe.c, ..Default::default() };
        for &cell in cells {
            let pool = &members[cell_index(cell)];
            if pool.is_empty() {
                continue;
            }
            let emb = if cell.context == Context::Oe { emb_oe } else { emb_out };
            let picks: Vec<usize> = if pool.len() >= cfg.budget {
                index::sample(&mut rng, pool.len(), cfg.budget).into_iter().map(|i| pool[i]).collect()
            } else {
                (0..cfg.budget).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            };
            for row in picks {
                batch.push(emb, cell.class, PixelRef { context: cell.context, row });
            }
        }
        batch
    };
    let anchors = draw(&cfg.anchor_cells);
    let contrastives = draw(&cfg.contrastive_cells);
    let cell_sizes = [members[0].len(), members[1].len(), members[2].len(), members[3].len()];
    Ok(Sampled { anchors, contrastives, cell_sizes })
}

/// Loss value and gradients w.r.t. the anchor and contrastive rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CoroclLoss {
    pub value: f64,
    /// Number of (anchor, positive) pairs averaged over.
    pub pairs: usize,
    pub d_anchors: Vec<f64>,
    pub d_contrastives: Vec<f64>,
}

/// Mean over (anchor, positive) pairs of
/// `-log(exp(a.p/tau) / (exp(a.p/tau) + sum_n exp(a.n/tau)))`.
/// An anchor is never its own positive. No anchors or no pairs gives zero.
pub fn corocl_loss(anchors: &EmbeddingBatch, contrastives: &EmbeddingBatch, tau: f64) -> Result<CoroclLoss> {
    if !(tau > 0.0) {
        return config_err(format!("tau must be positive, got {tau}"));
    }
    let (na, nc) = (anchors.len(), contrastives.len());
    let mut out = CoroclLoss {
        value: 0.0,
        pairs: 0,
        d_anchors: vec![0.0; anchors.vectors.len()],
        d_contrastives: vec![0.0; contrastives.vectors.len()],
    };
    if na == 0 || nc == 0 {
        return Ok(out);
    }
    if anchors.dim != contrastives.dim {
        return shape_err(format!("anchor width {} vs contrastive width {}", anchors.dim, contrastives.dim));
    }
    let dim = anchors.dim;
    let mut s = vec![0.0; na * nc];
    gemm(na, dim, nc, &anchors.vectors, false, &contrastives.vectors, true, 0.0, &mut s);
    s.iter_mut().for_each(|v| *v /= tau);

    // G holds dL/dS (before averaging); S is already divided by tau.
    let mut g = vec![0.0; na * nc];
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut negs = Vec::with_capacity(nc);
    for i in 0..na {
        let row = &s[i * nc..(i + 1) * nc];
        let class = anchors.classes[i];
        negs.clear();
        negs.extend((0..nc).filter(|&n| contrastives.classes[n] != class));
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let neg_sum: f64 = negs.iter().map(|&n| (row[n] - max).exp()).sum();
        let mut inv_d_sum = 0.0;
        for j in 0..nc {
            if contrastives.classes[j] != class || contrastives.sources[j] == anchors.sources[i] {
                continue;
            }
            let pos = (row[j] - max).exp();
            let d = pos + neg_sum;
            total += (neg_sum / pos).ln_1p();
            pairs += 1;
            g[i * nc + j] += pos / d - 1.0;
            inv_d_sum += 1.0 / d;
        }
        for &n in &negs {
            g[i * nc + n] += (row[n] - max).exp() * inv_d_sum;
        }
    }
    if pairs == 0 {
        return Ok(out);
    }
    let scale = 1.0 / (pairs as f64 * tau);
    g.iter_mut().for_each(|v| *v *= scale);
    gemm(na, nc, dim, &g, false, &contrastives.vectors, false, 0.0, &mut out.d_anchors);
    gemm(nc, na, dim, &g, true, &anchors.vectors, false, 0.0, &mut out.d_contrastives);
    out.value = total / pairs as f64;
    out.pairs = pairs;
    Ok(out)
}
