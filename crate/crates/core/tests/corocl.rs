//! Contrastive loss against a naive double loop, plus sampling invariants.

use proptest::prelude::*;
use rpl_core::corocl::{
    corocl_loss, sample_embeddings, Class, Context, EmbeddingBatch, PixelRef, SamplingConfig,
};
use rpl_core::Tensor;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn oracle(a: &EmbeddingBatch, c: &EmbeddingBatch, tau: f64) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..a.len() {
        for j in 0..c.len() {
            if c.classes[j] != a.classes[i] || c.sources[j] == a.sources[i] {
                continue;
            }
            let pos = (dot(a.row(i), c.row(j)) / tau).exp();
            let mut neg = 0.0;
            for k in 0..c.len() {
                if c.classes[k] != a.classes[i] {
                    neg += (dot(a.row(i), c.row(k)) / tau).exp();
                }
            }
            total += -(pos / (pos + neg)).ln();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

fn normalise(mut v: Vec<f64>, dim: usize) -> Vec<f64> {
    for row in v.chunks_exact_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn make(dim: usize, vectors: Vec<f64>, mask: &[u8], rows: &[usize], context: Context) -> EmbeddingBatch {
    EmbeddingBatch {
        dim,
        vectors: normalise(vectors, dim),
        classes: mask.iter().map(|&m| Class::from_mask(m)).collect(),
        sources: rows.iter().map(|&row| PixelRef { context, row }).collect(),
    }
}

#[test]
fn two_row_symmetric_case_is_log_two() {
    let rows = vec![(vec![1.0, 0.0], Class::Inlier), (vec![1.0, 0.0], Class::Inlier), (vec![0.0, 1.0], Class::Outlier)];
    let a = EmbeddingBatch::from_rows(2, &rows[..2], Context::Oe);
    let c = EmbeddingBatch::from_rows(2, &rows, Context::Oe);
    // One positive and one negative per anchor; a huge tau flattens both logits to zero.
    let l = corocl_loss(&a, &c, 1e12).unwrap();
    assert!((l.value - 2f64.ln()).abs() < 1e-9);
    assert_eq!(l.pairs, 2);
}

#[test]
fn identical_negative_and_positive_give_log_two() {
    let v = vec![0.6, 0.8];
    let a = EmbeddingBatch::from_rows(2, &[(v.clone(), Class::Inlier)], Context::Oe);
    let c = EmbeddingBatch::from_rows(2, &[(v.clone(), Class::Inlier), (v, Class::Outlier)], Context::Out);
    let l = corocl_loss(&a, &c, 0.1).unwrap();
    assert!((l.value - 2f64.ln()).abs() < 1e-9);
}

fn instance() -> impl Strategy<Value = (usize, Vec<f64>, Vec<u8>, Vec<f64>, Vec<u8>, usize, f64)> {
    (1usize..5, 1usize..=16, 1usize..=16).prop_flat_map(|(dim, na, nc)| {
        (
            Just(dim),
            prop::collection::vec(-1.0f64..1.0, na * dim),
            prop::collection::vec(0u8..2, na),
            prop::collection::vec(-1.0f64..1.0, nc * dim),
            prop::collection::vec(0u8..2, nc),
            0..=na.min(nc),
            0.05f64..2.0,
        )
    })
}

proptest! {
    #[test]
    fn matches_naive_double_loop((dim, av, am, cv, cm, shared, tau) in instance()) {
        let na = am.len();
        let nc = cm.len();
        let a = make(dim, av, &am, &(0..na).collect::<Vec<_>>(), Context::Oe);
        // The first `shared` contrastives are the same pixels as the first anchors.
        let mut c = make(dim, cv, &cm, &(0..nc).map(|j| if j < shared { j } else { 100 + j }).collect::<Vec<_>>(), Context::Oe);
        for j in 0..shared {
            c.vectors[j * dim..(j + 1) * dim].copy_from_slice(a.row(j));
            c.classes[j] = a.classes[j];
        }
        let got = corocl_loss(&a, &c, tau).unwrap();
        let want = oracle(&a, &c, tau);
        prop_assert!((got.value - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", got.value, want);
        prop_assert!(got.value >= 0.0);
    }

    #[test]
    fn invariant_to_row_order((dim, av, am, cv, cm, _shared, tau) in instance(), rot in 0usize..16) {
        let na = am.len();
        let nc = cm.len();
        let a = make(dim, av, &am, &(0..na).collect::<Vec<_>>(), Context::Oe);
        let c = make(dim, cv, &cm, &(0..nc).collect::<Vec<_>>(), Context::Out);
        let base = corocl_loss(&a, &c, tau).unwrap().value;
        let perm = |b: &EmbeddingBatch, k: usize| {
            let n = b.len();
            let order: Vec<usize> = (0..n).map(|i| (i * 7 + k) % n).collect();
            let mut seen = vec![false; n];
            let order: Vec<usize> = order.into_iter().filter(|&i| !std::mem::replace(&mut seen[i], true)).collect();
            let order: Vec<usize> = order.into_iter().chain((0..n).filter(|&i| !seen[i])).collect();
            EmbeddingBatch {
                dim: b.dim,
                vectors: order.iter().flat_map(|&i| b.row(i).to_vec()).collect(),
                classes: order.iter().map(|&i| b.classes[i]).collect(),
                sources: order.iter().map(|&i| b.sources[i]).collect(),
            }
        };
        let got = corocl_loss(&perm(&a, rot), &perm(&c, rot + 3), tau).unwrap().value;
        prop_assert!((got - base).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn sampling_respects_budget_and_cells(bits in prop::collection::vec(0u8..2, 16), out_bits in prop::collection::vec(0u8..2, 16), budget in 1usize..10, seed in any::<u64>()) {
        let emb = Tensor::from_vec(1, 4, 4, 2, (0..32).map(|i| i as f64).collect()).unwrap();
        let cfg = SamplingConfig { budget, seed, ..SamplingConfig::default() };
        let s = sample_embeddings(&emb, &bits, &emb, &out_bits, &cfg).unwrap();
        let oe_out = bits.iter().filter(|&&b| b == 1).count();
        let out_out = out_bits.iter().filter(|&&b| b == 1).count();
        prop_assert_eq!(s.cell_sizes, [16 - oe_out, oe_out, 16 - out_out, out_out]);
        let nonempty = |n: usize| (n > 0) as usize;
        let anchor_rows = budget * (nonempty(16 - oe_out) + nonempty(oe_out));
        prop_assert_eq!(s.anchors.len(), anchor_rows);
        prop_assert_eq!(s.contrastives.len(), anchor_rows + budget * (nonempty(16 - out_out) + nonempty(out_out)));
        for (i, src) in s.anchors.sources.iter().enumerate() {
            prop_assert_eq!(src.context, Context::Oe);
            prop_assert_eq!(s.anchors.classes[i], Class::from_mask(bits[src.row]));
            prop_assert_eq!(s.anchors.row(i), &emb.data[src.row * 2..src.row * 2 + 2]);
        }
        for (i, src) in s.contrastives.sources.iter().enumerate() {
            let mask = if src.context == Context::Oe { &bits } else { &out_bits };
            prop_assert_eq!(s.contrastives.classes[i], Class::from_mask(mask[src.row]));
        }
        // Without replacement whenever a cell is large enough.
        let oe_in_rows: Vec<usize> = s.anchors.sources.iter().zip(&s.anchors.classes)
            .filter(|(_, c)| **c == Class::Inlier).map(|(p, _)| p.row).collect();
        if 16 - oe_out >= budget {
            let mut d = oe_in_rows.clone();
            d.sort_unstable();
            d.dedup();
            prop_assert_eq!(d.len(), oe_in_rows.len());
        }
    }
}
