//! Metric implementations against brute-force pairwise and threshold-sweep oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpl_core::metrics::{auprc, auroc, f1_star, fpr_at_95tpr, miou, roc_curve, MetricsReport, ScoredPixels};

mod common;
use common::*;

const TOL: f64 = METRIC_TOL;

#[test]
fn hand_computed_instance() {
    let sp = ScoredPixels::new(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]).unwrap();
    assert!((auroc(&sp).unwrap() - 0.75).abs() < TOL);
    assert!((auprc(&sp).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < TOL);
    assert!((fpr_at_95tpr(&sp).unwrap() - 0.5).abs() < TOL);
    assert!((f1_star(&sp).unwrap() - 0.8).abs() < TOL);
}

#[test]
fn perfect_and_inverted_rankings() {
    let sp = ScoredPixels::new(vec![0.0, 1.0, 2.0, 3.0], vec![0, 0, 1, 1]).unwrap();
    assert_eq!(auroc(&sp).unwrap(), 1.0);
    assert_eq!(auprc(&sp).unwrap(), 1.0);
    assert_eq!(fpr_at_95tpr(&sp).unwrap(), 0.0);
    let inv = ScoredPixels::new(vec![3.0, 2.0, 1.0, 0.0], vec![0, 0, 1, 1]).unwrap();
    assert_eq!(auroc(&inv).unwrap(), 0.0);
    assert_eq!(fpr_at_95tpr(&inv).unwrap(), 1.0);
    let tied = ScoredPixels::new(vec![1.0; 6], vec![0, 1, 0, 1, 0, 0]).unwrap();
    assert_eq!(auroc(&tied).unwrap(), 0.5);
    assert_eq!(fpr_at_95tpr(&tied).unwrap(), 1.0);
}

#[test]
fn single_class_inputs_are_undefined() {
    let only_in = ScoredPixels::new(vec![0.1, 0.2], vec![0, 0]).unwrap();
    assert!(auroc(&only_in).is_err());
    assert!(auprc(&only_in).is_err());
    assert!(fpr_at_95tpr(&only_in).is_err());
    let only_out = ScoredPixels::new(vec![0.1, 0.2], vec![1, 1]).unwrap();
    assert!(auroc(&only_out).is_err());
    assert_eq!(auprc(&only_out).unwrap(), 1.0);
}

#[test]
fn exhaustive_small_instances() {
    exhaustive_metric_instances().unwrap();
}

#[test]
fn random_instances() {
    random_metric_instances(200, 2024).unwrap();
}

#[test]
fn roc_curve_area_matches_auroc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..500).map(|_| rng.gen_range(0..40) as f64).collect();
    let labels: Vec<u8> = scores.iter().map(|s| (rng.gen_range(0.0..60.0) < *s) as u8).collect();
    let sp = ScoredPixels::new(scores, labels).unwrap();
    let pts = roc_curve(&sp).unwrap();
    let trapezoid: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    assert!((trapezoid - auroc(&sp).unwrap()).abs() < 1e-12);
    assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
}

#[test]
fn report_table_order() {
    let sp = ScoredPixels::new(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]).unwrap();
    let r = MetricsReport::from_scores(&sp).unwrap();
    let header = MetricsReport::table_header();
    let fpr = header.find("FPR").unwrap();
    let prc = header.find("AuPRC").unwrap();
    let roc = header.find("AuROC").unwrap();
    assert!(fpr < prc && prc < roc);
    let row = r.table_row();
    let cells: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cells[0].parse::<f64>().unwrap(), 50.0);
}

#[test]
fn miou_skips_absent_classes_and_ignores_label() {
    let gt = [1, 1, 2, 2, 255];
    let pred = [1, 2, 2, 2, 1];
    // class 1: I=1 U=2; class 2: I=2 U=3; classes 3 and 4 absent
    let m = miou(&pred, &gt, 4, Some(255)).unwrap();
    assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < TOL);
    assert_eq!(miou(&gt[..4], &gt[..4], 4, None).unwrap(), 1.0);
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (3usize..60).prop_flat_map(|n| {
        (prop::collection::vec(-50i32..50, n), prop::collection::vec(0u8..2, n)).prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s.into_iter().map(|v| v as f64 / 10.0).collect(), l)
        })
    })
}

proptest! {
    #[test]
    fn metrics_invariant_under_monotone_transforms((scores, labels) in instance()) {
        let sp = ScoredPixels::new(scores.clone(), labels.clone()).unwrap();
        let warped = ScoredPixels::new(scores.iter().map(|s| (s * 0.5).exp() * 3.0 + 1.0).collect(), labels).unwrap();
        prop_assert!((auroc(&sp).unwrap() - auroc(&warped).unwrap()).abs() < TOL);
        prop_assert!((auprc(&sp).unwrap() - auprc(&warped).unwrap()).abs() < TOL);
        prop_assert!((fpr_at_95tpr(&sp).unwrap() - fpr_at_95tpr(&warped).unwrap()).abs() < TOL);
        prop_assert!((f1_star(&sp).unwrap() - f1_star(&warped).unwrap()).abs() < TOL);
    }

    #[test]
    fn negated_scores_complement_auroc((scores, labels) in instance()) {
        let sp = ScoredPixels::new(scores.clone(), labels.clone()).unwrap();
        let neg = ScoredPixels::new(scores.iter().map(|s| -s).collect(), labels).unwrap();
        prop_assert!((auroc(&sp).unwrap() + auroc(&neg).unwrap() - 1.0).abs() < TOL);
    }

    #[test]
    fn metrics_stay_in_unit_interval((scores, labels) in instance()) {
        let sp = ScoredPixels::new(scores, labels).unwrap();
        for v in [auroc(&sp).unwrap(), auprc(&sp).unwrap(), fpr_at_95tpr(&sp).unwrap(), f1_star(&sp).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
