//! Analytic gradients against central finite differences at float64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpl_core::corocl::{corocl_loss, Class, Context, EmbeddingBatch, PixelRef};
use rpl_core::losses::{
    hinge_energy_loss, inlier_loss, positive_energy_loss, rpl_loss, CeTarget, LossConfig, OutlierObjective,
};
use rpl_core::rpl::ProjectorKind;
use rpl_core::train::TrainConfig;
use rpl_core::Tensor;

mod common;
use common::*;

#[test]
fn inlier_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hat = random_tensor(&mut rng, 1, 8, 8, 4, 3.0);
    let tilde = random_tensor(&mut rng, 1, 8, 8, 4, 3.0);
    let mask = random_mask(&mut rng, 64);
    for target in [CeTarget::Hard, CeTarget::Soft] {
        for ds in [false, true] {
            let l = inlier_loss(&hat, &tilde, &mask, 0.7, target, ds).unwrap();
            tensor_grad_matches(&hat, &l.grad, |x| inlier_loss(x, &tilde, &mask, 0.7, target, ds).unwrap().value).unwrap();
        }
    }
}

#[test]
fn outlier_losses_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hat = random_tensor(&mut rng, 2, 4, 4, 4, 3.0);
    let mask = random_mask(&mut rng, 32);
    let pe = positive_energy_loss(&hat, &mask).unwrap();
    tensor_grad_matches(&hat, &pe.grad, |x| positive_energy_loss(x, &mask).unwrap().value).unwrap();
    let h = hinge_energy_loss(&hat, &mask, -1.5, 0.5).unwrap();
    assert!(h.value > 0.0);
    tensor_grad_matches(&hat, &h.grad, |x| hinge_energy_loss(x, &mask, -1.5, 0.5).unwrap().value).unwrap();
}

#[test]
fn combined_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hat = random_tensor(&mut rng, 1, 8, 8, 3, 2.0);
    let tilde = random_tensor(&mut rng, 1, 8, 8, 3, 2.0);
    let mask = random_mask(&mut rng, 64);
    let cfg = LossConfig { alpha: 0.3, ..LossConfig::default() };
    for obj in [OutlierObjective::PositiveEnergy, OutlierObjective::HingeEnergy] {
        let l = rpl_loss(&hat, &tilde, &mask, &cfg, obj, true).unwrap();
        tensor_grad_matches(&hat, &l.grad, |x| rpl_loss(x, &tilde, &mask, &cfg, obj, true).unwrap().l_rpl).unwrap();
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in v.chunks_exact_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn batch(dim: usize, vectors: Vec<f64>, classes: Vec<Class>, context: Context, offset: usize) -> EmbeddingBatch {
    let sources = (0..classes.len()).map(|i| PixelRef { context, row: offset + i }).collect();
    EmbeddingBatch { dim, vectors, classes, sources }
}

#[test]
fn corocl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 5;
    let classes = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Class> {
        (0..n).map(|i| if i < 2 { Class::from_mask((i % 2) as u8) } else { Class::from_mask(rng.gen_bool(0.5) as u8) }).collect()
    };
    let ca = classes(6, &mut rng);
    let cc = classes(9, &mut rng);
    let a = batch(dim, unit_rows(&mut rng, 6, dim), ca.clone(), Context::Oe, 0);
    // The first three contrastives share provenance with anchors.
    let mut c = batch(dim, unit_rows(&mut rng, 9, dim), cc.clone(), Context::Oe, 3);
    c.vectors[..3 * dim].copy_from_slice(&a.vectors[3 * dim..6 * dim]);
    c.classes[..3].copy_from_slice(&ca[3..6]);
    let tau = 0.2;
    let l = corocl_loss(&a, &c, tau).unwrap();
    assert!(l.pairs > 0);
    let at = Tensor::from_vec(1, 1, 6, dim, a.vectors.clone()).unwrap();
    let ct = Tensor::from_vec(1, 1, 9, dim, c.vectors.clone()).unwrap();
    let ga = Tensor::from_vec(1, 1, 6, dim, l.d_anchors.clone()).unwrap();
    let gc = Tensor::from_vec(1, 1, 9, dim, l.d_contrastives.clone()).unwrap();
    tensor_grad_matches(&at, &ga, |x| {
        let a2 = EmbeddingBatch { vectors: x.data.clone(), ..a.clone() };
        corocl_loss(&a2, &c, tau).unwrap().value
    })
    .unwrap();
    tensor_grad_matches(&ct, &gc, |x| {
        let c2 = EmbeddingBatch { vectors: x.data.clone(), ..c.clone() };
        corocl_loss(&a, &c2, tau).unwrap().value
    })
    .unwrap();
}

#[test]
fn composite_objective_gradient_matches_finite_differences() {
    let cfg = TrainConfig { loss: LossConfig { alpha: 0.5, ..LossConfig::default() }, ..TrainConfig::default() };
    composite_gradient_matches(&cfg, ProjectorKind::SingleLayer).unwrap();
}

#[test]
fn composite_gradient_with_two_layer_projector() {
    let cfg = TrainConfig { corocl_weight: 0.7, ..TrainConfig::default() };
    composite_gradient_matches(&cfg, ProjectorKind::TwoLayer { batch_norm: true }).unwrap();
}

#[test]
fn composite_gradient_for_hinge_and_direct_arms() {
    let hinge = TrainConfig { objective: OutlierObjective::HingeEnergy, corocl: false, ..TrainConfig::default() };
    composite_gradient_matches(&hinge, ProjectorKind::SingleLayer).unwrap();
    let direct = TrainConfig { direct: true, ..TrainConfig::default() };
    composite_gradient_matches(&direct, ProjectorKind::SingleLayer).unwrap();
}

#[test]
fn frozen_parameters_receive_no_update() {
    frozen_parameters_untouched().unwrap();
}
