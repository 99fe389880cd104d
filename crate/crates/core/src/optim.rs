//! Optimizers over [`ParamSet`]s and the poly learning-rate schedule.

use crate::nn::ParamSet;

/// `base * (1 - iter / max_iter)^power`, with `iter` counted from zero.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - iter as f64 / max_iter as f64).max(0.0).powf(power)
}

fn collect(grads: &dyn ParamSet) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    grads.visit("", &mut |_, g| out.push(g.to_vec()));
    out
}

/// SGD with classical momentum. The per-parameter learning rate multiplier
/// is looked up by name, which is how head layers get their larger rate.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &dyn ParamSet, lr: f64, scale: &dyn Fn(&str) -> f64) {
        let grads = collect(grads);
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let mut i = 0;
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        params.visit_mut("", &mut |name, p| {
            let rate = lr * scale(&name);
            let v = &mut velocity[i];
            for ((pv, gv), vv) in p.iter_mut().zip(&grads[i]).zip(v.iter_mut()) {
                *vv = momentum * *vv + gv;
                *pv -= rate * *vv;
            }
            i += 1;
        });
    }
}

/// Adam, used for closed-set pre-training only.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &dyn ParamSet, lr: f64) {
        let grads = collect(grads);
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            for (k, pv) in p.iter_mut().enumerate() {
                let g = grads[i][k];
                m[i][k] = b1 * m[i][k] + (1.0 - b1) * g;
                v[i][k] = b2 * v[i][k] + (1.0 - b2) * g * g;
                *pv -= lr * (m[i][k] / c1) / ((v[i][k] / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}
