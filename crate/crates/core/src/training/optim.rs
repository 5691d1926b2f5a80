use std::collections::BTreeMap;

use crate::nn::Tensor;
use crate::transforms::ParamStore;

/// Adam with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One update; parameters without a gradient are left alone. GDN
    /// parameters are projected back to their feasible set afterwards.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (params.get_mut(name), self.m.get_mut(name), self.v.get_mut(name))
            else {
                continue;
            };
            let it = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut());
            for (((p, m), v), &g) in it.zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        params.project();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::ModelConfig;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let cfg = ModelConfig::debug();
        let mut p = ParamStore::init(&cfg, 1).unwrap();
        let before = p.get("rc.c3.b").unwrap().data()[0];
        let mut adam = Adam::new(&p);
        let mut grads = BTreeMap::new();
        grads.insert("rc.c3.b".to_string(), Tensor::full(&[1], 3.0));
        adam.update(&mut p, &grads, 0.01);
        let after = p.get("rc.c3.b").unwrap().data()[0];
        assert!((before - after - 0.01).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let cfg = ModelConfig::debug();
        let mut p = ParamStore::init(&cfg, 1).unwrap();
        let orig = p.clone();
        let mut adam = Adam::new(&p);
        let grads = p.iter().map(|(k, t)| (k.clone(), t.map(|v| v + 1.0))).collect();
        adam.update(&mut p, &grads, 0.0);
        assert_eq!(p, orig);
    }
}
