//! Adam optimizer over a [`ParamSet`].

use ndarray::ArrayD;

use super::{GradSet, ParamSet};

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One bias-corrected update; gradients must already be batch-averaged.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let id = super::ParamId(idx);
            let g = grads.get(id);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let t = params.get_mut(id);
            ndarray::Zip::from(t)
                .and(&self.m[idx])
                .and(&self.v[idx])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::rng::rng_derive;

    // Adam on a quadratic bowl converges toward the minimum.
    #[test]
    fn minimizes_quadratic() {
        let mut rng = rng_derive(3, &[1]).rng();
        let mut ps = ParamSet::new();
        let id = ps.register("x", &[4], Init::FanInUniform { fan_in: 1 }, &mut rng);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..500 {
            let mut grads = ps.zeros_like();
            let g: ArrayD<f64> = ps.get(id).mapv(|x| 2.0 * (x - 1.5));
            *grads.get_mut(id) += &g;
            opt.step(&mut ps, &grads);
        }
        for &x in ps.get(id).iter() {
            assert!((x - 1.5).abs() < 1e-3, "x = {x}");
        }
    }
}
