use ndarray::{Array2, Zip};

use crate::autodiff::ParamStore;
use crate::config::TrainConfig;

/// Adam with bias-corrected moment estimates; no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.eps as f32,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Array2<f32>]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.push("w", array![[1.0f32, -2.0]]);
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut opt = Adam::new(&store, &cfg);
        opt.update(&mut store, &[array![[3.0f32, -0.5]]]);
        let w = store.get(store.find("w").unwrap());
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.push("x", array![[5.0f32]]);
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut opt = Adam::new(&store, &cfg);
        for _ in 0..500 {
            let x = store.get(id)[[0, 0]];
            opt.update(&mut store, &[array![[2.0 * (x - 1.0)]]]);
        }
        assert!((store.get(id)[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
