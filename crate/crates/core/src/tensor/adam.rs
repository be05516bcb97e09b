use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |e: &super::ParamEntry| Tensor::zeros(e.value.shape());
        Adam {
            config,
            first: store.entries().iter().map(zeros).collect(),
            second: store.entries().iter().map(zeros).collect(),
            steps: vec![0; store.len()],
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for (&id, g) in grads.params() {
            self.update(store, id.index(), g);
        }
    }

    /// Applies one update to parameter `index` with gradient `g`.
    pub fn update(&mut self, store: &mut ParamStore, index: usize, g: &Tensor) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.steps[index] += 1;
        let t = self.steps[index] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = self.first[index].data_mut();
        let v = self.second[index].data_mut();
        let p = store.get_mut(super::ParamId(index)).data_mut();
        for (((p, m), v), g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}
