use ndarray::{Array1, Array2, Zip};

use super::model::{Gradients, MlpModel};

/// Adam with the bias correction folded into the step size:
/// `lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)`, `p -= lr_t * m / (sqrt(v) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m_weights: Vec<Array2<f64>>,
    pub m_biases: Vec<Array1<f64>>,
    pub v_weights: Vec<Array2<f64>>,
    pub v_biases: Vec<Array1<f64>>,
}

impl Adam {
    pub fn new(model: &MlpModel, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let z = Gradients::zeros_like(model);
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m_weights: z.weights.clone(),
            m_biases: z.biases.clone(),
            v_weights: z.weights,
            v_biases: z.biases,
        }
    }

    pub fn apply(&mut self, model: &mut MlpModel, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let lr_t = self.learning_rate * (1.0 - self.beta2.powf(t)).sqrt() / (1.0 - self.beta1.powf(t));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (i, layer) in model.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.weights)
                .and(&mut self.m_weights[i])
                .and(&mut self.v_weights[i])
                .and(&grads.weights[i])
                .for_each(|p, m, v, &g| update(p, m, v, g, b1, b2, eps, lr_t));
            Zip::from(&mut layer.bias)
                .and(&mut self.m_biases[i])
                .and(&mut self.v_biases[i])
                .and(&grads.biases[i])
                .for_each(|p, m, v, &g| update(p, m, v, g, b1, b2, eps, lr_t));
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn update(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, b1: f64, b2: f64, eps: f64, lr_t: f64) {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    *p -= lr_t * *m / (v.sqrt() + eps);
}
