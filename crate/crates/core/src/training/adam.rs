use crate::model::EcmParams;

/// Adam with decoupled weight decay. Decay is applied to weight tensors
/// only, never to biases.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grad` must have the same structure as `params`.
    pub fn step(&mut self, params: &mut EcmParams, grad: &EcmParams) {
        let grads = grad.tensors();
        let mut tensors = params.tensors_mut();
        assert_eq!(grads.len(), tensors.len(), "gradient structure mismatch");
        if self.first.is_empty() {
            self.first = tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate;
        for (i, (param, g)) in tensors.iter_mut().zip(grads.iter()).enumerate() {
            debug_assert_eq!(param.name, g.name);
            let decay = if param.is_bias {
                1.0
            } else {
                1.0 - lr * self.weight_decay
            };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..param.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                param.data[j] = param.data[j] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
