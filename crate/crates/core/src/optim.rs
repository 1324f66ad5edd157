//! Adam with decoupled weight decay.

use crate::numeric::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-tensor first and second moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[&DenseArray]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Decay is applied to the weights before the moment step,
    /// and bias correction folds into the step size and denominator.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut DenseArray, &'a DenseArray)>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2_sqrt = (1.0 - c.beta2.powi(self.step as i32)).sqrt();
        let step_size = c.learning_rate / bc1;
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for (i, (p, g)) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if c.weight_decay != 0.0 {
                    *w *= decay;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + c.eps;
                *w -= step_size * m[j] / denom;
            }
        }
    }
}
