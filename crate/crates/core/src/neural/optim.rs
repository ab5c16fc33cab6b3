use super::params::Layout;

/// Linear warm-up to the base rate, then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(total_steps: usize, warmup_fraction: f64) -> Self {
        Schedule {
            total_steps,
            warmup_steps: (total_steps as f64 * warmup_fraction).ceil() as usize,
        }
    }

    /// Multiplier for 1-based optimiser step `t`.
    pub fn factor(&self, t: usize) -> f64 {
        if t <= self.warmup_steps {
            return t as f64 / self.warmup_steps.max(1) as f64;
        }
        let rest = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        (self.total_steps.saturating_sub(t) as f64 / rest as f64).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    decay: Vec<std::ops::Range<usize>>,
}

impl AdamW {
    pub(crate) fn new(layout: &Layout, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            t: 0,
            decay: layout
                .tensors
                .iter()
                .filter(|t| t.is_matrix())
                .map(|t| t.seg.range())
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// One update with learning rate `lr · factor`; decay is decoupled from
    /// the adaptive step and applied to matrices only.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], factor: f64) {
        self.t += 1;
        let lr = self.lr * factor;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        if lr == 0.0 {
            for i in 0..params.len() {
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            }
            return;
        }
        for r in &self.decay {
            for p in &mut params[r.clone()] {
                *p -= lr * self.weight_decay * *p;
            }
        }
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
