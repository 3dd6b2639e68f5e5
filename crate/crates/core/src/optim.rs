//! First-order optimizers over lists of parameter arrays.

use crate::engine::Array;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *p;
                *v = self.momentum * *v + d;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Adam with bias correction; `weight_decay` is decoupled (AdamW) when nonzero.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }
}

/// Cosine-annealed learning rate at `step` of `total` (reaches 0 at `total`).
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut p = vec![Array::from_vec(vec![3.0, -2.0])];
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..200 {
            let g = vec![p[0].clone()];
            opt.step(&mut p, &g);
        }
        assert!(p[0].norm() < 1e-3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Array::from_vec(vec![1.0, 1.0])];
        let mut opt = Adam::new(0.05, 0.5, 0.9);
        opt.step(&mut p, &[Array::from_vec(vec![4.0, -0.1])]);
        assert!((p[0].data()[0] - 0.95).abs() < 1e-6);
        assert!((p[0].data()[1] - 1.05).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = vec![Array::from_vec(vec![0.3, 0.7])];
        let before = p.clone();
        Adam::new(0.0, 0.5, 0.9).step(&mut p, &[Array::from_vec(vec![1.0, 2.0])]);
        assert_eq!(p, before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }
}
