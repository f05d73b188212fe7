use std::f64::consts::PI;

use super::Matrix;
use crate::error::Result;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            g.check_finite("gradient")?;
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                let pk = &mut p.data_mut()[k];
                *pk -= lr * (update + self.weight_decay * *pk);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = (step as f64 / (total - 1) as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = Matrix::row_vector(&[3.0, -2.0]);
        let mut opt = Adam::new(&[(1, 2)]);
        for _ in 0..2000 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[g], 0.05).unwrap();
        }
        assert!(x.frobenius_norm() < 1e-3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 11), 1.0);
        assert!(cosine_lr(1.0, 10, 11).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 11) - 0.5).abs() < 1e-12);
    }
}
