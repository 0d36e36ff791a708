//! Adam optimiser shared by refinement and restorer training.

use num_traits::Float;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update; `lr(i)` is the rate of parameter `i`.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = |x: f64| T::from(x).unwrap();
        let (b1, b2, eps) = (c(BETA1), c(BETA2), c(EPSILON));
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let one = T::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / c(bc1);
            let v_hat = self.v[i] / c(bc2);
            params[i] = params[i] - c(lr(i)) * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [1.0f64, -2.0, 0.5];
        let mut adam = Adam::new(3);
        adam.step(&mut p, &[3.0, -0.1, 0.0], |_| 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = [5.0f32, -3.0];
        let mut adam = Adam::new(2);
        for _ in 0..3000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 1.0)];
            adam.step(&mut p, &g, |_| 0.01);
        }
        assert!((p[0] - 1.0).abs() < 1e-2 && (p[1] + 1.0).abs() < 1e-2, "{p:?}");
    }
}
