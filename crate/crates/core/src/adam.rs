//! First-order update with adaptive first- and second-moment scaling.

use crate::real::Real;

pub(crate) const BETA1: f64 = 0.9;
pub(crate) const BETA2: f64 = 0.999;
pub(crate) const EPSILON: f64 = 1e-8;

/// Moment estimates for a fixed-length parameter vector, updated
/// element-wise so the update commutes with any reordering of parameters.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Advances the step counter; call once per iteration before `update`.
    pub(crate) fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates `params` in place from `grads`; `offset` addresses this
    /// block within the full parameter vector.
    pub(crate) fn update<T: Real>(&mut self, offset: usize, params: &mut [T], grads: &[T], lr: f64) {
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.f64();
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
            *p = T::of(p.f64() - step);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut a = Adam::new(2);
        let mut p = [1.0f64, -1.0];
        a.tick();
        a.update(0, &mut p, &[3.0, -0.01], 0.5);
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!((p[1] + 0.5).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = Adam::new(1);
        let mut p = [2.0f32];
        a.tick();
        a.update(0, &mut p, &[0.0], 0.5);
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(1);
        let mut p = [5.0f64];
        for k in 0..500 {
            a.tick();
            let lr = 0.1 * (1.0 - k as f64 / 500.0) + 1e-3;
            let g = [2.0 * (p[0] - 1.5)];
            a.update(0, &mut p, &g, lr);
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }
}
