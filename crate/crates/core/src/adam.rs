//! Row-sparse Adam.
//!
//! Moments live per parameter row and are only touched for rows that receive
//! a gradient in the current step ("lazy" Adam). Bias correction uses the
//! global step counter, which advances once per mini-batch.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one `rows x dim` parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    dim: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            m: vec![0.0; rows * dim],
            v: vec![0.0; rows * dim],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Starts a new optimisation step.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Applies one update to `params` (the row's slice) with gradient `grad`.
    /// Call [`advance`](Self::advance) first.
    pub fn update_row(&mut self, cfg: &AdamConfig, row: usize, params: &mut [f64], grad: &[f64]) {
        debug_assert!(self.step > 0, "advance() before update_row()");
        debug_assert_eq!(params.len(), self.dim);
        debug_assert_eq!(grad.len(), self.dim);
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let base = row * self.dim;
        let m = &mut self.m[base..base + self.dim];
        let v = &mut self.v[base..base + self.dim];
        for k in 0..self.dim {
            let g = grad[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn first_step_moves_against_gradient_by_at_most_lr(x0 in -5.0f64..5.0, target in -5.0f64..5.0, lr in 1e-5f64..1e-1) {
            prop_assume!((x0 - target).abs() > 1e-6);
            let cfg = AdamConfig::with_learning_rate(lr);
            let mut state = AdamState::new(1, 1);
            let mut x = [x0];
            // d/dx (x - target)^2
            let g = 2.0 * (x0 - target);
            state.advance();
            state.update_row(&cfg, 0, &mut x, &[g]);
            let moved = x[0] - x0;
            prop_assert!(moved.signum() == -g.signum());
            prop_assert!(moved.abs() <= lr * (1.0 + 1e-6));
        }
    }

    #[test]
    fn repeated_steps_converge_on_quadratic() {
        let cfg = AdamConfig::with_learning_rate(0.05);
        let mut state = AdamState::new(1, 2);
        let mut x = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * x[0], 2.0 * x[1]];
            state.advance();
            state.update_row(&cfg, 0, &mut x, &g);
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{x:?}");
        assert_eq!(state.step(), 2000);
    }

    #[test]
    fn untouched_rows_keep_their_moments() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(2, 1);
        let mut row = [1.0];
        state.advance();
        state.update_row(&cfg, 1, &mut row, &[0.5]);
        assert_eq!(state.m[0], 0.0);
        assert!(state.m[1] != 0.0);
    }
}
