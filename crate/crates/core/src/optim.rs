//! AdamW: Adam moments with bias correction and decoupled weight decay
//! (decay applied straight to the parameters, not through the moments).
//!
//! Per step, for each parameter theta with gradient g:
//!
//! ```text
//! t <- t + 1
//! m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
//! m_hat = m / (1 - b1^t)        v_hat = v / (1 - b2^t)
//! theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
//! ```

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state over a fixed list of parameter tensors, addressed by
/// position. Moment buffers mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub hyper: AdamWHyper,
}

impl AdamWState {
    pub fn new(shapes: &[usize], hyper: AdamWHyper) -> Self {
        AdamWState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            hyper,
        }
    }

    /// One update over all tensors. `params[i]` and `grads[i]` must match the
    /// shape the state was built with.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for i in 0..params.len() {
            let p = &mut *params[i];
            let g = grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            assert_eq!(p.len(), g.len());
            for j in 0..p.len() {
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * p[j]);
            }
        }
    }
}

/// Single-tensor convenience form of the update.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState) {
    state.step(&mut [params], &[grads]);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64, wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn single_step_without_decay() {
        // Bias correction makes m_hat = v_hat = 1 at t = 1, so the update is
        // lr / (1 + eps).
        let mut theta = [1.0];
        let mut state = AdamWState::new(&[1], hyper(0.1, 0.0));
        adamw_step(&mut theta, &[1.0], &mut state);
        assert!((theta[0] - 0.9).abs() < 1e-7, "{}", theta[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_step_with_decay() {
        let mut theta = [1.0];
        let mut state = AdamWState::new(&[1], hyper(0.1, 0.01));
        adamw_step(&mut theta, &[1.0], &mut state);
        assert!((theta[0] - 0.899).abs() < 1e-7, "{}", theta[0]);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut theta = [0.3, -1.7, 2.5];
        let orig = theta;
        let mut state = AdamWState::new(&[3], hyper(0.1, 0.0));
        for _ in 0..5 {
            adamw_step(&mut theta, &[0.0, 0.0, 0.0], &mut state);
        }
        assert_eq!(theta, orig);
    }

    #[test]
    fn first_step_magnitude_is_sign_like() {
        // At t=1, m_hat/sqrt(v_hat) = g/|g|, so |delta| ~ lr for any gradient scale.
        let lr = 0.05;
        for &g in &[1e-6, 1e-3, 1.0, 1e3, -2.5, -1e-5] {
            let mut theta = [0.0];
            let mut state = AdamWState::new(&[1], hyper(lr, 0.0));
            adamw_step(&mut theta, &[g], &mut state);
            let delta = theta[0].abs();
            assert!(
                delta >= 0.99 * lr && delta <= lr,
                "g={g}: |delta|={delta}"
            );
            assert_eq!(theta[0].signum(), -g.signum());
        }
    }

    #[test]
    fn moments_have_parameter_shapes() {
        let state = AdamWState::new(&[4, 2], AdamWHyper::default());
        assert_eq!(state.m.len(), 2);
        assert_eq!(state.m[0].len(), 4);
        assert_eq!(state.v[1].len(), 2);
    }
}
