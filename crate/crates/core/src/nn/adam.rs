//! Adam with decoupled weight regularisation.

use serde::{Deserialize, Serialize};

use super::network::ParamTensor;
use crate::error::{Error, Result};

pub const ADAM_EPSILON: f64 = 1e-8;

/// How the per-update weight regulariser is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// `p ← p · (1 − lr · λ)` before the Adam step (weights and γ only).
    DecoupledDecay,
    /// Clamp decayed tensors to `[−λ, λ]` after the Adam step.
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub regularization: Regularization,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: ADAM_EPSILON,
            weight_decay: 0.01,
            regularization: Regularization::DecoupledDecay,
        }
    }
}

/// Moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        AdamState {
            config,
            step_count: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[ParamTensor<'_>]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.values.len()).collect();
        Self::new(config, &shapes)
    }

    /// One bias-corrected update of every tensor.
    pub fn step(&mut self, params: Vec<ParamTensor<'_>>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam state for {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.values.len() != g.len() || g.len() != self.first[k].len() {
                return Err(Error::Shape(format!("tensor {k} size mismatch")));
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let decay = p.decay && c.weight_decay != 0.0;
            if decay && c.regularization == Regularization::DecoupledDecay {
                let f = 1.0 - c.lr * c.weight_decay;
                p.values.iter_mut().for_each(|w| *w *= f);
            }
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
            if decay && c.regularization == Regularization::Clip {
                let lim = c.weight_decay;
                p.values.iter_mut().for_each(|w| *w = w.clamp(-lim, lim));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor(values: &mut [f64], decay: bool) -> ParamTensor<'_> {
        ParamTensor { values, decay }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut st = AdamState::new(cfg, &[3]);
        for _ in 0..5 {
            st.step(vec![tensor(&mut p, true)], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for g in [0.37, -2.5, 0.1] {
            let mut p = vec![1.0];
            let mut st = AdamState::new(cfg, &[1]);
            st.step(vec![tensor(&mut p, true)], &[&[g]]).unwrap();
            assert!((p[0] - (1.0 - 5e-4 * g.signum())).abs() < 1e-9, "{g}: {}", p[0]);
            assert_eq!(st.step_count, 1);
        }
    }

    #[test]
    fn decay_skips_biases() {
        let mut w = vec![2.0];
        let mut b = vec![2.0];
        let mut st = AdamState::new(AdamConfig::default(), &[1, 1]);
        st.step(vec![tensor(&mut w, true), tensor(&mut b, false)], &[&[0.0], &[0.0]])
            .unwrap();
        assert!((w[0] - 2.0 * (1.0 - 5e-4 * 0.01)).abs() < 1e-15);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn clip_mode_bounds_weights() {
        let cfg = AdamConfig {
            regularization: Regularization::Clip,
            ..AdamConfig::default()
        };
        let mut w = vec![0.5, -0.5, 0.001];
        let mut st = AdamState::new(cfg, &[3]);
        st.step(vec![tensor(&mut w, true)], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(w, vec![0.01, -0.01, 0.001]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(st.step(vec![tensor(&mut p, true)], &[&[0.0; 3]]).is_err());
    }

    proptest! {
        // Reordering the tensors handed to Adam never changes any
        // parameter's trajectory.
        #[test]
        fn tensor_order_does_not_matter(
            a0 in proptest::collection::vec(-1.0f64..1.0, 4),
            b0 in proptest::collection::vec(-1.0f64..1.0, 3),
            ga in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..6),
            gb in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 6),
        ) {
            let cfg = AdamConfig::default();
            let (mut a1, mut b1) = (a0.clone(), b0.clone());
            let (mut a2, mut b2) = (a0, b0);
            let mut s1 = AdamState::new(cfg, &[4, 3]);
            let mut s2 = AdamState::new(cfg, &[3, 4]);
            for (g_a, g_b) in ga.iter().zip(&gb) {
                s1.step(vec![tensor(&mut a1, true), tensor(&mut b1, false)], &[g_a, g_b]).unwrap();
                s2.step(vec![tensor(&mut b2, false), tensor(&mut a2, true)], &[g_b, g_a]).unwrap();
            }
            prop_assert_eq!(a1, a2);
            prop_assert_eq!(b1, b2);
        }
    }
}
