use serde::{Deserialize, Serialize};

use super::{check_finite, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    PlainGradient,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-model optimizer memory. Moments are head-shaped.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub hyper: OptimizerHyper,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, hyper: OptimizerHyper, head_len: usize) -> Self {
        Self {
            kind,
            hyper,
            first_moment: vec![0.0; head_len],
            second_moment: vec![0.0; head_len],
            step_count: 0,
        }
    }

    /// Applies one update of whichever kind this state was built for.
    pub fn step(&self, params: &ParamVector, grads: &[f64]) -> Result<(ParamVector, OptimizerState)> {
        match self.kind {
            OptimizerKind::PlainGradient => {
                let next = plain_gradient_step(params, grads, self.hyper.lr)?;
                let mut state = self.clone();
                state.step_count += 1;
                Ok((next, state))
            }
            OptimizerKind::AdamW => adamw_step(params, grads, self),
        }
    }
}

fn check_grads(params: &ParamVector, grads: &[f64]) -> Result<()> {
    if grads.len() != params.head().len() {
        return Err(Error::Structural(format!(
            "gradient length {} does not match head length {}",
            grads.len(),
            params.head().len()
        )));
    }
    check_finite(grads, "gradient")
}

/// `head -= eta * grads`.
pub fn plain_gradient_step(params: &ParamVector, grads: &[f64], eta: f64) -> Result<ParamVector> {
    check_grads(params, grads)?;
    let head = params.head().iter().zip(grads).map(|(w, g)| w - eta * g).collect();
    params.with_head(head)
}

/// In-place AdamW update of `values` for step number `t` (1-based).
pub(crate) fn adamw_update(values: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: &OptimizerHyper) {
    let bias1 = 1.0 - h.beta1.powf(t as f64);
    let bias2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        values[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * values[i]);
    }
}

/// Decoupled-weight-decay Adam with bias correction, head only.
pub fn adamw_step(
    params: &ParamVector,
    grads: &[f64],
    state: &OptimizerState,
) -> Result<(ParamVector, OptimizerState)> {
    if state.kind != OptimizerKind::AdamW {
        return Err(Error::Structural("adamw_step called with a non-AdamW state".into()));
    }
    check_grads(params, grads)?;
    if state.first_moment.len() != grads.len() || state.second_moment.len() != grads.len() {
        return Err(Error::Structural("optimizer moments do not match head length".into()));
    }

    let t = state.step_count + 1;
    let mut m = state.first_moment.clone();
    let mut v = state.second_moment.clone();
    let mut head = params.head().to_vec();
    adamw_update(&mut head, grads, &mut m, &mut v, t, &state.hyper);

    let next = params.with_head(head)?;
    let state = OptimizerState {
        kind: state.kind,
        hyper: state.hyper,
        first_moment: m,
        second_moment: v,
        step_count: t,
    };
    Ok((next, state))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{Layout, Part};

    fn params(head: Vec<f64>) -> ParamVector {
        let layout = Arc::new(Layout::new([
            ("b", Part::Backbone, vec![2]),
            ("h", Part::Head, vec![head.len()]),
        ]));
        ParamVector::new(layout, vec![1.5, -2.5], head).unwrap()
    }

    fn hyper(lr: f64, weight_decay: f64) -> OptimizerHyper {
        OptimizerHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    #[test]
    fn plain_step_zero_grad_is_noop() {
        let p = params(vec![1.0, 2.0]);
        assert_eq!(plain_gradient_step(&p, &[0.0, 0.0], 0.1).unwrap(), p);
    }

    #[test]
    fn plain_step_one_element() {
        let p = params(vec![1.0]);
        let next = plain_gradient_step(&p, &[2.0], 0.1).unwrap();
        assert!((next.head()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn plain_step_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head: Vec<f64> = (0..257).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grads: Vec<f64> = (0..257).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = params(head.clone());
        let next = plain_gradient_step(&p, &grads, 0.03).unwrap();
        for i in 0..head.len() {
            let expected = head[i] - 0.03 * grads[i];
            assert_eq!(next.head()[i], expected);
        }
        assert_eq!(next.backbone(), p.backbone());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let p = params(vec![1.0]);
        assert!(matches!(
            plain_gradient_step(&p, &[f64::INFINITY], 0.1),
            Err(Error::AdaptationStep(_))
        ));
        let state = OptimizerState::new(OptimizerKind::AdamW, hyper(0.01, 0.0), 1);
        assert!(adamw_step(&p, &[f64::NAN], &state).is_err());
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let p = params(vec![0.5, -0.5]);
        let state = OptimizerState::new(OptimizerKind::AdamW, hyper(0.01, 0.0), 2);
        let (next, state) = adamw_step(&p, &[0.0, 0.0], &state).unwrap();
        assert_eq!(next, p);
        assert_eq!(state.first_moment, vec![0.0, 0.0]);
        assert_eq!(state.second_moment, vec![0.0, 0.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adamw_first_step_hand_evaluated() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let p = params(vec![0.3]);
        let state = OptimizerState::new(OptimizerKind::AdamW, hyper(0.01, 0.0), 1);
        let (next, _) = adamw_step(&p, &[1.0], &state).unwrap();
        let expected = 0.3 - 0.01 * (1.0 / (1.0 + 1e-8));
        assert!((next.head()[0] - expected).abs() < 1e-12);
    }

    /// Independent scalar transcription of the AdamW rule.
    fn scalar_adamw(mut w: f64, g: f64, steps: u32, h: OptimizerHyper) -> f64 {
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=steps {
            w *= 1.0 - h.lr * h.weight_decay;
            m = h.beta1 * m + (1.0 - h.beta1) * g;
            v = h.beta2 * v + (1.0 - h.beta2) * g * g;
            let m_hat = m / (1.0 - h.beta1.powi(t as i32));
            let v_hat = v / (1.0 - h.beta2.powi(t as i32));
            w -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        w
    }

    #[test]
    fn adamw_two_steps_match_scalar_reference() {
        let h = hyper(0.05, 0.01);
        let p = params(vec![0.7, -1.2]);
        let grads = [0.4, -3.0];
        let state = OptimizerState::new(OptimizerKind::AdamW, h, 2);
        let (p1, s1) = adamw_step(&p, &grads, &state).unwrap();
        let (p2, s2) = adamw_step(&p1, &grads, &s1).unwrap();
        assert_eq!(s2.step_count, 2);
        for i in 0..2 {
            let expected = scalar_adamw(p.head()[i], grads[i], 2, h);
            assert!((p2.head()[i] - expected).abs() < 1e-12, "{i}: {} vs {expected}", p2.head()[i]);
        }
    }

    #[test]
    fn dispatch_counts_steps_and_keeps_backbone() {
        let p = params(vec![0.1, 0.2]);
        for kind in [OptimizerKind::PlainGradient, OptimizerKind::AdamW] {
            let state = OptimizerState::new(kind, hyper(0.01, 0.01), 2);
            let (next, state) = state.step(&p, &[1.0, -1.0]).unwrap();
            assert_eq!(state.step_count, 1);
            assert_eq!(
                next.backbone().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                p.backbone().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
