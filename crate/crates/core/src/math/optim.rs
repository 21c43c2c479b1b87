use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::Tensor2;
use crate::error::{Error, Result};

/// Adam moment accumulators for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Tensor2>,
    pub second_moment: Vec<Tensor2>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Tensor2> = params
            .named_params()
            .iter()
            .map(|(_, t)| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        }
    }
}

/// One bias-corrected Adam update, `θ ← θ − lr·m̂/(√v̂ + ε)`.
///
/// The whole update is rejected if any gradient entry is non-finite.
pub fn adam_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate {lr}")));
    }
    let grads = grads.named_params();
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
        }
    }
    let mut params = params.params_mut();
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, (name, g)), m) in params.iter().zip(&grads).zip(&state.first_moment) {
        if !p.same_shape(g) || !p.same_shape(m) {
            return Err(Error::shape(format!("parameter `{name}`")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, (_, g)), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Step-decay schedule `lr0 · factor^epoch`.
pub fn lr_at_epoch(lr0: f64, epoch: usize, factor: f64) -> f64 {
    lr0 * factor.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = Tensor2::row_vector(&[0.0]);
        let g = Tensor2::row_vector(&[1.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        // m̂ = v̂ = g = 1 on the first step.
        let expected = -1e-3 * 1.0 / (1.0_f64.sqrt() + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-12);
        assert!((p.get(0, 0) + 9.99999995e-4).abs() < 1e-11);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor2::row_vector(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &Tensor2::row_vector(&[0.5, 0.5]), &mut st, 1e-2).unwrap();
        let after_one = p.clone();
        let m_before = st.first_moment[0].clone();
        adam_step(&mut p, &Tensor2::zeros(1, 2), &mut st, 0.0).unwrap();
        assert_eq!(p, after_one);
        for (a, b) in st.first_moment[0].data().iter().zip(m_before.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }

        let mut fresh = Tensor2::row_vector(&[3.0]);
        let mut st = AdamState::new(&fresh);
        adam_step(&mut fresh, &Tensor2::zeros(1, 1), &mut st, 1e-3).unwrap();
        assert_eq!(fresh.get(0, 0), 3.0);
    }

    #[test]
    fn deterministic_and_rejects_nan() {
        let p0 = Tensor2::row_vector(&[0.2, 0.7]);
        let g = Tensor2::row_vector(&[0.3, -0.1]);
        let run = || {
            let mut p = p0.clone();
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
            (p, st)
        };
        assert_eq!(run(), run());

        let mut p = p0.clone();
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &Tensor2::row_vector(&[f64::NAN, 0.0]), &mut st, 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, p0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at_epoch(1e-3, 0, 0.96), 1e-3);
        assert_eq!(lr_at_epoch(1e-3, 2, 0.96), 9.216e-4);
        assert!((lr_at_epoch(1e-4, 1, 0.96) - 9.6e-5).abs() < 1e-20);
    }
}
