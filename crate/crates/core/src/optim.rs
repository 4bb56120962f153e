//! Mini-batch SGD with classical momentum, run by every worker between
//! synchronizations.

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: ParamVector,
    learning_rate: f64,
    momentum: f64,
}

impl SgdState {
    pub fn new(len: usize, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Argument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            velocity: ParamVector::zeros(len),
            learning_rate,
            momentum,
        })
    }

    pub fn with_velocity(mut self, velocity: ParamVector) -> Result<Self> {
        velocity.check_len(self.velocity.len(), "sgd velocity")?;
        self.velocity = velocity;
        Ok(self)
    }

    pub fn velocity(&self) -> &ParamVector {
        &self.velocity
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `v ← μ·v − lr·g`, `θ ← θ + v`, in place.
pub fn sgd_step(params: &mut ParamVector, grad: &ParamVector, state: &mut SgdState) -> Result<()> {
    params.check_len(state.velocity.len(), "sgd params")?;
    grad.check_len(state.velocity.len(), "sgd gradient")?;
    if !grad.is_finite() {
        return Err(Error::Numeric("sgd gradient"));
    }
    let (mu, lr) = (state.momentum, state.learning_rate);
    for ((p, v), &g) in params
        .as_mut_slice()
        .iter_mut()
        .zip(state.velocity.as_mut_slice())
        .zip(grad.as_slice())
    {
        *v = mu * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = pv(&[1.0]);
        let mut s = SgdState::new(1, 0.1, 0.0).unwrap();
        sgd_step(&mut p, &pv(&[10.0]), &mut s).unwrap();
        assert_eq!(p, pv(&[0.0]));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = pv(&[0.25, -4.0]);
        let mut s = SgdState::new(2, 0.3, 0.5).unwrap();
        sgd_step(&mut p, &pv(&[0.0, 0.0]), &mut s).unwrap();
        assert_eq!(p, pv(&[0.25, -4.0]));
    }

    #[test]
    fn pure_momentum_decay() {
        let mut p = pv(&[0.0]);
        let mut s = SgdState::new(1, 1.0, 0.9).unwrap().with_velocity(pv(&[1.0])).unwrap();
        sgd_step(&mut p, &pv(&[0.0]), &mut s).unwrap();
        assert_eq!(s.velocity(), &pv(&[0.9]));
        assert_eq!(p, pv(&[0.9]));
    }

    #[test]
    fn recursion_matches_scalar_hand_computation() {
        let (lr, mu) = (0.05, 0.7);
        let grads = [0.4, -1.2, 0.3, 2.0];
        let mut p = pv(&[1.5]);
        let mut s = SgdState::new(1, lr, mu).unwrap();
        let (mut v_ref, mut p_ref) = (0.0f64, 1.5f64);
        for g in grads {
            sgd_step(&mut p, &pv(&[g]), &mut s).unwrap();
            v_ref = mu * v_ref - lr * g;
            p_ref += v_ref;
            assert_eq!(p.as_slice()[0], p_ref);
            assert_eq!(s.velocity().as_slice()[0], v_ref);
        }
    }

    #[test]
    fn errors() {
        assert!(SgdState::new(1, 0.0, 0.0).is_err());
        assert!(SgdState::new(1, 0.1, 1.0).is_err());
        let mut s = SgdState::new(2, 0.1, 0.0).unwrap();
        let mut p = pv(&[0.0, 0.0]);
        assert!(matches!(sgd_step(&mut p, &pv(&[1.0]), &mut s), Err(Error::Dimension { .. })));
        assert!(matches!(
            sgd_step(&mut p, &pv(&[f64::INFINITY, 0.0]), &mut s),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #[test]
        fn scaling_grad_and_inverse_lr_cancels(
            p0 in -10f64..10.,
            g in -10f64..10.,
            lr in 0.01f64..1.,
            c in prop::sample::select(vec![0.5f64, 2.0, 4.0, 0.25]),
        ) {
            // Power-of-two factors keep the products exact.
            let mut a = pv(&[p0]);
            let mut sa = SgdState::new(1, lr, 0.0).unwrap();
            sgd_step(&mut a, &pv(&[g]), &mut sa).unwrap();
            let mut b = pv(&[p0]);
            let mut sb = SgdState::new(1, lr / c, 0.0).unwrap();
            sgd_step(&mut b, &pv(&[g * c]), &mut sb).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
