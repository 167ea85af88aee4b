//! ADAM parameter updates with bias correction.

use crate::num::Element;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Element> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One ADAM step over a single parameter tensor.
///
/// `step` is the 1-based update count after this call; callers increment
/// it once per optimizer step and pass the incremented value here.
pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    moments: &mut Moments<T>,
    lr: f64,
    step: u64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), moments.m.len());
    debug_assert!(step >= 1);
    let b1 = T::from_f64(BETA1);
    let b2 = T::from_f64(BETA2);
    let one_minus_b1 = T::from_f64(1.0 - BETA1);
    let one_minus_b2 = T::from_f64(1.0 - BETA2);
    let corr1 = T::from_f64(1.0 / (1.0 - BETA1.powi(step as i32)));
    let corr2 = T::from_f64(1.0 / (1.0 - BETA2.powi(step as i32)));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(EPSILON);

    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        *m = b1 * *m + one_minus_b1 * g;
        *v = b2 * *v + one_minus_b2 * g * g;
        let m_hat = *m * corr1;
        let v_hat = *v * corr2;
        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_unit_direction() {
        // After bias correction the first update is lr * g / (|g| + eps).
        let mut p = vec![1.0_f64, -2.0, 0.5];
        let g = vec![10.0, -0.03, 4.0];
        let mut mom = Moments::zeros(3);
        adam_step(&mut p, &g, &mut mom, 0.001, 1);
        for (i, (&pv, &gv)) in p.iter().zip(&[1.0, -2.0, 0.5]).enumerate() {
            let expect = gv - 0.001 * g[i] / (g[i].abs() + EPSILON);
            assert!((pv - expect).abs() < 1e-12, "param {i}: {pv} vs {expect}");
        }
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let orig = vec![1.25_f32, -0.75, 3.5];
        let mut p = orig.clone();
        let g = vec![5.0, -2.0, 0.1];
        let mut mom = Moments::zeros(3);
        for step in 1..=5 {
            adam_step(&mut p, &g, &mut mom, 0.0, step);
        }
        for (a, b) in p.iter().zip(&orig) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // moments still advance
        assert!(mom.m[0] != 0.0 && mom.v[0] != 0.0);
    }

    #[test]
    fn constant_gradient_converges_toward_minimum_direction() {
        let mut p = vec![10.0_f64];
        let mut mom = Moments::zeros(1);
        for step in 1..=400 {
            let g = vec![2.0 * p[0]];
            adam_step(&mut p, &g, &mut mom, 0.1, step);
        }
        assert!(p[0].abs() < 0.5, "did not descend: {}", p[0]);
    }
}
