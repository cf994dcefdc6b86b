//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments for parameters of the given element counts, with the
    /// conventional β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::dim(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.first_moment.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.numel() != m.len() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row_vector(vec![1.0, -2.0]);
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[1, 2])], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::row_vector(vec![0.0, 0.0, 0.0]);
        let g = Tensor::row_vector(vec![3.0, -0.2, 1e-3]);
        let mut st = AdamState::new(&[3]);
        adam_step(&mut [&mut p], &[g], &mut st, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        for (&x, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut x = Tensor::scalar(5.0);
        let mut st = AdamState::new(&[1]);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * x.item());
            adam_step(&mut [&mut x], &[g], &mut st, 0.1).unwrap();
        }
        assert!(x.item().abs() < 0.5, "x = {}", x.item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2, 2]);
        let mut st = AdamState::new(&[4]);
        let r = adam_step(&mut [&mut p], &[Tensor::zeros(&[4])], &mut st, 0.1);
        assert!(matches!(r, Err(Error::Dimension { .. })));
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[2, 2])], &mut st, 0.0).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::row_vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
