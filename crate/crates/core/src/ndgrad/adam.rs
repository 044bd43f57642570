use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
    dims: Vec<usize>,
}

impl AdamState {
    pub fn new(dims: &[usize], config: AdamConfig) -> Self {
        let n = dims.iter().product();
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            config,
            dims: dims.to_vec(),
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
///
/// Moments are kept in `f64` regardless of the parameter precision.
pub fn adam_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState) -> Result<()> {
    if param.dims() != grad.dims() || param.dims() != state.dims.as_slice() {
        return Err(shape_err!(
            "adam: param {:?}, grad {:?}, state {:?}",
            param.dims(),
            grad.dims(),
            state.dims
        ));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g.as_f64();
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p = T::from_f64(p.as_f64() - lr * mhat / (vhat.sqrt() + eps));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[3], AdamConfig::default());
        adam_step(&mut p, &Tensor::zeros([3]), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = Tensor::<f64>::zeros([4]);
        let g = Tensor::<f64>::from_f64([4], &[3.0, -0.2, 1e-3, -50.0]).unwrap();
        let mut st = AdamState::new(&[4], cfg);
        adam_step(&mut p, &g, &mut st).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            // step 1: m_hat = g, v_hat = g^2, update = -lr g / (|g| + eps)
            let expected = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-15);
            assert!((pv + 0.01 * gv.signum()).abs() < 0.01 * 1e-8 / gv.abs() + 1e-15);
        }
    }

    #[test]
    fn steps_are_reproducible() {
        let run = || {
            let mut p = Tensor::<f32>::from_f64([2], &[0.3, 0.7]).unwrap();
            let g = Tensor::<f32>::from_f64([2], &[0.1, -0.4]).unwrap();
            let mut st = AdamState::new(&[2], AdamConfig::default());
            adam_step(&mut p, &g, &mut st).unwrap();
            adam_step(&mut p, &g, &mut st).unwrap();
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dim_mismatch_is_a_shape_error() {
        let mut p = Tensor::<f32>::zeros([2]);
        let mut st = AdamState::new(&[2], AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &Tensor::zeros([3]), &mut st),
            Err(crate::Error::Shape(_))
        ));
    }
}
