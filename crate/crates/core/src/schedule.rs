//! Cosine noise schedule, forward noising, v-parameterization and the
//! Gaussian posterior step.
//!
//! All per-step arrays are indexed by the diffusion step `t` in `1..=T`;
//! slot 0 holds the `t = 0` convention (`alpha_bar[0] = 1`, `beta[0] = 0`).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{Scalar, Tensor};
use crate::CHANGEABLE_DIM;

/// Largest admissible per-step beta.
pub const BETA_CLIP: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            offset: 0.008,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    tilde_beta: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_bar(t) = f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`,
    /// re-accumulated from the clipped betas so that
    /// `alpha_bar[t] = alpha_bar[t-1] * (1 - beta[t])` holds exactly.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(offset > 0.0) {
            return Err(Error::Config(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |t: usize| {
            let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut tilde_beta = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta[t] = (1.0 - raw[t] / raw[t - 1]).min(BETA_CLIP);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            tilde_beta[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
        }
        Ok(Self {
            config: ScheduleConfig { steps, offset },
            beta,
            alpha,
            alpha_bar,
            tilde_beta,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::cosine(cfg.steps, cfg.offset)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn tilde_beta(&self, t: usize) -> f64 {
        self.tilde_beta[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::Usage(format!("diffusion step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let c_x0 = ab_prev.sqrt() * self.beta[t] / (1.0 - ab);
        let c_xt = self.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c_x0, c_xt)
    }
}

/// Binary selection of the entries that are noised and denoised: the
/// changeable features of movable objects.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseMask {
    mask: Tensor<f32>,
}

impl DenoiseMask {
    /// Mask for `[O, L, d]` trajectories given per-object movability.
    pub fn from_movable(movable: &[bool], steps: usize, features: usize) -> Self {
        let mut mask = Tensor::zeros([movable.len(), steps, features]);
        for (o, &m) in movable.iter().enumerate() {
            if !m {
                continue;
            }
            for l in 0..steps {
                for f in 0..CHANGEABLE_DIM.min(features) {
                    mask.set(&[o, l, f], 1.0);
                }
            }
        }
        Self { mask }
    }

    /// Reads the movable flag (feature 3) at step 0 of each object.
    pub fn from_trajectory<T: Scalar>(x: &Tensor<T>) -> Result<Self> {
        if x.rank() != 3 || x.dims()[2] <= 3 {
            return Err(shape_err!("trajectory must be [O, L, d>3], got {:?}", x.dims()));
        }
        let (o, l, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let movable: Vec<bool> = (0..o).map(|i| x.at(&[i, 0, 3]).as_f64() > 0.5).collect();
        Ok(Self::from_movable(&movable, l, d))
    }

    /// Wraps an explicit mask after checking the structural invariants.
    pub fn from_tensor(mask: Tensor<f32>) -> Result<Self> {
        if mask.rank() != 3 {
            return Err(shape_err!("mask must be rank 3, got {:?}", mask.dims()));
        }
        let (o, l, d) = (mask.dims()[0], mask.dims()[1], mask.dims()[2]);
        for oi in 0..o {
            for f in 0..d {
                let v0 = mask.at(&[oi, 0, f]);
                if v0 != 0.0 && v0 != 1.0 {
                    return Err(Error::Contract("mask entries must be 0 or 1".into()));
                }
                if f >= CHANGEABLE_DIM && v0 != 0.0 {
                    return Err(Error::Contract(format!("immutable feature {f} is masked")));
                }
                if (1..l).any(|li| mask.at(&[oi, li, f]) != v0) {
                    return Err(Error::Contract("mask must be constant over trajectory steps".into()));
                }
            }
        }
        Ok(Self { mask })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.mask
    }

    pub fn dims(&self) -> &[usize] {
        self.mask.dims()
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }

    #[inline]
    pub fn is_set(&self, flat: usize) -> bool {
        self.mask.data()[flat] > 0.0
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        self.mask.cast()
    }
}

fn check_dims<T: Scalar>(what: &str, a: &Tensor<T>, mask: &DenoiseMask) -> Result<()> {
    if a.dims() != mask.dims() {
        return Err(shape_err!("{what}: dims {:?} vs mask {:?}", a.dims(), mask.dims()));
    }
    Ok(())
}

/// Masked entries: `sqrt(ab) x0 + sqrt(1 - ab) eps`; the rest copied from `x0`.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
    mask: &DenoiseMask,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    check_dims("q_sample x0", x0, mask)?;
    check_dims("q_sample eps", eps, mask)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    let mut out = x0.clone();
    for (i, (o, &e)) in out.data_mut().iter_mut().zip(eps.data()).enumerate() {
        if mask.is_set(i) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// `v = sqrt(ab) eps - sqrt(1 - ab) x0` on masked entries, zero elsewhere.
pub fn v_target<T: Scalar>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    mask: &DenoiseMask,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    check_dims("v_target x0", x0, mask)?;
    check_dims("v_target eps", eps, mask)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| if mask.is_set(i) { a * e - b * x } else { T::zero() })
        .collect();
    Tensor::new(x0.dims().to_vec(), data)
}

/// `x0 = sqrt(ab) x_t - sqrt(1 - ab) v` on masked entries; the rest copied
/// from `x_t`.
pub fn x0_from_v<T: Scalar>(
    x_t: &Tensor<T>,
    v: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    mask: &DenoiseMask,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    check_dims("x0_from_v x_t", x_t, mask)?;
    check_dims("x0_from_v v", v, mask)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    let mut out = x_t.clone();
    for (i, (o, &vv)) in out.data_mut().iter_mut().zip(v.data()).enumerate() {
        if mask.is_set(i) {
            *o = a * *o - b * vv;
        }
    }
    Ok(out)
}

/// One reverse step `x_t -> x_{t-1}` of the Gaussian posterior with fixed
/// variance `tilde_beta[t]`. At `t = 1` the masked entries become `x0_hat`.
pub fn posterior_step<T: Scalar>(
    x_t: &Tensor<T>,
    x0_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    mask: &DenoiseMask,
    xi: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    check_dims("posterior x_t", x_t, mask)?;
    check_dims("posterior x0_hat", x0_hat, mask)?;
    check_dims("posterior noise", xi, mask)?;
    let mut out = x_t.clone();
    if t == 1 {
        for (i, (o, &x0)) in out.data_mut().iter_mut().zip(x0_hat.data()).enumerate() {
            if mask.is_set(i) {
                *o = x0;
            }
        }
        return Ok(out);
    }
    let (c0, ct) = sched.posterior_coefficients(t);
    let (c0, ct) = (T::from_f64(c0), T::from_f64(ct));
    let sd = T::from_f64(sched.tilde_beta(t).sqrt());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        if mask.is_set(i) {
            *o = c0 * x0_hat.data()[i] + ct * *o + sd * xi.data()[i];
        }
    }
    Ok(out)
}
