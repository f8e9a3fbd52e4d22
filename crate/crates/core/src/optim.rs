//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// First/second moments for one parameter group plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, config: AdamConfig) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self { m, v, t: 0, config }
    }

    pub fn for_params(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Self::new(params.iter().map(|p| p.shape()), config)
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("param {i}: param {:?}, grad {:?}, moments {:?}", p.shape(), g.shape(), self.m[i].shape()),
                ));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (lr_t, bc1_t, bc2_t, eps_t) = (T::of(lr), T::of(bc1), T::of(bc2), T::of(eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + ob1 * gj;
                vd[j] = b2 * vd[j] + ob2 * gj * gj;
                let mhat = md[j] / bc1_t;
                let vhat = vd[j] / bc2_t;
                pd[j] -= lr_t * mhat / (vhat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [5.0, -3.0, 1e-3] {
            let mut p = vec![scalar(1.0)];
            let mut st = AdamState::for_params(&p, AdamConfig::default());
            st.step(&mut p, &[scalar(g)], 0.1).unwrap();
            let delta = p[0].item() - 1.0;
            assert!((delta + 0.1 * f64::signum(g)).abs() < 1e-6, "g={g} delta={delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = vec![scalar(2.5)];
        let mut st = AdamState::for_params(&p, AdamConfig::default());
        st.step(&mut p, &[scalar(0.0)], 0.1).unwrap();
        assert_eq!(p[0].item(), 2.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn quadratic_matches_scalar_recomputation() {
        // f(w) = (w - 3)², lr 0.5, 10 steps from 0.
        let mut p = vec![scalar(0.0)];
        let cfg = AdamConfig::default();
        let mut st = AdamState::for_params(&p, cfg);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut prev_gap = 3.0f64;
        for t in 1..=10 {
            let g = 2.0 * (p[0].item() - 3.0);
            st.step(&mut p, &[scalar(g)], 0.5).unwrap();

            let gr = 2.0 * (w - 3.0);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * gr;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * gr * gr;
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            let vhat = v / (1.0 - cfg.beta2.powi(t));
            w -= 0.5 * mhat / (vhat.sqrt() + cfg.eps);
            assert_eq!(p[0].item().to_bits(), w.to_bits());
            let gap = (3.0 - w).abs();
            assert!(gap < prev_gap, "step {t}: not moving toward 3");
            assert!(w < 3.0);
            prev_gap = gap;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::for_params(&p, AdamConfig::default());
        let g = Tensor::<f64>::zeros(&[2]);
        assert!(st.step(&mut p, &[g], 0.1).is_err());
    }
}
