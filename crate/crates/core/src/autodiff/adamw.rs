use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters. The learning rate is passed per step so a scheduler
/// can own it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamWState {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update:
    ///
    /// ```text
    /// m <- b1 m + (1 - b1) g
    /// v <- b2 v + (1 - b2) g^2
    /// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    /// ```
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(
        &mut self,
        cfg: &AdamWConfig,
        lr: f64,
        params: &mut [Tensor<T>],
        grads: &[Vec<T>],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adamw: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "adamw: parameter {i} has {} values, gradient {}",
                    p.numel(),
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at element {bad}"
                )));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = lr * cfg.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                let gf = gv.as_f64();
                let mf = cfg.beta1 * mv.as_f64() + (1.0 - cfg.beta1) * gf;
                let vf = cfg.beta2 * vv.as_f64() + (1.0 - cfg.beta2) * gf * gf;
                *mv = T::from_f64(mf);
                *vv = T::from_f64(vf);
                let m_hat = mf / bc1;
                let v_hat = vf / bc2;
                let theta = pv.as_f64();
                *pv = T::from_f64(theta - lr * m_hat / (v_hat.sqrt() + cfg.eps) - decay * theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook scalar Adam(W), written independently of the vectorized path.
    fn reference(theta0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            th = th * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    fn run(theta0: f64, grads: &[f64], wd: f64) -> f64 {
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        let mut params = vec![Tensor::scalar(theta0)];
        let mut state = AdamWState::new(&params);
        for &g in grads {
            state.step(&cfg, 1e-3, &mut params, &[vec![g]]).unwrap();
        }
        params[0].data()[0]
    }

    #[test]
    fn first_step_value() {
        let th = run(0.0, &[1.0], 0.0);
        assert!((th - reference(0.0, &[1.0], 1e-3, 0.0)).abs() < 1e-15);
        assert!((th - -9.99999990e-4).abs() < 1e-12, "{th}");
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        assert_eq!(run(0.75, &[0.0; 5], 0.0), 0.75);
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let th = run(2.0, &[0.0; 7], 1e-2);
        let expected = 2.0 * (1.0f64 - 1e-3 * 1e-2).powi(7);
        assert!((th - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_for_ten_steps() {
        let grads: Vec<f64> = (0..10).map(|i| ((i as f64) * 1.3).sin() * 2.0 - 0.4).collect();
        for wd in [0.0, 1e-4] {
            let got = run(0.3, &grads, wd);
            let want = reference(0.3, &grads, 1e-3, wd);
            assert!((got - want).abs() <= 1e-12, "wd={wd}: {got} vs {want}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let cfg = AdamWConfig::default();
        let mut params = vec![Tensor::scalar(1.0f64)];
        let mut state = AdamWState::new(&params);
        let err = state.step(&cfg, 1e-3, &mut params, &[vec![f64::NAN]]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(params[0].data()[0], 1.0);
        assert_eq!(state.t, 0);
    }
}
