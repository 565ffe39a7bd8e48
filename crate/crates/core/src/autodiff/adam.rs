use crate::matrix::Matrix;

use super::ParamSet;

/// Adam with step learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative decay applied every `decay_interval` epochs.
    pub decay: f64,
    pub decay_interval: u32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.75,
            decay_interval: 5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.decay > 0.0
            && self.decay_interval > 0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// `lr · decay^⌊epoch / interval⌋`
pub fn learning_rate(config: &AdamConfig, epoch: u32) -> f64 {
    config.lr * config.decay.powi((epoch / config.decay_interval) as i32)
}

/// One bias-corrected Adam update of every parameter, in parameter order.
///
/// Panics if `grads` does not line up with `params`.
pub fn adam_step(params: &mut ParamSet, grads: &[Matrix], config: &AdamConfig, epoch: u32) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    let lr = learning_rate(config, epoch);
    for (p, g) in params.iter_mut().zip(grads) {
        assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
        p.t += 1;
        let bc1 = 1.0 - config.beta1.powi(p.t as i32);
        let bc2 = 1.0 - config.beta2.powi(p.t as i32);
        let value = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let c = AdamConfig::default();
        assert_eq!(learning_rate(&c, 0), 5e-4);
        assert_eq!(learning_rate(&c, 4), 5e-4);
        assert!((learning_rate(&c, 5) - 3.75e-4).abs() < 1e-18);
        assert!((learning_rate(&c, 12) - 2.8125e-4).abs() < 1e-18);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let c = AdamConfig::default();
        for g in [0.3, -2.0, 1e-3] {
            let mut ps = ParamSet::new();
            ps.add("w", Matrix::scalar(1.0));
            adam_step(&mut ps, &[Matrix::scalar(g)], &c, 0);
            let delta = ps.iter().next().unwrap().value[(0, 0)] - 1.0;
            // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
            let expected = -c.lr * g / (g.abs() + c.eps);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
            assert!((delta + c.lr * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut ps = ParamSet::new();
        ps.add("w", Matrix::from_rows(&[vec![0.5, -1.5]]));
        adam_step(&mut ps, &[Matrix::zeros(1, 2)], &AdamConfig::default(), 3);
        assert_eq!(
            ps.iter().next().unwrap().value,
            Matrix::from_rows(&[vec![0.5, -1.5]])
        );
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
