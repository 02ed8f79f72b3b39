use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::grid::Param;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    /// `lr / (1 + decay * t)`.
    #[default]
    InverseTime,
    /// `lr * (1 - decay)^t`.
    Multiplicative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub decay: f64,
    #[serde(default)]
    pub decay_kind: DecayKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            decay: 5e-6,
            decay_kind: DecayKind::InverseTime,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments (kept in double precision) and the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub cfg: AdamConfig,
    /// Learning rate before per-step decay; lowered by the epoch schedule.
    pub base_lr: f64,
    /// Completed update steps.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Scalar>(cfg: AdamConfig, params: &[Param<T>]) -> Self {
        OptimState {
            cfg,
            base_lr: cfg.lr,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        let t = self.t as f64;
        match self.cfg.decay_kind {
            DecayKind::InverseTime => self.base_lr / (1.0 + self.cfg.decay * t),
            DecayKind::Multiplicative => self.base_lr * (1.0 - self.cfg.decay).powf(t),
        }
    }
}

/// One bias-corrected Adam update of every non-frozen parameter. Gradients
/// are zeroed afterwards. A non-finite gradient aborts the step before
/// anything is modified. Returns the learning rate used.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &mut [Vec<T>],
    state: &mut OptimState,
) -> Result<f64, TrainError> {
    for (p, g) in params.iter().zip(grads.iter()) {
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: p.name.clone(),
                index: k,
            });
        }
    }
    let lr = state.current_lr();
    state.t += 1;
    let AdamConfig { beta1, beta2, eps, .. } = state.cfg;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads.iter_mut()).enumerate() {
        if p.frozen {
            g.fill(T::zero());
            continue;
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (idx, (theta, gk)) in p.value.iter_mut().zip(g.iter_mut()).enumerate() {
            let gv = gk.as_f64();
            m[idx] = beta1 * m[idx] + (1.0 - beta1) * gv;
            v[idx] = beta2 * v[idx] + (1.0 - beta2) * gv * gv;
            let mhat = m[idx] / c1;
            let vhat = v[idx] / c2;
            let next = theta.as_f64() - lr * mhat / (vhat.sqrt() + eps);
            *theta = T::from_f64_lossy(next);
            *gk = T::zero();
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_param(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "p".into(),
            shape: Shape::scalar(),
            value: vec![v],
            frozen: false,
        }]
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        let mut st = OptimState::new(AdamConfig::default(), &p);
        let mut g = vec![vec![1.0]];
        let lr = adam_step(&mut p, &mut g, &mut st).unwrap();
        assert_eq!(lr, 0.01);
        assert!((p[0].value[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert_eq!(g[0][0], 0.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_values_and_counts_the_step() {
        let mut p = scalar_param(0.25);
        let mut st = OptimState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &mut [vec![0.0]], &mut st).unwrap();
        assert_eq!(p[0].value[0], 0.25);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = scalar_param(0.25);
        p[0].name = "block.2.3.res.conv1.weight".into();
        let mut st = OptimState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &mut [vec![f64::NAN]], &mut st).unwrap_err();
        assert!(err.to_string().contains("block.2.3"), "{err}");
        assert_eq!(st.t, 0);
    }

    #[test]
    fn decay_schedules() {
        let p = scalar_param(0.0);
        let mut st = OptimState::new(AdamConfig::default(), &p);
        st.t = 1000;
        assert!((st.current_lr() - 0.01 / 1.005).abs() < 1e-15);
        st.cfg.decay_kind = DecayKind::Multiplicative;
        assert!((st.current_lr() - 0.01 * (1.0f64 - 5e-6).powi(1000)).abs() < 1e-15);
    }
}
