use crate::error::{GradError, Result};
use crate::scalar::Scalar;
use crate::spec::NetworkParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter container.
#[derive(Clone, Debug)]
pub struct AdamState<S = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &NetworkParams<S>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update. Tensors whose `trainable` flag is false
/// are left untouched (their moments do not advance either).
///
/// Fails without modifying anything when a gradient is non-finite.
pub fn adam_step<S: Scalar>(
    params: &mut NetworkParams<S>,
    grads: &NetworkParams<S>,
    state: &mut AdamState<S>,
    trainable: Option<&[bool]>,
) -> Result<()> {
    let n = params.tensors.len();
    if grads.tensors.len() != n || state.m.len() != n {
        return Err(GradError::ParamMismatch(format!(
            "adam: {n} parameters, {} gradients, {} moments",
            grads.tensors.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.tensors.iter().zip(&grads.tensors).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(GradError::ParamMismatch(format!(
                "adam: tensor {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(element) = g.first_non_finite() {
            return Err(GradError::NonFinite {
                what: "gradient",
                index: i,
                element,
            });
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..n {
        if trainable.is_some_and(|mask| !mask[i]) {
            continue;
        }
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensors[i].data_mut();
        for k in 0..p.len() {
            let gk = g[k].to_f64();
            let mk = beta1 * m[k].to_f64() + (1.0 - beta1) * gk;
            let vk = beta2 * v[k].to_f64() + (1.0 - beta2) * gk * gk;
            m[k] = S::from_f64(mk);
            v[k] = S::from_f64(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
            p[k] = S::from_f64(p[k].to_f64() - update);
        }
    }
    params.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> NetworkParams<f64> {
        NetworkParams::from_tensors(vec![Tensor::vector(vec![v])])
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_step() {
        let mut p = scalar(0.7);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar(0.0), &mut st, None).unwrap();
        assert_eq!(p.tensors[0].data()[0], 0.7);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        adam_step(&mut p, &scalar(1.0), &mut st, None).unwrap();
        // m_hat / sqrt(v_hat) = 1
        assert!((p.tensors[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn repeated_gradient_steps_by_hand() {
        // g = 1, lr = 0.1:
        // step 1: m=0.1,  v=0.001    -> m_hat=1, v_hat=1 -> delta 0.1/(1+eps)
        // step 2: m=0.19, v=0.001999 -> m_hat=1, v_hat=1 -> same delta
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        adam_step(&mut p, &scalar(1.0), &mut st, None).unwrap();
        let d1 = -p.tensors[0].data()[0];
        adam_step(&mut p, &scalar(1.0), &mut st, None).unwrap();
        let d2 = -p.tensors[0].data()[0] - d1;
        assert!((d1 - 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
        assert!((d2 - d1).abs() < 1e-12, "d1={d1} d2={d2}");

        // g = 1 then 0.5: v_hat shrinks slower than m_hat, so the step shrinks.
        // m = 0.9*0.1 + 0.1*0.5 = 0.14,          m_hat = 0.14/0.19
        // v = 0.999*0.001 + 0.001*0.25 = 0.001249, v_hat = 0.001249/0.001999
        let mut q = scalar(0.0);
        let mut st = AdamState::new(&q, AdamConfig::with_lr(0.1));
        adam_step(&mut q, &scalar(1.0), &mut st, None).unwrap();
        adam_step(&mut q, &scalar(0.5), &mut st, None).unwrap();
        let m_hat = 0.14 / 0.19;
        let v_hat = 0.001249 / 0.001999;
        let d2 = -q.tensors[0].data()[0] - 0.1 / (1.0 + 1e-8);
        assert!((d2 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8)).abs() < 1e-12);
        assert!(d2 < d1);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut st, None).unwrap_err();
        assert!(matches!(err, GradError::NonFinite { what: "gradient", .. }));
        assert_eq!(p.tensors[0].data()[0], 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut p = NetworkParams::from_tensors(vec![
            Tensor::vector(vec![1.0f64]),
            Tensor::vector(vec![2.0f64]),
        ]);
        let g = NetworkParams::from_tensors(vec![
            Tensor::vector(vec![1.0f64]),
            Tensor::vector(vec![1.0f64]),
        ]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, Some(&[false, true])).unwrap();
        assert_eq!(p.tensors[0].data()[0], 1.0);
        assert!(p.tensors[1].data()[0] < 2.0);
    }
}
