use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates and step counter. Moments are created lazily, zeroed,
/// the first time a parameter receives a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One bias-corrected update. Gradients are validated before any
    /// parameter is touched.
    pub fn step(
        &mut self,
        params: &mut ParameterStore,
        grads: &Gradients,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let entry = params
                .entry(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
            if !entry.trainable {
                return Err(NumericsError::FrozenGradient(name.clone()));
            }
            if entry.tensor.shape() != g.shape() {
                return Err(NumericsError::ParamShape {
                    name: name.clone(),
                    expected: entry.tensor.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.values_mut(name).expect("validated above");
            for (((pi, mi), vi), gi) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<(), NumericsError> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(v), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = one_param(0.731);
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default());
        let grads = Gradients::from([("p".to_string(), Tensor::scalar(0.0))]);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        assert!(params.get("p").unwrap().bit_eq(before.get("p").unwrap()));
        assert_eq!(state.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = one_param(0.0);
        let mut state = AdamState::new(AdamConfig::with_lr(0.1));
        let grads = Gradients::from([("p".to_string(), Tensor::scalar(1.0))]);
        adam_step(&mut params, &grads, &mut state).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn independent_parameters() {
        let mut params = ParameterStore::new();
        params.insert("a", Tensor::scalar(1.0), true).unwrap();
        params.insert("b", Tensor::scalar(2.0), true).unwrap();
        let mut state = AdamState::new(AdamConfig::default());
        let grads = Gradients::from([("a".to_string(), Tensor::scalar(0.3))]);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_ne!(params.get("a").unwrap().data()[0], 1.0);
        assert_eq!(
            params.get("b").unwrap().data()[0].to_bits(),
            2.0f64.to_bits()
        );
    }

    #[test]
    fn shape_and_name_errors() {
        let mut params = one_param(1.0);
        let mut state = AdamState::new(AdamConfig::default());
        let bad = Gradients::from([("p".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(
            adam_step(&mut params, &bad, &mut state),
            Err(NumericsError::ParamShape { .. })
        ));
        let unknown = Gradients::from([("q".to_string(), Tensor::scalar(1.0))]);
        assert!(adam_step(&mut params, &unknown, &mut state).is_err());
        params.set_trainable("p", false).unwrap();
        let frozen = Gradients::from([("p".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(
            adam_step(&mut params, &frozen, &mut state),
            Err(NumericsError::FrozenGradient(_))
        ));
        assert_eq!(state.t, 0);
    }
}
