use super::tape::{ParamId, ParamStore};
use crate::error::{contract_err, Result};

/// Adam hyperparameters. Defaults follow the training table: lr 1e-4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    params: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let first: Vec<Vec<f64>> = params.iter().map(|&p| vec![0.0; store.get(p).numel()]).collect();
        let second = first.clone();
        Self { config, params, first, second, step: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores moment buffers and the step counter (checkpoint resume).
    pub fn restore(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, step: u64) -> Result<()> {
        let ok = |bufs: &[Vec<f64>]| {
            bufs.len() == self.first.len() && bufs.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
        };
        if !ok(&first) || !ok(&second) {
            return contract_err("optimizer state does not match parameter group");
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }

    /// Applies one update from the accumulated gradients, then clears them.
    ///
    /// Every parameter of the group must carry a gradient.
    pub fn apply(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&missing) = self.params.iter().find(|&&p| store.get(p).grad().is_none()) {
            return contract_err(format!("no gradient for parameter {}", store.name(missing)));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, &p) in self.params.iter().enumerate() {
            let tensor = store.get_mut(p);
            let grad = tensor.take_grad().expect("checked above");
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((w, g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::error::MtcError;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("theta", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::new(AdamConfig::default(), vec![id], &store);
        store.get_mut(id).accumulate_grad(&[1.0]);
        adam.apply(&mut store).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((store.get(id).item() + 1e-4).abs() < 1e-11);
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts() {
        let (mut store, id) = single(0.7);
        let mut adam = Adam::new(AdamConfig::default(), vec![id], &store);
        store.get_mut(id).accumulate_grad(&[0.0]);
        adam.apply(&mut store).unwrap();
        assert_eq!(store.get(id).item(), 0.7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn opposing_signs_shrink_the_second_step() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::new(AdamConfig::default(), vec![id], &store);
        store.get_mut(id).accumulate_grad(&[1.0]);
        adam.apply(&mut store).unwrap();
        let d1 = store.get(id).item().abs();
        let before = store.get(id).item();
        store.get_mut(id).accumulate_grad(&[-1.0]);
        adam.apply(&mut store).unwrap();
        let d2 = (store.get(id).item() - before).abs();
        // hand evaluation: m = 0.09 - 0.1 = -0.01, m_hat = -0.01/0.19, v_hat = 1
        let expected = 1e-4 * (0.01 / 0.19) / (1.0 + 1e-8);
        assert!((d2 - expected).abs() < 1e-15);
        assert!(d2 < d1);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::new(AdamConfig::default(), vec![id], &store);
        assert!(matches!(adam.apply(&mut store), Err(MtcError::Contract(_))));
        assert_eq!(adam.step_count(), 0);
    }
}
