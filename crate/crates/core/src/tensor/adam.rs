//! Adam with bias correction, keyed to the parameter store layout.

use super::{ParamStore, Tensor};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moment accumulators per parameter, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f32) -> Self {
        let m = (0..store.len())
            .map(|s| vec![0.0; store.get(s).len()])
            .collect();
        let v = (0..store.len())
            .map(|s| vec![0.0; store.get(s).len()])
            .collect();
        Self {
            learning_rate,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update. Slots with a `None` gradient are untouched (their
    /// moments do not advance either, matching parameters absent from the
    /// graph).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (slot, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let param = store.get_mut(slot);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..param.data.len() {
                let g = grad.data[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = store.get(0).clone();
        let mut adam = AdamState::new(&store, 0.1);
        let grads = vec![Some(Tensor::zeros(&[3]))];
        adam.step(&mut store, &grads);
        assert_eq!(store.get(0).data, before.data);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let lr = 0.01f32;
        let mut adam = AdamState::new(&store, lr);
        let grads = vec![Some(Tensor::from_vec(&[2], vec![3.0, -0.2]).unwrap())];
        adam.step(&mut store, &grads);
        // Bias-corrected first step is -lr * g / (|g| + eps'), magnitude
        // about lr regardless of gradient scale.
        for (i, sign) in [(0usize, -1.0f32), (1, 1.0)] {
            let got = store.get(0).data[i];
            assert!((got - sign * lr).abs() < lr * 1e-3, "component {i}: {got}");
        }
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = 0.5 * sum c_i (w_i - t_i)^2.
        let targets = [2.0f32, -1.0, 0.25];
        let curvature = [1.0f32, 4.0, 0.5];
        let mut store = ParamStore::new();
        store.push("w", Tensor::zeros(&[3]));
        let mut adam = AdamState::new(&store, 0.05);
        for _ in 0..200 {
            let w = store.get(0).clone();
            let grad: Vec<f32> = (0..3)
                .map(|i| curvature[i] * (w.data[i] - targets[i]))
                .collect();
            let grads = vec![Some(Tensor::from_vec(&[3], grad).unwrap())];
            adam.step(&mut store, &grads);
        }
        for i in 0..3 {
            assert!(
                (store.get(0).data[i] - targets[i]).abs() < 1e-3,
                "component {i}: {} vs {}",
                store.get(0).data[i],
                targets[i]
            );
        }
    }
}
