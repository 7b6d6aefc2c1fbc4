use crate::params::ParamStore;

/// Adam optimizer state: per-parameter first/second moment buffers plus a
/// step counter. Weight decay is decoupled from the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero-initialized moments matching the store's parameters.
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        let v = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamState { m, v, step: 0, lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads` is aligned with the store's registration order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for idx in 0..store.len() {
            let param = &mut store.get_mut(crate::params::ParamId(idx)).data;
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &grads[idx]);
            debug_assert_eq!(param.len(), g.len());
            for i in 0..param.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * param[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let before = store.get(id).data.clone();
        let mut adam = AdamState::new(&store, 0.1, 0.0);
        for _ in 0..5 {
            adam.step(&mut store, &[vec![0.0; 3]]);
        }
        assert_eq!(store.get(id).data, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_is_signed_unit_step() {
        // From zero moments, the bias-corrected first update is
        // -lr * g / (|g| + eps) = -lr * sign(g) up to eps.
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::new(vec![2], vec![0.0, 0.0]));
        let mut adam = AdamState::new(&store, 0.01, 0.0);
        adam.step(&mut store, &[vec![3.0, -0.5]]);
        let p = &store.get(id).data;
        assert!((p[0] + 0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize ||p - c||^2 from p = 0 with c = [1, -1].
        let c = [1.0, -1.0];
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::zeros(&[2]));
        let mut adam = AdamState::new(&store, 0.1, 0.0);
        for _ in 0..100 {
            let g: Vec<f64> = store
                .get(id)
                .data
                .iter()
                .zip(&c)
                .map(|(&p, &t)| 2.0 * (p - t))
                .collect();
            adam.step(&mut store, &[g]);
        }
        let dist: f64 = store
            .get(id)
            .data
            .iter()
            .zip(&c)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-2, "distance after 100 steps: {dist}");
    }
}
