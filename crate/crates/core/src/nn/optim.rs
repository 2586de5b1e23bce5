use super::tape::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{ensure_dims, Error, Result};

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update, descending along `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        ensure_dims(self.first.len(), store.len())?;
        ensure_dims(store.len(), grads.tensors().len())?;
        for (p, g) in store.tensors().iter().zip(grads.tensors()) {
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![x]));
        s
    }

    fn grad(store: &ParamStore, g: f64) -> Gradients {
        Gradients::from_tensors(store, vec![Tensor::vector(vec![g])]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = single(1.5);
        let mut opt = Adam::new(&store, 3e-4);
        let g = grad(&store, 0.0);
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.5]);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut store = single(0.0);
        let mut opt = Adam::new(&store, 1e-2);
        for _ in 0..100 {
            let g = grad(&store, 2.0);
        opt.step(&mut store, &g).unwrap();
        }
        assert!(store.tensors()[0].data()[0] < -0.5);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x) = (x - 0.7)^2, minimum at 0.7.
        let mut store = single(0.0);
        let mut opt = Adam::new(&store, 3e-4);
        for _ in 0..10_000 {
            let x = store.tensors()[0].data()[0];
            let g = grad(&store, 2.0 * (x - 0.7));
        opt.step(&mut store, &g).unwrap();
        }
        assert!((store.tensors()[0].data()[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = single(0.0);
        let mut opt = Adam::new(&store, 1e-3);
        let mut wide = ParamStore::new();
        wide.add("x", Tensor::vector(vec![0.0, 0.0]));
        let other = Gradients::zeros_like(&wide);
        assert!(opt.step(&mut store, &other).is_err());
    }
}
