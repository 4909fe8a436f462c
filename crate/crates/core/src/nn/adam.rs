use super::{NnError, ParamStore, Scalar, Tensor};

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    /// Restores saved state; moment tensors must match the store.
    pub fn from_state(
        store: &ParamStore<T>,
        lr: f64,
        step: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Result<Self, NnError> {
        let ok = |m: &[Tensor<T>]| {
            m.len() == store.len() && m.iter().zip(store.iter()).all(|(a, (_, _, p))| a.shape() == p.shape())
        };
        if !ok(&first) || !ok(&second) {
            return Err(NnError::Shape("optimizer state does not match parameters".into()));
        }
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step, first, second })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// One update. `grads` is indexed like the store; `None` entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<(), NnError> {
        if grads.len() != store.len() {
            return Err(NnError::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if grads.iter().all(Option::is_none) {
            return Err(NnError::NoBackward);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(grad) = &grads[id.index()] else { continue };
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), g) in p.iter_mut().zip(m).zip(v).zip(grad.data()) {
                let g = g.as_f64();
                let mn = self.beta1 * m.as_f64() + (1.0 - self.beta1) * g;
                let vn = self.beta2 * v.as_f64() + (1.0 - self.beta2) * g * g;
                *m = T::from_f64(mn);
                *v = T::from_f64(vn);
                let update = self.lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *p = T::from_f64(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn minimizes_square() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..500 {
            let w = store.get(id).data()[0];
            let grads = vec![Some(Tensor::scalar(2.0 * w))];
            adam.step(&mut store, &grads).unwrap();
        }
        let w = store.get(id).data()[0];
        assert!(w.abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn step_without_gradients_fails() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        assert!(matches!(adam.step(&mut store, &[None]), Err(NnError::NoBackward)));
        let g = Graph::<f32>::new();
        assert!(matches!(g.param_grads(&store), Err(NnError::NoBackward)));
    }
}
