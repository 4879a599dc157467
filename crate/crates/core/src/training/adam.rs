use vdeblur_autograd::{Gradients, ParamStore, Tensor};

use crate::error::{Error, Result};

/// Moment estimates and step count, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn zeros(store: &ParamStore<f32>) -> Self {
        let z: Vec<Tensor<f32>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: z.clone(), v: z }
    }

    pub fn check_matches(&self, store: &ParamStore<f32>) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store.iter().zip(self.m.iter().zip(&self.v)).all(|((_, _, p), (m, v))| {
                p.shape() == m.shape() && p.shape() == v.shape()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::CheckpointCorrupt("optimizer state does not match the parameter set".into()))
        }
    }
}

/// Adam with bias correction. Parameters without a gradient are left
/// untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, betas: (f64, f64), eps: f64) -> Self {
        Self { beta1: betas.0, beta2: betas.1, eps, state: AdamState::zeros(store) }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id).data_mut();
            let m = self.state.m[k].data_mut();
            let v = self.state.v[k].data_mut();
            for i in 0..p.len() {
                let gi = f64::from(g.data()[i]);
                let mi = self.beta1 * f64::from(m[i]) + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * f64::from(v[i]) + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let mut grads = Gradients::for_store(&store);
        grads.accumulate(id, &Tensor::from_vec([1, 1, 1, 3], vec![2.0, -0.5, 0.0]).unwrap());
        let mut adam = Adam::new(&store, (0.9, 0.999), 1e-8);
        adam.step(&mut store, &grads, 0.01);
        let w = store.get(id).data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] - 1.01).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }
}
