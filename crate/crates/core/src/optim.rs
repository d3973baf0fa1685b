use crate::param::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Updates trainable parameters from gradients in store order.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64);
}

#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub weight_decay: f64,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        let (lr, wd): (T, T) = (lit(lr), lit(self.weight_decay));
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let (Some(g), true) = (g, store.entry(id).trainable) else { continue };
            for (p, &gv) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= lr * (gv + wd * *p);
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        self.moments.resize_with(store.len(), || None);
        let t = self.step as i32;
        let bc1: T = lit(1.0 - self.beta1.powi(t));
        let bc2: T = lit(1.0 - self.beta2.powi(t));
        let (b1, b2, eps): (T, T, T) = (lit(self.beta1), lit(self.beta2), lit(self.eps));
        let (lr, decay): (T, T) = (lit(lr), lit(lr * self.weight_decay));
        let ids: Vec<ParamId> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let (Some(g), true) = (g, store.entry(id).trainable) else { continue };
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gv = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gv;
                v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= decay * p[i];
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamTag;

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap(), ParamTag::Weight);
        let before = s.checksum(|_| true);
        let g = vec![Some(Tensor::from_f64(&[3], &[1.0, 1.0, -1.0]).unwrap())];
        AdamW::new(0.9, 0.999, 1e-8, 0.05).step(&mut s, &g, 0.0);
        Sgd::default().step(&mut s, &g, 0.0);
        assert_eq!(before, s.checksum(|_| true));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::ones(&[2]), ParamTag::Weight);
        s.set_trainable(id, false);
        let g = vec![Some(Tensor::ones(&[2]))];
        AdamW::new(0.9, 0.999, 1e-8, 0.05).step(&mut s, &g, 0.1);
        assert_eq!(s.value(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[1]), ParamTag::Weight);
        let g = vec![Some(Tensor::full(&[1], 3.0))];
        AdamW::new(0.9, 0.999, 0.0, 0.0).step(&mut s, &g, 0.01);
        assert!((s.value(id).data()[0] + 0.01).abs() < 1e-12);
    }
}
