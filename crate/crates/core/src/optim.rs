//! Adam and the warmup-then-linear-decay learning-rate schedule.

use crate::autograd::{GradStore, ParamStore, Real, Tensor};

/// `lr_max·step/warmup` up to `warmup`, then linear decay reaching 0 at
/// `total`. Steps count from 1.
pub fn lr_at(step: u64, warmup: u64, total: u64, lr_max: f64) -> f64 {
    if warmup > 0 && step <= warmup {
        lr_max * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        lr_max * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(ps: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = ps.iter().map(|(_, _, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores saved moments; shapes must match the parameter store.
    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment count");
        assert_eq!(v.len(), self.v.len(), "moment count");
        self.t = t;
        self.m = m;
        self.v = v;
    }

    /// One update; parameters without a gradient keep their moments.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = ps.get_mut(id);
            for (((p, m), v), &g) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(&g.data) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, ParamStore};

    #[test]
    fn schedule_is_warmup_then_linear_decay() {
        assert_eq!(lr_at(1, 3000, 10000, 1.0), 1.0 / 3000.0);
        assert_eq!(lr_at(3000, 3000, 10000, 1.0), 1.0);
        assert_eq!(lr_at(6500, 3000, 10000, 1.0), 0.5);
        assert_eq!(lr_at(10000, 3000, 10000, 1.0), 0.0);
        assert_eq!(lr_at(5, 0, 10, 2.0), 1.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.insert("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&ps);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = g.param(&ps, id);
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let mut grads = GradStore::new(ps.len());
            grads.accumulate(g.backward(loss).into_param_grads());
            opt.step(&mut ps, &grads, 0.01);
        }
        assert!(ps.get(id).data.iter().all(|x| x.abs() < 1e-3));
    }
}
