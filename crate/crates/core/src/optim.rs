//! AdamW and learning-rate schedules.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parameters subject to weight decay: projection and recurrent weights.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".wx") || name.ends_with(".wh") || name.ends_with(".u")
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far, per parameter.
    pub steps: Vec<u64>,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: vec![0; store.len()], m: zeros(), v: zeros() }
    }

    /// One update. `lr_scale[i]` multiplies the rate of parameter `i`;
    /// parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Matrix<T>>], lr: f64, lr_scale: &[f64]) {
        assert_eq!(grads.len(), store.len());
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let rate = lr * lr_scale[i];
            if rate == 0.0 {
                continue;
            }
            self.steps[i] += 1;
            let c1 = 1.0 - self.beta1.powi(self.steps[i] as i32);
            let c2 = 1.0 - self.beta2.powi(self.steps[i] as i32);
            let decay = if decays(store.name(id)) { T::lit(1.0 - rate * self.weight_decay) } else { T::one() };
            let step = T::lit(rate / c1);
            let c2 = T::lit(c2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w = *w * decay - step * *mi / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Linear warmup over `warmup` steps followed by cosine decay to zero.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Multiplies by 0.1 at each milestone fraction of `total` steps.
pub fn step_decay(step: usize, total: usize, milestones: &[f64]) -> f64 {
    let passed = milestones.iter().filter(|&&m| step as f64 >= m * total as f64).count();
    0.1f64.powi(passed as i32)
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &[Option<Matrix<T>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data().iter()).map(|&x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(warmup_cosine(0, 100, 4), 0.25);
        assert_eq!(warmup_cosine(3, 100, 4), 1.0);
        assert!((warmup_cosine(4, 100, 4) - 1.0).abs() < 1e-12);
        assert!(warmup_cosine(99, 100, 4) < 1e-2);
        assert_eq!(warmup_cosine(0, 10, 0), 1.0);
        assert_eq!(step_decay(0, 100, &[0.9, 0.95]), 1.0);
        assert!((step_decay(90, 100, &[0.9, 0.95]) - 0.1).abs() < 1e-15);
        assert!((step_decay(99, 100, &[0.9, 0.95]) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x.w", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let g = store.get(id).map(|x| 2.0 * x);
            opt.update(&mut store, &[Some(g)], 0.05, &[1.0]);
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a.b", Matrix::from_vec(1, 1, vec![1.0]));
        let b = store.add("b.w", Matrix::from_vec(1, 1, vec![1.0]));
        let mut opt = AdamW::new(&store, 0.5);
        let g = Matrix::from_vec(1, 1, vec![4.0]);
        opt.update(&mut store, &[Some(g.clone()), None], 0.1, &[1.0, 1.0]);
        assert!((store.get(a).get(0, 0) - 0.9).abs() < 1e-6);
        assert_eq!(store.get(b).get(0, 0), 1.0);
        opt.update(&mut store, &[None, Some(g)], 0.1, &[1.0, 1.0]);
        // Decoupled decay: 1 * (1 - 0.1 * 0.5) - 0.1.
        assert!((store.get(b).get(0, 0) - 0.85).abs() < 1e-6);
    }
}
