//! Adam with optional decoupled weight decay.

use ndarray::Array2;

/// Adaptive-moment optimizer. Parameters are identified by a stable index;
/// callers enumerate them in a fixed order every step.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    t: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Advance the shared step counter; call once per optimizer step, before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter in place. `idx` must enumerate parameters in the
    /// same order every step.
    pub fn update(&mut self, idx: usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
        while self.moments.len() <= idx {
            self.moments.push((
                Array2::zeros(param.raw_dim()),
                Array2::zeros(param.raw_dim()),
            ));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (m, v) = &mut self.moments[idx];
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.begin_step();
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            self.update(i, p, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_lr_leaves_params_bit_exact() {
        let mut p = array![[0.5, -1.25], [3.0, 0.0]];
        let orig = p.clone();
        let g = array![[1.0, 2.0], [-0.5, 0.25]];
        let mut opt = Adam::new(0.0, 0.0);
        opt.step(&mut [&mut p], &[g]);
        assert_eq!(p, orig);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = array![[2.0]];
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..200 {
            let g = array![[2.0 * p[[0, 0]]]];
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn indexed_updates_match_slice_step() {
        let mut p1 = array![[1.0, -2.0]];
        let mut p2 = p1.clone();
        let g = array![[0.3, 0.7]];
        let mut a = Adam::new(0.05, 0.01);
        let mut b = Adam::new(0.05, 0.01);
        for _ in 0..5 {
            a.step(&mut [&mut p1], std::slice::from_ref(&g));
            b.begin_step();
            b.update(0, &mut p2, &g);
        }
        assert_eq!(p1, p2);
    }
}
