use super::{Matrix, ParamStore};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step: u64,
    pub(crate) m: Vec<Matrix>,
    pub(crate) v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let g = p.grad.as_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * g[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Polynomial decay `base · (1 − step/total)^power`, clamped at zero.
pub fn poly_lr(base: f64, step: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(2e-4, 0, 100, 0.9), 2e-4);
        assert_eq!(poly_lr(2e-4, 100, 100, 0.9), 0.0);
        let mid = poly_lr(1.0, 50, 100, 0.9);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut s = ParamStore::new();
        let w = s.insert("w", &[2], vec![1.0, -1.0]).unwrap();
        s.get_mut(w).grad = Matrix::from_rows(&[[3.0, -0.5]]);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, 0.1);
        let v = s.value(w).as_slice();
        assert!((v[0] - 0.9).abs() < 1e-7);
        assert!((v[1] + 0.9).abs() < 1e-7);
    }
}
