//! Rectified Adam.

use ndarray::{ArrayD, Zip};

use crate::Parameters;

/// RAdam (Liu et al.): Adam whose adaptive step is switched on only once the
/// variance of the adaptive learning rate is tractable, and rectified after.
#[derive(Debug, Clone)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl RAdam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forgets all moment estimates, as for a freshly constructed optimiser.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    /// Applies one update using the gradients accumulated in `model`.
    /// Gradients are left untouched.
    pub fn step(&mut self, model: &mut (impl Parameters + ?Sized)) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let bias1 = 1.0 - b1.powf(t);
        let rect = if rho_t > 5.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        let bias2_sqrt = (1.0 - b2t).sqrt();
        let (lr, eps) = (self.lr, self.eps);
        let moments = &mut self.moments;
        let mut index = 0;
        model.visit_mut("", &mut |_, p| {
            if moments.len() <= index {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[index];
            Zip::from(&mut *m).and(&mut *v).and(&p.grad).for_each(|m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            match rect {
                Some(r) => Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|w, &m, &v| {
                    let adaptive = bias2_sqrt / (v.sqrt() + eps);
                    *w -= lr * r * adaptive * m / bias1;
                }),
                None => Zip::from(&mut p.value).and(&*m).for_each(|w, &m| {
                    *w -= lr * m / bias1;
                }),
            }
            index += 1;
        });
    }
}
