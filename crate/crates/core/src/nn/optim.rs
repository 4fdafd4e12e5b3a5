use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
///
/// Per step: `θ ← θ·(1 − lr·wd)`, then the bias-corrected Adam update
/// `θ ← θ − lr·m̂/(√v̂ + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    /// First and second moments, one pair per parameter in store order.
    pub moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![T::zero(); p.tensor.numel()], vec![T::zero(); p.tensor.numel()]))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::InvalidConfig(
                "optimizer state does not match parameter set".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let grad = p.tensor.grad.as_ref().expect("checked above");
            for (((theta, g), m), v) in p.tensor.values.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *theta *= decay;
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
