//! AdamW, EMA shadows, gradient clipping, and the cosine schedule.

use super::params::{GradStore, ParamStore};
use super::NumericsError;

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: store.iter().map(|(_, e)| vec![0.0; e.len()]).collect(),
            v: store.iter().map(|(_, e)| vec![0.0; e.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. Rejects non-finite gradients before
    /// touching any state so the caller can decide to skip or abort.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradStore,
        lr: f64,
    ) -> Result<(), NumericsError> {
        for (id, entry) in store.iter() {
            if let Some(g) = grads.get(id) {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFinite(format!(
                        "gradient of '{}' at flat index {bad} is {}",
                        entry.name, g[bad]
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in 0..store.len() {
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let zero = [];
            let g: &[f64] = grads.get(id).unwrap_or(&zero);
            let data = store.values_mut(id);
            for i in 0..data.len() {
                let gi = g.get(i).copied().unwrap_or(0.0);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps));
                data[i] -= lr * self.weight_decay * data[i];
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(max_norm / norm);
    }
    norm
}

/// Cosine decay from `eta0` at step 0 to 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, eta0: f64) -> f64 {
    if total == 0 {
        return eta0;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * eta0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Exponential moving average of every parameter.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    shadow: Vec<Vec<f64>>,
}

impl EmaState {
    /// Shadow initialized to the current parameter values.
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        assert!(
            decay > 0.0 && decay < 1.0,
            "EMA decay must lie in (0,1), got {decay}"
        );
        EmaState {
            decay,
            shadow: store.iter().map(|(_, e)| e.values().to_vec()).collect(),
        }
    }

    /// shadow <- decay * shadow + (1 - decay) * params
    pub fn update(&mut self, store: &ParamStore) {
        for (id, entry) in store.iter() {
            let s = &mut self.shadow[id];
            for (si, pi) in s.iter_mut().zip(entry.values()) {
                *si = self.decay * *si + (1.0 - self.decay) * pi;
            }
        }
    }

    pub fn shadow_values(&self, id: usize) -> &[f64] {
        &self.shadow[id]
    }

    /// Materializes a parameter store holding the shadow weights.
    pub fn to_store(&self, live: &ParamStore) -> ParamStore {
        let mut out = live.clone();
        for (id, _) in live.iter() {
            out.values_mut(id).copy_from_slice(&self.shadow[id]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Init;
    use crate::rng::Rng64;

    fn store_with(values: &[f64]) -> (ParamStore, usize) {
        let mut rng = Rng64::new(0, 0);
        let mut s = ParamStore::new();
        let id = s.register("w", 1, values.len(), Init::Zeros, &mut rng);
        s.values_mut(id).copy_from_slice(values);
        (s, id)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let (mut s, id) = store_with(&[1.0, -2.0, 3.0]);
        let mut opt = AdamW::new(&s, 0.95, 0.999, 1e-8, 0.0);
        let grads = GradStore::new(&s);
        opt.step(&mut s, &grads, 1e-3).unwrap();
        assert_eq!(s.values(id), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn decay_only_shrinks_by_expected_factor() {
        let (mut s, id) = store_with(&[2.0]);
        let lambda = 0.5;
        let lr = 0.1;
        let mut opt = AdamW::new(&s, 0.95, 0.999, 1e-8, lambda);
        let grads = GradStore::new(&s);
        opt.step(&mut s, &grads, lr).unwrap();
        assert!((s.values(id)[0] - 2.0 * (1.0 - lr * lambda)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let (mut s, id) = store_with(&[0.0]);
        let lr = 1e-2;
        let mut opt = AdamW::new(&s, 0.95, 0.999, 1e-8, 0.0);
        let mut prev = s.values(id)[0];
        let mut last_step = 0.0;
        for _ in 0..200 {
            let mut grads = GradStore::new(&s);
            grads.accumulate(id, &[3.0], 1.0);
            opt.step(&mut s, &grads, lr).unwrap();
            last_step = (s.values(id)[0] - prev).abs();
            prev = s.values(id)[0];
        }
        // Bias-corrected ratio m_hat / sqrt(v_hat) tends to 1 for a constant
        // gradient, so each step approaches lr in magnitude.
        assert!((last_step - lr).abs() < 1e-4, "step {last_step}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_diagnostic() {
        let (mut s, id) = store_with(&[1.0]);
        let mut opt = AdamW::new(&s, 0.95, 0.999, 1e-8, 0.0);
        let mut grads = GradStore::new(&s);
        grads.accumulate(id, &[f64::NAN], 1.0);
        let err = opt.step(&mut s, &grads, 1e-3).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
        // Parameter untouched on rejection.
        assert_eq!(s.values(id), &[1.0]);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let (s, id) = store_with(&[0.0, 0.0]);
        let mut grads = GradStore::new(&s);
        grads.accumulate(id, &[3.0, 4.0], 1.0);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = grads.get(id).unwrap();
        let clipped = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let eta = 1e-4;
        assert_eq!(cosine_lr(0, 1000, eta), eta);
        assert!(cosine_lr(1000, 1000, eta).abs() < 1e-20);
        assert!((cosine_lr(500, 1000, eta) - eta / 2.0).abs() < 1e-18);
    }

    #[test]
    fn ema_tracks_constant_params_exactly() {
        let (s, id) = store_with(&[1.5, -0.5]);
        let mut ema = EmaState::new(&s, 0.99);
        for _ in 0..10 {
            ema.update(&s);
        }
        assert_eq!(ema.shadow_values(id), s.values(id));
    }

    #[test]
    fn ema_gap_shrinks_geometrically_after_a_jump() {
        let (mut s, id) = store_with(&[0.0]);
        let decay = 0.9;
        let mut ema = EmaState::new(&s, decay);
        s.values_mut(id)[0] = 1.0;
        let mut gap = 1.0;
        for _ in 0..5 {
            ema.update(&s);
            let new_gap = (1.0 - ema.shadow_values(id)[0]).abs();
            assert!((new_gap - decay * gap).abs() < 1e-12);
            gap = new_gap;
        }
    }
}
