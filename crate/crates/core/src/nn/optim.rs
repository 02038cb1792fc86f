use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// AdamW-style decay applied to the parameters instead of the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam step. `lrs[i]` is the learning rate of tensor `i`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || lrs.len() != params.len()
        {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments, {} learning rates",
                params.len(),
                grads.len(),
                self.m.len(),
                lrs.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(Error::Shape(format!("adam: {:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let lr = lrs[i];
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, &g0) in grads[i].data().iter().enumerate() {
                let g = if c.decoupled { g0 } else { g0 + c.weight_decay * p[k] };
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                if c.decoupled && c.weight_decay != 0.0 {
                    p[k] -= lr * c.weight_decay * p[k];
                }
                p[k] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Linear,
    Cosine,
}

/// Scalar schedule: optional linear warmup from 0 to `start`, then a decay
/// from `start` to `end` that reaches `end` at step `horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub end: f64,
    pub warmup: u64,
    pub horizon: u64,
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            start: value,
            end: value,
            warmup: 0,
            horizon: 0,
        }
    }

    pub fn linear(start: f64, end: f64, horizon: u64) -> Self {
        Schedule {
            kind: ScheduleKind::Linear,
            start,
            end,
            warmup: 0,
            horizon,
        }
    }

    pub fn cosine(start: f64, end: f64, warmup: u64, horizon: u64) -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            start,
            end,
            warmup,
            horizon,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.start * step as f64 / self.warmup as f64;
        }
        let span = self.horizon.saturating_sub(self.warmup);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - self.warmup) as f64 / span as f64).min(1.0)
        };
        match self.kind {
            ScheduleKind::Constant => self.start,
            ScheduleKind::Linear => self.start + (self.end - self.start) * progress,
            ScheduleKind::Cosine => {
                self.end
                    + (self.start - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Exponential moving average of parameter tensors: `shadow ← (1-τ)·shadow + τ·live`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaParams {
    pub tau: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaParams {
    pub fn new(tau: f64, live: &[Tensor]) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("EMA rate {tau} outside [0, 1]")));
        }
        Ok(EmaParams {
            tau,
            shadow: live.to_vec(),
        })
    }

    pub fn update(&mut self, live: &[Tensor]) -> Result<()> {
        if live.len() != self.shadow.len()
            || live.iter().zip(&self.shadow).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::Shape("EMA shadow does not mirror live parameters".into()));
        }
        let tau = self.tau;
        for (s, l) in self.shadow.iter_mut().zip(live) {
            for (x, y) in s.data_mut().iter_mut().zip(l.data()) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_matches_hand_value() {
        let mut p = vec![Tensor::scalar(0.0)];
        let g = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g, &[0.1]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::vector(vec![1.5, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g, &[0.1]).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        let p0 = vec![Tensor::vector(vec![0.3, -0.7, 2.0])];
        let g = vec![Tensor::vector(vec![0.1, -3.0, 0.5])];
        let mut a = p0.clone();
        let mut b = p0.clone();
        AdamState::new(AdamConfig::default(), &a)
            .step(&mut a, &g, &[0.01])
            .unwrap();
        let cfg = AdamConfig {
            decoupled: true,
            ..AdamConfig::default()
        };
        AdamState::new(cfg, &b).step(&mut b, &g, &[0.01]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_descends_a_convex_quadratic() {
        // f(x) = Σ c_i (x_i - t_i)²
        let c = [1.0, 4.0, 0.5];
        let t = [1.0, -2.0, 3.0];
        let f = |x: &[f64]| -> f64 { (0..3).map(|i| c[i] * (x[i] - t[i]).powi(2)).sum() };
        let mut p = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let mut prev = f(p[0].data());
        for _ in 0..100 {
            let x = p[0].data().to_vec();
            let g = vec![Tensor::vector((0..3).map(|i| 2.0 * c[i] * (x[i] - t[i])).collect())];
            adam.step(&mut p, &g, &[1e-3]).unwrap();
            let cur = f(p[0].data());
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn schedules() {
        let lin = Schedule::linear(1.0, 0.0, 100);
        assert_eq!(lin.value(50), 0.5);
        assert_eq!(lin.value(1000), 0.0);
        let cos = Schedule::cosine(3e-4, 1e-5, 5000, 100_000);
        assert_eq!(cos.value(2500), 1.5e-4);
        assert_eq!(cos.value(5000), 3e-4);
        assert!((cos.value(100_000) - 1e-5).abs() < 1e-18);
        assert_eq!(Schedule::constant(0.1).value(77), 0.1);
    }

    #[test]
    fn ema_rates() {
        let live = vec![Tensor::scalar(2.0)];
        let mut ema = EmaParams::new(0.5, &[Tensor::scalar(0.0)]).unwrap();
        ema.update(&live).unwrap();
        assert_eq!(ema.shadow[0].item(), 1.0);

        let mut full = EmaParams::new(1.0, &[Tensor::scalar(-3.0)]).unwrap();
        full.update(&live).unwrap();
        assert_eq!(full.shadow, live);

        let mut frozen = EmaParams::new(0.0, &[Tensor::scalar(-3.0)]).unwrap();
        frozen.update(&live).unwrap();
        assert_eq!(frozen.shadow[0].item(), -3.0);
    }

    #[test]
    fn ema_converges_geometrically_to_constant_live() {
        let live = vec![Tensor::scalar(1.0)];
        let mut ema = EmaParams::new(0.005, &[Tensor::scalar(0.0)]).unwrap();
        let mut gap = 1.0;
        for _ in 0..1000 {
            ema.update(&live).unwrap();
            let g = 1.0 - ema.shadow[0].item();
            assert!((g - gap * 0.995).abs() < 1e-12);
            gap = g;
        }
    }
}
