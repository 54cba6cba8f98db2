//! Adam with bias correction, and the exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::grad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u32,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state size");
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// `start · (end / start)^(t / (steps - 1))`: hits `start` at the first step
/// and `end` at the last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl ExpSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.steps <= 1 || step == 0 {
            return self.start;
        }
        if step + 1 >= self.steps {
            return self.end;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut st = AdamState::new(&p);
        st.m[0] = vec![0.5, 0.5];
        st.v[0] = vec![0.25, 0.25];
        adam_step(
            &mut p,
            &[Tensor::zeros(&[2])],
            &mut st,
            0.1,
            &AdamConfig::default(),
        );
        // moments decay, and the step is driven only by the decayed momentum
        assert!((st.m[0][0] - 0.45).abs() < 1e-15);
        assert!((st.v[0][0] - 0.25 * 0.999).abs() < 1e-15);

        let mut q = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut fresh = AdamState::new(&q);
        adam_step(
            &mut q,
            &[Tensor::zeros(&[2])],
            &mut fresh,
            0.1,
            &AdamConfig::default(),
        );
        assert_eq!(q[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let mut st = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Tensor::vector(vec![3.0, -0.02, 1e3])],
            &mut st,
            0.01,
            &AdamConfig::default(),
        );
        for (&w, sign) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - sign * 0.01).abs() < 1e-8, "{w}");
        }
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // beta1 = 0.9 oscillates for longer than 100 steps on this bowl
        let cfg = AdamConfig {
            beta1: 0.5,
            ..AdamConfig::default()
        };
        let sched = ExpSchedule {
            start: 1.0,
            end: 1e-2,
            steps: 100,
        };
        for seed in 0..10 {
            let mut r = rng::stream(seed, "bowl", 0);
            let c: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut p = vec![Tensor::vector(
                (0..5).map(|_| r.random_range(-1.0..1.0)).collect(),
            )];
            let mut st = AdamState::new(&p);
            for t in 0..100 {
                let g: Vec<f64> = p[0]
                    .data()
                    .iter()
                    .zip(&c)
                    .map(|(x, c)| 2.0 * (x - c))
                    .collect();
                adam_step(&mut p, &[Tensor::vector(g)], &mut st, sched.lr(t), &cfg);
            }
            for (x, c) in p[0].data().iter().zip(&c) {
                assert!((x - c).abs() < 1e-3, "seed {seed}: {x} vs {c}");
            }
        }
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let s = ExpSchedule {
            start: 1e-3,
            end: 1e-4,
            steps: 50,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(49) - 1e-4).abs() < 1e-12);
        assert!((0..49).all(|t| s.lr(t + 1) <= s.lr(t) && s.lr(t) > 0.0));
        assert!((s.lr(49 / 2) - 1e-3 * 0.1f64.powf(24.0 / 49.0)).abs() < 1e-15);
        assert_eq!(
            ExpSchedule {
                start: 1.0,
                end: 0.5,
                steps: 1
            }
            .lr(0),
            1.0
        );
    }
}
