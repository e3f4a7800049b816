//! Stochastic gradient descent with momentum and per-step learning-rate
//! schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Parameters;

/// Fraction of all steps spent warming up under [`ScheduleKind::CosineWarmup`].
pub const WARMUP_FRACTION: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineAnneal,
    CosineWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    CosineAnneal { total: u64 },
    CosineWarmup { warmup: u64, total: u64 },
}

impl Schedule {
    pub fn new(kind: ScheduleKind, total: u64) -> Self {
        match kind {
            ScheduleKind::CosineAnneal => Schedule::CosineAnneal { total },
            ScheduleKind::CosineWarmup => Schedule::CosineWarmup {
                warmup: (total as f64 * WARMUP_FRACTION).round() as u64,
                total,
            },
        }
    }

    pub fn total(self) -> u64 {
        match self {
            Schedule::CosineAnneal { total } | Schedule::CosineWarmup { total, .. } => total,
        }
    }

    /// Learning rate at `step`; steps past the end are clamped to it.
    pub fn lr(self, base: f64, step: u64) -> f64 {
        let cosine = |done: u64, span: u64| {
            if span == 0 {
                return base;
            }
            let t = done.min(span) as f64 / span as f64;
            base * 0.5 * (1.0 + (PI * t).cos())
        };
        match self {
            Schedule::CosineAnneal { total } => cosine(step, total),
            Schedule::CosineWarmup { warmup, total } => {
                if step < warmup {
                    base * step as f64 / warmup as f64
                } else {
                    cosine(step - warmup, total.saturating_sub(warmup))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub learning_rate_base: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<f64>>,
    pub step: u64,
    pub schedule: Schedule,
}

impl OptState {
    /// Zero velocity shaped like `params`.
    pub fn new<P: Parameters>(learning_rate_base: f64, momentum: f64, schedule: Schedule, params: &P) -> Self {
        OptState {
            learning_rate_base,
            momentum,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
            schedule,
        }
    }
}

pub fn schedule_lr(state: &OptState) -> f64 {
    state.schedule.lr(state.learning_rate_base, state.step)
}

/// `v ← μ v + g`, `p ← p − lr v`, with lr taken before the step counter
/// advances. Returns the lr used.
pub fn sgd_step<P: Parameters, G: Parameters>(
    model: &mut P,
    grads: &G,
    state: &mut OptState,
) -> Result<f64, OptimError> {
    let lr = schedule_lr(state);
    let g = grads.tensors();
    let mut p = model.tensors_mut();
    if p.len() != g.len() || p.len() != state.velocity.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "{} parameter tensors, {} gradients, {} velocity buffers",
            p.len(),
            g.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in p.iter().zip(&g).zip(&state.velocity).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(OptimError::ShapeMismatch(format!("tensor {i} sizes differ")));
        }
    }
    let mu = state.momentum;
    for ((p, g), v) in p.iter_mut().zip(g).zip(&mut state.velocity) {
        for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    state.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use proptest::prelude::*;

    fn model() -> Model {
        Model::init(3, &[2], 2, 0).unwrap()
    }

    fn constant_grads(m: &Model, g: f64) -> Model {
        let mut out = m.clone();
        for t in out.tensors_mut() {
            t.fill(g);
        }
        out
    }

    #[test]
    fn anneal_endpoints() {
        let s = Schedule::CosineAnneal { total: 100 };
        assert_eq!(s.lr(0.4, 0), 0.4);
        assert!(s.lr(0.4, 100).abs() < 1e-15);
        assert!((s.lr(0.4, 50) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn warmup_shape() {
        let s = Schedule::new(ScheduleKind::CosineWarmup, 200);
        assert_eq!(s, Schedule::CosineWarmup { warmup: 10, total: 200 });
        assert_eq!(s.lr(0.8, 0), 0.0);
        assert!((s.lr(0.8, 5) - 0.4).abs() < 1e-15);
        assert_eq!(s.lr(0.8, 10), 0.8);
        assert!((s.lr(0.8, 105) - 0.4).abs() < 1e-15);
        assert!(s.lr(0.8, 200).abs() < 1e-15);
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let m0 = model();
        let mut m = m0.clone();
        let g = constant_grads(&m0, 0.5);
        let mut st = OptState::new(0.1, 0.0, Schedule::CosineAnneal { total: 10 }, &m);
        let lr = sgd_step(&mut m, &g, &mut st).unwrap();
        assert_eq!(lr, 0.1);
        for (a, b) in m.tensors().concat().iter().zip(m0.tensors().concat()) {
            assert_eq!(*a, b - 0.1 * 0.5);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_lr_updates_velocity_only() {
        let m0 = model();
        let mut m = m0.clone();
        let g = constant_grads(&m0, 2.0);
        let mut st = OptState::new(0.0, 0.9, Schedule::CosineAnneal { total: 10 }, &m);
        sgd_step(&mut m, &g, &mut st).unwrap();
        assert_eq!(m, m0);
        assert!(st.velocity.iter().flatten().all(|&v| v == 2.0));
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        let m0 = model();
        let mut m = m0.clone();
        let g = constant_grads(&m0, 0.3);
        let sched = Schedule::CosineAnneal { total: 4 };
        let mut st = OptState::new(0.4, 0.9, sched, &m);
        sgd_step(&mut m, &g, &mut st).unwrap();
        sgd_step(&mut m, &g, &mut st).unwrap();
        let (lr1, lr2) = (sched.lr(0.4, 0), sched.lr(0.4, 1));
        for (a, b) in m.tensors().concat().iter().zip(m0.tensors().concat()) {
            let expected = b - lr1 * 0.3 - lr2 * 1.9 * 0.3;
            assert!((a - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut m = model();
        let other = Model::init(3, &[4], 2, 0).unwrap();
        let mut st = OptState::new(0.1, 0.9, Schedule::CosineAnneal { total: 1 }, &m);
        assert!(sgd_step(&mut m, &other, &mut st).is_err());
        assert_eq!(st.step, 0);
    }

    proptest! {
        #[test]
        fn lr_bounded_and_non_increasing_after_warmup(total in 1u64..500, base in 1e-4f64..2.0, warm in any::<bool>()) {
            let kind = if warm { ScheduleKind::CosineWarmup } else { ScheduleKind::CosineAnneal };
            let s = Schedule::new(kind, total);
            let warmup = match s { Schedule::CosineWarmup { warmup, .. } => warmup, _ => 0 };
            let mut prev = f64::INFINITY;
            for step in 0..=total {
                let lr = s.lr(base, step);
                prop_assert!((0.0..=base).contains(&lr));
                if step >= warmup {
                    prop_assert!(lr <= prev + 1e-15);
                    prev = lr;
                }
            }
        }
    }
}
