//! Adam and AdaMax updates plus the warmup / inverse-square-root learning
//! rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ADAMAX_U_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Adamax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamax,
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    /// Second moment `v` for Adam, infinity-norm accumulator `u` for AdaMax.
    pub v: Vec<f64>,
}

/// Per-parameter optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: OptimConfig,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn adam() -> Self {
        Self::new(OptimConfig {
            kind: OptimizerKind::Adam,
            ..OptimConfig::default()
        })
    }

    pub fn adamax() -> Self {
        Self::new(OptimConfig::default())
    }

    /// One update of every parameter that has a gradient, using the
    /// configured `alpha`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let lr = self.config.alpha;
        self.step_with_lr(params, grads, lr)
    }

    /// As [`step`](Self::step) with an explicit learning rate replacing `alpha`.
    pub fn step_with_lr(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidSpec(format!("gradient for unknown parameter {}", name)))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    node: 0,
                    op: "optimizer",
                    detail: format!("{}: param {:?} vs grad {:?}", name, p.shape(), g.shape()),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c = self.config;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.len();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: alloc::vec![0.0; n],
                v: alloc::vec![0.0; n],
            });
            let theta = p.data_mut();
            match c.kind {
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - Float::powi(c.beta1, t);
                    let bc2 = 1.0 - Float::powi(c.beta2, t);
                    for i in 0..n {
                        let gi = g.data()[i];
                        mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                        mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                        let mhat = mom.m[i] / bc1;
                        let vhat = mom.v[i] / bc2;
                        theta[i] -= lr * mhat / (Float::sqrt(vhat) + c.eps);
                    }
                }
                OptimizerKind::Adamax => {
                    let step = lr / (1.0 - Float::powi(c.beta1, t));
                    for i in 0..n {
                        let gi = g.data()[i];
                        mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                        mom.v[i] = Float::max(c.beta2 * mom.v[i], Float::abs(gi));
                        theta[i] -= step * mom.m[i] / Float::max(mom.v[i], ADAMAX_U_FLOOR);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Single-tensor Adam step (state keyed by `"theta"`).
pub fn adam_step(state: &mut OptimState, params: &mut Tensor, grads: &Tensor) -> Result<()> {
    single(state, params, grads, OptimizerKind::Adam)
}

/// Single-tensor AdaMax step (state keyed by `"theta"`).
pub fn adamax_step(state: &mut OptimState, params: &mut Tensor, grads: &Tensor) -> Result<()> {
    single(state, params, grads, OptimizerKind::Adamax)
}

fn single(state: &mut OptimState, params: &mut Tensor, grads: &Tensor, kind: OptimizerKind) -> Result<()> {
    state.config.kind = kind;
    let mut p = BTreeMap::new();
    p.insert(String::from("theta"), core::mem::replace(params, Tensor::zeros(&[0])));
    let mut g = BTreeMap::new();
    g.insert(String::from("theta"), grads.clone());
    let r = state.step(&mut p, &g);
    *params = p.remove("theta").expect("inserted");
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub d_model: usize,
    pub warmup_steps: usize,
}

impl SchedulerConfig {
    pub fn new(d_model: usize, warmup_steps: usize) -> Result<Self> {
        if d_model == 0 || warmup_steps == 0 {
            return Err(Error::InvalidSpec("d_model and warmup_steps must be >= 1".into()));
        }
        Ok(Self { d_model, warmup_steps })
    }
}

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`
pub fn lr_at(cfg: SchedulerConfig, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::StepZero);
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    let d = cfg.d_model as f64;
    Ok(Float::powf(d, -0.5) * Float::min(Float::powf(s, -0.5), s * Float::powf(w, -1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = OptimState::adam();
        let mut p = t(&[1.0, -2.0]);
        adam_step(&mut s, &mut p, &t(&[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_alpha() {
        let mut s = OptimState::adam();
        let mut p = t(&[0.0]);
        adam_step(&mut s, &mut p, &t(&[1.0])).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn groups_are_independent() {
        let mut s = OptimState::adam();
        let mut params = BTreeMap::new();
        params.insert("a".into(), t(&[0.0]));
        params.insert("b".into(), t(&[0.0]));
        let mut grads = BTreeMap::new();
        grads.insert("a".into(), t(&[1.0]));
        grads.insert("b".into(), t(&[0.0]));
        s.step(&mut params, &grads).unwrap();
        assert!(params["a"].data()[0] < 0.0);
        assert_eq!(params["b"].data()[0], 0.0);
    }

    #[test]
    fn adamax_fixtures() {
        let mut s = OptimState::adamax();
        let mut p = t(&[1.0]);
        adamax_step(&mut s, &mut p, &t(&[0.5])).unwrap();
        let mom = &s.moments["theta"];
        assert_eq!(mom.v[0], 0.5);
        assert!((mom.m[0] - 0.05).abs() < 1e-15);
        assert!((p.data()[0] - 0.999).abs() < 1e-12);
        adamax_step(&mut s, &mut p, &t(&[0.1])).unwrap();
        assert!((s.moments["theta"].v[0] - 0.4995).abs() < 1e-15);
    }

    #[test]
    fn adamax_zero_gradient_before_any_signal() {
        let mut s = OptimState::adamax();
        let mut p = t(&[3.0]);
        for _ in 0..3 {
            adamax_step(&mut s, &mut p, &t(&[0.0])).unwrap();
        }
        assert_eq!(p.data(), &[3.0]);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = OptimState::adamax();
        let mut p = t(&[1.0, 2.0]);
        assert!(matches!(
            adamax_step(&mut s, &mut p, &t(&[1.0])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert_eq!(s.t, 0);
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn schedule_values() {
        let cfg = SchedulerConfig::new(512, 4000).unwrap();
        let oracle = |s: f64| 512f64.powf(-0.5) * (s.powf(-0.5)).min(s * 4000f64.powf(-1.5));
        for (step, want) in [(1u64, 1.747e-7), (4000, 6.988e-4), (16000, 3.494e-4)] {
            let got = lr_at(cfg, step).unwrap();
            assert!((got - oracle(step as f64)).abs() < 1e-18);
            assert!(((got - want) / want).abs() < 5e-4, "{} {}", step, got);
        }
        assert_eq!(lr_at(cfg, 0), Err(Error::StepZero));
        assert!(SchedulerConfig::new(0, 10).is_err());
    }
}
