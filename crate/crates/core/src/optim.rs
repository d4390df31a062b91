//! SGD with momentum and weight decay, and the learning-rate policies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::model::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr_base: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(param_err!("weight_decay must be finite and ≥ 0, got {}", self.weight_decay));
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(param_err!("lr_base must be finite and > 0, got {}", self.lr_base));
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: ParameterSet,
}

impl SgdState {
    /// Zero velocities shaped like `params`.
    pub fn new(config: SgdConfig, params: &ParameterSet) -> Result<Self> {
        config.validate()?;
        let mut velocity = ParameterSet::new();
        for (name, p) in params.iter() {
            velocity.insert(name.clone(), crate::Tensor::zeros(p.shape()));
        }
        Ok(SgdState { config, velocity })
    }
}

/// `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step(params: &mut ParameterSet, grads: &ParameterSet, state: &mut SgdState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(shape_err!(
            "sgd_step got {} parameters, {} gradients and {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    let SgdConfig {
        momentum: m,
        weight_decay: wd,
        ..
    } = state.config;
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| shape_err!("no gradient for parameter {}", name))?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| shape_err!("no velocity for parameter {}", name))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?} but gradient {:?}, velocity {:?}",
                name,
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Poly,
    CosineRestarts,
    TwoCycleSgdrPoly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub lr_base: f64,
    pub total_iters: usize,
    pub power: f64,
    /// Number of cosine cycles; ignored by the other policies.
    pub cycles: usize,
    pub min_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            kind: ScheduleKind::TwoCycleSgdrPoly,
            lr_base: 0.01,
            total_iters: 300,
            power: 0.9,
            cycles: 2,
            min_lr: 0.0,
        }
    }
}

impl Schedule {
    pub fn poly(lr_base: f64, total_iters: usize) -> Self {
        Schedule {
            kind: ScheduleKind::Poly,
            lr_base,
            total_iters,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(param_err!("lr_base must be finite and > 0, got {}", self.lr_base));
        }
        if !(self.min_lr >= 0.0 && self.min_lr < self.lr_base) {
            return Err(param_err!(
                "min_lr must lie in [0, lr_base), got {} with lr_base {}",
                self.min_lr,
                self.lr_base
            ));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(param_err!("power must be finite and > 0, got {}", self.power));
        }
        if self.kind == ScheduleKind::CosineRestarts && self.cycles == 0 {
            return Err(param_err!("cosine_restarts needs at least one cycle"));
        }
        Ok(())
    }

    /// Position `(t_c, T_c)` inside the current cycle.
    fn cycle_position(&self, t: usize, cycles: usize) -> (f64, f64) {
        let total = self.total_iters as f64;
        let len = total / cycles as f64;
        let idx = ((t as f64 / len).floor() as usize).min(cycles - 1);
        (t as f64 - idx as f64 * len, len)
    }

    pub fn lr_at(&self, t: usize) -> Result<f64> {
        self.validate()?;
        if t > self.total_iters {
            return Err(param_err!(
                "iteration {} is outside [0, {}]",
                t,
                self.total_iters
            ));
        }
        if self.total_iters == 0 {
            return Ok(self.lr_base);
        }
        let span = self.lr_base - self.min_lr;
        let poly = |tc: f64, len: f64| self.min_lr + span * (1.0 - tc / len).max(0.0).powf(self.power);
        Ok(match self.kind {
            ScheduleKind::Poly => poly(t as f64, self.total_iters as f64),
            ScheduleKind::TwoCycleSgdrPoly => {
                // The final iteration stays in the second cycle.
                let (tc, len) = if t == self.total_iters {
                    (self.total_iters as f64 / 2.0, self.total_iters as f64 / 2.0)
                } else {
                    self.cycle_position(t, 2)
                };
                poly(tc, len)
            }
            ScheduleKind::CosineRestarts => {
                let (tc, len) = if t == self.total_iters {
                    let len = self.total_iters as f64 / self.cycles as f64;
                    (len, len)
                } else {
                    self.cycle_position(t, self.cycles)
                };
                self.min_lr + 0.5 * span * (1.0 + (PI * tc / len).cos())
            }
        })
    }
}

/// Loss-weight grid: every combination of the listed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightGrid {
    pub c_s: Vec<f64>,
    pub c_e: Vec<f64>,
    pub c_c: Vec<f64>,
}

impl Default for WeightGrid {
    fn default() -> Self {
        WeightGrid {
            c_s: vec![1.0],
            c_e: vec![5.0, 10.0, 20.0],
            c_c: vec![5.0, 10.0, 20.0],
        }
    }
}

impl WeightGrid {
    /// Cells in `c_s`-major order.
    pub fn cells(&self) -> Result<Vec<(f64, f64, f64)>> {
        if self.c_s.is_empty() || self.c_e.is_empty() || self.c_c.is_empty() {
            return Err(param_err!("grid axes must be non-empty"));
        }
        let mut out = Vec::new();
        for &s in &self.c_s {
            for &e in &self.c_e {
                for &c in &self.c_c {
                    out.push((s, e, c));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use proptest::prelude::*;

    fn scalar_set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::full(&[1], v));
        p
    }

    #[test]
    fn vanilla_sgd_without_momentum() {
        let mut p = scalar_set(2.0);
        let mut st = SgdState::new(
            SgdConfig {
                lr_base: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &p,
        )
        .unwrap();
        sgd_step(&mut p, &scalar_set(3.0), &mut st, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 1.7).abs() < 1e-15);
        sgd_step(&mut p, &scalar_set(0.0), &mut st, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_matches_hand_values() {
        let mut p = scalar_set(1.0);
        let cfg = SgdConfig {
            lr_base: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut st = SgdState::new(cfg, &p).unwrap();
        sgd_step(&mut p, &scalar_set(1.0), &mut st, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-12);
        sgd_step(&mut p, &scalar_set(1.0), &mut st, 0.1).unwrap();
        assert!((st.velocity.get("w").unwrap().data()[0] - 1.9).abs() < 1e-12);
        assert!((p.get("w").unwrap().data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_mismatched_gradients() {
        let mut p = scalar_set(1.0);
        let mut st = SgdState::new(SgdConfig::default(), &p).unwrap();
        let mut g = ParameterSet::new();
        g.insert("w", Tensor::zeros(&[2]));
        assert!(sgd_step(&mut p, &g, &mut st, 0.1).is_err());
        assert!(SgdState::new(
            SgdConfig {
                momentum: 1.0,
                ..Default::default()
            },
            &p
        )
        .is_err());
    }

    #[test]
    fn poly_values() {
        let s = Schedule::poly(0.01, 300_000);
        assert!((s.lr_at(0).unwrap() - 0.01).abs() < 1e-15);
        assert!((s.lr_at(150_000).unwrap() - 0.0053589).abs() < 1e-7);
        assert!((s.lr_at(150_000).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(s.lr_at(300_001).is_err());
    }

    #[test]
    fn two_cycle_restarts_once_to_base() {
        let s = Schedule {
            total_iters: 300,
            ..Default::default()
        };
        assert_eq!(s.lr_at(0).unwrap(), 0.01);
        assert_eq!(s.lr_at(150).unwrap(), 0.01);
        assert!(s.lr_at(149).unwrap() < 1e-3);
        let mut jumps = 0;
        for t in 1..=300 {
            if s.lr_at(t).unwrap() > s.lr_at(t - 1).unwrap() {
                jumps += 1;
                assert_eq!(t, 150);
            }
        }
        assert_eq!(jumps, 1);
    }

    #[test]
    fn cosine_restarts_shape() {
        let s = Schedule {
            kind: ScheduleKind::CosineRestarts,
            total_iters: 120,
            cycles: 3,
            min_lr: 1e-4,
            ..Default::default()
        };
        for start in [0, 40, 80] {
            assert!((s.lr_at(start).unwrap() - 0.01).abs() < 1e-15);
            assert!((s.lr_at(start + 20).unwrap() - (1e-4 + 0.5 * (0.01 - 1e-4))).abs() < 1e-15);
        }
        assert!((s.lr_at(120).unwrap() - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn default_grid_has_nine_cells() {
        assert_eq!(WeightGrid::default().cells().unwrap().len(), 9);
        let empty = WeightGrid {
            c_e: vec![],
            ..Default::default()
        };
        assert!(empty.cells().is_err());
    }

    proptest! {
        #[test]
        fn schedules_are_positive_and_poly_monotone(total in 1usize..2000, power in 0.1f64..3.0) {
            let poly = Schedule { power, ..Schedule::poly(0.01, total) };
            let two = Schedule { power, total_iters: total, ..Default::default() };
            let cos = Schedule { kind: ScheduleKind::CosineRestarts, total_iters: total, cycles: 3, ..Default::default() };
            for t in 0..total {
                prop_assert!(poly.lr_at(t).unwrap() > 0.0);
                prop_assert!(two.lr_at(t).unwrap() > 0.0);
                prop_assert!(cos.lr_at(t).unwrap() > 0.0);
                prop_assert!(poly.lr_at(t + 1).unwrap() <= poly.lr_at(t).unwrap());
            }
        }

        #[test]
        fn sgd_matches_scalar_recurrence(
            p0 in -2.0f64..2.0,
            gs in proptest::collection::vec(-1.0f64..1.0, 3..8),
            m in 0.0f64..0.99,
            wd in 0.0f64..1e-2,
            lr in 1e-4f64..0.5,
        ) {
            let mut params = scalar_set(p0);
            let cfg = SgdConfig { lr_base: lr, momentum: m, weight_decay: wd };
            let mut st = SgdState::new(cfg, &params).unwrap();
            let (mut p, mut v) = (p0, 0.0);
            for g in gs {
                v = m * v + g + wd * p;
                p -= lr * v;
                sgd_step(&mut params, &scalar_set(g), &mut st, lr).unwrap();
                prop_assert!((params.get("w").unwrap().data()[0] - p).abs() < 1e-12);
            }
        }
    }
}
