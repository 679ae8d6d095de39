//! Spatial-domain dynamic-programming trajectory optimizer.
//!
//! The planning state is z = [v, SoC, t] on a uniform grid, advanced one
//! 10 m cell per stage over a 200 m receding horizon (or the whole trip for
//! the wait-and-see solver). Cell transitions come from time-substepping the
//! powertrain model; infeasible transitions (torque box, battery limits, SoC
//! band, speed limits, red-light crossings) carry +∞. Stage costs are
//! discounted by γ^t with t the elapsed seconds at the cell entry node, so a
//! table value J_k(z) is the cost-to-go already discounted to plan start.
//!
//! Structure: [`kernel`] holds the backward-recursion kernels over a
//! [`StageModel`] abstraction (an optimized banded kernel and a naive
//! reference used to validate it), [`plan`] builds stage models from a route
//! via cached powertrain traversals and runs the receding-horizon planner
//! and the whole-trip solver.

pub mod kernel;
pub mod plan;

pub use kernel::{backward_recursion, ActionOutcome, Recursion, StageModel};
pub use plan::{
    plan_trace_csv, wait_and_see, GoalTerminal, PlanResult, Planner, TerminalEvaluator,
    TransitionCache, WaitAndSee, ZeroTerminal,
};

use crate::powertrain::{ControlInput, PowertrainParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("no feasible plan from the current state")]
    NoFeasiblePlan,
    #[error("invalid planner config: {0}")]
    Config(String),
}

/// Uniformly spaced grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub step: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 2 && hi > lo);
        Axis { lo, step: (hi - lo) / (n - 1) as f64, n }
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.step * (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }

    /// Bracketing index and fractional weight for interpolation, or None
    /// outside the axis range (beyond a small tolerance).
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let u = (x - self.lo) / self.step;
        let tol = 1e-9;
        if u < -tol || u > (self.n - 1) as f64 + tol {
            return None;
        }
        let u = u.clamp(0.0, (self.n - 1) as f64);
        let mut i = u.floor() as usize;
        if i >= self.n - 1 {
            i = self.n - 2;
        }
        Some((i, u - i as f64))
    }

    /// Index of the nearest grid point (x clamped into range).
    pub fn nearest(&self, x: f64) -> usize {
        let u = ((x - self.lo) / self.step).round();
        (u.max(0.0) as usize).min(self.n - 1)
    }
}

/// Planning state at a spatial node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub v_mps: f64,
    pub soc: f64,
    pub t_s: f64,
}

/// Cost-to-go table over (v, SoC, t), row-major with t contiguous. `t_lo_s`
/// is the time of index 0 (stage-dependent for banded whole-trip solves).
#[derive(Debug, Clone)]
pub struct JTable {
    pub n_v: usize,
    pub n_soc: usize,
    pub n_t: usize,
    pub t_lo_s: f64,
    pub data: Vec<f64>,
}

impl JTable {
    pub fn filled(n_v: usize, n_soc: usize, n_t: usize, t_lo_s: f64, value: f64) -> Self {
        JTable { n_v, n_soc, n_t, t_lo_s, data: vec![value; n_v * n_soc * n_t] }
    }

    #[inline]
    pub fn idx(&self, iv: usize, isoc: usize, it: usize) -> usize {
        (iv * self.n_soc + isoc) * self.n_t + it
    }

    #[inline]
    pub fn get(&self, iv: usize, isoc: usize, it: usize) -> f64 {
        self.data[self.idx(iv, isoc, it)]
    }

    #[inline]
    pub fn get_mut(&mut self, iv: usize, isoc: usize, it: usize) -> &mut f64 {
        let i = self.idx(iv, isoc, it);
        &mut self.data[i]
    }

    #[inline]
    pub fn row(&self, iv: usize, isoc: usize) -> &[f64] {
        let base = (iv * self.n_soc + isoc) * self.n_t;
        &self.data[base..base + self.n_t]
    }
}

/// Discrete planner action: torque fractions resolved against the torque
/// limits at the node's speed, so one action list covers every node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    /// Engine torque as a fraction of the max-torque curve, in [0, 1].
    pub eng_frac: f64,
    /// BSG torque as a signed fraction of the speed-dependent bound, [-1, 1].
    pub bsg_frac: f64,
    /// Friction brake torque as a fraction of the configured maximum, [0, 1].
    pub brk_frac: f64,
}

#[derive(Debug, Clone)]
pub struct ActionSet {
    pub actions: Vec<ActionSpec>,
}

impl ActionSet {
    /// Torque operating points on a fractions grid plus pure friction-brake
    /// levels (braking always with engine and BSG unloaded).
    pub fn build(n_eng: usize, n_bsg: usize, n_brk: usize) -> Self {
        let mut actions = Vec::with_capacity(n_eng * n_bsg + n_brk);
        for i in 0..n_eng {
            let eng = i as f64 / (n_eng - 1) as f64;
            for j in 0..n_bsg {
                let bsg = -1.0 + 2.0 * j as f64 / (n_bsg - 1) as f64;
                actions.push(ActionSpec { eng_frac: eng, bsg_frac: bsg, brk_frac: 0.0 });
            }
        }
        for k in 1..=n_brk {
            actions.push(ActionSpec {
                eng_frac: 0.0,
                bsg_frac: 0.0,
                brk_frac: k as f64 / n_brk as f64,
            });
        }
        ActionSet { actions }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Torques at a concrete vehicle speed.
    pub fn resolve(
        &self,
        a: usize,
        v_mps: f64,
        t_brk_max_nm: f64,
        pt: &PowertrainParams,
    ) -> ControlInput {
        let spec = self.actions[a];
        let (eng_max, bsg_min, bsg_max) = crate::powertrain::torque_bounds(v_mps, pt);
        let t_bsg = if spec.bsg_frac >= 0.0 { spec.bsg_frac * bsg_max } else { -spec.bsg_frac * bsg_min };
        ControlInput {
            t_eng_nm: spec.eng_frac * eng_max,
            t_bsg_nm: t_bsg,
            t_brk_nm: spec.brk_frac * t_brk_max_nm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub ds_m: f64,
    pub horizon_cells: usize,
    pub n_v: usize,
    pub v_max_mps: f64,
    pub n_soc: usize,
    pub n_t: usize,
    pub gamma: f64,
    /// Timing floor for the 1/v spatial conversion; a stopped vehicle
    /// traverses a cell in ds/v_floor seconds.
    pub v_floor_mps: f64,
    pub t_brk_max_nm: f64,
    pub n_eng_levels: usize,
    pub n_bsg_levels: usize,
    pub n_brk_levels: usize,
    /// Per-stage time-band width for the whole-trip solver.
    pub ws_t_band_s: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            ds_m: 10.0,
            horizon_cells: 20,
            n_v: 31,
            v_max_mps: 22.0,
            n_soc: 21,
            n_t: 81,
            gamma: 0.995,
            v_floor_mps: 0.5,
            t_brk_max_nm: 3000.0,
            n_eng_levels: 15,
            n_bsg_levels: 9,
            n_brk_levels: 9,
            ws_t_band_s: 320,
        }
    }
}

impl DpConfig {
    pub fn v_axis(&self) -> Axis {
        Axis::new(0.0, self.v_max_mps, self.n_v)
    }

    pub fn soc_axis(&self, pt: &PowertrainParams) -> Axis {
        Axis::new(pt.soc_min, pt.soc_max, self.n_soc)
    }

    pub fn action_set(&self) -> ActionSet {
        ActionSet::build(self.n_eng_levels, self.n_bsg_levels, self.n_brk_levels)
    }

    pub fn validate(&self) -> Result<(), DpError> {
        if self.ds_m <= 0.0 || self.horizon_cells == 0 {
            return Err(DpError::Config("ds_m and horizon_cells must be positive".into()));
        }
        if self.n_v < 2 || self.n_soc < 2 || self.n_t < 2 {
            return Err(DpError::Config("grid needs at least 2 points per axis".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DpError::Config("gamma must be in (0, 1]".into()));
        }
        if self.v_floor_mps <= 0.0 {
            return Err(DpError::Config("v_floor_mps must be positive".into()));
        }
        let n_actions = self.n_eng_levels * self.n_bsg_levels + self.n_brk_levels;
        if self.n_eng_levels < 2 || self.n_bsg_levels < 2 || n_actions > u8::MAX as usize {
            return Err(DpError::Config(format!(
                "action grid must have >= 2 levels per torque and at most {} total",
                u8::MAX
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_locate_brackets_and_clamps() {
        let ax = Axis::new(0.0, 10.0, 11);
        assert_eq!(ax.step, 1.0);
        assert_eq!(ax.locate(3.25), Some((3, 0.25)));
        assert_eq!(ax.locate(0.0), Some((0, 0.0)));
        // Top edge clamps to the last interval with weight 1.
        assert_eq!(ax.locate(10.0), Some((9, 1.0)));
        assert_eq!(ax.locate(10.1), None);
        assert_eq!(ax.locate(-0.1), None);
        assert_eq!(ax.nearest(3.49), 3);
        assert_eq!(ax.nearest(3.51), 4);
        assert_eq!(ax.nearest(99.0), 10);
    }

    #[test]
    fn integer_axis_locates_nodes_exactly() {
        let ax = Axis::new(0.0, 4.0, 5);
        for i in 0..4 {
            let (j, w) = ax.locate(i as f64).unwrap();
            assert_eq!((j, w), (i, 0.0));
        }
    }

    #[test]
    fn action_set_has_expected_size_and_coverage() {
        let cfg = DpConfig::default();
        cfg.validate().unwrap();
        let set = cfg.action_set();
        assert_eq!(set.actions.len(), 15 * 9 + 9);
        // Coast is in the torque grid.
        assert!(set
            .actions
            .iter()
            .any(|a| a.eng_frac == 0.0 && a.bsg_frac == 0.0 && a.brk_frac == 0.0));
        // Extremes present.
        assert!(set.actions.iter().any(|a| a.eng_frac == 1.0 && a.bsg_frac == 1.0));
        assert!(set.actions.iter().any(|a| a.bsg_frac == -1.0));
        assert!(set.actions.iter().any(|a| a.brk_frac == 1.0));
        // Resolution respects the torque box at any speed.
        let pt = PowertrainParams::default();
        for &v in &[0.0, 5.0, 12.0, 21.5] {
            let (eng_max, bsg_min, bsg_max) = crate::powertrain::torque_bounds(v, &pt);
            for a in 0..set.actions.len() {
                let u = set.resolve(a, v, 3000.0, &pt);
                assert!(u.t_eng_nm >= 0.0 && u.t_eng_nm <= eng_max + 1e-12);
                assert!(u.t_bsg_nm >= bsg_min - 1e-12 && u.t_bsg_nm <= bsg_max + 1e-12);
                assert!(u.t_brk_nm >= 0.0);
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_grids() {
        let mut cfg = DpConfig::default();
        cfg.gamma = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg2 = DpConfig::default();
        cfg2.n_eng_levels = 30;
        cfg2.n_bsg_levels = 9;
        assert!(cfg2.validate().is_err()); // 279 actions exceed the u8 policy store
    }
}
