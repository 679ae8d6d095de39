//! Quasi-static P0 48V mild-hybrid powertrain model.
//!
//! The driveline is: engine and belt-driven starter-generator (BSG) on a
//! common crankshaft, stepped-ratio gearbox selected by vehicle speed, final
//! drive, wheel. The battery is a zeroth-order equivalent circuit (open
//! circuit voltage and internal resistance as functions of state of charge);
//! terminal current follows from the requested electrical power by solving
//! `P = I·V_oc - I²·R_0`. Longitudinal dynamics integrate wheel torque minus
//! brake torque against aerodynamic drag, rolling resistance, and grade.
//!
//! All maps are lookup tables with clamped (bi)linear interpolation. The
//! shipped default parameter set is synthetic but physically plausible for a
//! ~1.7 t compact vehicle with a 10 kW BSG and an 8 Ah 48V pack; the fuel map
//! is a Willans line (affine in power with a speed-dependent loss term)
//! sampled onto a grid, so bilinear interpolation reproduces it exactly.
//!
//! Conventions:
//! - fuel flow is grams/second, battery current positive when discharging;
//! - brake torque `t_brk_nm >= 0` acts at the wheel against the motion;
//! - gearbox efficiency multiplies wheel torque under traction and divides it
//!   when the torque through the gearbox is negative (regeneration), so the
//!   wheel gives up more energy than the crank receives;
//! - `rolling_term` selects the printed speed-proportional rolling-resistance
//!   deceleration `g·cos(α)·C_r·v` (default) or the conventional constant
//!   form `g·cos(α)·C_r` (non-default alternative).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PowertrainError {
    #[error("table '{0}' invalid: {1}")]
    Table(&'static str, String),
    #[error(
        "requested electrical power {p_request_w:.1} W exceeds deliverable maximum {p_max_w:.1} W"
    )]
    InfeasiblePower { p_request_w: f64, p_max_w: f64 },
    #[error("battery current {i_a:.1} A outside [{i_min_a:.1}, {i_max_a:.1}] A")]
    CurrentLimit { i_a: f64, i_min_a: f64, i_max_a: f64 },
}

/// 1-D lookup table with clamped linear interpolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1 {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Table1 {
    pub fn new(name: &'static str, x: Vec<f64>, y: Vec<f64>) -> Result<Self, PowertrainError> {
        if x.len() < 2 || x.len() != y.len() {
            return Err(PowertrainError::Table(
                name,
                format!("need matching lengths >= 2, got {} and {}", x.len(), y.len()),
            ));
        }
        if !x.windows(2).all(|w| w[0] < w[1]) {
            return Err(PowertrainError::Table(
                name,
                "breakpoints must be strictly increasing".into(),
            ));
        }
        Ok(Table1 { x, y })
    }

    pub fn eval(&self, q: f64) -> f64 {
        let n = self.x.len();
        if q <= self.x[0] {
            return self.y[0];
        }
        if q >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = match self.x.binary_search_by(|v| v.partial_cmp(&q).unwrap()) {
            Ok(i) => return self.y[i],
            Err(i) => i - 1,
        };
        let w = (q - self.x[i]) / (self.x[i + 1] - self.x[i]);
        self.y[i] + w * (self.y[i + 1] - self.y[i])
    }
}

/// 2-D lookup table (row-major over `x` then `y`) with clamped bilinear
/// interpolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table2 {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl Table2 {
    pub fn new(
        name: &'static str,
        x: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self, PowertrainError> {
        if x.len() < 2 || y.len() < 2 || z.len() != x.len() * y.len() {
            return Err(PowertrainError::Table(
                name,
                format!(
                    "need |z| = |x|*|y| with |x|,|y| >= 2, got {}x{} and {}",
                    x.len(),
                    y.len(),
                    z.len()
                ),
            ));
        }
        for b in [&x, &y] {
            if !b.windows(2).all(|w| w[0] < w[1]) {
                return Err(PowertrainError::Table(
                    name,
                    "breakpoints must be strictly increasing".into(),
                ));
            }
        }
        Ok(Table2 { x, y, z })
    }

    fn bracket(b: &[f64], q: f64) -> (usize, f64) {
        let n = b.len();
        if q <= b[0] {
            return (0, 0.0);
        }
        if q >= b[n - 1] {
            return (n - 2, 1.0);
        }
        let mut i = match b.binary_search_by(|v| v.partial_cmp(&q).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        if i >= n - 1 {
            i = n - 2;
        }
        let w = (q - b[i]) / (b[i + 1] - b[i]);
        (i, w)
    }

    pub fn eval(&self, qx: f64, qy: f64) -> f64 {
        let (i, wx) = Self::bracket(&self.x, qx);
        let (j, wy) = Self::bracket(&self.y, qy);
        let ny = self.y.len();
        let z00 = self.z[i * ny + j];
        let z01 = self.z[i * ny + j + 1];
        let z10 = self.z[(i + 1) * ny + j];
        let z11 = self.z[(i + 1) * ny + j + 1];
        let a = z00 + wy * (z01 - z00);
        let b = z10 + wy * (z11 - z10);
        a + wx * (b - a)
    }
}

/// Speed-scheduled gearbox: gear `i` is active for speeds in
/// `[upshift_mps[i-1], upshift_mps[i])`; a speed exactly at a threshold
/// selects the higher gear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GearSchedule {
    pub upshift_mps: Vec<f64>,
    pub ratio: Vec<f64>,
    pub eta: Vec<f64>,
}

impl GearSchedule {
    pub fn index(&self, v_mps: f64) -> usize {
        self.upshift_mps.iter().filter(|&&th| v_mps >= th).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RollingTerm {
    /// `g·cos(α)·C_r·v`, the printed speed-proportional form (default).
    SpeedProportional,
    /// `g·cos(α)·C_r` while moving (conventional alternative).
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PowertrainParams {
    // Vehicle body.
    pub mass_kg: f64,
    pub wheel_radius_m: f64,
    pub c_d: f64,
    pub rho_air: f64,
    pub frontal_area_m2: f64,
    pub c_r: f64,
    pub g_mps2: f64,
    pub rolling_term: RollingTerm,
    // Driveline.
    pub final_drive: f64,
    pub gears: GearSchedule,
    pub belt_ratio: f64,
    pub eta_bsg: f64,
    // Engine.
    pub idle_speed_radps: f64,
    pub max_speed_radps: f64,
    /// Engine stops (zero fuel at zero torque) below this vehicle speed.
    pub start_stop_below_mps: f64,
    pub t_eng_max_nm: Table1,
    /// Fuel flow in g/s over (engine rad/s, engine N·m).
    pub fuel_map_gps: Table2,
    // BSG.
    pub t_bsg_max_nm: Table1,
    pub t_bsg_min_nm: Table1,
    // Battery.
    pub v_oc_v: Table1,
    pub r_0_ohm: Table1,
    pub c_nom_as: f64,
    pub i_aux_a: f64,
    pub i_min_a: f64,
    pub i_max_a: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    /// Required state of charge at the end of a trip.
    pub soc_terminal_min: f64,
    pub dt_s: f64,
}

/// Willans-line constants behind the shipped synthetic fuel map, exposed so
/// tests can reproduce map entries independently: fuel [g/s] =
/// `1000 · (a·ω + b·ω·T + c)` while the engine is on.
pub const WILLANS_A_KG_PER_RAD: f64 = 1.8e-6;
pub const WILLANS_B_KG_PER_J: f64 = 6.0e-8;
pub const WILLANS_C_KG_PER_S: f64 = 5.0e-6;

impl Default for PowertrainParams {
    fn default() -> Self {
        let eng_speeds = vec![83.8, 150.0, 250.0, 350.0, 450.0, 550.0, 628.0];
        let torques: Vec<f64> = (0..9).map(|i| 20.0 * i as f64).collect();
        let mut fuel = Vec::with_capacity(eng_speeds.len() * torques.len());
        for &w in &eng_speeds {
            for &t in &torques {
                fuel.push(
                    1000.0 * (WILLANS_A_KG_PER_RAD * w + WILLANS_B_KG_PER_J * w * t + WILLANS_C_KG_PER_S),
                );
            }
        }
        let bsg_speeds = vec![0.0, 400.0, 800.0, 1200.0, 1571.0];
        // 25 N·m up to 400 rad/s, then 10 kW power-limited.
        let bsg_max: Vec<f64> = bsg_speeds
            .iter()
            .map(|&w| if w <= 400.0 { 25.0 } else { 10_000.0 / w })
            .collect();
        let bsg_min: Vec<f64> = bsg_max.iter().map(|&t| -t).collect();
        let socs = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let v_oc: Vec<f64> = socs.iter().map(|&s| 43.0 + 10.0 * s - 3.0 * s * s).collect();
        let r_0: Vec<f64> = socs
            .iter()
            .map(|&s| 0.048 + 0.04 * (s - 0.55) * (s - 0.55))
            .collect();
        PowertrainParams {
            mass_kg: 1700.0,
            wheel_radius_m: 0.33,
            c_d: 0.30,
            rho_air: 1.225,
            frontal_area_m2: 2.2,
            c_r: 0.001,
            g_mps2: 9.81,
            rolling_term: RollingTerm::SpeedProportional,
            final_drive: 3.7,
            gears: GearSchedule {
                upshift_mps: vec![4.0, 7.5, 11.5, 16.0, 21.0],
                ratio: vec![4.5, 2.8, 1.9, 1.4, 1.0, 0.75],
                eta: vec![0.92, 0.93, 0.94, 0.95, 0.95, 0.96],
            },
            belt_ratio: 2.5,
            eta_bsg: 0.90,
            idle_speed_radps: 83.8,
            max_speed_radps: 628.0,
            start_stop_below_mps: 2.0,
            t_eng_max_nm: Table1::new(
                "t_eng_max",
                eng_speeds.clone(),
                vec![95.0, 120.0, 145.0, 150.0, 145.0, 130.0, 115.0],
            )
            .expect("default engine torque table"),
            fuel_map_gps: Table2::new("fuel_map", eng_speeds, torques, fuel)
                .expect("default fuel map"),
            t_bsg_max_nm: Table1::new("t_bsg_max", bsg_speeds.clone(), bsg_max)
                .expect("default bsg max table"),
            t_bsg_min_nm: Table1::new("t_bsg_min", bsg_speeds, bsg_min)
                .expect("default bsg min table"),
            v_oc_v: Table1::new("v_oc", socs.clone(), v_oc).expect("default v_oc table"),
            r_0_ohm: Table1::new("r_0", socs, r_0).expect("default r_0 table"),
            c_nom_as: 28_800.0,
            i_aux_a: 2.0,
            i_min_a: -150.0,
            i_max_a: 250.0,
            soc_min: 0.30,
            soc_max: 0.80,
            soc_terminal_min: 0.50,
            dt_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub s_m: f64,
    pub v_mps: f64,
    pub soc: f64,
    pub t_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub t_eng_nm: f64,
    pub t_bsg_nm: f64,
    pub t_brk_nm: f64,
}

impl ControlInput {
    pub const COAST: ControlInput = ControlInput {
        t_eng_nm: 0.0,
        t_bsg_nm: 0.0,
        t_brk_nm: 0.0,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub state: VehicleState,
    pub fuel_g: f64,
    pub i_batt_a: f64,
    pub p_bsg_w: f64,
    pub gear: usize,
    /// All running constraints (torque boxes, current limits, SoC band,
    /// deliverable power) held during this step.
    pub feasible: bool,
}

/// Active gear index, engine speed, and BSG speed at a vehicle speed. The
/// engine never spins below idle (launch clutch slip).
pub fn gear_and_speeds(v_mps: f64, p: &PowertrainParams) -> (usize, f64, f64) {
    let gear = p.gears.index(v_mps);
    let ratio = p.gears.ratio[gear] * p.final_drive;
    let w_wheel = v_mps / p.wheel_radius_m;
    let w_eng = (w_wheel * ratio).max(p.idle_speed_radps);
    (gear, w_eng, w_eng * p.belt_ratio)
}

/// Engine and BSG torque bounds at a vehicle speed (for action pruning and
/// feasibility projection).
pub fn torque_bounds(v_mps: f64, p: &PowertrainParams) -> (f64, f64, f64) {
    let (_, w_eng, w_bsg) = gear_and_speeds(v_mps, p);
    (
        p.t_eng_max_nm.eval(w_eng),
        p.t_bsg_min_nm.eval(w_bsg),
        p.t_bsg_max_nm.eval(w_bsg),
    )
}

/// Solves the equivalent-circuit current for a requested electrical power and
/// advances the state of charge by `dt` seconds.
///
/// Returns `(current_a, soc_next)`. Positive power discharges. Errors:
/// [`PowertrainError::InfeasiblePower`] when the discriminant is negative
/// (power above the deliverable maximum `V_oc²/(4·R_0)`),
/// [`PowertrainError::CurrentLimit`] when the solution violates the pack's
/// current limits.
pub fn battery_step(
    soc: f64,
    p_bsg_w: f64,
    p: &PowertrainParams,
    dt: f64,
) -> Result<(f64, f64), PowertrainError> {
    let v_oc = p.v_oc_v.eval(soc);
    let r0 = p.r_0_ohm.eval(soc);
    let disc = v_oc * v_oc - 4.0 * r0 * p_bsg_w;
    // Tolerate roundoff at the exact deliverable-power boundary.
    if disc < -1e-9 * v_oc * v_oc {
        return Err(PowertrainError::InfeasiblePower {
            p_request_w: p_bsg_w,
            p_max_w: v_oc * v_oc / (4.0 * r0),
        });
    }
    let i = (v_oc - disc.max(0.0).sqrt()) / (2.0 * r0);
    if i < p.i_min_a || i > p.i_max_a {
        return Err(PowertrainError::CurrentLimit {
            i_a: i,
            i_min_a: p.i_min_a,
            i_max_a: p.i_max_a,
        });
    }
    Ok((i, soc - dt * (i + p.i_aux_a) / p.c_nom_as))
}

/// Wheel torque from crank torques through the active gear. Efficiency
/// multiplies under traction and divides under regeneration (negative torque
/// through the gearbox), so regenerative wheel torque magnitude exceeds the
/// ideal value while the crank receives less energy than the wheel gives up.
pub fn driveline_torque(t_eng_nm: f64, t_bsg_nm: f64, v_mps: f64, p: &PowertrainParams) -> f64 {
    let gear = p.gears.index(v_mps);
    let ratio = p.gears.ratio[gear] * p.final_drive;
    let eta = p.gears.eta[gear];
    let t_crank = t_eng_nm + p.belt_ratio * t_bsg_nm;
    if t_crank >= 0.0 {
        t_crank * ratio * eta
    } else {
        t_crank * ratio / eta
    }
}

/// Resistive deceleration (aero + rolling + grade) at speed `v`, in m/s².
pub fn road_load_accel(v_mps: f64, grade_rad: f64, p: &PowertrainParams) -> f64 {
    let aero = p.c_d * p.rho_air * p.frontal_area_m2 * v_mps * v_mps / (2.0 * p.mass_kg);
    let rolling = match p.rolling_term {
        RollingTerm::SpeedProportional => p.g_mps2 * grade_rad.cos() * p.c_r * v_mps,
        RollingTerm::Constant => {
            if v_mps > 0.0 {
                p.g_mps2 * grade_rad.cos() * p.c_r
            } else {
                0.0
            }
        }
    };
    aero + rolling + p.g_mps2 * grade_rad.sin()
}

/// Forward-Euler longitudinal update over `dt` seconds, clamped at standstill.
pub fn vehicle_step(
    v_mps: f64,
    t_out_nm: f64,
    t_brk_nm: f64,
    grade_rad: f64,
    p: &PowertrainParams,
    dt: f64,
) -> f64 {
    let accel =
        (t_out_nm - t_brk_nm) / (p.mass_kg * p.wheel_radius_m) - road_load_accel(v_mps, grade_rad, p);
    (v_mps + dt * accel).max(0.0)
}

/// One full powertrain step at the environment step length `p.dt_s`.
pub fn full_step(
    state: &VehicleState,
    u: &ControlInput,
    grade_rad: f64,
    p: &PowertrainParams,
) -> StepOutcome {
    full_step_dt(state, u, grade_rad, p, p.dt_s)
}

/// One full powertrain step over an arbitrary `dt` (the spatial planner uses
/// fractional sub-steps to land exactly on cell boundaries).
///
/// Infeasible inputs are reported, not rejected: the state still advances
/// under clamped physics (deliverable power capped at `V_oc²/(4·R_0)`) with
/// `feasible = false` when any running constraint is violated.
pub fn full_step_dt(
    state: &VehicleState,
    u: &ControlInput,
    grade_rad: f64,
    p: &PowertrainParams,
    dt: f64,
) -> StepOutcome {
    let (gear, w_eng, w_bsg) = gear_and_speeds(state.v_mps, p);
    let mut feasible = true;

    if u.t_eng_nm < 0.0 || u.t_eng_nm > p.t_eng_max_nm.eval(w_eng) || u.t_brk_nm < 0.0 {
        feasible = false;
    }
    if u.t_bsg_nm < p.t_bsg_min_nm.eval(w_bsg) || u.t_bsg_nm > p.t_bsg_max_nm.eval(w_bsg) {
        feasible = false;
    }

    let engine_on = u.t_eng_nm > 0.0 || state.v_mps >= p.start_stop_below_mps;
    let fuel_gps = if engine_on {
        p.fuel_map_gps.eval(w_eng, u.t_eng_nm.max(0.0)).max(0.0)
    } else {
        0.0
    };

    let p_mech = u.t_bsg_nm * w_bsg;
    let mut p_bsg = if u.t_bsg_nm >= 0.0 {
        p_mech / p.eta_bsg
    } else {
        p_mech * p.eta_bsg
    };

    let v_oc = p.v_oc_v.eval(state.soc);
    let r0 = p.r_0_ohm.eval(state.soc);
    let p_max = v_oc * v_oc / (4.0 * r0);
    if p_bsg > p_max {
        p_bsg = p_max;
        feasible = false;
    }
    let disc = (v_oc * v_oc - 4.0 * r0 * p_bsg).max(0.0);
    let i = (v_oc - disc.sqrt()) / (2.0 * r0);
    if i < p.i_min_a || i > p.i_max_a {
        feasible = false;
    }
    let mut soc2 = state.soc - dt * (i + p.i_aux_a) / p.c_nom_as;
    if soc2 < p.soc_min || soc2 > p.soc_max {
        feasible = false;
    }
    soc2 = soc2.clamp(0.0, 1.0);

    let t_out = driveline_torque(u.t_eng_nm, u.t_bsg_nm, state.v_mps, p);
    let v2 = vehicle_step(state.v_mps, t_out, u.t_brk_nm, grade_rad, p, dt);

    StepOutcome {
        state: VehicleState {
            s_m: state.s_m + state.v_mps * dt,
            v_mps: v2,
            soc: soc2,
            t_s: state.t_s + dt,
        },
        fuel_g: fuel_gps * dt,
        i_batt_a: i,
        p_bsg_w: p_bsg,
        gear,
        feasible,
    }
}

/// Electrical power that makes the battery current equal `i_target_a` at the
/// given state of charge (inverse of the current solve; used by
/// charge-sustaining controllers).
pub fn power_for_current(soc: f64, i_target_a: f64, p: &PowertrainParams) -> f64 {
    let v_oc = p.v_oc_v.eval(soc);
    let r0 = p.r_0_ohm.eval(soc);
    i_target_a * v_oc - i_target_a * i_target_a * r0
}

/// BSG torque that draws the given electrical power at the given vehicle
/// speed (inverting the sign-split efficiency model).
pub fn bsg_torque_for_power(p_bsg_w: f64, v_mps: f64, p: &PowertrainParams) -> f64 {
    let (_, _, w_bsg) = gear_and_speeds(v_mps, p);
    if p_bsg_w >= 0.0 {
        p_bsg_w * p.eta_bsg / w_bsg
    } else {
        p_bsg_w / (p.eta_bsg * w_bsg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flat_battery_params(v_oc: f64, r0: f64) -> PowertrainParams {
        let mut p = PowertrainParams::default();
        p.v_oc_v = Table1::new("v_oc", vec![0.0, 1.0], vec![v_oc, v_oc]).unwrap();
        p.r_0_ohm = Table1::new("r_0", vec![0.0, 1.0], vec![r0, r0]).unwrap();
        p
    }

    /// Independent oracle: solve `I·V - I²·R = P` for the small root by
    /// bisection on [0, V/(2R)] (or the negative branch for charging).
    fn bisect_current(v_oc: f64, r0: f64, p_w: f64) -> f64 {
        let f = |i: f64| i * v_oc - i * i * r0 - p_w;
        let (mut lo, mut hi) = if p_w >= 0.0 {
            (0.0, v_oc / (2.0 * r0))
        } else {
            (-v_oc / r0, 0.0)
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(lo) <= 0.0) == (f(mid) <= 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn battery_current_matches_bisection_oracle() {
        let p = flat_battery_params(48.0, 0.05);
        let (i, _) = battery_step(0.5, 1000.0, &p, 1.0).unwrap();
        let oracle = bisect_current(48.0, 0.05, 1000.0);
        assert_relative_eq!(i, oracle, epsilon = 1e-9);
        // Frozen from the oracle: (48 - sqrt(48² - 4·0.05·1000)) / (2·0.05).
        assert_relative_eq!(i, 21.306_202_352_811_425, epsilon = 1e-9);
        // Charging branch.
        let (ic, _) = battery_step(0.5, -1000.0, &p, 1.0).unwrap();
        assert_relative_eq!(ic, bisect_current(48.0, 0.05, -1000.0), epsilon = 1e-9);
        assert!(ic < 0.0);
    }

    #[test]
    fn zero_power_leaves_only_aux_drain() {
        let p = flat_battery_params(48.0, 0.05);
        let (i, soc2) = battery_step(0.6, 0.0, &p, 1.0).unwrap();
        assert_eq!(i, 0.0);
        assert_relative_eq!(soc2, 0.6 - p.i_aux_a / p.c_nom_as, epsilon = 1e-15);
    }

    #[test]
    fn deliverable_power_boundary_gives_half_voltage_current() {
        // Widen the pack limits: the boundary current V/(2R) = 480 A is the
        // physics under test, not an operating point.
        let mut p = flat_battery_params(48.0, 0.05);
        p.i_max_a = 1000.0;
        let p_max = 48.0 * 48.0 / (4.0 * 0.05);
        let (i, _) = battery_step(0.5, p_max, &p, 1.0).unwrap();
        assert_relative_eq!(i, 48.0 / (2.0 * 0.05), epsilon = 1e-6);
        match battery_step(0.5, p_max * 1.01, &p, 1.0) {
            Err(PowertrainError::InfeasiblePower { .. }) => {}
            other => panic!("expected InfeasiblePower, got {other:?}"),
        }
    }

    #[test]
    fn current_limit_is_reported() {
        let mut p = flat_battery_params(48.0, 0.05);
        p.i_max_a = 10.0;
        match battery_step(0.5, 1000.0, &p, 1.0) {
            Err(PowertrainError::CurrentLimit { i_a, .. }) => {
                assert!(i_a > 10.0);
            }
            other => panic!("expected CurrentLimit, got {other:?}"),
        }
    }

    #[test]
    fn road_load_update_matches_scalar_oracle() {
        // Literal evaluation of the longitudinal update on a pinned fixture.
        let mut p = PowertrainParams::default();
        p.mass_kg = 1500.0;
        p.wheel_radius_m = 0.3;
        p.c_d = 0.3;
        p.rho_air = 1.2;
        p.frontal_area_m2 = 2.2;
        p.c_r = 0.01;
        p.rolling_term = RollingTerm::SpeedProportional;
        let v = 15.0;
        let t_out = 450.0;
        let oracle = v
            + 1.0
                * (t_out / (1500.0 * 0.3) - 0.3 * 1.2 * 2.2 * v * v / (2.0 * 1500.0)
                    - 9.81 * 0.01 * v);
        let got = vehicle_step(v, t_out, 0.0, 0.0, &p, 1.0);
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
        assert_relative_eq!(got, 14.469_1, epsilon = 1e-4);
    }

    #[test]
    fn vehicle_speed_clamps_at_standstill() {
        let p = PowertrainParams::default();
        assert_eq!(vehicle_step(0.3, 0.0, 3000.0, 0.0, &p, 1.0), 0.0);
        assert_eq!(vehicle_step(0.0, 0.0, 500.0, 0.0, &p, 1.0), 0.0);
    }

    #[test]
    fn gear_selection_ties_break_upward() {
        let p = PowertrainParams::default();
        assert_eq!(p.gears.index(3.99), 0);
        assert_eq!(p.gears.index(4.0), 1);
        assert_eq!(p.gears.index(25.0), 5);
        let (gear, w_eng, w_bsg) = gear_and_speeds(0.0, &p);
        assert_eq!(gear, 0);
        assert_eq!(w_eng, p.idle_speed_radps);
        assert_relative_eq!(w_bsg, p.idle_speed_radps * p.belt_ratio);
        // Above idle the engine follows the wheel through the ratio exactly.
        let (g20, w20, _) = gear_and_speeds(20.0, &p);
        assert_eq!(g20, 4);
        assert_relative_eq!(w20, 20.0 / 0.33 * (1.0 * 3.7), epsilon = 1e-12);
    }

    #[test]
    fn driveline_torque_semantics() {
        let mut p = PowertrainParams::default();
        assert_eq!(driveline_torque(0.0, 0.0, 10.0, &p), 0.0);
        // Unit-efficiency check with a bespoke single-gear schedule.
        p.gears = GearSchedule {
            upshift_mps: vec![],
            ratio: vec![10.0],
            eta: vec![1.0],
        };
        p.final_drive = 1.0;
        p.belt_ratio = 1.0;
        assert_relative_eq!(driveline_torque(50.0, 0.0, 5.0, &p), 500.0);
        // Regeneration divides by the efficiency: the wheel is braked harder
        // than the ideal value because gearbox losses add to the machine drag.
        p.gears.eta = vec![0.9];
        let t_regen = driveline_torque(0.0, -20.0, 5.0, &p);
        assert_relative_eq!(t_regen, -20.0 * 10.0 / 0.9, epsilon = 1e-12);
        assert!(t_regen.abs() > 200.0);
        let t_drive = driveline_torque(20.0, 0.0, 5.0, &p);
        assert_relative_eq!(t_drive, 20.0 * 10.0 * 0.9, epsilon = 1e-12);
        assert!(t_drive.abs() < 200.0);
    }

    #[test]
    fn standstill_fuel_follows_start_stop_threshold() {
        let p = PowertrainParams::default();
        let state = VehicleState {
            s_m: 0.0,
            v_mps: 0.0,
            soc: 0.5,
            t_s: 0.0,
        };
        // Default threshold 2 m/s: engine off at standstill, zero fuel.
        let out = full_step(&state, &ControlInput::COAST, 0.0, &p);
        assert_eq!(out.fuel_g, 0.0);
        assert!(out.feasible);
        assert_eq!(out.state.v_mps, 0.0);
        assert_eq!(out.state.s_m, 0.0);

        // With start-stop disabled the engine idles and burns the map's
        // idle-point fuel.
        let mut p2 = p.clone();
        p2.start_stop_below_mps = 0.0;
        let out2 = full_step(&state, &ControlInput::COAST, 0.0, &p2);
        let idle_fuel = p2.fuel_map_gps.eval(p2.idle_speed_radps, 0.0) * p2.dt_s;
        assert_relative_eq!(out2.fuel_g, idle_fuel, epsilon = 1e-12);
        assert!(out2.fuel_g > 0.0);
    }

    #[test]
    fn fuel_map_reproduces_willans_line_exactly() {
        // The map is a sampled globally-bilinear function, so bilinear
        // interpolation must reproduce it everywhere in range.
        let p = PowertrainParams::default();
        let mut w = 90.0;
        while w < 620.0 {
            let mut t = 0.0;
            while t <= 160.0 {
                let expect = 1000.0
                    * (WILLANS_A_KG_PER_RAD * w + WILLANS_B_KG_PER_J * w * t + WILLANS_C_KG_PER_S);
                assert_relative_eq!(p.fuel_map_gps.eval(w, t), expect, epsilon = 1e-9);
                t += 13.7;
            }
            w += 41.3;
        }
    }

    #[test]
    fn charge_sustaining_torque_holds_soc() {
        // Choose the BSG torque whose electrical power makes I = -I_aux; the
        // SoC must then be exactly stationary.
        let p = PowertrainParams::default();
        let v = 15.0;
        let soc = 0.55;
        let p_elec = power_for_current(soc, -p.i_aux_a, &p);
        let t_bsg = bsg_torque_for_power(p_elec, v, &p);
        assert!(t_bsg < 0.0);
        let state = VehicleState {
            s_m: 100.0,
            v_mps: v,
            soc,
            t_s: 7.0,
        };
        let u = ControlInput {
            t_eng_nm: 40.0,
            t_bsg_nm: t_bsg,
            t_brk_nm: 0.0,
        };
        let out = full_step(&state, &u, 0.0, &p);
        assert!(out.feasible);
        assert_relative_eq!(out.state.soc, soc, epsilon = 1e-12);
        assert_relative_eq!(out.i_batt_a, -p.i_aux_a, epsilon = 1e-9);
    }

    #[test]
    fn full_step_flags_infeasible_torque_and_soc() {
        let p = PowertrainParams::default();
        let state = VehicleState {
            s_m: 0.0,
            v_mps: 10.0,
            soc: 0.301,
            t_s: 0.0,
        };
        // Heavy electrical assist just above SoC_min drives SoC below the
        // band: reported infeasible, state still advances.
        let u = ControlInput {
            t_eng_nm: 50.0,
            t_bsg_nm: 20.0,
            t_brk_nm: 0.0,
        };
        let out = full_step(&state, &u, 0.0, &p);
        assert!(!out.feasible);
        assert!(out.state.soc < p.soc_min);
        // Over-the-curve engine torque is infeasible.
        let u2 = ControlInput {
            t_eng_nm: 500.0,
            t_bsg_nm: 0.0,
            t_brk_nm: 0.0,
        };
        assert!(!full_step(&state, &u2, 0.0, &p).feasible);
    }

    #[test]
    fn closed_soc_cycle_burns_fuel() {
        // Assist then recharge back to the starting SoC at cruise; the trip
        // covers distance, so total fuel must be strictly positive.
        let p = PowertrainParams::default();
        let mut state = VehicleState {
            s_m: 0.0,
            v_mps: 15.0,
            soc: 0.55,
            t_s: 0.0,
        };
        let start_soc = state.soc;
        let mut fuel = 0.0;
        for _ in 0..30 {
            let u = ControlInput {
                t_eng_nm: 20.0,
                t_bsg_nm: 8.0,
                t_brk_nm: 0.0,
            };
            let out = full_step(&state, &u, 0.0, &p);
            state = out.state;
            fuel += out.fuel_g;
        }
        let mut guard = 0;
        while state.soc < start_soc && guard < 10_000 {
            let p_elec = power_for_current(state.soc, -40.0, &p);
            let t_bsg = bsg_torque_for_power(p_elec, state.v_mps, &p);
            let u = ControlInput {
                t_eng_nm: 60.0,
                t_bsg_nm: t_bsg,
                t_brk_nm: 0.0,
            };
            let out = full_step(&state, &u, 0.0, &p);
            state = out.state;
            fuel += out.fuel_g;
            guard += 1;
        }
        assert!(state.soc >= start_soc);
        assert!(state.s_m > 0.0);
        assert!(fuel > 0.0);
    }

    #[test]
    fn params_roundtrip_through_toml() {
        let p = PowertrainParams::default();
        let text = toml::to_string(&p).unwrap();
        let back: PowertrainParams = toml::from_str(&text).unwrap();
        assert_eq!(back.mass_kg, p.mass_kg);
        assert_eq!(back.fuel_map_gps.z, p.fuel_map_gps.z);
        assert_eq!(back.rolling_term, p.rolling_term);
    }

    proptest! {
        #[test]
        fn table1_interpolates_and_clamps(q in -10.0f64..700.0) {
            let t = Table1::new("t", vec![0.0, 100.0, 400.0], vec![1.0, 3.0, 2.0]).unwrap();
            let v = t.eval(q);
            let expect = if q <= 0.0 {
                1.0
            } else if q <= 100.0 {
                1.0 + (q / 100.0) * 2.0
            } else if q <= 400.0 {
                3.0 + (q - 100.0) / 300.0 * (-1.0)
            } else {
                2.0
            };
            prop_assert!((v - expect).abs() < 1e-12);
        }

        #[test]
        fn speed_update_is_monotone_in_torques(
            v in 0.0f64..25.0,
            t1 in 0.0f64..800.0,
            t2 in 0.0f64..800.0,
            brk in 0.0f64..2000.0,
        ) {
            let p = PowertrainParams::default();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(vehicle_step(v, lo, 0.0, 0.0, &p, 1.0) <= vehicle_step(v, hi, 0.0, 0.0, &p, 1.0));
            prop_assert!(vehicle_step(v, hi, brk, 0.0, &p, 1.0) <= vehicle_step(v, hi, 0.0, 0.0, &p, 1.0));
        }

        #[test]
        fn battery_discharge_monotone_in_power(p1 in 0.0f64..8000.0, p2 in 0.0f64..8000.0) {
            let p = flat_battery_params(47.0, 0.05);
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let (i_lo, _) = battery_step(0.5, lo, &p, 1.0).unwrap();
            let (i_hi, _) = battery_step(0.5, hi, &p, 1.0).unwrap();
            prop_assert!(i_lo <= i_hi);
        }
    }
}
