//! Conservative reference controller: engine-only propulsion with
//! proportional speed tracking, early braking for signals under a
//! worst-case stopping-distance rule, and the belt machine run purely as an
//! alternator that regulates charge toward a sustaining setpoint (it never
//! propels).
//!
//! The controller reads only the instantaneous state and the route, so it is
//! stateless and usable both as the replay-buffer seeding policy and as the
//! benchmark reference.

use serde::{Deserialize, Serialize};

use crate::powertrain::{
    battery_step, bsg_torque_for_power, driveline_torque, gear_and_speeds, road_load_accel,
    torque_bounds, ControlInput, PowertrainParams, VehicleState,
};
use crate::traffic::Route;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Absolute cruise cap, m/s; the target is `min(v_lim, cap)`.
    pub cruise_cap_mps: f64,
    /// Proportional speed gain, 1/s.
    pub kp: f64,
    /// Comfortable braking used by the stopping-distance rule, m/s².
    pub a_brake_mps2: f64,
    /// Hard acceleration clamp, m/s².
    pub a_accel_mps2: f64,
    /// Stop this far before the stop line, m.
    pub stop_margin_m: f64,
    /// A light only counts as passable when green from now through the
    /// optimistic arrival plus this guard, s.
    pub green_guard_s: f64,
    /// Charge-sustaining SoC setpoint (kept above the terminal floor).
    pub soc_setpoint: f64,
    /// Extra alternator charging current per unit SoC error, A.
    pub charge_gain_a: f64,
    /// Alternator charging current ceiling, A.
    pub charge_max_a: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            cruise_cap_mps: 15.0,
            kp: 0.6,
            a_brake_mps2: 2.0,
            a_accel_mps2: 1.5,
            stop_margin_m: 3.0,
            green_guard_s: 5.0,
            soc_setpoint: 0.53,
            charge_gain_a: 400.0,
            charge_max_a: 12.0,
        }
    }
}

/// Speed from which the vehicle can still stop `margin` short of a line
/// `d_m` ahead at the comfortable braking rate. Position integrates at the
/// pre-step speed (forward Euler), which lengthens the stopping distance by
/// `v·dt/2`; solving `v²/(2a) + v/2 = d` keeps the curve consistent with
/// the discrete dynamics.
fn stop_curve_speed(d_m: f64, cfg: &BaselineConfig) -> f64 {
    let a = cfg.a_brake_mps2;
    let d = (d_m - cfg.stop_margin_m).max(0.0);
    (a * a / 4.0 + 2.0 * a * d).sqrt() - a / 2.0
}

/// Whether the program stays green over `[t, t + window]`, sampled each
/// second (phases are integer-second scaled, so sampling cannot skip a red).
fn green_through(route: &Route, light_pos: f64, t: f64, window: f64) -> bool {
    let light = route
        .lights
        .iter()
        .find(|l| l.pos_m == light_pos)
        .expect("light position from route");
    let mut tau = 0.0;
    while tau <= window + 1e-9 {
        if !light.program.is_green(t + tau) {
            return false;
        }
        tau += 1.0;
    }
    true
}

/// Conservative control for one step. See the module docs for the policy.
pub fn baseline_controller(
    state: &VehicleState,
    route: &Route,
    pt: &PowertrainParams,
    cfg: &BaselineConfig,
) -> ControlInput {
    let v = state.v_mps;
    let mut v_tgt = route.v_lim_at(state.s_m).min(cfg.cruise_cap_mps);

    // Slow ahead of a lower upcoming limit along the same stopping curve.
    let (v_next, d_next) = route.next_limit(state.s_m);
    if v_next < v_tgt {
        let allow = (v_next * v_next + 2.0 * cfg.a_brake_mps2 * d_next.max(0.0)).sqrt();
        v_tgt = v_tgt.min(allow);
    }

    // Red-light rule: unless the light is green from now through a
    // conservative arrival window, treat it as a stop at the line.
    let mut brake_ff: Option<f64> = None;
    if let Some(light) = route.next_light(state.s_m) {
        let d = light.pos_m - state.s_m;
        let t_arrival = d / v.max(1.0);
        let go = green_through(route, light.pos_m, state.t_s, t_arrival + cfg.green_guard_s);
        if !go {
            v_tgt = v_tgt.min(stop_curve_speed(d, cfg));
            // Kinematic feedforward: proportional tracking alone lags the
            // stopping curve by a_brake/kp and would creep across the line,
            // so once meaningful braking is due, command the deceleration
            // that stops exactly at the margin under the forward-Euler
            // position update (`d` shrinks by `v·dt` before `v` drops).
            let d_free = (d - cfg.stop_margin_m - 0.5 * v).max(0.05);
            let a_need = v * v / (2.0 * d_free);
            if a_need >= 0.5 * cfg.a_brake_mps2 {
                brake_ff = Some(-a_need);
            }
        }
    }

    // Remaining-distance stop is not needed: the trip ends at s_total and
    // the episode terminates on arrival.

    let mut a_des = (cfg.kp * (v_tgt - v)).clamp(-cfg.a_brake_mps2, cfg.a_accel_mps2);
    if let Some(ff) = brake_ff {
        // May exceed the comfort rate; the friction brake has the headroom.
        a_des = a_des.min(ff);
    }
    let grade = route.grade_at(state.s_m);
    let a_net = a_des + road_load_accel(v, grade, pt);

    // Alternator torque: regulate charge toward the setpoint. Charging is
    // only possible while the belt spins, i.e. while moving.
    let mut t_bsg = 0.0;
    if v > 0.5 {
        let extra = ((cfg.soc_setpoint - state.soc) * cfg.charge_gain_a)
            .clamp(0.0, cfg.charge_max_a);
        let i_target = -(pt.i_aux_a + extra);
        let v_oc = pt.v_oc_v.eval(state.soc);
        let r0 = pt.r_0_ohm.eval(state.soc);
        let p_batt = v_oc * i_target - r0 * i_target * i_target;
        t_bsg = bsg_torque_for_power(p_batt, v, pt);
        let (_, bsg_lo, _) = torque_bounds(v, pt);
        t_bsg = t_bsg.clamp(bsg_lo, 0.0);
        // Never command charging the pack cannot absorb.
        if battery_step(state.soc, p_batt, pt, pt.dt_s).is_err() {
            t_bsg = 0.0;
        }
    }

    // Wheel torque needed for the desired acceleration, including the
    // alternator drag already on the crank.
    let t_wheel_req = pt.mass_kg * a_net * pt.wheel_radius_m;
    let t_wheel_bsg = driveline_torque(0.0, t_bsg, v, pt);
    let t_wheel_eng = t_wheel_req - t_wheel_bsg;

    let (gear, _, _) = gear_and_speeds(v, pt);
    let ratio = pt.gears.ratio[gear] * pt.final_drive;
    let eta = pt.gears.eta[gear];
    let (eng_hi, _, _) = torque_bounds(v, pt);

    if t_wheel_eng >= 0.0 {
        let t_eng = (t_wheel_eng / (ratio * eta)).clamp(0.0, eng_hi);
        ControlInput { t_eng_nm: t_eng, t_bsg_nm: t_bsg, t_brk_nm: 0.0 }
    } else {
        // Friction braking only; drop the alternator while stopping hard.
        let t_brk = (-t_wheel_req).max(0.0).min(3000.0);
        ControlInput { t_eng_nm: 0.0, t_bsg_nm: 0.0, t_brk_nm: t_brk }
    }
}
