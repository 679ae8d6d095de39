//! Synthetic signalized corridor generator and driving-episode dynamics.
//!
//! A [`Route`] is a contiguous sequence of speed-limit segments over
//! `[0, s_total]` with traffic lights at fixed positions, each running a
//! cyclic two-phase (green/red) program. [`Env`] wraps a route plus
//! powertrain parameters and advances one episode step at a time, producing
//! the 88-entry observation, the weighted fuel/time stage cost, and the
//! episode status.
//!
//! Conventions that downstream code relies on:
//! - a light's phase at time `t` is the phase of the cyclic program at
//!   `(t + offset) mod cycle`, with half-open phase windows (the boundary
//!   second belongs to the next phase);
//! - the observation samples the nearest light ahead within 500 m (closed
//!   boundary); with no light in range the status vector is all-green and
//!   the distance saturates at 500 m;
//! - red-light violations are detected on position crossings inside a step,
//!   with the crossing time linearly interpolated; landing exactly on the
//!   stop line is not a crossing (the departure step is);
//! - the stage cost is `(λ·fuel_gps + (1 - λ))·Δt` while short of the goal and
//!   zero afterwards, so a summed trajectory cost is exactly
//!   `λ·(fuel grams) + (1 - λ)·(running seconds)`.

use crate::powertrain::{full_step, ControlInput, PowertrainParams, StepOutcome, VehicleState};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Lights are sensed up to this distance ahead; `d_tfc` saturates here.
pub const SENSING_RANGE_M: f64 = 500.0;
/// Every trip departs from standstill at this state of charge.
pub const DEFAULT_SOC0: f64 = 0.5;
/// Length of the sampled light-status vector (seconds of lookahead + 1).
pub const OBS_HORIZON: usize = 81;
/// Total observation width: 7 scalars + the status vector.
pub const OBS_DIM: usize = 7 + OBS_HORIZON;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("invalid route: {0}")]
    Route(String),
    #[error("malformed episode log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub green: bool,
    pub dur_s: f64,
}

/// Cyclic signal program: ordered phases spanning one cycle, shifted by a
/// per-light offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatProgram {
    pub cycle_s: f64,
    pub phases: Vec<Phase>,
    pub offset_s: f64,
}

impl SpatProgram {
    pub fn two_phase(green_s: f64, cycle_s: f64, offset_s: f64) -> Self {
        SpatProgram {
            cycle_s,
            phases: vec![
                Phase { green: true, dur_s: green_s },
                Phase { green: false, dur_s: cycle_s - green_s },
            ],
            offset_s,
        }
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.phases.is_empty() || self.phases.iter().any(|p| p.dur_s <= 0.0) {
            return Err(TrafficError::Route("phase durations must be positive".into()));
        }
        let sum: f64 = self.phases.iter().map(|p| p.dur_s).sum();
        if (sum - self.cycle_s).abs() > 1e-9 {
            return Err(TrafficError::Route(format!(
                "phase durations sum to {sum}, cycle is {}",
                self.cycle_s
            )));
        }
        Ok(())
    }

    /// Phase at time `t`: walks the phase list at `(t + offset) mod cycle`
    /// with half-open windows, so a phase boundary belongs to the next phase.
    pub fn is_green(&self, t_s: f64) -> bool {
        let mut tau = (t_s + self.offset_s).rem_euclid(self.cycle_s);
        for p in &self.phases {
            if tau < p.dur_s {
                return p.green;
            }
            tau -= p.dur_s;
        }
        // tau == cycle only through roundoff; wraps to the first phase.
        self.phases[0].green
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedSegment {
    pub start_m: f64,
    pub end_m: f64,
    pub v_lim_mps: f64,
    pub grade_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteLight {
    pub pos_m: f64,
    pub program: SpatProgram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub s_total_m: f64,
    pub segments: Vec<SpeedSegment>,
    pub lights: Vec<RouteLight>,
    pub seed: u64,
}

impl Route {
    /// Deterministic route for a seed: the generator runs on its own stream
    /// derived from `seed`, so the same (config, seed) pair always yields
    /// byte-identical routes.
    pub fn generate(cfg: &TrafficConfig, seed: u64) -> Result<Self, TrafficError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        generate_route(cfg, seed, &mut rng)
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.segments.is_empty() {
            return Err(TrafficError::Route("no segments".into()));
        }
        if self.segments[0].start_m != 0.0 {
            return Err(TrafficError::Route("segments must start at 0".into()));
        }
        for w in self.segments.windows(2) {
            if (w[0].end_m - w[1].start_m).abs() > 1e-9 {
                return Err(TrafficError::Route("segments must be contiguous".into()));
            }
        }
        let last = self.segments.last().unwrap();
        if (last.end_m - self.s_total_m).abs() > 1e-9 {
            return Err(TrafficError::Route("segments must cover [0, s_total]".into()));
        }
        if self.segments.iter().any(|s| s.end_m <= s.start_m || s.v_lim_mps <= 0.0) {
            return Err(TrafficError::Route("degenerate segment".into()));
        }
        let mut prev = -1.0;
        for l in &self.lights {
            if l.pos_m <= prev {
                return Err(TrafficError::Route("light positions must be increasing".into()));
            }
            if l.pos_m <= 0.0 || l.pos_m >= self.s_total_m {
                return Err(TrafficError::Route("light outside route".into()));
            }
            l.program.validate()?;
            prev = l.pos_m;
        }
        Ok(())
    }

    fn segment_at(&self, s_m: f64) -> &SpeedSegment {
        // Half-open [start, end); positions at or past the end clamp to the
        // last segment.
        let idx = self
            .segments
            .partition_point(|seg| seg.end_m <= s_m)
            .min(self.segments.len() - 1);
        &self.segments[idx]
    }

    pub fn v_lim_at(&self, s_m: f64) -> f64 {
        self.segment_at(s_m).v_lim_mps
    }

    pub fn grade_at(&self, s_m: f64) -> f64 {
        self.segment_at(s_m).grade_rad
    }

    /// Next speed limit and distance to where it begins. Past the last
    /// boundary the limit repeats and the distance pads to the trip end.
    pub fn next_limit(&self, s_m: f64) -> (f64, f64) {
        let idx = self
            .segments
            .partition_point(|seg| seg.end_m <= s_m)
            .min(self.segments.len() - 1);
        if idx + 1 < self.segments.len() {
            (self.segments[idx + 1].v_lim_mps, self.segments[idx].end_m - s_m)
        } else {
            (self.segments[idx].v_lim_mps, (self.s_total_m - s_m).max(0.0))
        }
    }

    /// Nearest light at or ahead of `s` (stop lines are "ahead" until
    /// crossed).
    pub fn next_light(&self, s_m: f64) -> Option<&RouteLight> {
        let idx = self.lights.partition_point(|l| l.pos_m < s_m);
        self.lights.get(idx)
    }

    /// Lights with positions in `[s0, s1)`.
    pub fn lights_between(&self, s0_m: f64, s1_m: f64) -> &[RouteLight] {
        let a = self.lights.partition_point(|l| l.pos_m < s0_m);
        let b = self.lights.partition_point(|l| l.pos_m < s1_m);
        &self.lights[a..b]
    }
}

/// Corridor generator parameters. Distances snap to `grid_m` so planner
/// cells align with segment and light boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    pub s_total_range_m: (f64, f64),
    pub grid_m: f64,
    pub segment_len_range_m: (f64, f64),
    pub speed_limits_mps: Vec<f64>,
    pub light_spacing_range_m: (f64, f64),
    pub light_end_clearance_m: f64,
    pub cycle_s: f64,
    pub green_range_s: (f64, f64),
    /// Success rate of the geometric departure-delay draw that shifts every
    /// light's phase by a common random number of seconds.
    pub departure_geometric_p: f64,
    pub randomize_every_steps: usize,
    pub randomize_light_clearance_m: f64,
    pub randomize_goal_clearance_m: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            s_total_range_m: (5000.0, 10000.0),
            grid_m: 10.0,
            segment_len_range_m: (600.0, 2000.0),
            speed_limits_mps: vec![11.2, 13.4, 15.6, 17.9, 20.1],
            light_spacing_range_m: (350.0, 900.0),
            light_end_clearance_m: 300.0,
            cycle_s: 60.0,
            green_range_s: (25.0, 35.0),
            departure_geometric_p: 0.01,
            randomize_every_steps: 50,
            randomize_light_clearance_m: 200.0,
            randomize_goal_clearance_m: 1000.0,
        }
    }
}

/// Deterministically generates a route from a seed: segment speed limits
/// from the configured set, light spacing and green splits from the
/// configured ranges, and phase offsets as a uniform per-light base plus a
/// geometric per-trip departure delay, reduced modulo the cycle.
pub fn generate_route<R: Rng>(cfg: &TrafficConfig, seed: u64, rng: &mut R) -> Result<Route, TrafficError> {
    for (name, (lo, hi)) in [
        ("s_total_range_m", cfg.s_total_range_m),
        ("segment_len_range_m", cfg.segment_len_range_m),
        ("light_spacing_range_m", cfg.light_spacing_range_m),
    ] {
        if !(lo > 0.0 && hi >= lo) {
            return Err(TrafficError::Config(format!("{name} empty or negative: [{lo}, {hi}]")));
        }
    }
    if cfg.speed_limits_mps.is_empty() {
        return Err(TrafficError::Config("speed_limits_mps is empty".into()));
    }
    if !(cfg.green_range_s.0 > 0.0 && cfg.green_range_s.1 >= cfg.green_range_s.0 && cfg.green_range_s.1 < cfg.cycle_s) {
        return Err(TrafficError::Config("green_range_s must fit inside the cycle".into()));
    }
    if !(cfg.departure_geometric_p > 0.0 && cfg.departure_geometric_p <= 1.0) {
        return Err(TrafficError::Config("departure_geometric_p must be in (0, 1]".into()));
    }

    let snap = |x: f64| (x / cfg.grid_m).round() * cfg.grid_m;
    let s_total = snap(rng.gen_range(cfg.s_total_range_m.0..=cfg.s_total_range_m.1));

    let mut segments = Vec::new();
    let mut s = 0.0;
    while s < s_total {
        let len = snap(rng.gen_range(cfg.segment_len_range_m.0..=cfg.segment_len_range_m.1));
        let end = (s + len).min(s_total);
        let v_lim = cfg.speed_limits_mps[rng.gen_range(0..cfg.speed_limits_mps.len())];
        segments.push(SpeedSegment { start_m: s, end_m: end, v_lim_mps: v_lim, grade_rad: 0.0 });
        s = end;
    }

    let departure_s = Geometric::new(cfg.departure_geometric_p)
        .map_err(|e| TrafficError::Config(format!("geometric parameter: {e}")))?
        .sample(rng) as f64;
    let mut lights = Vec::new();
    let mut pos = 0.0;
    loop {
        pos = snap(pos + rng.gen_range(cfg.light_spacing_range_m.0..=cfg.light_spacing_range_m.1));
        if pos > s_total - cfg.light_end_clearance_m {
            break;
        }
        let green = rng.gen_range(cfg.green_range_s.0..=cfg.green_range_s.1);
        let base = rng.gen_range(0.0..cfg.cycle_s);
        let offset = (base + departure_s).rem_euclid(cfg.cycle_s);
        lights.push(RouteLight { pos_m: pos, program: SpatProgram::two_phase(green, cfg.cycle_s, offset) });
    }

    let route = Route { s_total_m: s_total, segments, lights, seed };
    route.validate()?;
    Ok(route)
}

/// The 88-entry observation: seven scalar features plus the sampled status
/// of the nearest upcoming light over the next 80 seconds (index 0 = now).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub soc: f64,
    pub v_mps: f64,
    pub v_lim_mps: f64,
    pub v_lim_next_mps: f64,
    pub d_tfc_m: f64,
    pub d_lim_next_m: f64,
    pub d_rem_m: f64,
    pub x_tfc: Vec<u8>,
}

impl Observation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        v.extend_from_slice(&[
            self.soc,
            self.v_mps,
            self.v_lim_mps,
            self.v_lim_next_mps,
            self.d_tfc_m,
            self.d_lim_next_m,
            self.d_rem_m,
        ]);
        v.extend(self.x_tfc.iter().map(|&b| b as f64));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    GoalReached,
    FailedRedViolation,
    FailedTerminalSoc,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != EpisodeStatus::Running
    }
}

impl fmt::Display for EpisodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EpisodeStatus::Running => "running",
            EpisodeStatus::GoalReached => "goal_reached",
            EpisodeStatus::FailedRedViolation => "failed_red_violation",
            EpisodeStatus::FailedTerminalSoc => "failed_terminal_soc",
        };
        f.write_str(s)
    }
}

impl FromStr for EpisodeStatus {
    type Err = TrafficError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "running" => Ok(EpisodeStatus::Running),
            "goal_reached" => Ok(EpisodeStatus::GoalReached),
            "failed_red_violation" => Ok(EpisodeStatus::FailedRedViolation),
            "failed_terminal_soc" => Ok(EpisodeStatus::FailedTerminalSoc),
            other => Err(TrafficError::Log(format!("unknown status '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvStep {
    pub state: VehicleState,
    pub cost: f64,
    pub status: EpisodeStatus,
    pub outcome: StepOutcome,
    pub crossed_red: bool,
}

/// One episode's world: an immutable route plus powertrain parameters and
/// the cost weighting. Episode state stays with the caller.
#[derive(Debug, Clone)]
pub struct Env {
    pub route: Route,
    pub pt: PowertrainParams,
    pub lambda: f64,
    pub soc0: f64,
    pub cfg: TrafficConfig,
}

impl Env {
    pub fn new(route: Route, pt: PowertrainParams, cfg: TrafficConfig) -> Self {
        Env { route, pt, lambda: 0.45, soc0: DEFAULT_SOC0, cfg }
    }

    pub fn initial_state(&self) -> VehicleState {
        VehicleState { s_m: 0.0, v_mps: 0.0, soc: self.soc0, t_s: 0.0 }
    }

    pub fn observe(&self, state: &VehicleState) -> Observation {
        let v_lim = self.route.v_lim_at(state.s_m);
        let (v_lim_next, d_lim_next) = self.route.next_limit(state.s_m);
        let d_rem = (self.route.s_total_m - state.s_m).max(0.0);
        let light = self
            .route
            .next_light(state.s_m)
            .filter(|l| l.pos_m - state.s_m <= SENSING_RANGE_M);
        let (d_tfc, x_tfc) = match light {
            Some(l) => {
                let x = (0..OBS_HORIZON)
                    .map(|k| l.program.is_green(state.t_s + k as f64) as u8)
                    .collect();
                (l.pos_m - state.s_m, x)
            }
            None => (SENSING_RANGE_M, vec![1; OBS_HORIZON]),
        };
        Observation {
            soc: state.soc,
            v_mps: state.v_mps,
            v_lim_mps: v_lim,
            v_lim_next_mps: v_lim_next,
            d_tfc_m: d_tfc,
            d_lim_next_m: d_lim_next,
            d_rem_m: d_rem,
            x_tfc,
        }
    }

    /// Red-light crossing test for a move from `s` (at time `t`, speed `v`)
    /// to `s2`. Departing a stop line counts at the departure time; landing
    /// exactly on one does not count yet.
    fn crosses_red(&self, s: f64, s2: f64, t: f64, v: f64) -> bool {
        for l in self.route.lights_between(s, s2) {
            // l.pos in [s, s2)
            let t_cross = if l.pos_m == s {
                if v <= 0.0 {
                    continue;
                }
                t
            } else {
                t + (l.pos_m - s) / v
            };
            if !l.program.is_green(t_cross) {
                return true;
            }
        }
        false
    }

    pub fn step(&self, state: &VehicleState, u: &ControlInput) -> EnvStep {
        let grade = self.route.grade_at(state.s_m);
        let outcome = full_step(state, u, grade, &self.pt);
        let next = outcome.state;
        let running = state.s_m < self.route.s_total_m;
        let cost = if running {
            self.lambda * outcome.fuel_g + (1.0 - self.lambda) * self.pt.dt_s
        } else {
            0.0
        };
        let crossed_red = self.crosses_red(state.s_m, next.s_m, state.t_s, state.v_mps);
        let status = if crossed_red {
            EpisodeStatus::FailedRedViolation
        } else if next.s_m >= self.route.s_total_m {
            if next.soc >= self.pt.soc_terminal_min {
                EpisodeStatus::GoalReached
            } else {
                EpisodeStatus::FailedTerminalSoc
            }
        } else {
            EpisodeStatus::Running
        };
        EnvStep { state: next, cost, status, outcome, crossed_red }
    }

    /// Exploration reset used during training: resamples SoC uniformly over
    /// the band and speed uniformly up to the local limit, except close
    /// ahead of a light or near the destination where the state is left
    /// unchanged.
    pub fn domain_randomize<R: Rng>(&self, state: &VehicleState, rng: &mut R) -> VehicleState {
        let s = state.s_m;
        if self.route.s_total_m - s <= self.cfg.randomize_goal_clearance_m {
            return *state;
        }
        if let Some(l) = self.route.next_light(s) {
            if l.pos_m - s <= self.cfg.randomize_light_clearance_m {
                return *state;
            }
        }
        let mut out = *state;
        out.soc = rng.gen_range(self.pt.soc_min..self.pt.soc_max);
        out.v_mps = rng.gen_range(0.0..=self.route.v_lim_at(s));
        out
    }
}

/// One per-step record of an episode log (CSV row).
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub t_s: f64,
    pub s_m: f64,
    pub v_mps: f64,
    pub soc: f64,
    pub t_eng_nm: f64,
    pub t_bsg_nm: f64,
    pub t_brk_nm: f64,
    pub fuel_g: f64,
    pub cost: f64,
    pub red_ahead: bool,
    pub crossed_red: bool,
    pub feasible: bool,
    pub status: EpisodeStatus,
}

pub const EPISODE_CSV_HEADER: &str =
    "step,t_s,s_m,v_mps,soc,t_eng_nm,t_bsg_nm,t_brk_nm,fuel_g,cost,red_ahead,crossed_red,feasible,status";

pub fn episode_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(EPISODE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.t_s,
            r.s_m,
            r.v_mps,
            r.soc,
            r.t_eng_nm,
            r.t_bsg_nm,
            r.t_brk_nm,
            r.fuel_g,
            r.cost,
            r.red_ahead as u8,
            r.crossed_red as u8,
            r.feasible as u8,
            r.status
        ));
    }
    out
}

pub fn episode_from_csv(text: &str) -> Result<Vec<LogRow>, TrafficError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == EPISODE_CSV_HEADER => {}
        other => return Err(TrafficError::Log(format!("bad header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(TrafficError::Log(format!("row {i}: expected 14 fields, got {}", f.len())));
        }
        let num = |j: usize| -> Result<f64, TrafficError> {
            f[j].parse().map_err(|e| TrafficError::Log(format!("row {i} field {j}: {e}")))
        };
        let flag = |j: usize| -> Result<bool, TrafficError> {
            match f[j] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(TrafficError::Log(format!("row {i} field {j}: bad flag '{other}'"))),
            }
        };
        rows.push(LogRow {
            step: f[0].parse().map_err(|e| TrafficError::Log(format!("row {i}: {e}")))?,
            t_s: num(1)?,
            s_m: num(2)?,
            v_mps: num(3)?,
            soc: num(4)?,
            t_eng_nm: num(5)?,
            t_bsg_nm: num(6)?,
            t_brk_nm: num(7)?,
            fuel_g: num(8)?,
            cost: num(9)?,
            red_ahead: flag(10)?,
            crossed_red: flag(11)?,
            feasible: flag(12)?,
            status: f[13].parse()?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_route(s_total: f64, v_lim: f64, lights: Vec<RouteLight>) -> Route {
        Route {
            s_total_m: s_total,
            segments: vec![SpeedSegment { start_m: 0.0, end_m: s_total, v_lim_mps: v_lim, grade_rad: 0.0 }],
            lights,
            seed: 0,
        }
    }

    fn env_with(route: Route) -> Env {
        Env::new(route, PowertrainParams::default(), TrafficConfig::default())
    }

    #[test]
    fn phase_walk_matches_examples_and_is_periodic() {
        let p = SpatProgram::two_phase(30.0, 60.0, 0.0);
        assert!(p.is_green(0.0));
        assert!(!p.is_green(30.0)); // boundary belongs to the next phase
        assert!(p.is_green(61.0));
        let q = SpatProgram::two_phase(25.0, 60.0, 47.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = rng.gen_range(0.0..600.0);
            assert_eq!(q.is_green(t), q.is_green(t + q.cycle_s));
            // Direct modular oracle for the two-phase program.
            let tau = (t + q.offset_s).rem_euclid(q.cycle_s);
            assert_eq!(q.is_green(t), tau < 25.0);
        }
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let cfg = TrafficConfig::default();
        let a = generate_route(&cfg, 7, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_route(&cfg, 7, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(!a.lights.is_empty());
    }

    #[test]
    fn generator_with_no_light_room_yields_empty_lights() {
        let mut cfg = TrafficConfig::default();
        // Clearance larger than any trip: no light fits.
        cfg.light_end_clearance_m = 20_000.0;
        let r = generate_route(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(r.lights.is_empty());
    }

    #[test]
    fn generator_rejects_bad_config() {
        let mut cfg = TrafficConfig::default();
        cfg.speed_limits_mps.clear();
        assert!(generate_route(&cfg, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut cfg2 = TrafficConfig::default();
        cfg2.green_range_s = (25.0, 70.0);
        assert!(generate_route(&cfg2, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn route_lengths_follow_the_configured_distribution() {
        let cfg = TrafficConfig::default();
        let mut sum = 0.0;
        for seed in 0..1000u64 {
            let r = generate_route(&cfg, seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            r.validate().unwrap();
            assert!(r.s_total_m >= 5000.0 && r.s_total_m <= 10_000.0);
            for w in r.lights.windows(2) {
                let gap = w[1].pos_m - w[0].pos_m;
                // Grid snapping can move an endpoint by half a cell.
                assert!(gap >= 345.0 && gap <= 905.0, "gap {gap}");
            }
            for l in &r.lights {
                assert!(l.pos_m <= r.s_total_m - cfg.light_end_clearance_m);
            }
            sum += r.s_total_m;
        }
        let mean = sum / 1000.0;
        assert!((mean - 7500.0).abs() < 150.0, "mean {mean}");
    }

    #[test]
    fn observation_samples_the_upcoming_light() {
        // Red for 21 more seconds, then green for at least the rest of the
        // 80 s horizon: cycle 120 with a 90 s green, offset placing the red
        // window's end 21 s away.
        let prog = SpatProgram::two_phase(90.0, 120.0, 99.0);
        let route = flat_route(2000.0, 15.6, vec![RouteLight { pos_m: 600.0, program: prog }]);
        let env = env_with(route);
        let state = VehicleState { s_m: 400.0, v_mps: 10.0, soc: 0.6, t_s: 0.0 };
        let obs = env.observe(&state);
        assert_relative_eq!(obs.d_tfc_m, 200.0);
        assert_eq!(obs.x_tfc.len(), OBS_HORIZON);
        assert!(obs.x_tfc[..21].iter().all(|&b| b == 0));
        assert!(obs.x_tfc[21..].iter().all(|&b| b == 1));
        assert_eq!(obs.to_vec().len(), OBS_DIM);
        // Consistency with the phase function at every sampled second.
        let l = env.route.next_light(state.s_m).unwrap();
        for k in 0..OBS_HORIZON {
            assert_eq!(obs.x_tfc[k] == 1, l.program.is_green(state.t_s + k as f64));
        }
    }

    #[test]
    fn observation_out_of_range_defaults_to_green() {
        let prog = SpatProgram::two_phase(1.0, 60.0, 30.0);
        let mk = |pos| flat_route(2000.0, 15.6, vec![RouteLight { pos_m: pos, program: prog.clone() }]);
        // 501 m ahead: out of range, saturated distance, all-green.
        let env = env_with(mk(901.0));
        let obs = env.observe(&VehicleState { s_m: 400.0, v_mps: 0.0, soc: 0.5, t_s: 0.0 });
        assert_eq!(obs.d_tfc_m, SENSING_RANGE_M);
        assert!(obs.x_tfc.iter().all(|&b| b == 1));
        // Exactly 500 m ahead: included (closed boundary), mostly red program.
        let env2 = env_with(mk(900.0));
        let obs2 = env2.observe(&VehicleState { s_m: 400.0, v_mps: 0.0, soc: 0.5, t_s: 0.0 });
        assert_eq!(obs2.d_tfc_m, 500.0);
        assert!(obs2.x_tfc.iter().any(|&b| b == 0));
    }

    #[test]
    fn limit_lookups_pad_at_the_route_end() {
        let route = Route {
            s_total_m: 1000.0,
            segments: vec![
                SpeedSegment { start_m: 0.0, end_m: 600.0, v_lim_mps: 11.2, grade_rad: 0.0 },
                SpeedSegment { start_m: 600.0, end_m: 1000.0, v_lim_mps: 17.9, grade_rad: 0.0 },
            ],
            lights: vec![],
            seed: 0,
        };
        route.validate().unwrap();
        assert_eq!(route.v_lim_at(0.0), 11.2);
        assert_eq!(route.v_lim_at(600.0), 17.9); // boundary belongs to the next segment
        assert_eq!(route.v_lim_at(1000.0), 17.9);
        let (v_next, d_next) = route.next_limit(100.0);
        assert_eq!((v_next, d_next), (17.9, 500.0));
        let (v_pad, d_pad) = route.next_limit(700.0);
        assert_eq!(v_pad, 17.9);
        assert_relative_eq!(d_pad, 300.0);
    }

    #[test]
    fn summed_cost_equals_weighted_fuel_plus_time() {
        let route = flat_route(300.0, 15.6, vec![]);
        let env = env_with(route);
        let mut state = env.initial_state();
        state.soc = 0.6;
        let mut total_cost = 0.0;
        let mut total_fuel = 0.0;
        let mut running_s = 0.0;
        for step in 0..200 {
            let u = if step % 3 == 2 {
                ControlInput { t_eng_nm: 0.0, t_bsg_nm: -5.0, t_brk_nm: 0.0 }
            } else {
                ControlInput { t_eng_nm: 60.0, t_bsg_nm: 0.0, t_brk_nm: 0.0 }
            };
            if state.s_m < env.route.s_total_m {
                running_s += env.pt.dt_s;
                let out = env.step(&state, &u);
                total_fuel += out.outcome.fuel_g;
                total_cost += out.cost;
                state = out.state;
            } else {
                let out = env.step(&state, &ControlInput::COAST);
                assert_eq!(out.cost, 0.0);
                state = out.state;
            }
        }
        assert_relative_eq!(
            total_cost,
            env.lambda * total_fuel + (1.0 - env.lambda) * running_s,
            epsilon = 1e-9
        );
    }

    #[test]
    fn red_crossing_fails_green_crossing_passes() {
        // Green only on [0, 1): effectively always red except right at the
        // cycle start.
        let red = SpatProgram::two_phase(1.0, 60.0, 30.0);
        let route = flat_route(1000.0, 15.6, vec![RouteLight { pos_m: 500.0, program: red }]);
        let env = env_with(route);
        let state = VehicleState { s_m: 495.0, v_mps: 10.0, soc: 0.6, t_s: 100.0 };
        let out = env.step(&state, &ControlInput::COAST);
        assert!(out.crossed_red);
        assert_eq!(out.status, EpisodeStatus::FailedRedViolation);

        let green = SpatProgram::two_phase(59.0, 60.0, 0.0);
        let route2 = flat_route(1000.0, 15.6, vec![RouteLight { pos_m: 500.0, program: green }]);
        let env2 = env_with(route2);
        let out2 = env2.step(&state, &ControlInput::COAST);
        assert!(!out2.crossed_red);
        assert_eq!(out2.status, EpisodeStatus::Running);
    }

    #[test]
    fn interpolated_crossing_time_decides_the_phase() {
        // Green window [0, 40.3) each cycle, so the light flips to red at
        // t = 100.3, strictly inside the step from t = 100. Crossing 2 m
        // into the step (t = 100.2) is legal; crossing 5 m in (t = 100.5)
        // is a violation, even though the step's start and end times landed
        // on either side.
        let prog = SpatProgram::two_phase(40.3, 60.0, 0.0);
        let route = flat_route(1000.0, 15.6, vec![RouteLight { pos_m: 500.0, program: prog }]);
        let env = env_with(route);
        let s1 = VehicleState { s_m: 498.0, v_mps: 10.0, soc: 0.6, t_s: 100.0 };
        assert!(!env.step(&s1, &ControlInput::COAST).crossed_red);
        let s2 = VehicleState { s_m: 495.0, v_mps: 10.0, soc: 0.6, t_s: 100.0 };
        assert!(env.step(&s2, &ControlInput::COAST).crossed_red);
    }

    #[test]
    fn stop_line_landing_and_departure_convention() {
        let red = SpatProgram::two_phase(1.0, 60.0, 30.0);
        let route = flat_route(1000.0, 15.6, vec![RouteLight { pos_m: 500.0, program: red }]);
        let env = env_with(route);
        // Landing exactly on the line is not a crossing.
        let approach = VehicleState { s_m: 490.0, v_mps: 10.0, soc: 0.6, t_s: 20.0 };
        let braking = ControlInput { t_eng_nm: 0.0, t_bsg_nm: 0.0, t_brk_nm: 3000.0 };
        let out = env.step(&approach, &braking);
        assert_relative_eq!(out.state.s_m, 500.0);
        assert!(!out.crossed_red);
        assert_eq!(out.status, EpisodeStatus::Running);
        // Sitting still on the line is fine; departing on red is a violation.
        let stopped = VehicleState { s_m: 500.0, v_mps: 0.0, soc: 0.6, t_s: 21.0 };
        assert!(!env.step(&stopped, &ControlInput::COAST).crossed_red);
        let departing = VehicleState { s_m: 500.0, v_mps: 3.0, soc: 0.6, t_s: 21.0 };
        assert!(env.step(&departing, &ControlInput::COAST).crossed_red);
    }

    #[test]
    fn terminal_soc_splits_goal_from_failure() {
        let route = flat_route(300.0, 15.6, vec![]);
        let env = env_with(route);
        let nearly_there = |soc| VehicleState { s_m: 295.0, v_mps: 10.0, soc, t_s: 40.0 };
        let ok = env.step(&nearly_there(0.55), &ControlInput::COAST);
        assert_eq!(ok.status, EpisodeStatus::GoalReached);
        let low = env.step(&nearly_there(0.49), &ControlInput::COAST);
        assert_eq!(low.status, EpisodeStatus::FailedTerminalSoc);
    }

    #[test]
    fn domain_randomization_respects_guards_and_supports() {
        let prog = SpatProgram::two_phase(30.0, 60.0, 0.0);
        let route = flat_route(5000.0, 15.6, vec![RouteLight { pos_m: 2000.0, program: prog }]);
        let env = env_with(route);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // 150 m before the light: untouched.
        let near_light = VehicleState { s_m: 1850.0, v_mps: 8.0, soc: 0.6, t_s: 0.0 };
        assert_eq!(env.domain_randomize(&near_light, &mut rng), near_light);
        // 500 m from the goal: untouched.
        let near_goal = VehicleState { s_m: 4500.0, v_mps: 8.0, soc: 0.6, t_s: 0.0 };
        assert_eq!(env.domain_randomize(&near_goal, &mut rng), near_goal);
        // Eligible: resampled within the supports, position and time kept.
        let eligible = VehicleState { s_m: 1000.0, v_mps: 8.0, soc: 0.6, t_s: 30.0 };
        for _ in 0..100 {
            let r = env.domain_randomize(&eligible, &mut rng);
            assert_eq!(r.s_m, eligible.s_m);
            assert_eq!(r.t_s, eligible.t_s);
            assert!(r.soc >= 0.30 && r.soc <= 0.80);
            assert!(r.v_mps >= 0.0 && r.v_mps <= 15.6);
        }
    }

    #[test]
    fn route_roundtrips_through_toml() {
        let cfg = TrafficConfig::default();
        let r = generate_route(&cfg, 11, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let text = toml::to_string(&r).unwrap();
        let back: Route = toml::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn episode_log_roundtrips_through_csv() {
        let rows = vec![
            LogRow {
                step: 0,
                t_s: 0.0,
                s_m: 0.0,
                v_mps: 0.0,
                soc: 0.5,
                t_eng_nm: 40.0,
                t_bsg_nm: -3.25,
                t_brk_nm: 0.0,
                fuel_g: 0.123456789,
                cost: 0.6055555,
                red_ahead: false,
                crossed_red: false,
                feasible: true,
                status: EpisodeStatus::Running,
            },
            LogRow {
                step: 1,
                t_s: 1.0,
                s_m: 1.5,
                v_mps: 3.0,
                soc: 0.4999,
                t_eng_nm: 0.0,
                t_bsg_nm: 0.0,
                t_brk_nm: 120.0,
                fuel_g: 0.0,
                cost: 0.55,
                red_ahead: true,
                crossed_red: false,
                feasible: true,
                status: EpisodeStatus::GoalReached,
            },
        ];
        let text = episode_to_csv(&rows);
        let back = episode_from_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert!(episode_from_csv("nope\n1,2").is_err());
    }
}
