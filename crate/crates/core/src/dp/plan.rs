//! Receding-horizon planning over spatial cells, plus a whole-trip
//! perfect-information reference solver.
//!
//! Trajectory optimization runs in the spatial domain: the road ahead is cut
//! into fixed-length cells and each backward-recursion stage transitions the
//! vehicle across one cell. Continuous dynamics inside a cell are integrated
//! with capped sub-steps so slow traversals stay accurate, and the elapsed
//! time is carried as a third state so signal phases can be enforced at the
//! exact moment the stop line is crossed.

use std::collections::HashMap;
use std::sync::Arc;

use crate::powertrain::{full_step_dt, ControlInput, PowertrainParams, VehicleState};
use crate::traffic::{Route, SpatProgram};

use super::kernel::{backward_recursion, interp3, ActionOutcome, Recursion, StageModel};
use super::{ActionSet, Axis, DpConfig, DpError, JTable, OptState};

/// Max integrator sub-steps across one cell. A vehicle pinned at the timing
/// floor (0.5 m/s) needs 20 one-second steps for a 10 m cell; 64 leaves slack
/// for fractional end cells and guards against pathological loops.
const MAX_SUBSTEPS: usize = 64;

/// Tolerance for "landed exactly on the cell boundary".
const POS_EPS_M: f64 = 1e-9;

/// What the world looks like inside one cell. Positions are relative to the
/// cell entry point.
trait CellWorld {
    fn v_lim(&self, x_m: f64) -> f64;
    fn grade(&self, x_m: f64) -> f64;
    /// Stop-line offset within the cell, if a signal sits inside it.
    fn light_offset_m(&self) -> Option<f64>;
}

/// Cell with constant speed limit and grade and no signal. Transitions through
/// such cells depend only on (limit, grade, length), so they are cacheable.
struct UniformWorld {
    v_lim_mps: f64,
    grade_rad: f64,
}

impl CellWorld for UniformWorld {
    fn v_lim(&self, _x_m: f64) -> f64 {
        self.v_lim_mps
    }
    fn grade(&self, _x_m: f64) -> f64 {
        self.grade_rad
    }
    fn light_offset_m(&self) -> Option<f64> {
        None
    }
}

/// Cell backed by route lookups, used whenever a signal or a segment boundary
/// falls inside the cell.
struct RouteWorld<'a> {
    route: &'a Route,
    s0_m: f64,
    light_offset_m: Option<f64>,
}

impl CellWorld for RouteWorld<'_> {
    fn v_lim(&self, x_m: f64) -> f64 {
        self.route.v_lim_at(self.s0_m + x_m)
    }
    fn grade(&self, x_m: f64) -> f64 {
        self.route.grade_at(self.s0_m + x_m)
    }
    fn light_offset_m(&self) -> Option<f64> {
        self.light_offset_m
    }
}

/// Integrate one control across one cell of length `ds_m` starting from
/// `(v0, soc0)`. Returns `None` when the traversal is infeasible: an actuator
/// or battery limit trips, the speed limit is exceeded, or the cell cannot be
/// cleared within the sub-step budget.
///
/// Sub-step duration is `min(1 s, remaining / max(v, v_floor))`: fast
/// traversals are resolved with a single fractional step while a crawl is
/// integrated second by second. The timing floor also bounds the time charged
/// to a stopped vehicle (a full stop in a 10 m cell costs 20 s, not infinity).
fn traverse_cell(
    v0_mps: f64,
    soc0: f64,
    u: &ControlInput,
    ds_m: f64,
    world: &impl CellWorld,
    pt: &PowertrainParams,
    v_floor_mps: f64,
    lambda: f64,
) -> Option<ActionOutcome> {
    let mut v = v0_mps;
    let mut soc = soc0;
    let mut x = 0.0;
    let mut t = 0.0;
    let mut fuel_g = 0.0;
    let mut crossing_dt_s = None;
    let light = world.light_offset_m();

    for _ in 0..MAX_SUBSTEPS {
        let v_timing = v.max(v_floor_mps);
        let dt = ((ds_m - x) / v_timing).min(1.0);
        // The stop line is crossed inside this sub-step if it lies in
        // [x, x + advance). Departure from the line itself counts; landing
        // exactly on it is resolved by the next sub-step.
        if let Some(off) = light {
            if crossing_dt_s.is_none() && off >= x && off < x + v_timing * dt {
                crossing_dt_s = Some(t + (off - x) / v_timing);
            }
        }
        let state = VehicleState {
            s_m: 0.0,
            v_mps: v,
            soc,
            t_s: 0.0,
        };
        let out = full_step_dt(&state, u, world.grade(x), pt, dt);
        if !out.feasible {
            return None;
        }
        fuel_g += out.fuel_g;
        x += v_timing * dt;
        t += dt;
        v = out.state.v_mps;
        soc = out.state.soc;
        if v > world.v_lim(x.min(ds_m - POS_EPS_M)) + 1e-9 {
            return None;
        }
        if x >= ds_m - POS_EPS_M {
            let cost = lambda * fuel_g + (1.0 - lambda) * t;
            return Some(ActionOutcome {
                v2_mps: v,
                soc2: soc,
                dt_s: t,
                cost,
                crossing_dt_s,
            });
        }
    }
    None
}

/// Compute outcomes for every (speed node, SoC node, action) triple in one
/// cell. Layout matches `StageModel::outcome`: `(iv * n_soc + isoc) * n_a + a`.
fn build_outcomes(
    v_ax: &Axis,
    soc_ax: &Axis,
    actions: &ActionSet,
    world: &impl CellWorld,
    ds_m: f64,
    pt: &PowertrainParams,
    v_floor_mps: f64,
    t_brk_max_nm: f64,
    lambda: f64,
) -> Vec<Option<ActionOutcome>> {
    let n_a = actions.len();
    let mut out = Vec::with_capacity(v_ax.n * soc_ax.n * n_a);
    for iv in 0..v_ax.n {
        let v = v_ax.coord(iv);
        for isoc in 0..soc_ax.n {
            let soc = soc_ax.coord(isoc);
            for a in 0..n_a {
                let u = actions.resolve(a, v, t_brk_max_nm, pt);
                out.push(traverse_cell(
                    v,
                    soc,
                    &u,
                    ds_m,
                    world,
                    pt,
                    v_floor_mps,
                    lambda,
                ));
            }
        }
    }
    out
}

/// Cache of grid transitions for uniform cells, keyed by the bit patterns of
/// (speed limit, grade, cell length). Cells containing a signal or a segment
/// boundary are never cached; their outcomes depend on in-cell structure.
#[derive(Default)]
pub struct TransitionCache {
    map: HashMap<(u64, u64, u64), Arc<Vec<Option<ActionOutcome>>>>,
}

impl TransitionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    fn class(
        &mut self,
        v_lim_mps: f64,
        grade_rad: f64,
        ds_m: f64,
        v_ax: &Axis,
        soc_ax: &Axis,
        actions: &ActionSet,
        pt: &PowertrainParams,
        v_floor_mps: f64,
        t_brk_max_nm: f64,
        lambda: f64,
    ) -> Arc<Vec<Option<ActionOutcome>>> {
        let key = (v_lim_mps.to_bits(), grade_rad.to_bits(), ds_m.to_bits());
        if let Some(hit) = self.map.get(&key) {
            return Arc::clone(hit);
        }
        let world = UniformWorld {
            v_lim_mps,
            grade_rad,
        };
        let built = Arc::new(build_outcomes(
            v_ax,
            soc_ax,
            actions,
            &world,
            ds_m,
            pt,
            v_floor_mps,
            t_brk_max_nm,
            lambda,
        ));
        self.map.insert(key, Arc::clone(&built));
        built
    }
}

/// One spatial stage: precomputed transitions plus the signal phase (if any)
/// needed to veto red-light crossings at interpolated crossing times.
struct CellStage {
    outcomes: Arc<Vec<Option<ActionOutcome>>>,
    n_soc: usize,
    n_actions: usize,
    v_ax: Axis,
    v_lim_entry_mps: f64,
    /// Signal program and the absolute time of plan start; `is_green_at`
    /// receives plan-relative times.
    light: Option<(SpatProgram, f64)>,
}

impl StageModel for CellStage {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn outcome(&self, iv: usize, isoc: usize, a: usize) -> Option<ActionOutcome> {
        self.outcomes[(iv * self.n_soc + isoc) * self.n_actions + a]
    }

    fn node_feasible(&self, iv: usize, _isoc: usize) -> bool {
        self.v_ax.coord(iv) <= self.v_lim_entry_mps + 1e-9
    }

    fn is_green_at(&self, t_rel_s: f64) -> bool {
        match &self.light {
            Some((program, t_abs0)) => program.is_green(t_abs0 + t_rel_s),
            None => true,
        }
    }
}

/// Supplies the value attached to the horizon boundary of a plan, as a table
/// over the (speed, SoC, time) grid. Values are undiscounted; the recursion
/// applies the discount for the horizon arrival time itself.
pub trait TerminalEvaluator {
    /// Build the terminal table for a plan starting at `state0` whose horizon
    /// lands at absolute position `s_h_m`. `n_t` and `t_lo_s` describe the
    /// plan-relative time band of the horizon stage.
    fn terminal_table(
        &self,
        state0: &VehicleState,
        s_h_m: f64,
        v_ax: &Axis,
        soc_ax: &Axis,
        n_t: usize,
        t_lo_s: f64,
    ) -> JTable;
}

/// All-zero terminal value: the plan greedily optimizes its own horizon.
pub struct ZeroTerminal;

impl TerminalEvaluator for ZeroTerminal {
    fn terminal_table(
        &self,
        _state0: &VehicleState,
        _s_h_m: f64,
        v_ax: &Axis,
        soc_ax: &Axis,
        n_t: usize,
        t_lo_s: f64,
    ) -> JTable {
        JTable::filled(v_ax.n, soc_ax.n, n_t, t_lo_s, 0.0)
    }
}

/// Trip-end terminal value: zero cost-to-go when the battery lands at or
/// above the charge-sustaining floor, infeasible otherwise. Used for the
/// final cells of a trip where the horizon coincides with the goal.
pub struct GoalTerminal {
    pub soc_min_terminal: f64,
}

impl TerminalEvaluator for GoalTerminal {
    fn terminal_table(
        &self,
        _state0: &VehicleState,
        _s_h_m: f64,
        v_ax: &Axis,
        soc_ax: &Axis,
        n_t: usize,
        t_lo_s: f64,
    ) -> JTable {
        let mut j = JTable::filled(v_ax.n, soc_ax.n, n_t, t_lo_s, f64::INFINITY);
        for iv in 0..v_ax.n {
            for isoc in 0..soc_ax.n {
                if soc_ax.coord(isoc) >= self.soc_min_terminal - 1e-12 {
                    for it in 0..n_t {
                        *j.get_mut(iv, isoc, it) = 0.0;
                    }
                }
            }
        }
        j
    }
}

/// Output of one receding-horizon plan.
#[derive(Debug, Clone)]
pub struct PlanResult {
    /// Control to apply now (the argmin at the true continuous start state).
    pub action: ControlInput,
    /// Index of that control in the planner's action set.
    pub action_index: usize,
    /// Predicted state at the entry of every cell, plan-relative time.
    /// `trajectory[0]` is the start state; entries stop early if the greedy
    /// rollout hits an infeasible cell.
    pub trajectory: Vec<OptState>,
    /// Action index applied at each traversed stage of the rollout.
    pub stage_actions: Vec<usize>,
    /// Interpolated cost-to-go `J_k` at each trajectory point (discounted to
    /// plan start).
    pub stage_values: Vec<f64>,
    /// Optimal cost at the start state, discounted to plan start.
    pub predicted_cost: f64,
    /// Discounted terminal value at the rollout's horizon point.
    pub terminal_value: f64,
    /// False when the greedy rollout could not reach the horizon (the first
    /// action is still valid; later stages were cut short).
    pub rollout_complete: bool,
}

/// Spatial-domain receding-horizon planner.
///
/// `plan` runs a backward recursion over `horizon_cells` cells ahead of the
/// vehicle, stitches the provided terminal value onto the horizon boundary,
/// and extracts the first action by evaluating every control at the true
/// continuous start state against the stage-1 cost-to-go.
pub struct Planner {
    cfg: DpConfig,
    pt: PowertrainParams,
    lambda: f64,
    v_ax: Axis,
    soc_ax: Axis,
    actions: ActionSet,
    cache: TransitionCache,
}

impl Planner {
    pub fn new(cfg: DpConfig, pt: PowertrainParams, lambda: f64) -> Result<Self, DpError> {
        cfg.validate()?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(DpError::Config(format!(
                "cost blend lambda must lie in [0, 1], got {lambda}"
            )));
        }
        let v_ax = cfg.v_axis();
        let soc_ax = cfg.soc_axis(&pt);
        let actions = cfg.action_set();
        Ok(Self {
            cfg,
            pt,
            lambda,
            v_ax,
            soc_ax,
            actions,
            cache: TransitionCache::new(),
        })
    }

    pub fn config(&self) -> &DpConfig {
        &self.cfg
    }

    pub fn action_set(&self) -> &ActionSet {
        &self.actions
    }

    pub fn powertrain(&self) -> &PowertrainParams {
        &self.pt
    }

    /// Number of distinct cached transition classes built so far.
    pub fn cached_classes(&self) -> usize {
        self.cache.len()
    }

    /// Cell lengths covering `[s0, s0 + horizon)`, truncated at the trip end.
    /// Returns the lengths and whether the horizon reaches the goal.
    fn cell_lengths(&self, s0_m: f64, s_total_m: f64) -> (Vec<f64>, bool) {
        let ds = self.cfg.ds_m;
        let remaining = s_total_m - s0_m;
        let full_span = ds * self.cfg.horizon_cells as f64;
        if remaining > full_span + POS_EPS_M {
            return (vec![ds; self.cfg.horizon_cells], false);
        }
        let n_full = (remaining / ds + POS_EPS_M).floor() as usize;
        let mut cells = vec![ds; n_full];
        let frac = remaining - ds * n_full as f64;
        if frac > 1e-6 {
            cells.push(frac);
        }
        (cells, true)
    }

    /// Build the stage model for the cell starting at `s_m`.
    fn build_stage(&mut self, route: &Route, s_m: f64, ds_m: f64, t_abs0_s: f64) -> CellStage {
        let s_end = s_m + ds_m;
        let lights = route.lights_between(s_m, s_end);
        debug_assert!(lights.len() <= 1, "signals are spaced wider than a cell");
        let light = lights.first();
        let v_lim_entry = route.v_lim_at(s_m);
        let probe = s_end - POS_EPS_M.max(ds_m * 1e-6);
        let uniform = light.is_none()
            && route.v_lim_at(probe) == v_lim_entry
            && route.grade_at(probe) == route.grade_at(s_m);
        let outcomes = if uniform {
            self.cache.class(
                v_lim_entry,
                route.grade_at(s_m),
                ds_m,
                &self.v_ax,
                &self.soc_ax,
                &self.actions,
                &self.pt,
                self.cfg.v_floor_mps,
                self.cfg.t_brk_max_nm,
                self.lambda,
            )
        } else {
            let world = RouteWorld {
                route,
                s0_m: s_m,
                light_offset_m: light.map(|l| l.pos_m - s_m),
            };
            Arc::new(build_outcomes(
                &self.v_ax,
                &self.soc_ax,
                &self.actions,
                &world,
                ds_m,
                &self.pt,
                self.cfg.v_floor_mps,
                self.cfg.t_brk_max_nm,
                self.lambda,
            ))
        };
        CellStage {
            outcomes,
            n_soc: self.soc_ax.n,
            n_actions: self.actions.len(),
            v_ax: self.v_ax,
            v_lim_entry_mps: v_lim_entry,
            light: light.map(|l| (l.program.clone(), t_abs0_s)),
        }
    }

    /// Plan from `state` along `route`. The terminal evaluator prices the
    /// horizon boundary; when the horizon reaches the goal it is replaced by
    /// the trip-end terminal (zero iff terminal SoC is satisfied).
    pub fn plan(
        &mut self,
        state: &VehicleState,
        route: &Route,
        terminal: &dyn TerminalEvaluator,
    ) -> Result<PlanResult, DpError> {
        let s0 = state.s_m;
        if s0 >= route.s_total_m - POS_EPS_M {
            return Err(DpError::Config(format!(
                "plan start {s0} m is at or past the trip end {} m",
                route.s_total_m
            )));
        }
        let (cells, endgame) = self.cell_lengths(s0, route.s_total_m);
        let h = cells.len();
        let t_abs0 = state.t_s;

        let mut stages = Vec::with_capacity(h);
        let mut s = s0;
        for &ds in &cells {
            stages.push(self.build_stage(route, s, ds, t_abs0));
            s += ds;
        }
        let s_h = s;

        let n_t = self.cfg.n_t;
        let t_lo = vec![0.0; h + 1];
        let goal_terminal = GoalTerminal {
            soc_min_terminal: self.cfg.soc_min_terminal(&self.pt),
        };
        let chosen: &dyn TerminalEvaluator = if endgame { &goal_terminal } else { terminal };
        let mut term = chosen.terminal_table(state, s_h, &self.v_ax, &self.soc_ax, n_t, 0.0);
        if !endgame {
            // Horizon nodes faster than the local limit are unreachable states;
            // mask them so interpolation cannot price them.
            let v_lim_h = route.v_lim_at(s_h);
            for iv in 0..self.v_ax.n {
                if self.v_ax.coord(iv) > v_lim_h + 1e-9 {
                    for isoc in 0..self.soc_ax.n {
                        for it in 0..n_t {
                            *term.get_mut(iv, isoc, it) = f64::INFINITY;
                        }
                    }
                }
            }
        }

        let rec = backward_recursion(
            &self.v_ax,
            &self.soc_ax,
            &stages,
            &t_lo,
            term,
            self.cfg.gamma,
            true,
        );

        // Greedy rollout from the true continuous state: at every stage,
        // score each control by its traversal cost (discounted by elapsed
        // time) plus the interpolated cost-to-go of the arrival state. This
        // avoids snapping the state to a grid node, both for the first
        // action and for the predicted trajectory.
        let mut trajectory = vec![OptState {
            v_mps: state.v_mps,
            soc: state.soc,
            t_s: 0.0,
        }];
        let mut stage_actions = Vec::with_capacity(h);
        let mut stage_values = Vec::with_capacity(h + 1);
        let mut z = trajectory[0];
        let mut rollout_complete = true;
        let mut sk = s0;
        for k in 0..h {
            let world = self.world_for(route, sk, cells[k]);
            let gpow = self.cfg.gamma.powf(z.t_s);
            let mut best = f64::INFINITY;
            let mut pick: Option<(usize, ActionOutcome)> = None;
            for a in 0..self.actions.len() {
                let u = self
                    .actions
                    .resolve(a, z.v_mps, self.cfg.t_brk_max_nm, &self.pt);
                let out = match traverse_cell(
                    z.v_mps,
                    z.soc,
                    &u,
                    cells[k],
                    &world,
                    &self.pt,
                    self.cfg.v_floor_mps,
                    self.lambda,
                ) {
                    Some(o) => o,
                    None => continue,
                };
                if let Some(cdt) = out.crossing_dt_s {
                    if !stages[k].is_green_at(z.t_s + cdt) {
                        continue;
                    }
                }
                let tail = interp3(
                    &rec.j[k + 1],
                    &self.v_ax,
                    &self.soc_ax,
                    out.v2_mps,
                    out.soc2,
                    z.t_s + out.dt_s,
                );
                let cand = gpow * out.cost + tail;
                if cand < best {
                    best = cand;
                    pick = Some((a, out));
                }
            }
            let Some((a, out)) = pick else {
                if k == 0 {
                    return Err(DpError::NoFeasiblePlan);
                }
                rollout_complete = false;
                break;
            };
            stage_actions.push(a);
            stage_values.push(best);
            z = OptState {
                v_mps: out.v2_mps,
                soc: out.soc2,
                t_s: z.t_s + out.dt_s,
            };
            trajectory.push(z);
            sk += cells[k];
        }
        let terminal_value = if rollout_complete {
            let t = interp3(&rec.j[h], &self.v_ax, &self.soc_ax, z.v_mps, z.soc, z.t_s);
            stage_values.push(t);
            t
        } else {
            f64::INFINITY
        };
        let predicted_cost = stage_values[0];
        let first = stage_actions[0];

        Ok(PlanResult {
            action: self
                .actions
                .resolve(first, state.v_mps, self.cfg.t_brk_max_nm, &self.pt),
            action_index: first,
            trajectory,
            stage_actions,
            stage_values,
            predicted_cost,
            terminal_value,
            rollout_complete,
        })
    }

    /// Route-backed world for direct traversals (start cell and rollout).
    fn world_for<'a>(&self, route: &'a Route, s_m: f64, ds_m: f64) -> RouteWorld<'a> {
        let lights = route.lights_between(s_m, s_m + ds_m);
        RouteWorld {
            route,
            s0_m: s_m,
            light_offset_m: lights.first().map(|l| l.pos_m - s_m),
        }
    }
}

impl DpConfig {
    /// Terminal SoC floor used by the trip-end terminal: the charge-sustaining
    /// midpoint of the allowed band.
    pub fn soc_min_terminal(&self, pt: &PowertrainParams) -> f64 {
        0.5 * (pt.soc_min + pt.soc_max)
    }
}

/// Render a plan as CSV: one row per trajectory point with the applied action
/// and the interpolated cost-to-go.
pub fn plan_trace_csv(plan: &PlanResult) -> String {
    let mut out = String::from("stage,v_mps,soc,t_s,action,cost_to_go\n");
    for (k, z) in plan.trajectory.iter().enumerate() {
        let action = plan
            .stage_actions
            .get(k)
            .map(|a| a.to_string())
            .unwrap_or_default();
        let value = plan
            .stage_values
            .get(k)
            .map(|j| format!("{j:.9}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.3},{},{}\n",
            k, z.v_mps, z.soc, z.t_s, action, value
        ));
    }
    out
}

/// Whole-trip perfect-information solution.
#[derive(Debug, Clone)]
pub struct WaitAndSee {
    /// Undiscounted optimal cost from the start node; a lower bound on what
    /// any causal controller can realize on this route.
    pub cost_bound: f64,
    /// Continuous policy walk: state at every cell boundary.
    pub trajectory: Vec<OptState>,
    /// Cost realized by the walk. Diagnostic: reading the policy at the
    /// nearest node of an off-node state leaves grid-resolution slack
    /// against `cost_bound`, and the walk's terminal SoC honors the floor
    /// only to grid resolution (check `trajectory.last()`).
    pub rollout_cost: f64,
    /// False if the walk hit a dead end before the goal.
    pub rollout_complete: bool,
}

/// Solve the whole trip with full knowledge of every signal phase, no
/// discounting, and a banded time axis per stage (elapsed time at cell `k` is
/// at least `k * ds / v_max`, so each stage only needs a window of time
/// nodes).
///
/// The start state must sit on the grid: `v = 0` and an SoC on a grid node.
pub fn wait_and_see(
    route: &Route,
    pt: &PowertrainParams,
    cfg: &DpConfig,
    lambda: f64,
    soc0: f64,
    cache: &mut TransitionCache,
) -> Result<WaitAndSee, DpError> {
    cfg.validate()?;
    let ds = cfg.ds_m;
    let h = (route.s_total_m / ds).round() as usize;
    if (route.s_total_m - h as f64 * ds).abs() > 1e-6 {
        return Err(DpError::Config(format!(
            "trip length {} m is not a multiple of the cell length {} m",
            route.s_total_m, ds
        )));
    }
    let v_ax = cfg.v_axis();
    let soc_ax = cfg.soc_axis(pt);
    let actions = cfg.action_set();
    let n_t = cfg.ws_t_band_s + 1;

    // Earliest possible arrival at cell k is k*ds/v_max; pad the band start
    // by a couple of seconds so interpolation near the edge has support.
    let t_lo: Vec<f64> = (0..=h)
        .map(|k| ((k as f64 * ds / cfg.v_max_mps).floor() - 2.0).max(0.0))
        .collect();

    let mut stages = Vec::with_capacity(h);
    for k in 0..h {
        let s = k as f64 * ds;
        let s_end = s + ds;
        let lights = route.lights_between(s, s_end);
        let light = lights.first();
        let v_lim_entry = route.v_lim_at(s);
        let probe = s_end - 1e-6;
        let uniform = light.is_none()
            && route.v_lim_at(probe) == v_lim_entry
            && route.grade_at(probe) == route.grade_at(s);
        let outcomes = if uniform {
            cache.class(
                v_lim_entry,
                route.grade_at(s),
                ds,
                &v_ax,
                &soc_ax,
                &actions,
                pt,
                cfg.v_floor_mps,
                cfg.t_brk_max_nm,
                lambda,
            )
        } else {
            let world = RouteWorld {
                route,
                s0_m: s,
                light_offset_m: light.map(|l| l.pos_m - s),
            };
            Arc::new(build_outcomes(
                &v_ax,
                &soc_ax,
                &actions,
                &world,
                ds,
                pt,
                cfg.v_floor_mps,
                cfg.t_brk_max_nm,
                lambda,
            ))
        };
        stages.push(CellStage {
            outcomes,
            n_soc: soc_ax.n,
            n_actions: actions.len(),
            v_ax,
            v_lim_entry_mps: v_lim_entry,
            light: light.map(|l| (l.program.clone(), 0.0)),
        });
    }

    let goal = GoalTerminal {
        soc_min_terminal: cfg.soc_min_terminal(pt),
    };
    let state0 = VehicleState {
        s_m: 0.0,
        v_mps: 0.0,
        soc: soc0,
        t_s: 0.0,
    };
    let term = goal.terminal_table(&state0, route.s_total_m, &v_ax, &soc_ax, n_t, t_lo[h]);

    let rec = backward_recursion(&v_ax, &soc_ax, &stages, &t_lo, term, 1.0, false);

    let cost_bound = interp3(&rec.j[0], &v_ax, &soc_ax, 0.0, soc0, 0.0);
    if !cost_bound.is_finite() {
        return Err(DpError::NoFeasiblePlan);
    }

    let (trajectory, rollout_cost, rollout_complete) = rollout_ws(
        route, cfg, pt, lambda, &rec, &t_lo, &stages, &actions, &v_ax, &soc_ax, soc0,
    );

    Ok(WaitAndSee {
        cost_bound,
        trajectory,
        rollout_cost,
        rollout_complete,
    })
}

/// Walk the stored policies from the continuous start state: at every cell,
/// read the action at the nearest grid node and integrate it from the actual
/// state. A node's action can fail to transfer to a nearby off-node state
/// (an actuator limit sits between them, or the crossing time shifts into a
/// red); in that case the cheapest feasible action is substituted so the
/// walk keeps producing a real trajectory.
#[allow(clippy::too_many_arguments)]
fn rollout_ws(
    route: &Route,
    cfg: &DpConfig,
    pt: &PowertrainParams,
    lambda: f64,
    rec: &Recursion,
    t_lo: &[f64],
    stages: &[CellStage],
    actions: &ActionSet,
    v_ax: &Axis,
    soc_ax: &Axis,
    soc0: f64,
) -> (Vec<OptState>, f64, bool) {
    let n_t = cfg.ws_t_band_s + 1;
    let mut z = OptState {
        v_mps: 0.0,
        soc: soc0,
        t_s: 0.0,
    };
    let mut trajectory = vec![z];
    let mut cost = 0.0;
    for (k, stage) in stages.iter().enumerate() {
        let s = k as f64 * cfg.ds_m;
        let lights = route.lights_between(s, s + cfg.ds_m);
        let world = RouteWorld {
            route,
            s0_m: s,
            light_offset_m: lights.first().map(|l| l.pos_m - s),
        };
        let iv = v_ax.nearest(z.v_mps);
        let isoc = soc_ax.nearest(z.soc);
        let it = ((z.t_s - t_lo[k]).round().max(0.0) as usize).min(n_t - 1);
        let preferred = rec.policy[k][(iv * soc_ax.n + isoc) * n_t + it] as usize;
        let attempt = |a: usize| -> Option<ActionOutcome> {
            let u = actions.resolve(a, z.v_mps, cfg.t_brk_max_nm, pt);
            let out = traverse_cell(
                z.v_mps,
                z.soc,
                &u,
                cfg.ds_m,
                &world,
                pt,
                cfg.v_floor_mps,
                lambda,
            )?;
            if let Some(cdt) = out.crossing_dt_s {
                if !stage.is_green_at(z.t_s + cdt) {
                    return None;
                }
            }
            Some(out)
        };
        let taken = attempt(preferred).or_else(|| {
            (0..actions.len())
                .filter(|&a| a != preferred)
                .filter_map(attempt)
                .min_by(|x, y| x.cost.total_cmp(&y.cost))
        });
        let Some(out) = taken else {
            return (trajectory, cost, false);
        };
        cost += out.cost;
        z = OptState {
            v_mps: out.v2_mps,
            soc: out.soc2,
            t_s: z.t_s + out.dt_s,
        };
        trajectory.push(z);
    }
    (trajectory, cost, true)
}
