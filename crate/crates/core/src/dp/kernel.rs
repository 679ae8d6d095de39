//! Backward-recursion kernels over an abstract stage model.
//!
//! A [`StageModel`] describes one spatial stage: per (v-node, SoC-node,
//! action) it yields the arrival speed/SoC, elapsed time, undiscounted stage
//! cost, and optionally the in-cell time offset at which a stop line is
//! crossed (whose green/red status the model adjudicates). Transitions are
//! time-invariant apart from that crossing test and the γ^t discount, which
//! is what the optimized kernel exploits: for each (node, action) it
//! pre-interpolates the next table over (v', SoC') into a single t-row, then
//! applies a constant shift-lerp along t instead of a full trilinear
//! interpolation per time node.
//!
//! [`backward_stage_naive`] computes the same recursion with plain
//! per-node trilinear interpolation; it exists as the correctness reference
//! for the optimized kernel and for small exact-arithmetic instances.
//!
//! Interpolation reads grid values exactly when a weight is 0 or 1 (within
//! 1e-12), so models whose transitions land exactly on grid nodes are
//! evaluated without interpolation error; +∞ marks infeasible nodes and any
//! NaN arising from ∞ arithmetic in a lerp is treated as +∞.

use super::{Axis, JTable};
use rayon::prelude::*;

const WEPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionOutcome {
    pub v2_mps: f64,
    pub soc2: f64,
    pub dt_s: f64,
    pub cost: f64,
    /// Time into the cell at which a stop line is crossed, if the cell
    /// contains one.
    pub crossing_dt_s: Option<f64>,
}

pub trait StageModel: Sync {
    fn n_actions(&self) -> usize;
    /// Outcome of action `a` from grid node (iv, isoc), or None when
    /// infeasible regardless of time.
    fn outcome(&self, iv: usize, isoc: usize, a: usize) -> Option<ActionOutcome>;
    /// Whether the node itself is admissible (e.g. under the cell's speed
    /// limit).
    fn node_feasible(&self, iv: usize, isoc: usize) -> bool {
        let _ = (iv, isoc);
        true
    }
    /// Green test for a stop-line crossing at plan-relative time `t_rel_s`;
    /// consulted only when an outcome carries `crossing_dt_s`.
    fn is_green_at(&self, t_rel_s: f64) -> bool {
        let _ = t_rel_s;
        true
    }
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + w * (b - a)
}

#[inline]
fn scrub(x: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else {
        x
    }
}

/// One-dimensional lerp of two rows into `out`, with exact endpoint reads.
fn lerp_rows(r0: &[f64], r1: &[f64], w: f64, out: &mut [f64]) {
    if w < WEPS {
        out.copy_from_slice(r0);
    } else if w > 1.0 - WEPS {
        out.copy_from_slice(r1);
    } else {
        for ((o, &a), &b) in out.iter_mut().zip(r0).zip(r1) {
            *o = scrub(lerp(a, b, w));
        }
    }
}

/// Bilinear pre-interpolation of the next-stage table at (v', SoC') across
/// every t index, written into `out` (length n_t).
fn preinterp_t_row(
    jn: &JTable,
    iv: usize,
    wv: f64,
    isoc: usize,
    ws: f64,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let v_exact = wv < WEPS || wv > 1.0 - WEPS;
    let s_exact = ws < WEPS || ws > 1.0 - WEPS;
    let ivp = if wv > 1.0 - WEPS { iv + 1 } else { iv };
    let isp = if ws > 1.0 - WEPS { isoc + 1 } else { isoc };
    match (v_exact, s_exact) {
        (true, true) => out.copy_from_slice(jn.row(ivp, isp)),
        (true, false) => lerp_rows(jn.row(ivp, isoc), jn.row(ivp, isoc + 1), ws, out),
        (false, true) => lerp_rows(jn.row(iv, isp), jn.row(iv + 1, isp), wv, out),
        (false, false) => {
            lerp_rows(jn.row(iv, isoc), jn.row(iv, isoc + 1), ws, scratch);
            lerp_rows(jn.row(iv + 1, isoc), jn.row(iv + 1, isoc + 1), ws, out);
            for (o, &a) in out.iter_mut().zip(scratch.iter()) {
                *o = scrub(lerp(a, *o, wv));
            }
        }
    }
}

/// Trilinear interpolation of a table at a continuous state, +∞ outside the
/// grid. Endpoint weights read nodes exactly.
pub fn interp3(j: &JTable, v_ax: &Axis, soc_ax: &Axis, v: f64, soc: f64, t_s: f64) -> f64 {
    let Some((iv, wv)) = v_ax.locate(v) else { return f64::INFINITY };
    let Some((isoc, ws)) = soc_ax.locate(soc) else { return f64::INFINITY };
    let t_ax = Axis { lo: j.t_lo_s, step: 1.0, n: j.n_t };
    let Some((it, wt)) = t_ax.locate(t_s) else { return f64::INFINITY };
    let pick = |w: f64, i: usize| -> Option<usize> {
        if w < WEPS {
            Some(i)
        } else if w > 1.0 - WEPS {
            Some(i + 1)
        } else {
            None
        }
    };
    let corner = |ivc: usize, isc: usize, itc: usize| j.get(ivc, isc, itc);
    let along_t = |ivc: usize, isc: usize| -> f64 {
        match pick(wt, it) {
            Some(i) => corner(ivc, isc, i),
            None => scrub(lerp(corner(ivc, isc, it), corner(ivc, isc, it + 1), wt)),
        }
    };
    let along_st = |ivc: usize| -> f64 {
        match pick(ws, isoc) {
            Some(j2) => along_t(ivc, j2),
            None => scrub(lerp(along_t(ivc, isoc), along_t(ivc, isoc + 1), ws)),
        }
    };
    match pick(wv, iv) {
        Some(i) => along_st(i),
        None => scrub(lerp(along_st(iv), along_st(iv + 1), wv)),
    }
}

fn discount_row(gamma: f64, t_lo_s: f64, n_t: usize) -> Vec<f64> {
    if gamma == 1.0 {
        vec![1.0; n_t]
    } else {
        (0..n_t).map(|it| gamma.powf(t_lo_s + it as f64)).collect()
    }
}

/// One backward stage with the banded-shift kernel. `t_lo_now` is the time
/// of t-index 0 at this stage; `j_next.t_lo_s` the same for the next stage.
pub fn backward_stage<M: StageModel>(
    model: &M,
    v_ax: &Axis,
    soc_ax: &Axis,
    j_next: &JTable,
    t_lo_now: f64,
    gamma: f64,
) -> (JTable, Vec<u8>) {
    let (n_v, n_soc, n_t) = (v_ax.n, soc_ax.n, j_next.n_t);
    let n_a = model.n_actions();
    assert!(n_a <= u8::MAX as usize, "policy store is u8");
    let mut j = JTable::filled(n_v, n_soc, n_t, t_lo_now, f64::INFINITY);
    let mut policy = vec![0u8; n_v * n_soc * n_t];
    let gpow = discount_row(gamma, t_lo_now, n_t);
    let block = n_soc * n_t;

    j.data
        .par_chunks_mut(block)
        .zip(policy.par_chunks_mut(block))
        .enumerate()
        .for_each(|(iv, (j_block, p_block))| {
            let mut row_a = vec![0.0f64; n_t];
            let mut scratch = vec![0.0f64; n_t];
            for isoc in 0..n_soc {
                if !model.node_feasible(iv, isoc) {
                    continue;
                }
                let best = &mut j_block[isoc * n_t..(isoc + 1) * n_t];
                let pol = &mut p_block[isoc * n_t..(isoc + 1) * n_t];
                for a in 0..n_a {
                    let Some(out) = model.outcome(iv, isoc, a) else { continue };
                    let Some((i2, wv)) = v_ax.locate(out.v2_mps) else { continue };
                    let Some((s2, ws)) = soc_ax.locate(out.soc2) else { continue };
                    preinterp_t_row(j_next, i2, wv, s2, ws, &mut scratch, &mut row_a);
                    // Entirely infeasible arrival rows (common when the
                    // terminal mask blanks a region) contribute nothing.
                    if !row_a.iter().any(|x| x.is_finite()) {
                        continue;
                    }

                    let shift = t_lo_now - j_next.t_lo_s + out.dt_s;
                    let d = shift.floor();
                    let f = shift - d;
                    let d = d as isize;
                    let exact = f < WEPS;
                    let it_min = (-d).max(0) as usize;
                    let last = if exact { n_t as isize - 1 - d } else { n_t as isize - 2 - d };
                    if last < it_min as isize {
                        continue;
                    }
                    let it_max = (last as usize).min(n_t - 1);

                    // A +∞ (or the NaN that ∞ arithmetic produces in the
                    // lerp) can never win the `cand < best` comparison, so
                    // no finiteness gate is needed in the scan. The
                    // stop-line test is hoisted out as a loop variant: it
                    // is per-action constant.
                    match out.crossing_dt_s {
                        None => {
                            for it in it_min..=it_max {
                                let jt = (it as isize + d) as usize;
                                let b = if exact {
                                    row_a[jt]
                                } else {
                                    lerp(row_a[jt], row_a[jt + 1], f)
                                };
                                let cand = gpow[it] * out.cost + b;
                                if cand < best[it] {
                                    best[it] = cand;
                                    pol[it] = a as u8;
                                }
                            }
                        }
                        Some(cdt) => {
                            for it in it_min..=it_max {
                                if !model.is_green_at(t_lo_now + it as f64 + cdt) {
                                    continue;
                                }
                                let jt = (it as isize + d) as usize;
                                let b = if exact {
                                    row_a[jt]
                                } else {
                                    lerp(row_a[jt], row_a[jt + 1], f)
                                };
                                let cand = gpow[it] * out.cost + b;
                                if cand < best[it] {
                                    best[it] = cand;
                                    pol[it] = a as u8;
                                }
                            }
                        }
                    }
                }
            }
        });
    (j, policy)
}

/// Reference implementation: plain per-node trilinear interpolation. Same
/// semantics as [`backward_stage`], used to validate it.
pub fn backward_stage_naive<M: StageModel>(
    model: &M,
    v_ax: &Axis,
    soc_ax: &Axis,
    j_next: &JTable,
    t_lo_now: f64,
    gamma: f64,
) -> (JTable, Vec<u8>) {
    let (n_v, n_soc, n_t) = (v_ax.n, soc_ax.n, j_next.n_t);
    let n_a = model.n_actions();
    let mut j = JTable::filled(n_v, n_soc, n_t, t_lo_now, f64::INFINITY);
    let mut policy = vec![0u8; n_v * n_soc * n_t];
    let gpow = discount_row(gamma, t_lo_now, n_t);
    for iv in 0..n_v {
        for isoc in 0..n_soc {
            if !model.node_feasible(iv, isoc) {
                continue;
            }
            for it in 0..n_t {
                let t_node = t_lo_now + it as f64;
                let mut best = f64::INFINITY;
                let mut besta = 0u8;
                for a in 0..n_a {
                    let Some(out) = model.outcome(iv, isoc, a) else { continue };
                    if let Some(cdt) = out.crossing_dt_s {
                        if !model.is_green_at(t_node + cdt) {
                            continue;
                        }
                    }
                    let b = interp3(j_next, v_ax, soc_ax, out.v2_mps, out.soc2, t_node + out.dt_s);
                    if !b.is_finite() {
                        continue;
                    }
                    let cand = gpow[it] * out.cost + b;
                    if cand < best {
                        best = cand;
                        besta = a as u8;
                    }
                }
                let k = j.idx(iv, isoc, it);
                j.data[k] = best;
                policy[k] = besta;
            }
        }
    }
    (j, policy)
}

#[derive(Debug)]
pub struct Recursion {
    /// Cost-to-go per level: all of `0..=H` when `keep_all`, else just level
    /// 0.
    pub j: Vec<JTable>,
    /// Argmin action per stage `0..H`, laid out like the tables.
    pub policy: Vec<Vec<u8>>,
}

/// Runs the recursion from a terminal table back to stage 0. The terminal
/// table holds undiscounted values; the γ^t factor at the horizon is applied
/// here so stage arithmetic matches a forward accumulation
/// `Σ γ^{t_k}·c_k + γ^{t_H}·V`. `t_lo` gives the band start per level
/// (`stages.len() + 1` entries) and must match `terminal.t_lo_s` at the end.
pub fn backward_recursion<M: StageModel>(
    v_ax: &Axis,
    soc_ax: &Axis,
    stages: &[M],
    t_lo: &[f64],
    mut terminal: JTable,
    gamma: f64,
    keep_all: bool,
) -> Recursion {
    let h = stages.len();
    assert_eq!(t_lo.len(), h + 1);
    assert!((terminal.t_lo_s - t_lo[h]).abs() < 1e-9);
    if gamma != 1.0 {
        let gpow = discount_row(gamma, terminal.t_lo_s, terminal.n_t);
        for iv in 0..terminal.n_v {
            for isoc in 0..terminal.n_soc {
                let base = (iv * terminal.n_soc + isoc) * terminal.n_t;
                for it in 0..terminal.n_t {
                    terminal.data[base + it] *= gpow[it];
                }
            }
        }
    }
    let mut policy = vec![Vec::new(); h];
    let mut levels: Vec<Option<JTable>> = (0..=h).map(|_| None).collect();
    let mut j_next = terminal;
    if keep_all {
        levels[h] = Some(j_next.clone());
    }
    for k in (0..h).rev() {
        let (j_k, pol_k) = backward_stage(&stages[k], v_ax, soc_ax, &j_next, t_lo[k], gamma);
        policy[k] = pol_k;
        if keep_all && k > 0 {
            levels[k] = Some(j_k.clone());
        }
        j_next = j_k;
    }
    let mut j = vec![j_next];
    if keep_all {
        j.extend(levels.into_iter().skip(1).map(|l| l.unwrap()));
    }
    Recursion { j, policy }
}
