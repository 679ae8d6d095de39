//! Learned horizon pricing for the spatial planner: the value networks
//! estimate the cost-to-go at every horizon node, and the safe-set density
//! model excludes nodes whose (state, charge, speed) combination never
//! appeared in successful experience.
//!
//! Horizon observations are predicted from the current one with
//! [`horizon_observation`]. Values are evaluated on a strided sublattice and
//! interpolated to the full grid (they vary smoothly), while the safe-set
//! mask is evaluated exactly per (SoC, speed) node on each anchor time plane
//! and held constant within a time stride.

use std::cell::Cell;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dp::plan::TerminalEvaluator;
use crate::dp::{Axis, JTable};
use crate::genmodels::{Discretizer, SafeSetModel};
use crate::powertrain::VehicleState;
use crate::traffic::Observation;

use super::critic::{QMode, ValueNets};
use super::features::horizon_observation;

/// Density model over successful-trip observations plus the calibrated
/// likelihood threshold: a state is a member when its sequence log-likelihood
/// clears the threshold.
#[derive(Debug, Clone)]
pub struct SafeSet {
    pub model: SafeSetModel,
    pub disc: Discretizer,
    pub delta: f64,
}

impl SafeSet {
    pub fn is_member(&self, obs: &Observation) -> bool {
        self.model.log_prob(&self.disc.tokenize(obs)) >= self.delta
    }

    /// Joint log-likelihood over all (SoC, speed) completions of the
    /// observation's context, shape `[n_soc, n_v]` in grid order.
    pub fn grid(&self, obs: &Observation) -> Array2<f64> {
        let tokens = self.disc.tokenize(obs);
        self.model.grid_log_probs(&tokens[..tokens.len() - 2])
    }
}

/// Per-plan terminal evaluator built from the live networks and the current
/// observation. Sampling inside the table build is seeded per plan, so a
/// given (networks, observation, seed) triple prices the horizon
/// deterministically.
pub struct LearnedTerminal<'a> {
    pub nets: &'a ValueNets,
    pub safeset: Option<&'a SafeSet>,
    pub obs: Observation,
    /// Candidate actions sampled per lattice node.
    pub n_samples: usize,
    /// Strides over (speed, SoC, time) for the value sublattice.
    pub strides: (usize, usize, usize),
    pub seed: u64,
    /// Horizon nodes priced (instrumentation).
    pub nodes_total: Cell<usize>,
    /// Horizon nodes excluded by the safe set (instrumentation).
    pub nodes_masked: Cell<usize>,
}

impl<'a> LearnedTerminal<'a> {
    pub fn new(
        nets: &'a ValueNets,
        safeset: Option<&'a SafeSet>,
        obs: Observation,
        n_samples: usize,
        strides: (usize, usize, usize),
        seed: u64,
    ) -> Self {
        LearnedTerminal {
            nets,
            safeset,
            obs,
            n_samples,
            strides,
            seed,
            nodes_total: Cell::new(0),
            nodes_masked: Cell::new(0),
        }
    }
}

/// Anchor indices for one axis: every `stride`-th index plus the last.
fn anchors(n: usize, stride: usize) -> Vec<usize> {
    let mut a: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
    if *a.last().unwrap() != n - 1 {
        a.push(n - 1);
    }
    a
}

/// Bracketing anchor pair and the weight toward the right anchor.
fn bracket(a: &[usize], i: usize) -> (usize, f64) {
    debug_assert!(i <= *a.last().unwrap());
    let hi = a.partition_point(|&x| x < i);
    if hi == 0 {
        return (0, 0.0);
    }
    if a[hi] == i {
        return (hi, 0.0);
    }
    let (l, r) = (a[hi - 1], a[hi]);
    (hi - 1, (i - l) as f64 / (r - l) as f64)
}

/// Trilinear interpolation from anchor values `vals[a_v][a_soc][a_t]` onto
/// the full grid.
fn upsample(
    vals: &[Vec<Vec<f64>>],
    av: &[usize],
    asoc: &[usize],
    at: &[usize],
    n_v: usize,
    n_soc: usize,
    n_t: usize,
    t_lo_s: f64,
) -> JTable {
    let mut j = JTable::filled(n_v, n_soc, n_t, t_lo_s, 0.0);
    for iv in 0..n_v {
        let (bv, wv) = bracket(av, iv);
        let bv2 = (bv + 1).min(av.len() - 1);
        for isoc in 0..n_soc {
            let (bs, ws) = bracket(asoc, isoc);
            let bs2 = (bs + 1).min(asoc.len() - 1);
            for it in 0..n_t {
                let (bt, wt) = bracket(at, it);
                let bt2 = (bt + 1).min(at.len() - 1);
                let mut v = 0.0;
                for (kv, fv) in [(bv, 1.0 - wv), (bv2, wv)] {
                    if fv == 0.0 {
                        continue;
                    }
                    for (ks, fs) in [(bs, 1.0 - ws), (bs2, ws)] {
                        if fs == 0.0 {
                            continue;
                        }
                        for (kt, ft) in [(bt, 1.0 - wt), (bt2, wt)] {
                            if ft == 0.0 {
                                continue;
                            }
                            v += fv * fs * ft * vals[kv][ks][kt];
                        }
                    }
                }
                *j.get_mut(iv, isoc, it) = v;
            }
        }
    }
    j
}

impl TerminalEvaluator for LearnedTerminal<'_> {
    fn terminal_table(
        &self,
        state0: &VehicleState,
        s_h_m: f64,
        v_ax: &Axis,
        soc_ax: &Axis,
        n_t: usize,
        t_lo_s: f64,
    ) -> JTable {
        let dd = s_h_m - state0.s_m;
        let (sv, ss, st) = self.strides;
        let av = anchors(v_ax.n, sv);
        let asoc = anchors(soc_ax.n, ss);
        let at = anchors(n_t, st);

        // One predicted observation per anchor time plane; the window latent
        // is shared by every (speed, SoC) node on the plane.
        let planes: Vec<Observation> = at
            .iter()
            .map(|&it| horizon_observation(&self.obs, t_lo_s + it as f64, dd))
            .collect();

        let mut vals = vec![vec![vec![0.0; at.len()]; asoc.len()]; av.len()];
        if self.nets.mode != QMode::None {
            let f_dim = self.nets.fx.feature_dim();
            let rows = av.len() * asoc.len() * at.len();
            let mut feats = Array2::zeros((rows, f_dim));
            let mut r = 0;
            for plane in &planes {
                let latent = self.nets.fx.window_latent(&plane.x_tfc);
                for &iv in &av {
                    for &isoc in &asoc {
                        let mut o = plane.clone();
                        o.v_mps = v_ax.coord(iv);
                        o.soc = soc_ax.coord(isoc);
                        let row = self.nets.fx.features_with_latent(&latent, &o);
                        for (c, x) in row.into_iter().enumerate() {
                            feats[[r, c]] = x;
                        }
                        r += 1;
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let v = self.nets.value_batch(feats.view(), self.n_samples, &mut rng);
            let mut r = 0;
            for kt in 0..at.len() {
                for kv in 0..av.len() {
                    for ks in 0..asoc.len() {
                        vals[kv][ks][kt] = v[r];
                        r += 1;
                    }
                }
            }
        }

        let mut j = upsample(&vals, &av, &asoc, &at, v_ax.n, soc_ax.n, n_t, t_lo_s);

        self.nodes_total.set(v_ax.n * soc_ax.n * n_t);
        let mut masked = 0usize;
        if let Some(ss_set) = self.safeset {
            // Exact (SoC, speed) membership per anchor plane, held constant
            // within each time stride (the window shifts only slowly).
            let grids: Vec<Array2<f64>> = planes.iter().map(|p| ss_set.grid(p)).collect();
            for it in 0..n_t {
                let k = nearest_anchor(&at, it);
                let g = &grids[k];
                for iv in 0..v_ax.n {
                    for isoc in 0..soc_ax.n {
                        if g[[isoc, iv]] < ss_set.delta {
                            *j.get_mut(iv, isoc, it) = f64::INFINITY;
                            masked += 1;
                        }
                    }
                }
            }
        }
        self.nodes_masked.set(masked);
        j
    }
}

/// Index into `a` of the anchor closest to `i`.
fn nearest_anchor(a: &[usize], i: usize) -> usize {
    let hi = a.partition_point(|&x| x < i);
    if hi == 0 {
        return 0;
    }
    if hi == a.len() {
        return a.len() - 1;
    }
    if i - a[hi - 1] <= a[hi] - i {
        hi - 1
    } else {
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::critic::{CriticPair, PerturbationNet};
    use crate::agent::features::{ActionBox, FeatureExtractor};
    use crate::dp::DpConfig;
    use crate::genmodels::{ActionVae, SeqSchema, StateAutoencoder};
    use crate::powertrain::PowertrainParams;
    use crate::traffic::OBS_HORIZON;

    fn small_nets(mode: QMode, rng: &mut ChaCha8Rng) -> ValueNets {
        let pt = PowertrainParams::default();
        let ae = StateAutoencoder::new(&[OBS_HORIZON, 20, 5], rng);
        let fx = FeatureExtractor::new(ae, ActionBox::from_params(&pt, 22.0, 3000.0), 22.0);
        let f = fx.feature_dim();
        let vae = ActionVae::new(f, 3, 4, 24, rng);
        let critics = CriticPair::new(f + 3, &[24, 16], rng);
        let pert = PerturbationNet::new(f + 3, &[24, 16], 30.0, rng);
        ValueNets { fx, vae, critics, pert, mode }
    }

    fn obs() -> Observation {
        Observation {
            soc: 0.55,
            v_mps: 9.0,
            v_lim_mps: 15.6,
            v_lim_next_mps: 13.4,
            d_tfc_m: 420.0,
            d_lim_next_m: 800.0,
            d_rem_m: 3000.0,
            x_tfc: (0..OBS_HORIZON).map(|i| (i % 7 != 0) as u8).collect(),
        }
    }

    fn axes() -> (Axis, Axis) {
        let cfg = DpConfig::default();
        (cfg.v_axis(), cfg.soc_axis(&PowertrainParams::default()))
    }

    #[test]
    fn anchors_cover_both_ends() {
        assert_eq!(anchors(31, 10), vec![0, 10, 20, 30]);
        assert_eq!(anchors(21, 10), vec![0, 10, 20]);
        assert_eq!(anchors(5, 3), vec![0, 3, 4]);
    }

    #[test]
    fn upsampling_reproduces_a_linear_field_exactly() {
        let av = vec![0usize, 2, 4];
        let asoc = vec![0usize, 3];
        let at = vec![0usize, 2];
        let field = |iv: usize, isoc: usize, it: usize| {
            2.0 * iv as f64 - 0.5 * isoc as f64 + 3.0 * it as f64 + 1.0
        };
        let mut vals = vec![vec![vec![0.0; at.len()]; asoc.len()]; av.len()];
        for (kv, &iv) in av.iter().enumerate() {
            for (ks, &isoc) in asoc.iter().enumerate() {
                for (kt, &it) in at.iter().enumerate() {
                    vals[kv][ks][kt] = field(iv, isoc, it);
                }
            }
        }
        let j = upsample(&vals, &av, &asoc, &at, 5, 4, 3, 0.0);
        for iv in 0..5 {
            for isoc in 0..4 {
                for it in 0..3 {
                    assert!(
                        (j.get(iv, isoc, it) - field(iv, isoc, it)).abs() < 1e-12,
                        "node ({iv},{isoc},{it})"
                    );
                }
            }
        }
    }

    #[test]
    fn disabled_mode_prices_the_horizon_at_zero_without_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nets = small_nets(QMode::None, &mut rng);
        let term = LearnedTerminal::new(&nets, None, obs(), 1, (10, 10, 40), 7);
        let (v_ax, soc_ax) = axes();
        let state0 = VehicleState { s_m: 100.0, v_mps: 9.0, soc: 0.55, t_s: 30.0 };
        let j = term.terminal_table(&state0, 300.0, &v_ax, &soc_ax, 81, 0.0);
        assert!(j.data.iter().all(|&x| x == 0.0));
        assert_eq!(term.nodes_masked.get(), 0);
        assert_eq!(term.nodes_total.get(), v_ax.n * soc_ax.n * 81);
    }

    #[test]
    fn table_is_deterministic_for_a_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let nets = small_nets(QMode::Bcq, &mut rng);
        let term = LearnedTerminal::new(&nets, None, obs(), 2, (10, 10, 40), 99);
        let (v_ax, soc_ax) = axes();
        let state0 = VehicleState { s_m: 0.0, v_mps: 9.0, soc: 0.55, t_s: 0.0 };
        let a = term.terminal_table(&state0, 200.0, &v_ax, &soc_ax, 81, 0.0);
        let b = term.terminal_table(&state0, 200.0, &v_ax, &soc_ax, 81, 0.0);
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|&x| x.is_finite()));
    }

    #[test]
    fn safe_set_threshold_masks_everything_or_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let nets = small_nets(QMode::Bcq, &mut rng);
        let cfg = DpConfig::default();
        let pt = PowertrainParams::default();
        let disc = Discretizer::new(&cfg, &pt);
        let schema = SeqSchema::observation(&disc);
        let model = SafeSetModel::new(schema, 10, &mut rng);
        let (v_ax, soc_ax) = axes();
        let state0 = VehicleState { s_m: 0.0, v_mps: 9.0, soc: 0.55, t_s: 0.0 };

        let lenient = SafeSet { model: model.clone(), disc: disc.clone(), delta: -1e18 };
        let term = LearnedTerminal::new(&nets, Some(&lenient), obs(), 1, (10, 10, 40), 5);
        let j = term.terminal_table(&state0, 200.0, &v_ax, &soc_ax, 81, 0.0);
        assert_eq!(term.nodes_masked.get(), 0);
        assert!(j.data.iter().all(|&x| x.is_finite()));
        assert!(lenient.is_member(&obs()));

        let strict = SafeSet { model, disc, delta: 1e18 };
        let term = LearnedTerminal::new(&nets, Some(&strict), obs(), 1, (10, 10, 40), 5);
        let j = term.terminal_table(&state0, 200.0, &v_ax, &soc_ax, 81, 0.0);
        assert_eq!(term.nodes_masked.get(), term.nodes_total.get());
        assert!(j.data.iter().all(|&x| x.is_infinite()));
        assert!(!strict.is_member(&obs()));
    }
}
