//! State featurization for the value networks and the mapping between
//! physical torque commands and the normalized action coordinates the
//! networks operate in.
//!
//! A network state is the autoencoder's compression of the 81-step signal
//! phase window plus seven normalized scalars, so the critic input is
//! `latent + 7` state features and 3 action coordinates. Actions are stored
//! and perturbed in physical N·m; networks see them scaled to [-1, 1] over a
//! fixed speed-independent box (the speed-dependent feasible box is enforced
//! separately when a command is applied).

use crate::genmodels::StateAutoencoder;
use crate::powertrain::{torque_bounds, ControlInput, PowertrainParams};
use crate::traffic::{Observation, OBS_HORIZON, SENSING_RANGE_M};

/// Scalar features appended to the window latent.
pub const SCALAR_FEATURES: usize = 7;

/// State-feature width under the default 5-dimensional window latent.
pub const FEATURE_DIM: usize = 12;

/// Cap applied to the long-range distances before normalization, matching
/// the tokenizer's far-field range.
const FAR_CAP_M: f64 = 10_000.0;

/// Default per-component perturbation bound, N·m.
pub const ACTION_SCALE_NM: f64 = 30.0;

/// Fixed physical action box used for network normalization. Bounds come
/// from the global torque-curve maxima, not the speed-dependent limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl ActionBox {
    /// Probes the torque curves over the speed range to find global bounds.
    pub fn from_params(pt: &PowertrainParams, v_max_mps: f64, t_brk_max_nm: f64) -> Self {
        let mut eng_hi: f64 = 0.0;
        let mut bsg_lo: f64 = 0.0;
        let mut bsg_hi: f64 = 0.0;
        let mut v = 0.0;
        while v <= v_max_mps + 1e-9 {
            let (e, bl, bh) = torque_bounds(v, pt);
            eng_hi = eng_hi.max(e);
            bsg_lo = bsg_lo.min(bl);
            bsg_hi = bsg_hi.max(bh);
            v += 0.25;
        }
        ActionBox {
            lo: [0.0, bsg_lo, 0.0],
            hi: [eng_hi, bsg_hi, t_brk_max_nm],
        }
    }

    /// Physical torques -> [-1, 1] coordinates (affine per component).
    pub fn normalize(&self, u: &ControlInput) -> [f64; 3] {
        let p = [u.t_eng_nm, u.t_bsg_nm, u.t_brk_nm];
        let mut a = [0.0; 3];
        for i in 0..3 {
            a[i] = 2.0 * (p[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0;
        }
        a
    }

    /// [-1, 1] coordinates -> physical torques.
    pub fn denormalize(&self, a: [f64; 3]) -> ControlInput {
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = self.lo[i] + 0.5 * (a[i] + 1.0) * (self.hi[i] - self.lo[i]);
        }
        ControlInput { t_eng_nm: p[0], t_bsg_nm: p[1], t_brk_nm: p[2] }
    }

    /// Clamps physical torques into the box componentwise.
    pub fn clamp(&self, u: &ControlInput) -> ControlInput {
        ControlInput {
            t_eng_nm: u.t_eng_nm.clamp(self.lo[0], self.hi[0]),
            t_bsg_nm: u.t_bsg_nm.clamp(self.lo[1], self.hi[1]),
            t_brk_nm: u.t_brk_nm.clamp(self.lo[2], self.hi[2]),
        }
    }
}

/// Projects a command onto the speed-dependent feasible torque box, the
/// projection applied to exploration noise and decoded actions before they
/// reach the powertrain.
pub fn project_feasible(
    u: &ControlInput,
    v_mps: f64,
    pt: &PowertrainParams,
    t_brk_max_nm: f64,
) -> ControlInput {
    let (eng_hi, bsg_lo, bsg_hi) = torque_bounds(v_mps, pt);
    ControlInput {
        t_eng_nm: u.t_eng_nm.clamp(0.0, eng_hi),
        t_bsg_nm: u.t_bsg_nm.clamp(bsg_lo, bsg_hi),
        t_brk_nm: u.t_brk_nm.clamp(0.0, t_brk_max_nm),
    }
}

/// Turns observations into network state features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub ae: StateAutoencoder,
    pub action_box: ActionBox,
    v_max_mps: f64,
}

impl FeatureExtractor {
    pub fn new(ae: StateAutoencoder, action_box: ActionBox, v_max_mps: f64) -> Self {
        assert_eq!(ae.input_dim(), OBS_HORIZON, "autoencoder must take the phase window");
        FeatureExtractor { ae, action_box, v_max_mps }
    }

    pub fn feature_dim(&self) -> usize {
        self.ae.latent_dim() + SCALAR_FEATURES
    }

    /// Critic/perturbation input width: state features plus 3 action
    /// coordinates.
    pub fn critic_input_dim(&self) -> usize {
        self.feature_dim() + 3
    }

    /// Latent of the phase window alone (shared across nodes that differ
    /// only in speed and charge).
    pub fn window_latent(&self, x_tfc: &[u8]) -> Vec<f64> {
        let w: Vec<f64> = x_tfc.iter().map(|&b| b as f64).collect();
        self.ae.encode_one(&w)
    }

    /// Full state-feature vector for an observation.
    pub fn features(&self, obs: &Observation) -> Vec<f64> {
        let mut f = self.window_latent(&obs.x_tfc);
        self.push_scalars(obs, &mut f);
        f
    }

    /// Reuses a precomputed window latent; `obs` supplies the scalars.
    pub fn features_with_latent(&self, latent: &[f64], obs: &Observation) -> Vec<f64> {
        let mut f = latent.to_vec();
        self.push_scalars(obs, &mut f);
        f
    }

    fn push_scalars(&self, obs: &Observation, f: &mut Vec<f64>) {
        f.push(obs.soc);
        f.push(obs.v_mps / self.v_max_mps);
        f.push(obs.v_lim_mps / self.v_max_mps);
        f.push(obs.v_lim_next_mps / self.v_max_mps);
        f.push(obs.d_tfc_m / SENSING_RANGE_M);
        f.push(obs.d_lim_next_m.min(FAR_CAP_M) / FAR_CAP_M);
        f.push(obs.d_rem_m.min(FAR_CAP_M) / FAR_CAP_M);
    }
}

/// Predicts the observation `dd_m` ahead and `dt_s` later from the current
/// one alone, used to anchor value queries at the planning horizon.
///
/// The phase window slides forward in time (green-padded past its end); a
/// light or segment boundary inside the traveled span drops out. A light
/// that would newly enter sensing range is unknowable here, so the far field
/// stays optimistic (no light, all green). Speed and charge carry over and
/// are overwritten per query node by the caller.
pub fn horizon_observation(obs: &Observation, dt_s: f64, dd_m: f64) -> Observation {
    let d_rem = (obs.d_rem_m - dd_m).max(0.0);

    let (v_lim, v_lim_next, d_lim_next) = if obs.d_lim_next_m > dd_m {
        (obs.v_lim_mps, obs.v_lim_next_mps, obs.d_lim_next_m - dd_m)
    } else {
        // Boundary passed: the upcoming limit becomes current and the next
        // boundary is unknown, so pad as end-of-route.
        (obs.v_lim_next_mps, obs.v_lim_next_mps, d_rem)
    };

    let sensed = obs.d_tfc_m < SENSING_RANGE_M;
    let (d_tfc, x_tfc) = if sensed && obs.d_tfc_m > dd_m {
        let k = dt_s.round().max(0.0) as usize;
        let mut x = vec![1u8; OBS_HORIZON];
        for (i, xi) in x.iter_mut().enumerate() {
            if i + k < OBS_HORIZON {
                *xi = obs.x_tfc[i + k];
            }
        }
        (obs.d_tfc_m - dd_m, x)
    } else {
        (SENSING_RANGE_M, vec![1u8; OBS_HORIZON])
    };

    Observation {
        soc: obs.soc,
        v_mps: obs.v_mps,
        v_lim_mps: v_lim,
        v_lim_next_mps: v_lim_next,
        d_tfc_m: d_tfc,
        d_lim_next_m: d_lim_next,
        d_rem_m: d_rem,
        x_tfc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_box() -> ActionBox {
        ActionBox::from_params(&PowertrainParams::default(), 22.0, 3000.0)
    }

    fn obs_with_window(pattern: &dyn Fn(usize) -> u8) -> Observation {
        Observation {
            soc: 0.55,
            v_mps: 10.0,
            v_lim_mps: 15.6,
            v_lim_next_mps: 13.4,
            d_tfc_m: 320.0,
            d_lim_next_m: 700.0,
            d_rem_m: 4200.0,
            x_tfc: (0..OBS_HORIZON).map(pattern).collect(),
        }
    }

    #[test]
    fn action_box_round_trips_and_clamps() {
        let b = test_box();
        assert!(b.hi[0] > 100.0 && b.hi[0] < 160.0, "engine cap {}", b.hi[0]);
        assert_eq!(b.lo[1], -b.hi[1]);
        let u = ControlInput { t_eng_nm: 80.0, t_bsg_nm: -12.5, t_brk_nm: 600.0 };
        let back = b.denormalize(b.normalize(&u));
        assert!((back.t_eng_nm - u.t_eng_nm).abs() < 1e-9);
        assert!((back.t_bsg_nm - u.t_bsg_nm).abs() < 1e-9);
        assert!((back.t_brk_nm - u.t_brk_nm).abs() < 1e-9);
        let wild = ControlInput { t_eng_nm: 500.0, t_bsg_nm: -90.0, t_brk_nm: -5.0 };
        let c = b.clamp(&wild);
        assert_eq!(c.t_eng_nm, b.hi[0]);
        assert_eq!(c.t_bsg_nm, b.lo[1]);
        assert_eq!(c.t_brk_nm, 0.0);
    }

    #[test]
    fn projection_respects_speed_dependent_limits() {
        let pt = PowertrainParams::default();
        // At 20 m/s the BSG is power-limited well below its low-speed cap.
        let u = ControlInput { t_eng_nm: 200.0, t_bsg_nm: 25.0, t_brk_nm: 100.0 };
        let p = project_feasible(&u, 20.0, &pt, 3000.0);
        let (eng_hi, _, bsg_hi) = torque_bounds(20.0, &pt);
        assert_eq!(p.t_eng_nm, eng_hi);
        assert_eq!(p.t_bsg_nm, bsg_hi);
        assert!(bsg_hi < 25.0);
        assert_eq!(p.t_brk_nm, 100.0);
    }

    #[test]
    fn feature_vector_has_latent_plus_scalars_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ae = StateAutoencoder::new(&[OBS_HORIZON, 40, 5], &mut rng);
        let fx = FeatureExtractor::new(ae, test_box(), 22.0);
        assert_eq!(fx.feature_dim(), FEATURE_DIM);
        assert_eq!(fx.critic_input_dim(), FEATURE_DIM + 3);
        let obs = obs_with_window(&|i| (i % 3 == 0) as u8);
        let f = fx.features(&obs);
        assert_eq!(f.len(), FEATURE_DIM);
        // Scalars occupy the tail and are normalized.
        for &s in &f[5..] {
            assert!((0.0..=1.0).contains(&s), "scalar {s} out of range");
        }
        assert!((f[5] - 0.55).abs() < 1e-12);
        // Latent reuse matches direct computation.
        let z = fx.window_latent(&obs.x_tfc);
        assert_eq!(fx.features_with_latent(&z, &obs), f);
    }

    #[test]
    fn horizon_map_slides_the_window_and_distances() {
        let obs = obs_with_window(&|i| (i >= 30 && i < 60) as u8);
        let h = horizon_observation(&obs, 12.3, 200.0);
        // Window shifted by round(12.3) = 12 steps.
        for i in 0..OBS_HORIZON - 12 {
            assert_eq!(h.x_tfc[i], obs.x_tfc[i + 12]);
        }
        // Beyond the shifted window: green padding.
        assert!(h.x_tfc[OBS_HORIZON - 12..].iter().all(|&b| b == 1));
        assert!((h.d_tfc_m - 120.0).abs() < 1e-12);
        assert!((h.d_lim_next_m - 500.0).abs() < 1e-12);
        assert!((h.d_rem_m - 4000.0).abs() < 1e-12);
        assert_eq!(h.v_lim_mps, obs.v_lim_mps);
    }

    #[test]
    fn horizon_map_drops_passed_light_and_limit_boundary() {
        let mut obs = obs_with_window(&|_| 0);
        obs.d_tfc_m = 150.0;
        obs.d_lim_next_m = 80.0;
        let h = horizon_observation(&obs, 15.0, 200.0);
        assert_eq!(h.d_tfc_m, SENSING_RANGE_M);
        assert!(h.x_tfc.iter().all(|&b| b == 1));
        // Upcoming limit became current; next boundary padded to route end.
        assert_eq!(h.v_lim_mps, obs.v_lim_next_mps);
        assert_eq!(h.v_lim_next_mps, obs.v_lim_next_mps);
        assert!((h.d_lim_next_m - h.d_rem_m).abs() < 1e-12);
    }

    #[test]
    fn unsensed_far_field_stays_optimistic() {
        let mut obs = obs_with_window(&|_| 0);
        obs.d_tfc_m = SENSING_RANGE_M;
        let h = horizon_observation(&obs, 5.0, 200.0);
        assert_eq!(h.d_tfc_m, SENSING_RANGE_M);
        assert!(h.x_tfc.iter().all(|&b| b == 1));
    }
}
