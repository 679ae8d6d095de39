//! Generative models fitted to logged driving data: a state autoencoder for
//! compressing the signal-phase window, a conditional action VAE that
//! proposes controls resembling logged behavior, and an autoregressive
//! density over discretized observations whose likelihood threshold defines
//! a learned safe set.
//!
//! All three are built on the hand-rolled layers in [`crate::nn`], so every
//! training path is finite-difference checkable. Observations are shared
//! with [`crate::traffic`]; discretization grids are shared with
//! [`crate::dp`] so that safe-set queries line up with planner nodes.

pub mod ae;
pub mod safeset;
pub mod vae;

pub use ae::StateAutoencoder;
pub use safeset::{delta_from_quantile, SafeSetModel};
pub use vae::ActionVae;

use serde::{Deserialize, Serialize};

use crate::dp::{Axis, DpConfig};
use crate::powertrain::PowertrainParams;
use crate::traffic::{Observation, OBS_HORIZON};

/// Number of tokens in a discretized observation: five context scalars, the
/// signal-phase window, then SoC and speed last so a shared prefix can be
/// reused when sweeping the (SoC, speed) grid.
pub const SEQ_LEN: usize = OBS_HORIZON + 7;

/// Field kinds, indexing [`SeqSchema::vocabs`].
pub const KIND_SPEED: usize = 0;
pub const KIND_NEAR: usize = 1;
pub const KIND_FAR: usize = 2;
pub const KIND_LIGHT: usize = 3;
pub const KIND_SOC: usize = 4;

/// Maps continuous observation fields onto small alphabets.
///
/// Speeds snap to the planner's speed nodes and SoC uses the planner's SoC
/// bins (lower edge), so safe-set queries align with value-table nodes.
/// Distances to the next signal quantize at 10 m within sensing range;
/// route-scale distances quantize at 100 m with a 10 km cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discretizer {
    pub v_ax: Axis,
    pub soc_ax: Axis,
    pub near_bin_m: f64,
    pub near_max_m: f64,
    pub far_bin_m: f64,
    pub far_max_m: f64,
}

impl Discretizer {
    pub fn new(cfg: &DpConfig, pt: &PowertrainParams) -> Self {
        Discretizer {
            v_ax: cfg.v_axis(),
            soc_ax: cfg.soc_axis(pt),
            near_bin_m: 10.0,
            near_max_m: 500.0,
            far_bin_m: 100.0,
            far_max_m: 10_000.0,
        }
    }

    pub fn n_speed(&self) -> usize {
        self.v_ax.n
    }

    pub fn n_soc(&self) -> usize {
        self.soc_ax.n
    }

    pub fn n_near(&self) -> usize {
        (self.near_max_m / self.near_bin_m) as usize + 1
    }

    pub fn n_far(&self) -> usize {
        (self.far_max_m / self.far_bin_m) as usize + 1
    }

    pub fn speed_class(&self, v_mps: f64) -> usize {
        self.v_ax.nearest(v_mps)
    }

    /// Lower-edge SoC bin; exact node values land in their own bin.
    pub fn soc_class(&self, soc: f64) -> usize {
        let u = (soc - self.soc_ax.lo) / self.soc_ax.step + 1e-9;
        (u.floor().max(0.0) as usize).min(self.soc_ax.n - 1)
    }

    pub fn near_class(&self, d_m: f64) -> usize {
        ((d_m / self.near_bin_m).floor().max(0.0) as usize).min(self.n_near() - 1)
    }

    pub fn far_class(&self, d_m: f64) -> usize {
        ((d_m / self.far_bin_m).floor().max(0.0) as usize).min(self.n_far() - 1)
    }

    /// Token sequence (field-local class indices) for one observation.
    pub fn tokenize(&self, obs: &Observation) -> Vec<usize> {
        let mut t = Vec::with_capacity(SEQ_LEN);
        t.push(self.speed_class(obs.v_lim_mps));
        t.push(self.speed_class(obs.v_lim_next_mps));
        t.push(self.near_class(obs.d_tfc_m));
        t.push(self.far_class(obs.d_lim_next_m));
        t.push(self.far_class(obs.d_rem_m));
        for &g in &obs.x_tfc {
            t.push(g as usize);
        }
        t.push(self.soc_class(obs.soc));
        t.push(self.speed_class(obs.v_mps));
        debug_assert_eq!(t.len(), SEQ_LEN);
        t
    }
}

/// Fixed field order of an autoregressive token sequence: which alphabet
/// each position draws from, plus the input-column offsets that give every
/// (kind, class) pair a distinct one-hot column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeqSchema {
    /// Alphabet size per field kind.
    pub vocabs: Vec<usize>,
    /// Field kind at each sequence position.
    pub fields: Vec<usize>,
    /// Input-column offset per kind; the BOS column sits after all of them.
    offsets: Vec<usize>,
}

impl SeqSchema {
    pub fn new(vocabs: Vec<usize>, fields: Vec<usize>) -> Self {
        assert!(!fields.is_empty());
        assert!(fields.iter().all(|&k| k < vocabs.len()));
        let mut offsets = Vec::with_capacity(vocabs.len());
        let mut off = 0;
        for &v in &vocabs {
            offsets.push(off);
            off += v;
        }
        SeqSchema {
            vocabs,
            fields,
            offsets,
        }
    }

    /// Schema of a discretized observation, ending in (SoC, speed).
    pub fn observation(disc: &Discretizer) -> Self {
        let vocabs = vec![
            disc.n_speed(),
            disc.n_near(),
            disc.n_far(),
            2,
            disc.n_soc(),
        ];
        let mut fields = vec![KIND_SPEED, KIND_SPEED, KIND_NEAR, KIND_FAR, KIND_FAR];
        fields.extend(std::iter::repeat(KIND_LIGHT).take(OBS_HORIZON));
        fields.push(KIND_SOC);
        fields.push(KIND_SPEED);
        SeqSchema::new(vocabs, fields)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Total input width: one column per (kind, class) pair plus BOS.
    pub fn input_width(&self) -> usize {
        self.vocabs.iter().sum::<usize>() + 1
    }

    /// Column index of the start-of-sequence marker.
    pub fn bos_column(&self) -> usize {
        self.input_width() - 1
    }

    /// Input column of a field-local class at sequence position `i`.
    pub fn column(&self, i: usize, class: usize) -> usize {
        let kind = self.fields[i];
        debug_assert!(class < self.vocabs[kind], "class outside alphabet");
        self.offsets[kind] + class
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc() -> Discretizer {
        Discretizer::new(&DpConfig::default(), &PowertrainParams::default())
    }

    #[test]
    fn discretizer_bins_match_hand_examples() {
        let d = disc();
        assert_eq!(d.n_speed(), 31);
        assert_eq!(d.n_soc(), 21);
        assert_eq!(d.n_near(), 51);
        assert_eq!(d.n_far(), 101);
        // Speeds snap to the nearest node (22/30 spacing).
        assert_eq!(d.speed_class(0.0), 0);
        assert_eq!(d.speed_class(0.36), 0);
        assert_eq!(d.speed_class(0.37), 1);
        assert_eq!(d.speed_class(22.0), 30);
        // SoC uses lower-edge bins; exact nodes land in their own bin.
        assert_eq!(d.soc_class(0.30), 0);
        assert_eq!(d.soc_class(0.50), 8);
        assert_eq!(d.soc_class(0.5249), 8);
        assert_eq!(d.soc_class(0.525), 9);
        assert_eq!(d.soc_class(0.80), 20);
        // Distances: 10 m bins inside sensing range, 100 m bins at route
        // scale, both capped.
        assert_eq!(d.near_class(0.0), 0);
        assert_eq!(d.near_class(499.0), 49);
        assert_eq!(d.near_class(500.0), 50);
        assert_eq!(d.far_class(250.0), 2);
        assert_eq!(d.far_class(99_999.0), 100);
    }

    #[test]
    fn tokenize_produces_a_full_sequence_in_range() {
        let d = disc();
        let obs = Observation {
            soc: 0.61,
            v_mps: 8.3,
            v_lim_mps: 15.6,
            v_lim_next_mps: 11.2,
            d_tfc_m: 137.0,
            d_lim_next_m: 820.0,
            d_rem_m: 4321.0,
            x_tfc: vec![1; OBS_HORIZON],
        };
        let schema = SeqSchema::observation(&d);
        let toks = d.tokenize(&obs);
        assert_eq!(toks.len(), SEQ_LEN);
        assert_eq!(schema.len(), SEQ_LEN);
        for (i, &t) in toks.iter().enumerate() {
            assert!(t < schema.vocabs[schema.fields[i]], "token {i} overflows");
        }
        // SoC and speed are the last two tokens.
        assert_eq!(toks[SEQ_LEN - 2], d.soc_class(0.61));
        assert_eq!(toks[SEQ_LEN - 1], d.speed_class(8.3));
    }

    #[test]
    fn schema_columns_are_disjoint_across_kinds() {
        let d = disc();
        let schema = SeqSchema::observation(&d);
        // speed column block [0, 31), near [31, 82), far [82, 183),
        // light [183, 185), soc [185, 206), BOS 206.
        assert_eq!(schema.input_width(), 207);
        assert_eq!(schema.bos_column(), 206);
        assert_eq!(schema.column(0, 0), 0);
        assert_eq!(schema.column(2, 0), 31);
        assert_eq!(schema.column(3, 0), 82);
        assert_eq!(schema.column(5, 1), 184);
        assert_eq!(schema.column(SEQ_LEN - 2, 0), 185);
        assert_eq!(schema.column(SEQ_LEN - 1, 30), 30);
    }
}
