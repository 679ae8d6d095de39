//! Off-policy learning agent: replay buffer gated to successful trips, twin
//! critics with target networks, behavior-constrained target actions (VAE
//! candidates plus a bounded perturbation), a learned safe set, and the
//! episode loop that drives the spatial planner as the behavior policy.
//!
//! The learned pieces plug into planning through [`LearnedTerminal`], which
//! prices the planner's horizon boundary with the critics' value estimate
//! and excludes horizon states outside the safe set.

pub mod critic;
pub mod features;
pub mod replay;
pub mod terminal;
pub mod trainer;

pub use critic::{CriticPair, PerturbationNet, QMode, ValueNets};
pub use features::{FeatureExtractor, ACTION_SCALE_NM, FEATURE_DIM};
pub use replay::{ReplayBuffer, Transition};
pub use terminal::LearnedTerminal;
pub use trainer::{EvalSummary, Trainer, TrainerError};

use serde::{Deserialize, Serialize};

/// Hyperparameters of the learning stack. Defaults follow the experiment
/// configuration used throughout the test suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Discount per second of elapsed time (shared with the planner).
    pub gamma: f64,
    /// Adam learning rate for critics, perturbation, VAE, and autoencoder.
    pub lr: f64,
    /// Learning rate for the safe-set density model.
    pub safeset_lr: f64,
    /// Minibatch size for critic/perturbation/VAE updates.
    pub batch_size: usize,
    /// Replay ring capacity (transitions).
    pub buffer_capacity: usize,
    /// Soft target update rate.
    pub tau: f64,
    /// Perturbation bound per action component, in N·m.
    pub phi_nm: f64,
    /// Candidate actions sampled for the bootstrapped target.
    pub n_target_candidates: usize,
    /// Candidate actions sampled when pricing a horizon state.
    pub terminal_value_samples: usize,
    /// Per-step exploration probability.
    pub epsilon: f64,
    /// Conservative-controller trips used to seed the buffer.
    pub n_seed_trips: usize,
    /// Episodes between evaluation passes.
    pub eval_every_episodes: usize,
    /// Number of fixed evaluation trips.
    pub eval_trips: usize,
    /// Safe-set minibatch steps after each successful episode.
    pub safeset_retrain_steps: usize,
    /// Safe-set likelihood threshold quantile.
    pub safeset_quantile: f64,
    /// Enable the safe-set mask on horizon states.
    pub safe_set: bool,
    /// Bootstrapped-target style (none, unconstrained, or
    /// behavior-constrained candidates).
    pub q_mode: QMode,
    /// Critic hidden sizes.
    pub critic_hidden: Vec<usize>,
    /// Perturbation-net hidden sizes.
    pub perturb_hidden: Vec<usize>,
    /// VAE hidden width and latent size.
    pub vae_hidden: usize,
    pub vae_latent: usize,
    /// Autoencoder layer sizes (input -> ... -> latent).
    pub ae_sizes: Vec<usize>,
    /// Safe-set LSTM hidden size.
    pub lstm_hidden: usize,
    /// Hard cap on environment steps per episode.
    pub max_steps_per_episode: usize,
    /// Environment steps between domain randomizations.
    pub randomize_every_steps: usize,
    /// Value-lattice strides over (speed, SoC, time) when building the
    /// learned terminal table; intermediate nodes are interpolated.
    pub value_strides: (usize, usize, usize),
    /// Minibatches per safe-set retraining step.
    pub safeset_batch: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.995,
            lr: 1e-4,
            safeset_lr: 1e-3,
            batch_size: 256,
            buffer_capacity: 200_000,
            tau: 1e-3,
            phi_nm: 30.0,
            n_target_candidates: 10,
            terminal_value_samples: 2,
            epsilon: 0.2,
            n_seed_trips: 20,
            eval_every_episodes: 25,
            eval_trips: 5,
            safeset_retrain_steps: 40,
            safeset_quantile: 0.02,
            safe_set: true,
            q_mode: QMode::Bcq,
            critic_hidden: vec![200, 100, 50],
            perturb_hidden: vec![200, 100, 50],
            vae_hidden: 300,
            vae_latent: 5,
            ae_sizes: vec![81, 100, 5],
            lstm_hidden: 50,
            max_steps_per_episode: 1500,
            randomize_every_steps: 50,
            value_strides: (3, 3, 8),
            safeset_batch: 16,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) && self.gamma != 1.0 {
            return Err(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err("buffer must hold at least one batch".into());
        }
        if self.n_target_candidates == 0 || self.terminal_value_samples == 0 {
            return Err("candidate counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.safeset_quantile) {
            return Err("safe-set quantile outside [0, 1)".into());
        }
        let (sv, ss, st) = self.value_strides;
        if sv == 0 || ss == 0 || st == 0 {
            return Err("value strides must be positive".into());
        }
        Ok(())
    }
}
