//! Sequential training driver: the planner (with learned horizon pricing)
//! acts in the environment, successful trips feed the replay buffer, and the
//! critics, perturbation net, behavior VAE, window autoencoder, and safe-set
//! density model update as experience accumulates.
//!
//! The loop seeds the buffer with conservative-controller trips, then per
//! environment step performs one update of each learned component (1:1
//! cadence), randomizes the vehicle state periodically for coverage, admits
//! only goal-reaching episodes into the buffer, refits the safe set after
//! each admission, and evaluates on fixed trips at a fixed episode cadence
//! with exploration and randomization disabled.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::baseline::{baseline_controller, BaselineConfig};
use crate::bench::report::fuel_economy_mpg;
use crate::dp::plan::Planner;
use crate::dp::{DpConfig, DpError};
use crate::genmodels::{
    delta_from_quantile, ActionVae, Discretizer, SafeSetModel, SeqSchema, StateAutoencoder,
};
use crate::nn::{Adam, Mlp};
use crate::powertrain::{ControlInput, PowertrainParams, VehicleState};
use crate::traffic::{Env, EpisodeStatus, Observation, Route, TrafficConfig, TrafficError};

use super::critic::{CriticBatch, CriticPair, PerturbationNet, QMode, ValueNets};
use super::features::{project_feasible, ActionBox, FeatureExtractor};
use super::replay::{ReplayBuffer, Transition};
use super::terminal::{LearnedTerminal, SafeSet};
use super::AgentConfig;

/// Extra fitting applied to the safe set when the buffer is first seeded,
/// as a multiple of the per-episode refit budget.
const SEED_SAFESET_MULT: usize = 5;
/// Warm-up minibatches for the window autoencoder and behavior VAE right
/// after seeding, before the planner starts consuming their outputs.
const WARMUP_BATCHES: usize = 200;
/// Sequences sampled when recalibrating the safe-set threshold.
const DELTA_CALIBRATION_SAMPLES: usize = 2000;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("seeding trip {seed} ended with status {status}")]
    Seed { seed: u64, status: EpisodeStatus },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

/// Run counters exposed for invariant audits.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: usize,
    pub planner_fallbacks: usize,
    pub update_rounds: usize,
    /// Horizon nodes excluded by the safe set, accumulated over plans.
    pub nodes_masked: usize,
    /// Plans that masked at least one horizon node.
    pub plans_with_masking: usize,
}

/// One finished episode's scalars (CSV row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    pub status: EpisodeStatus,
    pub cost: f64,
    pub fuel_g: f64,
    pub time_s: f64,
    pub terminal_soc: f64,
    pub planner_fallbacks: usize,
}

/// Aggregate of one evaluation pass over the fixed trip set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub at_episode: usize,
    pub trips: usize,
    pub goal_rate: f64,
    pub mean_cost: f64,
    pub mean_fuel_g: f64,
    pub mean_mpg: f64,
    pub mean_avg_speed_mps: f64,
}

pub const EPISODE_CSV_HEADER: &str =
    "episode,steps,status,cost,fuel_g,time_s,terminal_soc,planner_fallbacks";
pub const EVAL_CSV_HEADER: &str =
    "at_episode,trips,goal_rate,mean_cost,mean_fuel_g,mean_mpg,mean_avg_speed_mps";

/// Everything needed to resume or evaluate a trained agent.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub agent: AgentConfig,
    pub dp: DpConfig,
    pub pt: PowertrainParams,
    pub traffic: TrafficConfig,
    pub lambda: f64,
    pub baseline: BaselineConfig,
    pub ae: StateAutoencoder,
    pub vae: ActionVae,
    pub q1: Mlp,
    pub q2: Mlp,
    pub t1: Mlp,
    pub t2: Mlp,
    pub pert: Mlp,
    pub pert_target: Mlp,
    pub safeset: SafeSetModel,
    pub delta: f64,
    pub episodes_trained: usize,
}

pub(crate) struct EpisodeOutcome {
    pub(crate) status: EpisodeStatus,
    pub(crate) steps: usize,
    pub(crate) cost: f64,
    pub(crate) fuel_g: f64,
    pub(crate) time_s: f64,
    pub(crate) distance_m: f64,
    pub(crate) terminal_soc: f64,
    pub(crate) fallbacks: usize,
    pub(crate) soc_series: Vec<f64>,
}

pub struct Trainer {
    pub cfg: AgentConfig,
    pub dp_cfg: DpConfig,
    pub pt: PowertrainParams,
    pub tcfg: TrafficConfig,
    pub lambda: f64,
    pub baseline_cfg: BaselineConfig,
    pub nets: ValueNets,
    pub safeset: SafeSet,
    pub buffer: ReplayBuffer,
    pub counters: Counters,
    pub episode_log: Vec<EpisodeRecord>,
    pub eval_log: Vec<EvalSummary>,
    pub episodes_trained: usize,
    planner: Planner,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_pert: Adam,
    opt_vae: Adam,
    opt_ae: Adam,
    opt_ss: Adam,
    rng: ChaCha8Rng,
    /// Base for per-episode route seeds during training.
    pub route_seed_base: u64,
    /// Base for the fixed evaluation trip seeds.
    pub eval_seed_base: u64,
}

impl Trainer {
    pub fn new(
        cfg: AgentConfig,
        dp_cfg: DpConfig,
        pt: PowertrainParams,
        tcfg: TrafficConfig,
        lambda: f64,
        seed: u64,
    ) -> Result<Self, TrainerError> {
        cfg.validate().map_err(TrainerError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let action_box = ActionBox::from_params(&pt, dp_cfg.v_max_mps, dp_cfg.t_brk_max_nm);
        let ae = StateAutoencoder::new(&cfg.ae_sizes, &mut rng);
        let fx = FeatureExtractor::new(ae, action_box, dp_cfg.v_max_mps);
        let f = fx.feature_dim();
        let vae = ActionVae::new(f, 3, cfg.vae_latent, cfg.vae_hidden, &mut rng);
        let critics = CriticPair::new(f + 3, &cfg.critic_hidden, &mut rng);
        let pert = PerturbationNet::new(f + 3, &cfg.perturb_hidden, cfg.phi_nm, &mut rng);
        let nets = ValueNets { fx, vae, critics, pert, mode: cfg.q_mode };
        let disc = Discretizer::new(&dp_cfg, &pt);
        let schema = SeqSchema::observation(&disc);
        let model = SafeSetModel::new(schema, cfg.lstm_hidden, &mut rng);
        let safeset = SafeSet { model, disc, delta: f64::NEG_INFINITY };
        let planner = Planner::new(dp_cfg.clone(), pt.clone(), lambda)?;
        let lr = cfg.lr;
        let ss_lr = cfg.safeset_lr;
        Ok(Trainer {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            dp_cfg,
            pt,
            tcfg,
            lambda,
            baseline_cfg: BaselineConfig::default(),
            nets,
            safeset,
            counters: Counters::default(),
            episode_log: Vec::new(),
            eval_log: Vec::new(),
            episodes_trained: 0,
            planner,
            opt_q1: Adam::new(lr),
            opt_q2: Adam::new(lr),
            opt_pert: Adam::new(lr),
            opt_vae: Adam::new(lr),
            opt_ae: Adam::new(lr),
            opt_ss: Adam::new(ss_lr),
            rng,
            route_seed_base: 1_000_000,
            eval_seed_base: 9_000_000,
        })
    }

    fn env_for(&self, route: Route) -> Env {
        let mut env = Env::new(route, self.pt.clone(), self.tcfg.clone());
        env.lambda = self.lambda;
        env
    }

    /// Runs the conservative controller on `n_seed_trips` generated trips,
    /// requires every one to reach the goal, admits them to the buffer,
    /// fits the initial safe set, and warm-starts the autoencoder and VAE.
    pub fn seed_buffer(&mut self) -> Result<(), TrainerError> {
        for i in 0..self.cfg.n_seed_trips {
            let seed = self.route_seed_base + 500_000 + i as u64;
            let route = Route::generate(&self.tcfg, seed)?;
            let env = self.env_for(route);
            let mut state = env.initial_state();
            let mut staged = Vec::new();
            let mut status = EpisodeStatus::Running;
            for _ in 0..self.cfg.max_steps_per_episode.max(4000) {
                let obs = env.observe(&state);
                let u = baseline_controller(&state, &env.route, &env.pt, &self.baseline_cfg);
                let st = env.step(&state, &u);
                staged.push(Transition {
                    obs,
                    action: u,
                    cost: st.cost,
                    next_obs: env.observe(&st.state),
                    terminal: st.status.is_terminal(),
                });
                state = st.state;
                status = st.status;
                if status.is_terminal() {
                    break;
                }
            }
            if status != EpisodeStatus::GoalReached {
                return Err(TrainerError::Seed { seed, status });
            }
            self.buffer
                .push_episode(staged, status)
                .expect("audited successful episode");
        }
        if self.cfg.n_seed_trips == 0 {
            return Ok(());
        }
        for _ in 0..SEED_SAFESET_MULT * self.cfg.safeset_retrain_steps {
            self.safeset_step();
        }
        self.recalibrate_delta();
        for _ in 0..WARMUP_BATCHES {
            self.generative_step();
        }
        Ok(())
    }

    /// Plans one action from the current state; falls back to the
    /// conservative controller when the constrained program is infeasible.
    fn plan_action(
        &mut self,
        env: &Env,
        state: &VehicleState,
        obs: &Observation,
        plan_seed: u64,
    ) -> Result<(ControlInput, bool), TrainerError> {
        let safeset = if self.cfg.safe_set { Some(&self.safeset) } else { None };
        let terminal = LearnedTerminal::new(
            &self.nets,
            safeset,
            obs.clone(),
            self.cfg.terminal_value_samples,
            self.cfg.value_strides,
            plan_seed,
        );
        let planned = self.planner.plan(state, &env.route, &terminal);
        let masked = terminal.nodes_masked.get();
        if !self.cfg.safe_set {
            assert_eq!(masked, 0, "safe set disabled but nodes were masked");
        }
        self.counters.nodes_masked += masked;
        if masked > 0 {
            self.counters.plans_with_masking += 1;
        }
        match planned {
            Ok(p) => Ok((p.action, false)),
            Err(DpError::NoFeasiblePlan) => Ok((
                baseline_controller(state, &env.route, &env.pt, &self.baseline_cfg),
                true,
            )),
            Err(e) => Err(e.into()),
        }
    }

    /// One update round: critics, perturbation, behavior VAE, window
    /// autoencoder, and soft target tracking, all on one sampled minibatch.
    fn update_nets(&mut self) {
        if self.buffer.len() < self.cfg.batch_size || self.cfg.q_mode == QMode::None {
            if self.buffer.len() >= self.cfg.batch_size {
                // Even without learned values the generative models train,
                // keeping ablations comparable.
                self.generative_step();
            }
            return;
        }
        let idx = self.buffer.sample_indices(self.cfg.batch_size, &mut self.rng);
        let b = idx.len();
        let f_dim = self.nets.fx.feature_dim();
        let mut feats = Array2::zeros((b, f_dim));
        let mut next_feats = Array2::zeros((b, f_dim));
        let mut actions_norm = Array2::zeros((b, 3));
        let mut costs = ndarray::Array1::zeros(b);
        let mut terminal = vec![false; b];
        let mut actions = Vec::with_capacity(b);
        for (r, &i) in idx.iter().enumerate() {
            let tr = self.buffer.get(i);
            let fx = &self.nets.fx;
            for (c, x) in fx.features(&tr.obs).into_iter().enumerate() {
                feats[[r, c]] = x;
            }
            for (c, x) in fx.features(&tr.next_obs).into_iter().enumerate() {
                next_feats[[r, c]] = x;
            }
            let a = fx.action_box.normalize(&tr.action);
            for c in 0..3 {
                actions_norm[[r, c]] = a[c];
            }
            costs[r] = tr.cost;
            terminal[r] = tr.terminal;
            actions.push(tr.action);
        }
        let batch = CriticBatch { feats, actions_norm, costs, next_feats, terminal };
        self.nets.critic_update(
            &batch,
            self.cfg.gamma,
            self.cfg.n_target_candidates,
            &mut self.opt_q1,
            &mut self.opt_q2,
            &mut self.rng,
        );
        self.nets
            .perturbation_update(batch.feats.view(), &actions, &mut self.opt_pert);
        if self.cfg.q_mode == QMode::Bcq {
            self.nets.vae.train_batch(
                batch.feats.view(),
                batch.actions_norm.view(),
                &mut self.rng,
                &mut self.opt_vae,
            );
        }
        self.ae_step(&idx);
        self.nets.soft_update(self.cfg.tau);
        self.counters.update_rounds += 1;
    }

    /// Autoencoder minibatch on the sampled transitions' phase windows.
    fn ae_step(&mut self, idx: &[usize]) {
        let rows = idx.len();
        let mut x = Array2::zeros((rows, crate::traffic::OBS_HORIZON));
        for (r, &i) in idx.iter().enumerate() {
            for (c, &g) in self.buffer.get(i).obs.x_tfc.iter().enumerate() {
                x[[r, c]] = g as f64;
            }
        }
        self.nets.fx.ae.train_batch(x.view(), &mut self.opt_ae);
    }

    /// One VAE + AE minibatch without critic updates (warm-up and the
    /// no-learned-value ablation).
    fn generative_step(&mut self) {
        if self.buffer.is_empty() {
            return;
        }
        let n = self.cfg.batch_size.min(self.buffer.len());
        let idx = self.buffer.sample_indices(n, &mut self.rng);
        let f_dim = self.nets.fx.feature_dim();
        let mut feats = Array2::zeros((n, f_dim));
        let mut actions_norm = Array2::zeros((n, 3));
        for (r, &i) in idx.iter().enumerate() {
            let tr = self.buffer.get(i);
            for (c, x) in self.nets.fx.features(&tr.obs).into_iter().enumerate() {
                feats[[r, c]] = x;
            }
            let a = self.nets.fx.action_box.normalize(&tr.action);
            for c in 0..3 {
                actions_norm[[r, c]] = a[c];
            }
        }
        self.nets.vae.train_batch(
            feats.view(),
            actions_norm.view(),
            &mut self.rng,
            &mut self.opt_vae,
        );
        self.ae_step(&idx);
    }

    /// One safe-set minibatch: token sequences of uniformly sampled stored
    /// observations.
    fn safeset_step(&mut self) {
        if self.buffer.is_empty() {
            return;
        }
        let n = self.cfg.safeset_batch.min(self.buffer.len());
        let idx = self.buffer.sample_indices(n, &mut self.rng);
        let seqs: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| self.safeset.disc.tokenize(&self.buffer.get(i).obs))
            .collect();
        self.safeset.model.train_batch(&seqs, &mut self.opt_ss);
    }

    /// Re-derives the membership threshold as the configured quantile of
    /// stored-observation log-likelihoods.
    fn recalibrate_delta(&mut self) {
        if self.buffer.is_empty() {
            return;
        }
        let n = DELTA_CALIBRATION_SAMPLES.min(self.buffer.len());
        let idx = self.buffer.sample_indices(n, &mut self.rng);
        let lps: Vec<f64> = idx
            .iter()
            .map(|&i| {
                self.safeset
                    .model
                    .log_prob(&self.safeset.disc.tokenize(&self.buffer.get(i).obs))
            })
            .collect();
        self.safeset.delta = delta_from_quantile(&lps, self.cfg.safeset_quantile);
    }

    pub(crate) fn run_episode(
        &mut self,
        route: Route,
        train: bool,
        episode_index: usize,
    ) -> Result<(EpisodeOutcome, Vec<Transition>), TrainerError> {
        let env = self.env_for(route);
        let mut state = env.initial_state();
        let mut staged = Vec::new();
        let mut out = EpisodeOutcome {
            status: EpisodeStatus::Running,
            steps: 0,
            cost: 0.0,
            fuel_g: 0.0,
            time_s: 0.0,
            distance_m: env.route.s_total_m,
            terminal_soc: 0.0,
            fallbacks: 0,
            soc_series: vec![state.soc],
        };
        for step in 0..self.cfg.max_steps_per_episode {
            let obs = env.observe(&state);
            let plan_seed = (episode_index as u64) << 24 | step as u64;
            let (mut u, fb) = self.plan_action(&env, &state, &obs, plan_seed)?;
            if fb {
                out.fallbacks += 1;
                self.counters.planner_fallbacks += 1;
            }
            if train && self.rng.gen::<f64>() < self.cfg.epsilon {
                let phi = self.cfg.phi_nm;
                u.t_eng_nm += self.rng.gen_range(-phi..=phi);
                u.t_bsg_nm += self.rng.gen_range(-phi..=phi);
                u.t_brk_nm += self.rng.gen_range(-phi..=phi);
                u = project_feasible(&u, state.v_mps, &self.pt, self.dp_cfg.t_brk_max_nm);
            }
            let st = env.step(&state, &u);
            self.counters.env_steps += 1;
            out.cost += st.cost;
            out.fuel_g += st.outcome.fuel_g;
            out.steps = step + 1;
            if train {
                staged.push(Transition {
                    obs,
                    action: u,
                    cost: st.cost,
                    next_obs: env.observe(&st.state),
                    terminal: st.status.is_terminal(),
                });
                self.update_nets();
            }
            state = st.state;
            out.soc_series.push(state.soc);
            out.status = st.status;
            if out.status.is_terminal() {
                break;
            }
            if train && (step + 1) % self.cfg.randomize_every_steps == 0 {
                let r = env.domain_randomize(&state, &mut self.rng);
                if r != state {
                    state = r;
                    out.soc_series.push(state.soc);
                }
            }
        }
        out.time_s = state.t_s;
        out.terminal_soc = state.soc;
        out.distance_m = state.s_m.min(env.route.s_total_m);
        Ok((out, staged))
    }

    /// Trains for `episodes` episodes, evaluating every
    /// `eval_every_episodes` on the fixed trip set. Returns records of all
    /// episodes run in this call.
    pub fn train(&mut self, episodes: usize) -> Result<(), TrainerError> {
        for _ in 0..episodes {
            let ep = self.episodes_trained;
            let seed = self.route_seed_base + ep as u64;
            let route = Route::generate(&self.tcfg, seed)?;
            let (out, staged) = self.run_episode(route, true, ep)?;
            let accepted = self
                .buffer
                .push_episode(staged, out.status)
                .is_ok();
            if accepted {
                for _ in 0..self.cfg.safeset_retrain_steps {
                    self.safeset_step();
                }
                self.recalibrate_delta();
            }
            self.episode_log.push(EpisodeRecord {
                episode: ep,
                steps: out.steps,
                status: out.status,
                cost: out.cost,
                fuel_g: out.fuel_g,
                time_s: out.time_s,
                terminal_soc: out.terminal_soc,
                planner_fallbacks: out.fallbacks,
            });
            self.episodes_trained += 1;
            if self.episodes_trained % self.cfg.eval_every_episodes == 0 {
                let summary = self.evaluate()?;
                self.eval_log.push(summary);
            }
        }
        Ok(())
    }

    /// Runs the greedy policy (no exploration, no randomization, no
    /// updates) on the fixed evaluation trips.
    pub fn evaluate(&mut self) -> Result<EvalSummary, TrainerError> {
        let mut goals = 0usize;
        let mut cost = 0.0;
        let mut fuel = 0.0;
        let mut mpg = 0.0;
        let mut speed = 0.0;
        let n = self.cfg.eval_trips;
        for k in 0..n {
            let route = Route::generate(&self.tcfg, self.eval_seed_base + k as u64)?;
            let (out, _) = self.run_episode(route, false, usize::MAX - k)?;
            if out.status == EpisodeStatus::GoalReached {
                goals += 1;
            }
            cost += out.cost;
            fuel += out.fuel_g;
            mpg += fuel_economy_mpg(out.distance_m, out.fuel_g);
            speed += if out.time_s > 0.0 { out.distance_m / out.time_s } else { 0.0 };
        }
        let nf = n as f64;
        Ok(EvalSummary {
            at_episode: self.episodes_trained,
            trips: n,
            goal_rate: goals as f64 / nf,
            mean_cost: cost / nf,
            mean_fuel_g: fuel / nf,
            mean_mpg: mpg / nf,
            mean_avg_speed_mps: speed / nf,
        })
    }

    /// Greedy policy action for external harnesses (benchmarking).
    pub fn policy_action(
        &mut self,
        env: &Env,
        state: &VehicleState,
        plan_seed: u64,
    ) -> Result<(ControlInput, bool), TrainerError> {
        let obs = env.observe(state);
        self.plan_action(env, state, &obs, plan_seed)
    }

    pub fn episode_csv(&self) -> String {
        let mut s = String::from(EPISODE_CSV_HEADER);
        s.push('\n');
        for r in &self.episode_log {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.episode,
                r.steps,
                r.status,
                r.cost,
                r.fuel_g,
                r.time_s,
                r.terminal_soc,
                r.planner_fallbacks
            ));
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for r in &self.eval_log {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.at_episode,
                r.trips,
                r.goal_rate,
                r.mean_cost,
                r.mean_fuel_g,
                r.mean_mpg,
                r.mean_avg_speed_mps
            ));
        }
        s
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            agent: self.cfg.clone(),
            dp: self.dp_cfg.clone(),
            pt: self.pt.clone(),
            traffic: self.tcfg.clone(),
            lambda: self.lambda,
            baseline: self.baseline_cfg,
            ae: self.nets.fx.ae.clone(),
            vae: self.nets.vae.clone(),
            q1: self.nets.critics.q1.clone(),
            q2: self.nets.critics.q2.clone(),
            t1: self.nets.critics.t1.clone(),
            t2: self.nets.critics.t2.clone(),
            pert: self.nets.pert.net.clone(),
            pert_target: self.nets.pert.target.clone(),
            safeset: self.safeset.model.clone(),
            delta: self.safeset.delta,
            episodes_trained: self.episodes_trained,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainerError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(&self.checkpoint())?)?;
        Ok(())
    }

    /// Rebuilds a trainer (with a fresh RNG stream and empty buffer) from a
    /// checkpoint; suitable for evaluation and for resuming with reseeding.
    pub fn from_checkpoint(ck: Checkpoint, seed: u64) -> Result<Self, TrainerError> {
        let mut t = Trainer::new(
            ck.agent.clone(),
            ck.dp.clone(),
            ck.pt.clone(),
            ck.traffic.clone(),
            ck.lambda,
            seed,
        )?;
        t.baseline_cfg = ck.baseline;
        t.nets.fx = FeatureExtractor::new(
            ck.ae,
            ActionBox::from_params(&ck.pt, ck.dp.v_max_mps, ck.dp.t_brk_max_nm),
            ck.dp.v_max_mps,
        );
        t.nets.vae = ck.vae;
        t.nets.critics = CriticPair { q1: ck.q1, q2: ck.q2, t1: ck.t1, t2: ck.t2 };
        t.nets.pert = PerturbationNet {
            net: ck.pert,
            target: ck.pert_target,
            phi_nm: ck.agent.phi_nm,
        };
        t.safeset.model = ck.safeset;
        t.safeset.delta = ck.delta;
        t.episodes_trained = ck.episodes_trained;
        Ok(t)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self, TrainerError> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(ck, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;

    /// Small-but-real configuration tests can afford to run.
    fn tiny_trainer(q_mode: QMode, safe_set: bool) -> Trainer {
        let cfg = AgentConfig {
            batch_size: 16,
            buffer_capacity: 5000,
            n_seed_trips: 1,
            n_target_candidates: 3,
            terminal_value_samples: 1,
            safeset_retrain_steps: 4,
            safeset_batch: 4,
            critic_hidden: vec![24, 16],
            perturb_hidden: vec![24, 16],
            vae_hidden: 24,
            vae_latent: 3,
            ae_sizes: vec![crate::traffic::OBS_HORIZON, 20, 5],
            lstm_hidden: 12,
            value_strides: (10, 10, 40),
            eval_every_episodes: 1000,
            max_steps_per_episode: 600,
            q_mode,
            safe_set,
            ..AgentConfig::default()
        };
        let mut tcfg = TrafficConfig::default();
        tcfg.s_total_range_m = (600.0, 900.0);
        let dp_cfg = DpConfig::default();
        Trainer::new(cfg, dp_cfg, PowertrainParams::default(), tcfg, 0.45, 7).unwrap()
    }

    #[test]
    fn seeding_fills_the_buffer_and_calibrates_the_safe_set() {
        let mut t = tiny_trainer(QMode::Bcq, true);
        t.seed_buffer().unwrap();
        assert!(t.buffer.len() > 0, "seed trips stored");
        assert_eq!(t.buffer.episodes_accepted(), 1);
        assert!(t.safeset.delta.is_finite(), "threshold calibrated");
    }

    #[test]
    fn zero_seed_trips_is_a_clean_noop() {
        let mut t = tiny_trainer(QMode::Bcq, true);
        t.cfg.n_seed_trips = 0;
        t.seed_buffer().unwrap();
        assert_eq!(t.buffer.len(), 0);
        assert_eq!(t.safeset.delta, f64::NEG_INFINITY);
    }

    #[test]
    fn one_training_episode_runs_updates_and_logs() {
        let mut t = tiny_trainer(QMode::Bcq, true);
        t.seed_buffer().unwrap();
        t.train(1).unwrap();
        assert_eq!(t.episode_log.len(), 1);
        assert!(t.counters.env_steps > 0);
        assert!(t.counters.update_rounds > 0, "1:1 updates ran");
        let rec = &t.episode_log[0];
        assert!(rec.steps > 0);
        let csv = t.episode_csv();
        assert!(csv.starts_with(EPISODE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn checkpoints_round_trip_through_json() {
        let mut t = tiny_trainer(QMode::Bcq, true);
        t.seed_buffer().unwrap();
        let dir = std::env::temp_dir().join("ecodrive-trainer-test");
        let path = dir.join("ck.json");
        t.save(&path).unwrap();
        let back = Trainer::load(&path, 99).unwrap();
        assert_eq!(back.episodes_trained, t.episodes_trained);
        assert_eq!(back.safeset.delta, t.safeset.delta);
        assert_eq!(
            back.nets.critics.q1.flatten(),
            t.nets.critics.q1.flatten()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn disabled_safe_set_never_masks_horizon_nodes() {
        let mut t = tiny_trainer(QMode::Bcq, false);
        t.seed_buffer().unwrap();
        t.train(1).unwrap();
        assert_eq!(t.counters.nodes_masked, 0);
        assert_eq!(t.counters.plans_with_masking, 0);
    }
}
