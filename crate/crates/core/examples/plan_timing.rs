//! Ad-hoc latency probe for one receding-horizon plan at the default grid,
//! with each terminal-pricing variant. Run with `--release` (or the
//! optimized dev profile) for meaningful numbers.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ecodrive::agent::critic::{CriticPair, PerturbationNet, QMode, ValueNets};
use ecodrive::agent::features::{ActionBox, FeatureExtractor};
use ecodrive::agent::terminal::{LearnedTerminal, SafeSet};
use ecodrive::agent::AgentConfig;
use ecodrive::dp::plan::Planner;
use ecodrive::dp::{DpConfig, GoalTerminal};
use ecodrive::genmodels::{ActionVae, Discretizer, SafeSetModel, SeqSchema, StateAutoencoder};
use ecodrive::powertrain::PowertrainParams;
use ecodrive::traffic::{Env, Route, TrafficConfig};

fn main() {
    let cfg = AgentConfig::default();
    let dp_cfg = DpConfig::default();
    let pt = PowertrainParams::default();
    let tcfg = TrafficConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let ae = StateAutoencoder::new(&cfg.ae_sizes, &mut rng);
    let action_box = ActionBox::from_params(&pt, dp_cfg.v_max_mps, dp_cfg.t_brk_max_nm);
    let fx = FeatureExtractor::new(ae, action_box, dp_cfg.v_max_mps);
    let f = fx.feature_dim();
    let vae = ActionVae::new(f, 3, cfg.vae_latent, cfg.vae_hidden, &mut rng);
    let critics = CriticPair::new(f + 3, &cfg.critic_hidden, &mut rng);
    let pert = PerturbationNet::new(f + 3, &cfg.perturb_hidden, cfg.phi_nm, &mut rng);
    let nets = ValueNets { fx, vae, critics, pert, mode: QMode::Bcq };

    let disc = Discretizer::new(&dp_cfg, &pt);
    let schema = SeqSchema::observation(&disc);
    let model = SafeSetModel::new(schema, cfg.lstm_hidden, &mut rng);
    let safeset = SafeSet { model, disc, delta: f64::NEG_INFINITY };

    let route = Route::generate(&tcfg, 1).unwrap();
    let env = Env::new(route, pt.clone(), tcfg);
    let state = env.initial_state();
    let obs = env.observe(&state);

    let mut planner = Planner::new(dp_cfg.clone(), pt, 0.45).unwrap();

    let time = |label: &str, planner: &mut Planner, term: &dyn ecodrive::dp::TerminalEvaluator| {
        // Warm once (cache effects), then time three plans.
        planner.plan(&state, &env.route, term).unwrap();
        let t0 = Instant::now();
        let n = 3;
        for _ in 0..n {
            planner.plan(&state, &env.route, term).unwrap();
        }
        println!("{label:28} {:>8.1} ms/plan", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
    };

    time(
        "goal terminal",
        &mut planner,
        &GoalTerminal { soc_min_terminal: 0.5 },
    );

    let lt = LearnedTerminal::new(&nets, None, obs.clone(), cfg.terminal_value_samples, cfg.value_strides, 9);
    time("learned value", &mut planner, &lt);

    let lts = LearnedTerminal::new(
        &nets,
        Some(&safeset),
        obs,
        cfg.terminal_value_samples,
        cfg.value_strides,
        9,
    );
    time("learned value + safe set", &mut planner, &lts);
}
