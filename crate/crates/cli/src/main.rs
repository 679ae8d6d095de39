//! Command-line front end for the eco-driving stack: trip-set generation,
//! policy training, benchmarking against the conservative baseline and the
//! clairvoyant wait-and-see bound, ablation sweeps, and report auditing.
//!
//! Every verb reads one TOML experiment config (all fields optional, library
//! defaults otherwise), writes CSV artifacts plus a structured JSON summary
//! into `--out`, and exits nonzero whenever an invariant audit fails.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ecodrive::agent::trainer::Trainer;
use ecodrive::bench::{ablation_csv, ablation_grid, run_ablation, run_benchmark};
use ecodrive::bench::runner::rollout_baseline;
use ecodrive::bench::BenchmarkReport;
use ecodrive::config::ExperimentConfig;
use ecodrive::dp::{wait_and_see, TransitionCache};
use ecodrive::traffic::{Route, DEFAULT_SOC0};

#[derive(Parser)]
#[command(
    name = "ecodrive",
    version,
    about = "Eco-driving planner: training, evaluation, and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Omitted fields take library defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for output artifacts (created if missing).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic trip set and write route summaries.
    GenerateRoutes {
        #[command(flatten)]
        common: Common,
        /// Number of routes to generate.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Seed of the first route; route k uses seed_base + k.
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
    },
    /// Train a policy; writes checkpoint.json, episodes.csv, evals.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the config's training episode count.
        #[arg(long)]
        episodes: Option<usize>,
        /// Resume from an existing checkpoint instead of a fresh start.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Benchmark a checkpoint against the baseline (plus the wait-and-see
    /// bound when enabled in config); writes trips.csv and report.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; omitted = baseline-only report.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the benchmark trip count.
        #[arg(long)]
        trips: Option<usize>,
    },
    /// Clairvoyant per-trip lower bounds vs the baseline controller.
    WaitAndSee {
        #[command(flatten)]
        common: Common,
        /// Override the trip count.
        #[arg(long)]
        trips: Option<usize>,
    },
    /// Train every ablation row and benchmark them on a shared trip suite.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Training episodes per ablation row.
        #[arg(long)]
        episodes: Option<usize>,
        /// Override the shared-suite trip count.
        #[arg(long)]
        trips: Option<usize>,
        /// Reuse per-row checkpoints already present in --out.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Re-audit a benchmark report JSON and print its summaries.
    Report {
        #[command(flatten)]
        common: Common,
        /// Path to a report.json written by `evaluate`.
        path: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenerateRoutes {
            common,
            count,
            seed_base,
        } => generate_routes(&common, count, seed_base),
        Cmd::Train {
            common,
            episodes,
            checkpoint,
        } => train(&common, episodes, checkpoint.as_deref()),
        Cmd::Evaluate {
            common,
            checkpoint,
            trips,
        } => evaluate(&common, checkpoint.as_deref(), trips),
        Cmd::WaitAndSee { common, trips } => run_wait_and_see(&common, trips),
        Cmd::Ablate {
            common,
            episodes,
            trips,
            resume,
        } => ablate(&common, episodes, trips, resume),
        Cmd::Report { common, path } => report(&common, &path),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value).context("serializing summary")?;
    write_text(dir, name, &text)
}

fn generate_routes(common: &Common, count: usize, seed_base: u64) -> Result<()> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let mut routes = Vec::with_capacity(count);
    let mut csv = String::from("seed,s_total_m,n_segments,n_lights,min_vlim_mps,max_vlim_mps\n");
    for k in 0..count {
        let seed = seed_base + k as u64;
        let route = Route::generate(&cfg.traffic, seed)
            .with_context(|| format!("generating route seed {seed}"))?;
        let vlims: Vec<f64> = route.segments.iter().map(|s| s.v_lim_mps).collect();
        let min_v = vlims.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_v = vlims.iter().cloned().fold(0.0, f64::max);
        csv.push_str(&format!(
            "{seed},{},{},{},{min_v},{max_v}\n",
            route.s_total_m,
            route.segments.len(),
            route.lights.len()
        ));
        routes.push(route);
    }
    write_text(out, "routes.csv", &csv)?;
    write_json(out, "routes.json", &routes)?;
    println!("generated {count} routes (seeds {seed_base}..{})", seed_base + count as u64);
    Ok(())
}

fn train(common: &Common, episodes: Option<usize>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let episodes = episodes.unwrap_or(cfg.episodes);

    let mut trainer = match checkpoint {
        Some(path) => {
            eprintln!("resuming from {}", path.display());
            Trainer::load(path, cfg.seed)?
        }
        None => {
            let mut t = Trainer::new(
                cfg.agent.clone(),
                cfg.dp.clone(),
                cfg.powertrain.clone(),
                cfg.traffic.clone(),
                cfg.lambda,
                cfg.seed,
            )?;
            eprintln!("seeding replay buffer with {} baseline trips", t.cfg.n_seed_trips);
            t.seed_buffer()?;
            t
        }
    };

    eprintln!("training {episodes} episodes");
    trainer.train(episodes)?;

    trainer.save(&out.join("checkpoint.json"))?;
    eprintln!("wrote {}", out.join("checkpoint.json").display());
    write_text(out, "episodes.csv", &trainer.episode_csv())?;
    write_text(out, "evals.csv", &trainer.eval_csv())?;
    let summary = serde_json::json!({
        "episodes_trained": trainer.episodes_trained,
        "counters": trainer.counters,
        "last_eval": trainer.eval_log.last(),
        "buffer_transitions": trainer.buffer.len(),
        "buffer_episodes_accepted": trainer.buffer.episodes_accepted(),
        "safeset_delta": trainer.safeset.delta,
    });
    write_json(out, "train_summary.json", &summary)?;
    println!(
        "trained {} episodes total; {} env steps, {} planner fallbacks",
        trainer.episodes_trained, trainer.counters.env_steps, trainer.counters.planner_fallbacks
    );
    Ok(())
}

fn print_report_summaries(rep: &BenchmarkReport) {
    println!(
        "{:<14} {:>5} {:>9} {:>12} {:>11} {:>9} {:>11}",
        "controller", "trips", "goal_rate", "mean_cost", "mean_fuel_g", "mean_mpg", "mean_v_mps"
    );
    for s in &rep.summaries {
        println!(
            "{:<14} {:>5} {:>9.3} {:>12.3} {:>11.2} {:>9.2} {:>11.2}",
            s.controller,
            s.trips,
            s.goal_rate,
            s.mean_cost,
            s.mean_fuel_g,
            s.mean_mpg,
            s.mean_avg_speed_mps
        );
    }
}

fn evaluate(common: &Common, checkpoint: Option<&Path>, trips: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let out = ensure_out(common)?;
    if let Some(n) = trips {
        cfg.bench.trips = n;
    }

    let mut trainer = match checkpoint {
        Some(path) => {
            eprintln!("loading checkpoint {}", path.display());
            Some(Trainer::load(path, cfg.seed)?)
        }
        None => {
            eprintln!("no checkpoint given: baseline-only report");
            None
        }
    };

    let rep = run_benchmark(
        trainer.as_mut(),
        &cfg.baseline,
        &cfg.powertrain,
        &cfg.traffic,
        &cfg.dp,
        cfg.lambda,
        &cfg.bench,
    )?;
    write_text(out, "trips.csv", &rep.to_csv())?;
    write_json(out, "report.json", &rep)?;
    print_report_summaries(&rep);
    if let Err(e) = rep.audit(&cfg.powertrain) {
        bail!("report audit failed: {e}");
    }
    println!("report audit passed");
    Ok(())
}

fn run_wait_and_see(common: &Common, trips: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let out = ensure_out(common)?;
    if let Some(n) = trips {
        cfg.bench.trips = n;
    }

    let mut cache = TransitionCache::new();
    let mut csv = String::from(
        "seed,s_total_m,ws_bound,ws_walk_cost,ws_walk_complete,baseline_cost,baseline_status,bound_ok\n",
    );
    let mut violations = 0usize;
    let (mut sum_bound, mut sum_base) = (0.0, 0.0);
    for k in 0..cfg.bench.trips {
        let seed = cfg.bench.seed_base + k as u64;
        let route = Route::generate(&cfg.traffic, seed)?;
        let ws = wait_and_see(
            &route,
            &cfg.powertrain,
            &cfg.dp,
            cfg.lambda,
            DEFAULT_SOC0,
            &mut cache,
        )?;
        let base = rollout_baseline(
            route.clone(),
            &cfg.powertrain,
            &cfg.traffic,
            cfg.lambda,
            &cfg.baseline,
            cfg.bench.max_steps,
        );
        let ok = ws.cost_bound <= base.cost + 1e-9;
        if !ok {
            violations += 1;
        }
        sum_bound += ws.cost_bound;
        sum_base += base.cost;
        csv.push_str(&format!(
            "{seed},{},{},{},{},{},{},{}\n",
            route.s_total_m,
            ws.cost_bound,
            ws.rollout_cost,
            ws.rollout_complete,
            base.cost,
            base.status,
            ok
        ));
        eprintln!(
            "trip {seed}: bound {:.2} vs baseline {:.2} ({})",
            ws.cost_bound, base.cost, base.status
        );
    }
    write_text(out, "wait_and_see.csv", &csv)?;
    let n = cfg.bench.trips as f64;
    let summary = serde_json::json!({
        "trips": cfg.bench.trips,
        "mean_ws_bound": sum_bound / n,
        "mean_baseline_cost": sum_base / n,
        "bound_violations": violations,
    });
    write_json(out, "wait_and_see_summary.json", &summary)?;
    println!(
        "wait-and-see over {} trips: mean bound {:.3} vs mean baseline cost {:.3}",
        cfg.bench.trips,
        sum_bound / n,
        sum_base / n
    );
    if violations > 0 {
        bail!("{violations} trips violate the lower-bound invariant");
    }
    Ok(())
}

fn ablate(
    common: &Common,
    episodes: Option<usize>,
    trips: Option<usize>,
    resume: bool,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let episodes = episodes.unwrap_or(cfg.episodes);
    if let Some(n) = trips {
        cfg.bench.trips = n;
    }

    let specs = ablation_grid();
    let mut trainers = Vec::with_capacity(specs.len());
    for (idx, spec) in specs.iter().enumerate() {
        let ck_path = out.join(format!("ablation_{}.checkpoint.json", spec.name));
        // The myopic row plans with zero terminal value and no safe set, so
        // nothing it would learn can change its policy: skip its training.
        let needs_training = spec.q_mode != ecodrive::agent::QMode::None || spec.safe_set;
        let trainer = if resume && ck_path.exists() {
            eprintln!("[{}] resuming from {}", spec.name, ck_path.display());
            Trainer::load(&ck_path, cfg.seed + idx as u64)?
        } else {
            let mut agent = cfg.agent.clone();
            agent.q_mode = spec.q_mode;
            agent.safe_set = spec.safe_set;
            let mut t = Trainer::new(
                agent,
                cfg.dp.clone(),
                cfg.powertrain.clone(),
                cfg.traffic.clone(),
                cfg.lambda,
                cfg.seed + idx as u64,
            )?;
            if needs_training {
                eprintln!("[{}] seeding buffer", spec.name);
                t.seed_buffer()?;
                eprintln!("[{}] training {episodes} episodes", spec.name);
                t.train(episodes)?;
                t.save(&ck_path)?;
                eprintln!("wrote {}", ck_path.display());
            } else {
                eprintln!("[{}] untrained by construction", spec.name);
            }
            t
        };
        trainers.push(trainer);
    }

    let entries: Vec<_> = specs.into_iter().zip(trainers.iter_mut()).collect();
    let rows = run_ablation(entries, &cfg.traffic, &cfg.bench)?;
    write_text(out, "ablation.csv", &ablation_csv(&rows))?;
    write_json(out, "ablation.json", &rows)?;
    println!(
        "{:<14} {:>9} {:>12} {:>15} {:>14} {:>14}",
        "name", "goal_rate", "mean_cost", "normalized_cost", "min_term_soc", "red_violations"
    );
    for r in &rows {
        println!(
            "{:<14} {:>9.3} {:>12.3} {:>15.2} {:>14.4} {:>14}",
            r.name, r.goal_rate, r.mean_cost, r.normalized_cost, r.min_terminal_soc, r.red_violations
        );
    }
    Ok(())
}

fn report(common: &Common, path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rep: BenchmarkReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    print_report_summaries(&rep);
    if let Err(e) = rep.audit(&cfg.powertrain) {
        bail!("report audit failed: {e}");
    }
    println!("report audit passed ({} rows)", rep.rows.len());
    Ok(())
}
