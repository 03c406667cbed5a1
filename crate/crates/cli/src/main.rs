use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tss_koopman::benchmark::Variant;
use tss_koopman::experiments::{self, tag_csv, ExperimentConfig, StageError};
use tss_koopman::io::{self, PolicyFile};
use tss_koopman::lqr::solve_bellman;
use tss_koopman::ocp::{self, Actuation, Controller, StudyModel};
use tss_koopman::training::{self, Dataset};
use tss_koopman::Error;

/// Koopman models for time-scale-separated systems with hierarchical control.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Benchmark configuration.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Tss,
    Hier,
    Comb,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tss => Variant::TssOnly,
            VariantArg::Hier => Variant::HierOnly,
            VariantArg::Comb => Variant::Combined,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActuationArg {
    Pi,
    Lqr,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the benchmark from random initial conditions and write `trajectories.csv`.
    Simulate {
        /// Number of trajectories.
        #[arg(long, default_value_t = 1)]
        n_traj: usize,
        /// Slow steps per trajectory.
        #[arg(long, default_value_t = 100)]
        n_slow: usize,
    },
    /// Generate the one-step training dataset and write `dataset.csv` with its sidecar.
    GenData {
        /// Number of trajectories (default: from the config).
        #[arg(long)]
        n_traj: Option<usize>,
    },
    /// Train a model and write `model.bin` and `train_log.csv`.
    Train {
        /// Dataset CSV written by `gen-data`; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epoch count override.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stability measures of a trained model's slow or fast maps; writes `stability_table.csv`.
    Stability {
        #[arg(long)]
        model: PathBuf,
        /// Include the LQR closed loop from this policy.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Solve the LQR policy of a hierarchical or combined model; writes `policy.bin`.
    LqrSolve {
        #[arg(long)]
        model: PathBuf,
        /// Ridge weight on the nonlinear actuator observables (default: from the config).
        #[arg(long)]
        ridge: Option<f64>,
    },
    /// Solve the supervisory control problem for one study start; writes `ocp.csv` and `ocp.json`.
    Ocp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Index of the study start supplying the initial condition.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, value_enum, default_value_t = ActuationArg::Pi)]
        actuation: ActuationArg,
    },
    /// Run the LQR-versus-PI policy study; writes `policy_study.csv` and `study_summary.json`.
    Study {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Number of random starts (default: from the config).
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Run the whole pipeline and write the report bundle. Exits 1 when an
    /// acceptance assertion fails and 2 when a stage fails.
    Reproduce,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = cli.variant {
        cfg.variant = v.into();
        if let Some(sys) = &mut cfg.system {
            sys.variant = cfg.variant;
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_tagged(cfg: &ExperimentConfig, name: &str, csv: &str) -> Result<PathBuf, Error> {
    let path = cfg.out_dir.join(name);
    io::write_bytes(&path, tag_csv(csv, &cfg.hash_hex(), cfg.seed).as_bytes())?;
    Ok(path)
}

fn write_json<T: serde::Serialize>(cfg: &ExperimentConfig, name: &str, value: &T) -> Result<PathBuf, Error> {
    let path = cfg.out_dir.join(name);
    let doc = serde_json::json!({
        "config_hash": cfg.hash_hex(),
        "seed": cfg.seed,
        "result": value,
    });
    io::write_bytes(&path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    Ok(path)
}

fn load_pair(model: &Path, policy: &Path) -> Result<(tss_koopman::koopman::KoopmanModel, PolicyFile), Error> {
    let (model, _) = io::load_model(model)?;
    let policy = io::load_policy(policy)?;
    if policy.model_hash != model.hash_hex() {
        return Err(Error::Format("policy was solved for a different model".into()));
    }
    Ok((model, policy))
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let sys = cfg.system_config();
    let grid = cfg.dataset.grid;
    let done = |path: PathBuf| println!("wrote {}", path.display());
    match &cli.command {
        Command::Simulate { n_traj, n_slow } => {
            let seed = cfg.stream_seed("simulate");
            let (trajectories, resampled) = training::simulate_batch(&sys, &grid, *n_traj, *n_slow, seed)?;
            let data = Dataset { system: sys, grid, seed, trajectories, resampled };
            let path = cfg.out_dir.join("trajectories.csv");
            io::save_dataset(&path, &data, Some(cfg.hash_hex()))?;
            done(path);
        }
        Command::GenData { n_traj } => {
            let n = n_traj.unwrap_or(cfg.dataset.n_traj);
            let data = training::generate_dataset(&sys, &grid, n, cfg.stream_seed("data"))?;
            let path = cfg.out_dir.join("dataset.csv");
            io::save_dataset(&path, &data, Some(cfg.hash_hex()))?;
            println!("{} trajectories, {} resampled", data.len(), data.resampled);
            done(path);
        }
        Command::Train { data, epochs } => {
            let data = match data {
                Some(path) => io::load_dataset(path)?,
                None => training::generate_dataset(&sys, &grid, cfg.dataset.n_traj, cfg.stream_seed("data"))?,
            };
            let mut tc = cfg.train.clone();
            tc.seed = cfg.stream_seed("train");
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let out = training::train(&data, &tc)?;
            let path = cfg.out_dir.join(experiments::MODEL_FILE);
            io::save_model(&path, &out.model, Some(tc.seed))?;
            println!("best epoch {}", out.best_epoch);
            done(path);
            done(write_tagged(&cfg, experiments::TRAIN_LOG_FILE, &out.log.to_csv())?);
        }
        Command::Stability { model, policy } => {
            let (model, _) = io::load_model(model)?;
            let policy = policy.as_deref().map(io::load_policy).transpose()?;
            let reports = experiments::analyze_model(&model, policy.as_ref().map(|p| &p.policy), &cfg.stability)?;
            print!("{}", tss_koopman::stability::render_table(&reports));
            done(write_tagged(&cfg, experiments::STABILITY_FILE, &experiments::stability_csv(&reports))?);
        }
        Command::LqrSolve { model, ridge } => {
            let (model, _) = io::load_model(model)?;
            let cost = training::lqr_cost(model.dims(), ridge.unwrap_or(cfg.train.lqr_ridge), grid.tau());
            let policy = solve_bellman(&model.blocks, &cost)?;
            println!("converged in {} iterations", policy.iterations);
            let file = PolicyFile {
                policy,
                dims: model.dims(),
                model_hash: model.hash_hex(),
                cost_hash: cost.hash_hex(),
            };
            let path = cfg.out_dir.join(experiments::POLICY_FILE);
            io::save_policy(&path, &file)?;
            done(path);
        }
        Command::Ocp { model, policy, start, actuation } => {
            let (model, pf) = load_pair(model, policy)?;
            let (limit_pi, limit_lqr) = experiments::limits(&model, Some(&pf.policy))?;
            let sm = StudyModel {
                model: &model,
                policy: &pf.policy,
                limit_pi: limit_pi.as_ref(),
                limit_lqr: limit_lqr.as_ref(),
            };
            let (actuation, controller) = match actuation {
                ActuationArg::Pi => (Actuation::Pi, Controller::Pi),
                ActuationArg::Lqr => (Actuation::Lqr, Controller::Lqr { model: &model, policy: &pf.policy }),
            };
            let initial = ocp::study_start(model.variant(), cfg.stream_seed("study"), *start);
            let spec = ocp::study_spec(&sm, &initial, &grid, &cfg.study, actuation);
            let sol = ocp::solve_ocp(&spec, &ocp::study_plant(&sm, &grid, actuation)?)?;
            let u: Vec<f64> = sol.u.iter().map(|v| v[0]).collect();
            let realized = ocp::evaluate_policy(&u, &initial, &sys, &grid, controller)?;
            let mut csv = String::from("step,u\n");
            for (k, v) in u.iter().enumerate() {
                csv.push_str(&format!("{k},{v}\n"));
            }
            println!("predicted cost {:.6}, realized cost {:.6}", sol.cost, realized.cost);
            done(write_tagged(&cfg, "ocp.csv", &csv)?);
            let report = serde_json::json!({
                "initial": initial,
                "actuation": actuation.name(),
                "predicted_cost": sol.cost,
                "objective": sol.objective,
                "max_x_violation": sol.max_x_violation,
                "iterations": sol.iterations,
                "kkt_residual": sol.kkt_residual,
                "warning": sol.warning,
                "realized": realized,
            });
            done(write_json(&cfg, "ocp.json", &report)?);
        }
        Command::Study { model, policy, starts } => {
            let (model, pf) = load_pair(model, policy)?;
            let (limit_pi, limit_lqr) = experiments::limits(&model, Some(&pf.policy))?;
            let sm = StudyModel {
                model: &model,
                policy: &pf.policy,
                limit_pi: limit_pi.as_ref(),
                limit_lqr: limit_lqr.as_ref(),
            };
            let mut sc = cfg.study.clone();
            if let Some(n) = starts {
                sc.n_starts = *n;
            }
            let report = ocp::run_policy_study(&sm, &sys, &grid, &sc, cfg.stream_seed("study"))?;
            println!(
                "{} starts, {} failures, median LQR-over-PI improvement {:.4}",
                report.starts.len(),
                report.failures,
                report.lqr_improvement.median
            );
            done(write_tagged(&cfg, experiments::STUDY_FILE, &report.to_csv())?);
            let summary = serde_json::json!({
                "failures": report.failures,
                "lqr_improvement": report.lqr_improvement,
                "lqr_vs_pi": report.lqr_vs_pi,
                "pi_gap": report.pi_gap,
                "lqr_gap": report.lqr_gap,
                "pi_over_constant": report.pi_over_constant,
                "lqr_over_constant": report.lqr_over_constant,
                "median_pi_seconds": report.median_pi_seconds,
                "median_lqr_seconds": report.median_lqr_seconds,
            });
            done(write_json(&cfg, "study_summary.json", &summary)?);
        }
        Command::Reproduce => {
            return match experiments::cmd_reproduce(&cfg) {
                Ok(r) => {
                    for a in &r.summary.assertions {
                        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
                    }
                    for f in r.files {
                        done(f);
                    }
                    Ok(if r.summary.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
                }
                Err(StageError { stage, error }) => {
                    eprintln!("error: stage `{stage}` failed: {error}");
                    Ok(ExitCode::from(2))
                }
            };
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
