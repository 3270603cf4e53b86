use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swipt_pomdp::control::{full_solve, Policy, Schedule};
use swipt_pomdp::harness::baselines::{hsvi_config, system_spec};
use swipt_pomdp::harness::checks::invariant_suite;
use swipt_pomdp::harness::episode::{constraint_spec, monte_carlo, traces};
use swipt_pomdp::harness::{io, sweep_antennas, sweep_power, Calibration, HarnessError, PolicyKind, ScenarioConfig};

/// Constrained POMDP control for full-duplex SWIPT MIMO links.
#[derive(Parser)]
#[command(name = "swipt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Target gap of every point-based solve.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the constrained problem; writes the policy and the solver log.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Plain-text dump of each solve's lower-bound vectors.
        #[arg(long)]
        alphas: Option<PathBuf>,
    },
    /// Monte Carlo evaluation of a policy file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        policy: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Delay versus uplink power budget for each configured policy.
    SweepPower {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Effective power versus array size, with and without antenna selection.
    SweepAntennas {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the invariant suite on a scenario.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Config(String),
    Budget(String),
    Other(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

fn load(c: &Common) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::load(&c.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(e) = c.episodes {
        cfg.run.episodes = e;
    }
    if let Some(h) = c.horizon {
        cfg.run.horizon = h;
    }
    if let Some(e) = c.eps {
        cfg.solver.eps = e;
    }
    cfg.validate().map_err(|e| Failure::Config(format!("{}: {e}", c.config.display())))?;
    Ok(cfg)
}

fn solve(cfg: &ScenarioConfig, out: &Path, log: Option<&Path>, alphas: Option<&Path>) -> Result<(), Failure> {
    let cal = Calibration::run(cfg);
    let spec = system_spec(cfg, &cal);
    let limits = constraint_spec(cfg);
    let hash = cfg.hash();
    let tr = traces(cfg, cfg.run.seed, cfg.run.episodes, cfg.run.horizon);
    let measure = |p: &Policy| {
        let p = Policy { scenario_hash: hash.clone(), ..p.clone() };
        swipt_pomdp::harness::episode::monte_carlo_on(cfg, &cal, &p, &tr, cfg.run.seed).expect("solver policies are admissible").metrics()
    };
    let schedule = Schedule { step0: cfg.constraints.step0, rounds: cfg.constraints.rounds, tol: 0.0 };
    let r = full_solve(&spec, &limits, &vec![1.0; cfg.dims.k], &schedule, &hsvi_config(cfg), &measure).map_err(|e| Failure::Other(e.to_string()))?;
    let policy = Policy { scenario_hash: hash.clone(), ..r.policy };
    io::write_json(out, &policy)?;
    let names: Vec<String> = (0..r.results.len()).map(|i| if i < cfg.dims.k { format!("power user {i}") } else { "mask".into() }).collect();
    if let Some(path) = log {
        let mut text = io::solver_log(&hash, &names.iter().cloned().zip(r.results.iter()).collect::<Vec<_>>());
        for step in &r.trace {
            text.push_str(&format!("# multipliers {}\n", serde_json::to_string(step).expect("step serializes")));
        }
        io::write_text(path, &text)?;
    }
    if let Some(path) = alphas {
        let mut text = io::header(&hash);
        for (name, res) in names.iter().zip(&r.results) {
            text.push_str(&format!("# solve {name}\n"));
            text.push_str(&res.bounds.lower.dump());
        }
        io::write_text(path, &text)?;
    }
    if let Some(d) = r.diagnostic {
        return Err(Failure::Budget(d));
    }
    if !r.converged {
        return Err(Failure::Budget("a solve stopped on its iteration or time budget before reaching eps".into()));
    }
    Ok(())
}

fn evaluate(cfg: &ScenarioConfig, policy: &Path, out: &Path) -> Result<(), Failure> {
    let p: Policy = io::read_json(policy)?;
    let cal = Calibration::run(cfg);
    let mut r = monte_carlo(cfg, &cal, &p, cfg.run.episodes, cfg.run.horizon, cfg.run.seed)?;
    r.solver_log = policy.file_name().map(|n| n.to_string_lossy().into_owned());
    io::write_json(out, &r)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve { common, out, log, alphas } => solve(&load(&common)?, &out, log.as_deref(), alphas.as_deref()),
        Command::Evaluate { common, policy, out } => evaluate(&load(&common)?, &policy, &out),
        Command::SweepPower { common, out } => {
            let cfg = load(&common)?;
            let kinds = cfg.sweep.policies.iter().map(|p| p.parse()).collect::<Result<Vec<PolicyKind>, _>>()?;
            let s = sweep_power(&cfg, &cfg.sweep.budgets_w, &kinds, cfg.run.episodes, cfg.run.horizon, cfg.run.seed)?;
            io::write_csv(&out, &cfg.hash(), &s.rows)?;
            if s.unconverged > 0 {
                return Err(Failure::Budget(format!("{} solves stopped before reaching eps", s.unconverged)));
            }
            Ok(())
        }
        Command::SweepAntennas { common, out } => {
            let cfg = load(&common)?;
            let rows = sweep_antennas(&cfg, &cfg.sweep.antennas, cfg.run.episodes, cfg.sweep.antenna_horizon, cfg.run.seed)?;
            io::write_csv(&out, &cfg.hash(), &rows)?;
            Ok(())
        }
        Command::Validate { common } => {
            let cfg = load(&common)?;
            let checks = invariant_suite(&cfg);
            for c in &checks {
                println!("{} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.ok) {
                Ok(())
            } else {
                Err(Failure::Other("invariant suite failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Budget(m)) => {
            eprintln!("solver budget exhausted: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
