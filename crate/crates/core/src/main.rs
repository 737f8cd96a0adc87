use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twinsync::harness::experiments::{run_budget_sweep, run_consumption, run_convergence, run_device_scaling};
use twinsync::harness::oracles::{brute_force_cmdp, random_cmdp, separating_cmdp, tabular_soft_policy_iteration, TabularMdp};
use twinsync::harness::ExperimentConfig;
use twinsync::Result;

#[derive(Parser)]
#[command(name = "twinsync", version, about = "Digital-twin synchronization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seed {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(s) = self.slots {
            cfg.slots_per_episode = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// MTR-SAC vs. plain SAC under the budget schedule.
    Convergence(Common),
    /// CRL, interval DP and polling across budgets.
    BudgetSweep(Common),
    /// CRL, interval DP and polling across fleet sizes.
    DeviceScaling(Common),
    /// Per-slot RB consumption of trained policies.
    Consumption(Common),
    /// Primal/dual check of the state-wise constrained problem on random tiny CMDPs.
    OracleCmdp(Common),
    /// Soft policy iteration on random 3-state MDPs.
    OracleSpi(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convergence(c) => {
            let cfg = c.load()?;
            let r = run_convergence(&cfg)?;
            for run in &r.runs {
                println!(
                    "seed {} {:8} recovery {:3} episodes, post-change variance {:.3e}",
                    run.seed,
                    run.variant,
                    run.total_recovery(),
                    run.post_change_variance()
                );
            }
        }
        Command::BudgetSweep(c) => {
            let cfg = c.load()?;
            let r = run_budget_sweep(&cfg, &cfg.sweep_budgets)?;
            for s in &r.summary {
                println!(
                    "M={:3} {:8} mismatch {:.5} ± {:.5}  nrmse {:.4}  rb {:.2}  violations {:.3}",
                    s.budget, s.scheduler, s.weighted_mismatch.0, s.weighted_mismatch.1, s.nrmse.0, s.rb_mean, s.violation_rate
                );
            }
        }
        Command::DeviceScaling(c) => {
            let cfg = c.load()?;
            let r = run_device_scaling(&cfg, &cfg.device_counts, cfg.scaling_budget)?;
            for s in &r.summary {
                println!(
                    "N={:3} {:8} mismatch {:.5} ± {:.5}  nrmse {:.4}",
                    s.n_devices, s.scheduler, s.weighted_mismatch.0, s.weighted_mismatch.1, s.nrmse.0
                );
            }
        }
        Command::Consumption(c) => {
            let cfg = c.load()?;
            let r = run_consumption(&cfg, &cfg.consumption_budgets)?;
            for b in &r.budgets {
                println!(
                    "M={:3} mean {:.2} std {:.2} violation rates {:?}",
                    b.budget, b.mean, b.std, b.violation_rates
                );
            }
        }
        Command::OracleCmdp(c) => {
            let cfg = c.load()?;
            for &seed in &cfg.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_cmdp(&mut rng, 4, 3, 0.99)?;
                let s = brute_force_cmdp(&m)?;
                println!(
                    "seed {seed}: primal {:.9} dual {:.9} gap {:.2e}",
                    s.primal_value,
                    s.dual_value,
                    s.duality_gap()
                );
            }
            let s = brute_force_cmdp(&separating_cmdp())?;
            println!(
                "separating instance: best state-wise {:?}, best expectation-wise {:?}",
                s.best_statewise.map(|i| &s.policies[i].policy),
                s.best_expectation.map(|i| &s.policies[i].policy)
            );
        }
        Command::OracleSpi(c) => {
            let cfg = c.load()?;
            for &seed in &cfg.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mdp = TabularMdp::random(&mut rng, 3, 2, 0.9);
                let t = tabular_soft_policy_iteration(&mdp, 0.5, 200, 1e-10)?;
                println!(
                    "seed {seed}: {} iterates, converged {}, min Q improvement {:.3e}",
                    t.q.len(),
                    t.converged,
                    t.min_improvement()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
