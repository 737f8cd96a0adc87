//! Drivers for the four study designs. Each is a pure function of the
//! configuration and seeds; files are written under `cfg.out_dir`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{histogram, mean_stderr, metrics, pool, rollout, EvalMetrics};
use super::{mix_seed, ExperimentConfig, Scenario, STREAM_AGENT, STREAM_CALIBRATE, STREAM_EVAL, STREAM_TRAIN};
use crate::agent::{ActMode, Agent, AgentConfig, BudgetSchedule, TrainingReport};
use crate::baselines::{fixed_interval_schedule, FixedInterval, Polling, PolicyScheduler, Scheduler};
use crate::error::{invalid, Result};

pub const CRL: &str = "crl";
pub const DP: &str = "dp";
pub const POLLING: &str = "polling";

/// Trains a scheduler on fresh traces each episode.
pub fn train_agent(
    scenario: &Scenario,
    agent_cfg: &AgentConfig,
    seed: u64,
    episodes: usize,
    slots: usize,
    schedule: &BudgetSchedule,
) -> Result<(Agent, TrainingReport)> {
    let mut agent = Agent::new(scenario.n_devices(), agent_cfg.clone(), mix_seed(seed, STREAM_AGENT, 0))?;
    let first = schedule.budget_at(0).ok_or_else(|| invalid("empty budget schedule"))?;
    let report = agent.train(
        |ep| scenario.env(mix_seed(seed, STREAM_TRAIN, ep as u64), slots, first),
        episodes,
        schedule,
    )?;
    Ok((agent, report))
}

/// Held-out evaluation: `episodes` fresh traces of `slots` steps.
/// Returns pooled metrics and every slot's RB consumption.
pub fn evaluate<S: Scheduler + ?Sized>(
    scenario: &Scenario,
    scheduler: &mut S,
    seed: u64,
    budget: u32,
    episodes: usize,
    slots: usize,
) -> Result<(EvalMetrics, Vec<u32>)> {
    let w: Vec<f64> = scenario.profiles.iter().map(|p| p.priority_w).collect();
    let mut all = Vec::new();
    let mut rb = Vec::new();
    for k in 0..episodes as u64 {
        let mut env = scenario.env(mix_seed(seed, STREAM_EVAL, k), slots, budget)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_EVAL, 1_000_000 + k));
        let r = rollout(&mut env, scheduler, &mut rng)?;
        all.push(metrics(&r, &w, budget)?);
        rb.extend_from_slice(&r.rb_used);
    }
    Ok((pool(&all), rb))
}

/// Polling and interval-planned baselines for one scenario and budget.
pub fn baselines(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64, budget: u32) -> Result<(Polling, FixedInterval)> {
    let change = scenario.change_stats(mix_seed(seed, STREAM_CALIBRATE, 0), cfg.calibration_slots)?;
    let plan = fixed_interval_schedule(&scenario.profiles, budget, &change, &cfg.period_candidates)?;
    Ok((
        Polling::new(scenario.profiles.clone()),
        FixedInterval::new(scenario.profiles.clone(), plan, &change)?,
    ))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = BufWriter::new(File::create(dir.join(name))?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_path(dir.join(name))?)
}

// ---------------------------------------------------------------- convergence

/// Reward statistics of one budget stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub start: usize,
    pub end: usize,
    pub budget: u32,
    /// Mean reward over the last quarter of the stage (at least 3 episodes).
    pub plateau: f64,
    /// Episodes after the change until the 3-episode trailing mean reward is
    /// within 10% of the plateau; `None` if that never happens.
    pub recovery_episodes: Option<usize>,
    /// Sample variance of episode rewards over the stage.
    pub reward_variance: f64,
}

/// Splits a reward curve at the schedule's change points.
pub fn stage_stats(rewards: &[f64], schedule: &BudgetSchedule) -> Vec<StageStats> {
    let n = rewards.len();
    let mut bounds: Vec<(usize, u32)> = schedule.0.iter().copied().filter(|&(e, _)| e < n).collect();
    if bounds.is_empty() {
        return Vec::new();
    }
    bounds.push((n, 0));
    bounds
        .windows(2)
        .map(|w| {
            let (start, budget) = w[0];
            let end = w[1].0;
            let r = &rewards[start..end];
            let q = (r.len() / 4).max(3).min(r.len());
            let plateau = r[r.len() - q..].iter().sum::<f64>() / q as f64;
            let target = if plateau < 0.0 { plateau / 0.9 } else { 0.9 * plateau };
            let recovery_episodes = (0..r.len()).find(|&i| {
                let lo = i.saturating_sub(2);
                let trailing = r[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64;
                trailing >= target
            });
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let reward_variance = if r.len() > 1 {
                r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64
            } else {
                0.0
            };
            StageStats {
                start,
                end,
                budget,
                plateau,
                recovery_episodes,
                reward_variance,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRun {
    pub seed: u64,
    pub variant: String,
    pub training: TrainingReport,
    pub stages: Vec<StageStats>,
}

impl ConvergenceRun {
    /// Recovery episodes summed over the post-change stages, counting a
    /// stage that never recovers as its full length.
    pub fn total_recovery(&self) -> usize {
        self.stages
            .iter()
            .skip(1)
            .map(|s| s.recovery_episodes.unwrap_or(s.end - s.start))
            .sum()
    }

    /// Mean reward variance over the post-change stages.
    pub fn post_change_variance(&self) -> f64 {
        let post: Vec<f64> = self.stages.iter().skip(1).map(|s| s.reward_variance).collect();
        if post.is_empty() {
            0.0
        } else {
            post.iter().sum::<f64>() / post.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub runs: Vec<ConvergenceRun>,
}

/// Trains the MTR variant and the plain-SAC ablation under the budget
/// schedule; writes `report.json` and `curves.csv`.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let variants = [("mtr_sac", cfg.agent.clone()), ("sac", cfg.agent.without_mtr())];
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let scenario = Scenario::build(&cfg.fleet, &cfg.traces, &cfg.channel, seed)?;
        for (name, agent_cfg) in &variants {
            let (_, training) = train_agent(
                &scenario,
                agent_cfg,
                seed,
                cfg.episodes,
                cfg.slots_per_episode,
                &cfg.budget_schedule,
            )?;
            for &e in &training.budget_changes {
                log::info!("{name} seed {seed}: budget change applied at episode {e}");
            }
            let stages = stage_stats(&training.rewards(), &cfg.budget_schedule);
            runs.push(ConvergenceRun {
                seed,
                variant: name.to_string(),
                training,
                stages,
            });
        }
    }
    let report = ConvergenceReport {
        experiment: "convergence".into(),
        config: cfg.clone(),
        runs,
    };
    write_json(&cfg.out_dir, "report.json", &report)?;
    let mut header = true;
    let mut buf = Vec::new();
    for run in &report.runs {
        run.training.write_csv(&mut buf, &run.variant, run.seed, header)?;
        header = false;
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("curves.csv"), buf)?;
    Ok(report)
}

// ---------------------------------------------------------------- sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_devices: usize,
    pub budget: u32,
    pub scheduler: String,
    pub seed: u64,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_devices: usize,
    pub budget: u32,
    pub scheduler: String,
    pub weighted_mismatch: (f64, f64),
    pub nrmse: (f64, f64),
    pub rb_mean: f64,
    pub violation_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
    /// Mean and standard error over seeds per (N, M, scheduler).
    pub summary: Vec<SweepSummary>,
}

impl SweepReport {
    pub fn summary_for(&self, n_devices: usize, budget: u32, scheduler: &str) -> Option<&SweepSummary> {
        self.summary
            .iter()
            .find(|s| s.n_devices == n_devices && s.budget == budget && s.scheduler == scheduler)
    }
}

fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<(usize, u32, String), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.n_devices, r.budget, r.scheduler.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((n_devices, budget, scheduler), rs)| {
            let wm: Vec<f64> = rs.iter().map(|r| r.metrics.weighted_mismatch).collect();
            let nr: Vec<f64> = rs.iter().map(|r| r.metrics.nrmse).collect();
            let k = rs.len() as f64;
            SweepSummary {
                n_devices,
                budget,
                scheduler,
                weighted_mismatch: mean_stderr(&wm),
                nrmse: mean_stderr(&nr),
                rb_mean: rs.iter().map(|r| r.metrics.rb_mean).sum::<f64>() / k,
                violation_rate: rs.iter().map(|r| r.metrics.violation_rate).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Evaluates the three schedulers on one scenario at budget `m`.
fn compare_at(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64, m: u32) -> Result<Vec<SweepRow>> {
    let (agent, _) = train_agent(
        scenario,
        &cfg.agent,
        seed,
        cfg.episodes,
        cfg.slots_per_episode,
        &BudgetSchedule::constant(m),
    )?;
    let (mut polling, mut dp) = baselines(cfg, scenario, seed, m)?;
    let mut crl = PolicyScheduler::new(agent.nets.clone(), ActMode::Greedy, mix_seed(seed, STREAM_EVAL, 7));
    let mut rows = Vec::new();
    let n = scenario.n_devices();
    for (name, sched) in [
        (CRL, &mut crl as &mut dyn Scheduler),
        (DP, &mut dp as &mut dyn Scheduler),
        (POLLING, &mut polling as &mut dyn Scheduler),
    ] {
        let (metrics, _) = evaluate(scenario, sched, seed, m, cfg.eval_episodes, cfg.eval_slots)?;
        rows.push(SweepRow {
            n_devices: n,
            budget: m,
            scheduler: name.into(),
            seed,
            metrics,
        });
    }
    Ok(rows)
}

/// Budget sweep on the default fleet; writes `report.json` and `sweep.csv`.
pub fn run_budget_sweep(cfg: &ExperimentConfig, budgets: &[u32]) -> Result<SweepReport> {
    cfg.validate()?;
    if budgets.is_empty() {
        return Err(invalid("no budgets to sweep"));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let scenario = Scenario::build(&cfg.fleet, &cfg.traces, &cfg.channel, seed)?;
        for &m in budgets {
            rows.extend(compare_at(cfg, &scenario, seed, m)?);
        }
    }
    let report = SweepReport {
        experiment: "budget-sweep".into(),
        config: cfg.clone(),
        summary: summarize(&rows),
        rows,
    };
    write_json(&cfg.out_dir, "report.json", &report)?;
    let mut w = csv_writer(&cfg.out_dir, "sweep.csv")?;
    w.write_record(["M", "scheduler", "seed", "weighted_mismatch", "nrmse", "rb_mean"])?;
    for r in &report.rows {
        w.write_record([
            r.budget.to_string(),
            r.scheduler.clone(),
            r.seed.to_string(),
            r.metrics.weighted_mismatch.to_string(),
            r.metrics.nrmse.to_string(),
            r.metrics.rb_mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(report)
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Fleet-size sweep at a fixed budget with one RB per device; writes
/// `report.json` and `scaling.csv`.
pub fn run_device_scaling(cfg: &ExperimentConfig, counts: &[usize], budget: u32) -> Result<SweepReport> {
    cfg.validate()?;
    if counts.is_empty() || counts.contains(&0) {
        return Err(invalid("device counts must be positive"));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &n in counts {
            let fleet = cfg.fleet.scaled(n);
            let scenario = Scenario::build(&fleet, &cfg.traces, &cfg.channel, seed)?;
            rows.extend(compare_at(cfg, &scenario, seed, budget)?);
        }
    }
    let report = SweepReport {
        experiment: "device-scaling".into(),
        config: cfg.clone(),
        summary: summarize(&rows),
        rows,
    };
    write_json(&cfg.out_dir, "report.json", &report)?;
    let mut w = csv_writer(&cfg.out_dir, "scaling.csv")?;
    w.write_record(["N", "M", "scheduler", "seed", "weighted_mismatch", "nrmse", "rb_mean"])?;
    for r in &report.rows {
        w.write_record([
            r.n_devices.to_string(),
            r.budget.to_string(),
            r.scheduler.clone(),
            r.seed.to_string(),
            r.metrics.weighted_mismatch.to_string(),
            r.metrics.nrmse.to_string(),
            r.metrics.rb_mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(report)
}

// ---------------------------------------------------------------- consumption

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionStats {
    pub budget: u32,
    /// Per-seed violation rates `P(b^T u > M)`.
    pub violation_rates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Pooled over seeds.
    pub histogram: BTreeMap<u32, usize>,
    pub training: Vec<TrainingReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub budgets: Vec<ConsumptionStats>,
}

/// Trains at each budget and records greedy per-slot RB consumption on
/// held-out traces; writes `report.json` and `hist.csv`.
pub fn run_consumption(cfg: &ExperimentConfig, budgets: &[u32]) -> Result<ConsumptionReport> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &m in budgets {
        let mut rates = Vec::new();
        let mut all = Vec::new();
        let mut training = Vec::new();
        for &seed in &cfg.seeds {
            let scenario = Scenario::build(&cfg.fleet, &cfg.traces, &cfg.channel, seed)?;
            let (agent, report) = train_agent(
                &scenario,
                &cfg.agent,
                seed,
                cfg.episodes,
                cfg.slots_per_episode,
                &BudgetSchedule::constant(m),
            )?;
            let mut crl = PolicyScheduler::new(agent.nets.clone(), ActMode::Greedy, mix_seed(seed, STREAM_EVAL, 7));
            let (metrics, rb) = evaluate(&scenario, &mut crl, seed, m, cfg.eval_episodes, cfg.eval_slots)?;
            rates.push(metrics.violation_rate);
            all.extend(rb);
            training.push(report);
        }
        let t = all.len() as f64;
        let mean = all.iter().map(|&x| x as f64).sum::<f64>() / t;
        let std = (all.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / t).sqrt();
        out.push(ConsumptionStats {
            budget: m,
            violation_rates: rates,
            mean,
            std,
            histogram: histogram(&all),
            training,
        });
    }
    let report = ConsumptionReport {
        experiment: "consumption".into(),
        config: cfg.clone(),
        budgets: out,
    };
    write_json(&cfg.out_dir, "report.json", &report)?;
    let mut w = csv_writer(&cfg.out_dir, "hist.csv")?;
    w.write_record(["M", "rb_used", "count"])?;
    for b in &report.budgets {
        for (rb, count) in &b.histogram {
            w.write_record([b.budget.to_string(), rb.to_string(), count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(report)
}
