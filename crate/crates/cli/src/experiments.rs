//! Single runs and the preset comparisons.

use fedpriv_core::aggregation::Strategy;
use fedpriv_core::comms::CommsConfig;
use fedpriv_core::privacy::{per_client_budget, per_round_budget};
use fedpriv_core::simulation::{defense_rate, rounds_to_target, total_bytes, total_bytes_up, AttackMode, RoundReport, Simulation};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::metrics::{Summary, MB};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub seconds: f64,
    pub upload_bytes: u64,
    pub total_bytes: u64,
    pub epsilon_spent: f64,
    /// Mean fraction of clients whose update was aggregated per round.
    pub participation: f64,
    pub defense_rate: Option<f64>,
}

impl RunOutcome {
    /// Highest held-out accuracy seen, including before the first round.
    pub fn best_accuracy(&self) -> f64 {
        self.reports.iter().map(|r| r.accuracy).fold(self.initial_accuracy, f64::max)
    }

    pub fn summary(&self, target: f64) -> Summary {
        Summary {
            rounds: self.reports.len(),
            final_accuracy: self.final_accuracy,
            final_loss: self.final_loss,
            total_mb: self.total_bytes as f64 / MB,
            upload_mb: self.upload_bytes as f64 / MB,
            total_seconds: self.seconds,
            target_accuracy: target,
            rounds_to_target: rounds_to_target(&self.reports, target),
            epsilon_spent: self.epsilon_spent,
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let prepared = cfg.prepare()?;
    let clients = prepared.shards.len();
    let attack = prepared.sim.attack.clone();
    let mut sim = Simulation::new(prepared.sim, prepared.shards, prepared.holdout)?;
    let (initial_accuracy, initial_loss) = sim.evaluate()?;
    let reports = sim.run()?;
    let (final_accuracy, final_loss) = reports.last().map_or((initial_accuracy, initial_loss), |r| (r.accuracy, r.loss));
    let participation = if reports.is_empty() {
        0.0
    } else {
        reports.iter().map(|r| r.received.len() as f64 / clients as f64).sum::<f64>() / reports.len() as f64
    };
    let defense = if attack.active && !attack.malicious_ids.is_empty() { defense_rate(&reports, &attack).ok() } else { None };
    info!("seed {} {}: final accuracy {:.4}", cfg.seed, cfg.aggregator.strategy.name(), final_accuracy);
    Ok(RunOutcome {
        seconds: reports.iter().map(|r| r.seconds).sum(),
        upload_bytes: total_bytes_up(&reports),
        total_bytes: total_bytes(&reports),
        epsilon_spent: reports.iter().map(|r| r.epsilon_spent).sum(),
        initial_accuracy,
        final_accuracy,
        final_loss,
        participation,
        defense_rate: defense,
        reports,
    })
}

/// `run`: one simulation and its summary, with the target defaulting to 0.9
/// of the best accuracy reached.
pub fn run_with_summary(cfg: &ExperimentConfig) -> Result<(RunOutcome, Summary), CliError> {
    let outcome = run_experiment(cfg)?;
    let target = cfg.target_accuracy.unwrap_or(0.9 * outcome.best_accuracy());
    let summary = outcome.summary(target);
    Ok((outcome, summary))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median where `None` ranks above every value; `None` if the median lands there.
pub fn median_rounds(values: &[Option<usize>]) -> Option<f64> {
    let m = median(&values.iter().map(|v| v.map_or(f64::INFINITY, |r| r as f64)).collect::<Vec<_>>());
    m.is_finite().then_some(m)
}

pub fn seed_list(cfg: &ExperimentConfig, seeds: usize) -> Vec<u64> {
    (0..seeds.max(1) as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
}

fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, ..cfg.clone() }
}

/// Runs every (seed, variant) pair; results are indexed `[seed][variant]`.
fn run_grid(variants: &[ExperimentConfig], seeds: &[u64]) -> Result<Vec<Vec<RunOutcome>>, CliError> {
    let jobs: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..variants.len()).map(move |v| (s, v))).collect();
    let results: Vec<RunOutcome> =
        jobs.par_iter().map(|&(s, v)| run_experiment(&with_seed(&variants[v], seeds[s]))).collect::<Result<_, _>>()?;
    let mut grid = vec![Vec::with_capacity(variants.len()); seeds.len()];
    for ((s, _), r) in jobs.into_iter().zip(results) {
        grid[s].push(r);
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatorRow {
    pub strategy: String,
    pub final_accuracy: f64,
    pub rounds_to_target: Option<f64>,
    pub participation: f64,
    pub mb: f64,
}

pub fn compare_aggregators(cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<AggregatorRow>, CliError> {
    let mut strategies = [Strategy::Fedavg, Strategy::Weighted, Strategy::Robust];
    strategies.sort_by_key(|s| s.name());
    let variants: Vec<ExperimentConfig> = strategies
        .iter()
        .map(|&strategy| {
            let mut c = cfg.clone();
            c.aggregator.strategy = strategy;
            c
        })
        .collect();
    let grid = run_grid(&variants, &seed_list(cfg, seeds))?;
    let rtt: Vec<Vec<Option<usize>>> = grid
        .iter()
        .map(|runs| {
            let best = runs.iter().map(RunOutcome::best_accuracy).fold(0.0, f64::max);
            let target = cfg.target_accuracy.unwrap_or(0.9 * best);
            runs.iter().map(|r| rounds_to_target(&r.reports, target)).collect()
        })
        .collect();
    Ok(strategies
        .iter()
        .enumerate()
        .map(|(v, s)| {
            let col = |f: &dyn Fn(&RunOutcome) -> f64| median(&grid.iter().map(|runs| f(&runs[v])).collect::<Vec<_>>());
            AggregatorRow {
                strategy: s.name().to_string(),
                final_accuracy: col(&|r| r.final_accuracy),
                rounds_to_target: median_rounds(&rtt.iter().map(|row| row[v]).collect::<Vec<_>>()),
                participation: col(&|r| r.participation),
                mb: col(&|r| r.total_bytes as f64 / MB),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommsRow {
    pub strategy: String,
    pub upload_mb: f64,
    pub total_mb: f64,
    pub seconds: f64,
    pub delay_reduction_pct: f64,
    pub final_accuracy: f64,
}

/// The four stacks compared, from none to all stages, using the config's
/// `k_fraction`, `quantize_bits` and `clip_percentile` where given.
pub fn comms_variants(base: &CommsConfig) -> Vec<(&'static str, CommsConfig)> {
    let k = base.k_fraction.or(Some(0.1));
    let bits = base.quantize_bits.or(Some(8));
    let pct = base.clip_percentile;
    vec![
        ("none", CommsConfig::dense()),
        ("sparsify", CommsConfig { k_fraction: k, clip_percentile: pct, ..CommsConfig::sparse_only() }),
        ("sparsify+delta", CommsConfig { k_fraction: k, clip_percentile: pct, ..CommsConfig::sparse_delta() }),
        ("all", CommsConfig { k_fraction: k, quantize_bits: bits, clip_percentile: pct, ..CommsConfig::full() }),
    ]
}

pub fn compare_comms(cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<CommsRow>, CliError> {
    let named = comms_variants(&cfg.comms);
    let variants: Vec<ExperimentConfig> = named
        .iter()
        .map(|(_, comms)| ExperimentConfig { comms: comms.clone(), mpc: Default::default(), ..cfg.clone() })
        .collect();
    let grid = run_grid(&variants, &seed_list(cfg, seeds))?;
    let col = |v: usize, f: &dyn Fn(&RunOutcome) -> f64| median(&grid.iter().map(|runs| f(&runs[v])).collect::<Vec<_>>());
    let base_seconds = col(0, &|r| r.seconds);
    Ok(named
        .iter()
        .enumerate()
        .map(|(v, (name, _))| {
            let seconds = col(v, &|r| r.seconds);
            CommsRow {
                strategy: name.to_string(),
                upload_mb: col(v, &|r| r.upload_bytes as f64 / MB),
                total_mb: col(v, &|r| r.total_bytes as f64 / MB),
                seconds,
                delay_reduction_pct: if v == 0 { 0.0 } else { 100.0 * (1.0 - seconds / base_seconds) },
                final_accuracy: col(v, &|r| r.final_accuracy),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRow {
    pub attack: String,
    pub defense: bool,
    /// Empty for the no-attack baseline.
    pub defense_rate: Option<f64>,
    pub final_accuracy: f64,
    /// Median over seeds of (baseline accuracy - attacked accuracy), in points.
    pub accuracy_drop: f64,
}

/// The poisoning variants evaluated, using the configured boost factor.
pub fn attack_variants(cfg: &ExperimentConfig) -> Vec<AttackMode> {
    let factor = match cfg.attack.mode {
        AttackMode::NormBoost { factor } => factor,
        _ => 10.0,
    };
    vec![AttackMode::SignFlip {}, AttackMode::NormBoost { factor }, AttackMode::LabelFlip {}]
}

/// Every variant with and without the robust pipeline; "without" means plain
/// FedAvg. Accuracy drops are measured against the no-attack run of the same
/// pipeline.
pub fn attack_eval(cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<AttackRow>, CliError> {
    let malicious = if cfg.attack.malicious > 0 { cfg.attack.malicious } else { (cfg.clients / 5).max(1) as u32 };
    let modes = attack_variants(cfg);
    let mut labels: Vec<(String, bool)> = Vec::new();
    let mut variants = Vec::new();
    for defense in [true, false] {
        let mut base = cfg.clone();
        base.aggregator.strategy = if defense { Strategy::Robust } else { Strategy::Fedavg };
        base.attack.enabled = false;
        labels.push(("none".into(), defense));
        variants.push(base.clone());
        for &mode in &modes {
            let mut c = base.clone();
            c.attack.enabled = true;
            c.attack.mode = mode;
            c.attack.malicious = malicious;
            labels.push((mode.name().into(), defense));
            variants.push(c);
        }
    }
    let grid = run_grid(&variants, &seed_list(cfg, seeds))?;
    let per_block = modes.len() + 1;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(v, (attack, defense))| {
            let baseline = v - v % per_block;
            let accs: Vec<f64> = grid.iter().map(|runs| runs[v].final_accuracy).collect();
            let drops: Vec<f64> =
                grid.iter().map(|runs| 100.0 * (runs[baseline].final_accuracy - runs[v].final_accuracy)).collect();
            let rates: Vec<f64> = grid.iter().filter_map(|runs| runs[v].defense_rate).collect();
            AttackRow {
                attack: attack.clone(),
                defense: *defense,
                defense_rate: if v == baseline || rates.is_empty() { None } else { Some(median(&rates)) },
                final_accuracy: median(&accs),
                accuracy_drop: median(&drops),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub client: usize,
    pub samples: f64,
    pub contribution: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetPlan {
    pub epsilon_total: f64,
    pub rounds: usize,
    pub per_round: f64,
    pub denominator: f64,
    pub clients: Vec<BudgetRow>,
    /// Sum of the per-client allocations in one round.
    pub round_sum: f64,
}

/// Per-round split of the total, then per-client shares of a round.
/// `denominator` defaults to the sum of `samples * contribution`.
pub fn budget_plan(epsilon_total: f64, rounds: usize, clients: &[(f64, f64)], denominator: Option<f64>) -> Result<BudgetPlan, CliError> {
    let per_round = per_round_budget(epsilon_total, rounds)?;
    let denom = denominator.unwrap_or_else(|| clients.iter().map(|(n, g)| n * g).sum());
    let rows = clients
        .iter()
        .enumerate()
        .map(|(i, &(n, g))| Ok(BudgetRow { client: i, samples: n, contribution: g, epsilon: per_client_budget(per_round, n, g, denom)? }))
        .collect::<Result<Vec<_>, fedpriv_core::Error>>()?;
    let round_sum = rows.iter().map(|r| r.epsilon).sum();
    Ok(BudgetPlan { epsilon_total, rounds, per_round, denominator: denom, clients: rows, round_sum })
}
