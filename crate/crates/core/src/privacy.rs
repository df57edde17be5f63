//! Gaussian mechanism, hierarchical budget allocation and the
//! privacy/utility grid search.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ClientId, ParamVector};
use crate::rng::rng_from_seed;

pub const DEFAULT_DELTA: f64 = 1e-5;

/// Noise parameters of the classical Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(epsilon: f64, delta: f64, sensitivity: f64) -> Result<NoiseSpec> {
        let sigma = calibrate_sigma(epsilon, delta, sensitivity)?;
        Ok(NoiseSpec { epsilon, delta, sensitivity, sigma })
    }
}

/// `sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`
pub fn calibrate_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(invalid(format!("sensitivity must be non-negative, got {sensitivity}")));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate.
pub fn add_gaussian_noise(delta_theta: &ParamVector, sigma: f64, seed: u64) -> Result<ParamVector> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if !delta_theta.is_finite() {
        return Err(Error::NonFinite("update to be noised"));
    }
    if sigma == 0.0 {
        return Ok(delta_theta.clone());
    }
    let mut rng = rng_from_seed(seed);
    let values = delta_theta
        .values()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    delta_theta.with_values(values)
}

/// Even split of the total budget across `rounds`.
pub fn per_round_budget(epsilon_total: f64, rounds: usize) -> Result<f64> {
    if rounds == 0 {
        return Err(invalid("round count must be at least 1"));
    }
    if !(epsilon_total > 0.0 && epsilon_total.is_finite()) {
        return Err(invalid("epsilon_total must be positive"));
    }
    Ok(epsilon_total / rounds as f64)
}

/// Share of a round's budget for one client, proportional to
/// `samples * contribution` over the supplied denominator.
pub fn per_client_budget(round_budget: f64, samples: f64, contribution: f64, denom: f64) -> Result<f64> {
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(invalid(format!("budget denominator must be positive, got {denom}")));
    }
    if !(round_budget > 0.0 && samples > 0.0 && contribution > 0.0) {
        return Err(invalid("round budget, sample count and contribution must be positive"));
    }
    Ok(round_budget * (samples * contribution / denom))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpendEntry {
    pub round: usize,
    pub client_id: ClientId,
    pub epsilon: f64,
}

/// Tracks the total budget, its per-round split and every spend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    epsilon_total: f64,
    per_round: Vec<f64>,
    spend_log: Vec<SpendEntry>,
    remaining: f64,
}

/// Slack for float drift when comparing cumulative spend against the total.
const LEDGER_SLACK: f64 = 1e-12;

impl PrivacyLedger {
    pub fn new(epsilon_total: f64, rounds: usize) -> Result<PrivacyLedger> {
        let eps_t = per_round_budget(epsilon_total, rounds)?;
        Ok(PrivacyLedger {
            epsilon_total,
            per_round: vec![eps_t; rounds],
            spend_log: Vec::new(),
            remaining: epsilon_total,
        })
    }

    pub fn epsilon_total(&self) -> f64 {
        self.epsilon_total
    }

    pub fn rounds(&self) -> usize {
        self.per_round.len()
    }

    /// Budget for `round` (0-based); zero past the planned horizon.
    pub fn round_budget(&self, round: usize) -> f64 {
        self.per_round.get(round).copied().unwrap_or(0.0)
    }

    pub fn per_round(&self) -> &[f64] {
        &self.per_round
    }

    pub fn spend_log(&self) -> &[SpendEntry] {
        &self.spend_log
    }

    pub fn remaining(&self) -> f64 {
        self.remaining
    }

    pub fn spent(&self) -> f64 {
        self.spend_log.iter().map(|e| e.epsilon).sum()
    }

    pub fn spent_in_round(&self, round: usize) -> f64 {
        self.spend_log.iter().filter(|e| e.round == round).map(|e| e.epsilon).sum()
    }

    pub fn can_fund(&self, epsilon: f64) -> bool {
        epsilon <= self.remaining + LEDGER_SLACK
    }

    /// Records a spend. Returns `false` (and records nothing) when the
    /// remaining budget cannot cover it.
    pub fn try_spend(&mut self, round: usize, client_id: ClientId, epsilon: f64) -> bool {
        if !(epsilon >= 0.0) || !self.can_fund(epsilon) {
            return false;
        }
        self.spend_log.push(SpendEntry { round, client_id, epsilon });
        self.remaining = self.epsilon_total - self.spent();
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_grid: Vec<f64>,
    pub epsilon_grid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulChoice {
    pub sigma: f64,
    pub epsilon: f64,
    pub loss: f64,
}

/// Exhaustive search for the grid pair minimising
/// `alpha * error(sigma) + beta / epsilon`.
///
/// Ties go to the smaller sigma, then to the larger epsilon.
pub fn pul_search(error_fn: impl Fn(f64) -> f64, cfg: &PulConfig) -> Result<PulChoice> {
    if cfg.sigma_grid.is_empty() || cfg.epsilon_grid.is_empty() {
        return Err(Error::Empty("privacy/utility grid"));
    }
    if !(cfg.alpha >= 0.0 && cfg.beta >= 0.0) {
        return Err(invalid("alpha and beta must be non-negative"));
    }
    if cfg.sigma_grid.iter().any(|s| !(*s > 0.0)) || cfg.epsilon_grid.iter().any(|e| !(*e > 0.0)) {
        return Err(invalid("grid values must be positive"));
    }
    let mut best: Option<PulChoice> = None;
    for &sigma in &cfg.sigma_grid {
        let err = error_fn(sigma);
        if !err.is_finite() {
            return Err(Error::NonFinite("error function output"));
        }
        for &epsilon in &cfg.epsilon_grid {
            let loss = cfg.alpha * err + cfg.beta / epsilon;
            let better = match best {
                None => true,
                Some(b) => {
                    loss < b.loss
                        || (loss == b.loss && (sigma < b.sigma || (sigma == b.sigma && epsilon > b.epsilon)))
                }
            };
            if better {
                best = Some(PulChoice { sigma, epsilon, loss });
            }
        }
    }
    Ok(best.unwrap())
}
