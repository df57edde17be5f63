//! Per-round measurements and run-level summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClientId;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round number.
    pub round: usize,
    /// No update reached the aggregator; the model is unchanged.
    pub skipped: bool,
    /// Held-out accuracy and loss of the model after this round.
    pub accuracy: f64,
    pub loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub bytes_edge: u64,
    /// Simulated wall-clock for the round.
    pub seconds: f64,
    /// Clients sampled this round.
    pub participants: Vec<ClientId>,
    /// Sampled clients that skipped because the privacy budget was spent.
    pub budget_skipped: Vec<ClientId>,
    /// Clients whose update was aggregated this round.
    pub received: Vec<ClientId>,
    pub filtered: Vec<ClientId>,
    pub selected: Vec<ClientId>,
    /// Received but given no weight (filtered or not selected).
    pub excluded: Vec<ClientId>,
    pub fallback: bool,
    pub epsilon_spent: f64,
    /// Number of aggregated updates per staleness value.
    pub staleness_histogram: BTreeMap<u32, usize>,
}

/// Total simulated seconds over all reports.
pub fn measure_latency(reports: &[RoundReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Empty("round reports"));
    }
    Ok(reports.iter().map(|r| r.seconds).sum())
}

/// First round whose accuracy reaches `target`.
pub fn rounds_to_target(reports: &[RoundReport], target: f64) -> Option<usize> {
    reports.iter().find(|r| r.accuracy >= target).map(|r| r.round)
}

pub fn total_bytes_up(reports: &[RoundReport]) -> u64 {
    reports.iter().map(|r| r.bytes_up).sum()
}

/// All traffic: uploads, broadcasts and edge-to-cloud forwarding.
pub fn total_bytes(reports: &[RoundReport]) -> u64 {
    reports.iter().map(|r| r.bytes_up + r.bytes_down + r.bytes_edge).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secs(s: &[f64]) -> Vec<RoundReport> {
        s.iter().enumerate().map(|(i, &t)| RoundReport { round: i + 1, seconds: t, ..Default::default() }).collect()
    }

    #[test]
    fn latency_sums_rounds() {
        assert_eq!(measure_latency(&secs(&[1.25])).unwrap(), 1.25);
        assert_eq!(measure_latency(&secs(&[1.0, 2.5])).unwrap(), 3.5);
        assert!(measure_latency(&[]).is_err());
    }

    #[test]
    fn first_round_at_target() {
        let mut r = secs(&[1.0, 1.0, 1.0]);
        r[0].accuracy = 0.5;
        r[1].accuracy = 0.9;
        r[2].accuracy = 0.95;
        assert_eq!(rounds_to_target(&r, 0.9), Some(2));
        assert_eq!(rounds_to_target(&r, 0.99), None);
    }
}
