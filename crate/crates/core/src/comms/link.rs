use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Fixed-latency, fixed-bandwidth link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

impl LinkModel {
    pub fn new(bandwidth: f64, latency: f64) -> Result<LinkModel> {
        let link = LinkModel { bandwidth, latency };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(invalid(format!("link bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(invalid(format!("link latency must be non-negative, got {}", self.latency)));
        }
        Ok(())
    }
}

/// Seconds to push `bytes` over `link`: `latency + bytes / bandwidth`.
pub fn transmit(bytes: u64, link: &LinkModel) -> Result<f64> {
    link.validate()?;
    Ok(link.latency + bytes as f64 / link.bandwidth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Client to edge.
    Up,
    /// Cloud/edge to client.
    Down,
    /// Edge to cloud.
    EdgeUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficEntry {
    pub round: usize,
    pub direction: Direction,
    /// Client id, or edge id for [`Direction::EdgeUp`].
    pub node: u32,
    pub bytes: u64,
}

/// Append-only record of every transfer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficLedger {
    entries: Vec<TrafficEntry>,
}

impl TrafficLedger {
    pub fn record(&mut self, round: usize, direction: Direction, node: u32, bytes: u64) {
        self.entries.push(TrafficEntry { round, direction, node, bytes });
    }

    pub fn entries(&self) -> &[TrafficEntry] {
        &self.entries
    }

    pub fn round_total(&self, round: usize, direction: Direction) -> u64 {
        self.entries.iter().filter(|e| e.round == round && e.direction == direction).map(|e| e.bytes).sum()
    }

    pub fn node_total(&self, direction: Direction, node: u32) -> u64 {
        self.entries.iter().filter(|e| e.direction == direction && e.node == node).map(|e| e.bytes).sum()
    }

    pub fn total(&self, direction: Direction) -> u64 {
        self.entries.iter().filter(|e| e.direction == direction).map(|e| e.bytes).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_time_examples() {
        let link = LinkModel::new(1_048_576.0, 0.05).unwrap();
        assert_eq!(transmit(0, &link).unwrap(), 0.05);
        assert!((transmit(1_048_576, &link).unwrap() - 1.05).abs() < 1e-12);
        let fast = LinkModel::new(2.0 * 1_048_576.0, 0.05).unwrap();
        let slow_term = transmit(1 << 22, &link).unwrap() - 0.05;
        let fast_term = transmit(1 << 22, &fast).unwrap() - 0.05;
        assert!((slow_term - 2.0 * fast_term).abs() < 1e-12);
        assert!(transmit(1, &LinkModel { bandwidth: 0.0, latency: 0.0 }).is_err());
    }

    #[test]
    fn ledger_totals_are_sums() {
        let mut ledger = TrafficLedger::default();
        ledger.record(0, Direction::Up, 1, 100);
        ledger.record(0, Direction::Up, 2, 50);
        ledger.record(1, Direction::Up, 1, 7);
        ledger.record(0, Direction::Down, 1, 3);
        assert_eq!(ledger.round_total(0, Direction::Up), 150);
        assert_eq!(ledger.node_total(Direction::Up, 1), 107);
        assert_eq!(ledger.total(Direction::Up), 157);
        assert_eq!(ledger.total(Direction::Down), 3);
    }
}
