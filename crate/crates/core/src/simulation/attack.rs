//! Model-poisoning attackers and the defense-rate metric.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ClientId, ClientUpdate};

use super::report::RoundReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackMode {
    SignFlip {},
    NormBoost { factor: f64 },
    /// Applied to the attacker's data before training.
    LabelFlip {},
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::SignFlip {} => "sign_flip",
            AttackMode::NormBoost { .. } => "norm_boost",
            AttackMode::LabelFlip {} => "label_flip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub active: bool,
    pub mode: AttackMode,
    pub malicious_ids: BTreeSet<ClientId>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec { active: false, mode: AttackMode::NormBoost { factor: 10.0 }, malicious_ids: BTreeSet::new() }
    }
}

impl AttackSpec {
    /// The first `count` client ids turned malicious.
    pub fn first(mode: AttackMode, count: u32) -> AttackSpec {
        AttackSpec { active: true, mode, malicious_ids: (0..count).collect() }
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if let Some(&id) = self.malicious_ids.iter().find(|&&id| id as usize >= n_clients) {
            return Err(invalid(format!("malicious client {id} does not exist ({n_clients} clients)")));
        }
        if let AttackMode::NormBoost { factor } = self.mode {
            if !factor.is_finite() {
                return Err(invalid("norm_boost factor must be finite"));
            }
        }
        Ok(())
    }

    pub fn is_malicious(&self, id: ClientId) -> bool {
        self.active && self.malicious_ids.contains(&id)
    }

    pub fn flips_labels(&self, id: ClientId) -> bool {
        self.is_malicious(id) && self.mode == AttackMode::LabelFlip {}
    }
}

/// Rewrites the deltas of malicious clients. Label flipping happens at the
/// dataset level, so it leaves updates untouched here.
pub fn inject_attack(mut updates: Vec<ClientUpdate>, spec: &AttackSpec) -> Vec<ClientUpdate> {
    if !spec.active {
        return updates;
    }
    for u in updates.iter_mut().filter(|u| spec.malicious_ids.contains(&u.client_id)) {
        match spec.mode {
            AttackMode::SignFlip {} => u.delta.scale(-1.0),
            AttackMode::NormBoost { factor } => u.delta.scale(factor),
            AttackMode::LabelFlip {} => {}
        }
    }
    updates
}

/// Fraction of received malicious updates that the aggregator excluded,
/// pooled over every round.
pub fn defense_rate(reports: &[RoundReport], spec: &AttackSpec) -> Result<f64> {
    if !spec.active || spec.malicious_ids.is_empty() {
        return Err(Error::Precondition("defense rate needs an active attack with malicious clients".into()));
    }
    let mut received = 0usize;
    let mut excluded = 0usize;
    for r in reports {
        for id in r.received.iter().filter(|id| spec.malicious_ids.contains(id)) {
            received += 1;
            if r.excluded.contains(id) {
                excluded += 1;
            }
        }
    }
    if received == 0 {
        return Err(Error::Precondition("no malicious update reached the aggregator".into()));
    }
    Ok(excluded as f64 / received as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamVector;

    fn update(id: ClientId, v: f64) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            delta: ParamVector::from_flat(vec![v]).unwrap(),
            sample_count: 1,
            loss_delta: 0.0,
            staleness: 0,
        }
    }

    #[test]
    fn inactive_is_identity() {
        let spec = AttackSpec { active: false, ..AttackSpec::first(AttackMode::SignFlip {}, 1) };
        let out = inject_attack(vec![update(0, 0.5)], &spec);
        assert_eq!(out[0].delta.values(), &[0.5]);
    }

    #[test]
    fn norm_boost_scales() {
        let spec = AttackSpec::first(AttackMode::NormBoost { factor: 10.0 }, 1);
        let out = inject_attack(vec![update(0, 0.5), update(1, 0.5)], &spec);
        assert_eq!(out[0].delta.values(), &[5.0]);
        assert_eq!(out[1].delta.values(), &[0.5]);
    }

    #[test]
    fn sign_flip_is_an_involution() {
        let spec = AttackSpec::first(AttackMode::SignFlip {}, 1);
        let once = inject_attack(vec![update(0, 0.75)], &spec);
        assert_eq!(once[0].delta.values(), &[-0.75]);
        let twice = inject_attack(once, &spec);
        assert_eq!(twice[0].delta.values(), &[0.75]);
    }

    fn report(round: usize, received: Vec<ClientId>, excluded: Vec<ClientId>) -> RoundReport {
        RoundReport { round, received, excluded, ..RoundReport::default() }
    }

    #[test]
    fn defense_rate_counts_pairs() {
        let spec = AttackSpec::first(AttackMode::SignFlip {}, 6);
        let all: Vec<ClientId> = (0..10).collect();
        let mut reports: Vec<RoundReport> = (0..10).map(|r| report(r, all.clone(), (0..6).collect())).collect();
        assert_eq!(defense_rate(&reports, &spec).unwrap(), 1.0);
        // six misses out of sixty pairs
        reports[0].excluded = vec![];
        assert!((defense_rate(&reports, &spec).unwrap() - 0.9).abs() < 1e-12);
        for r in reports.iter_mut() {
            r.excluded.clear();
        }
        assert_eq!(defense_rate(&reports, &spec).unwrap(), 0.0);
    }

    #[test]
    fn defense_rate_needs_attackers() {
        let spec = AttackSpec { active: true, ..AttackSpec::default() };
        assert!(defense_rate(&[report(0, vec![0], vec![])], &spec).is_err());
    }

    #[test]
    fn mode_json_shape() {
        let m: AttackMode = serde_json::from_str(r#"{"kind":"norm_boost","factor":10}"#).unwrap();
        assert_eq!(m, AttackMode::NormBoost { factor: 10.0 });
        assert!(serde_json::from_str::<AttackMode>(r#"{"kind":"sign_flip","x":1}"#).is_err());
        assert!(serde_json::from_str::<AttackMode>(r#"{"kind":"norm_boost","factor":2,"x":1}"#).is_err());
        assert_eq!(serde_json::from_str::<AttackMode>(r#"{"kind":"label_flip"}"#).unwrap(), AttackMode::LabelFlip {});
    }
}
