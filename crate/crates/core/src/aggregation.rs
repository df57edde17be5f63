//! Server-side aggregation: FedAvg, dynamically weighted averaging, anomaly
//! scoring, Krum selection, staleness discounting and the robust pipeline
//! that chains them.
//!
//! All aggregation operates on deltas applied on top of a base model. Client
//! updates are always combined in ascending `client_id` order, which makes
//! every result independent of arrival order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ClientId, ClientUpdate, ParamVector};

/// Non-negative client weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

const WEIGHT_SUM_TOL: f64 = 1e-12;

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<WeightVector> {
        if weights.is_empty() {
            return Err(Error::Empty("weight vector"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector(weights))
    }

    /// Scales non-negative raw weights to unit sum.
    pub fn normalize(raw: Vec<f64>) -> Result<WeightVector> {
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("raw weights must be finite and non-negative"));
        }
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) {
            return Err(invalid("raw weights sum to zero"));
        }
        WeightVector::new(raw.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<WeightVector> {
        WeightVector::new(vec![1.0 / n as f64; n])
    }

    /// Classical FedAvg weights `n_i / sum_j n_j`.
    pub fn from_sample_counts(updates: &[ClientUpdate]) -> Result<WeightVector> {
        let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
        WeightVector::new(updates.iter().map(|u| u.sample_count as f64 / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn ensure_nonempty(updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        Err(Error::Empty("client updates"))
    } else {
        Ok(())
    }
}

fn canonical_order(updates: &[ClientUpdate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    order
}

/// `base + sum_i w_i * delta_i`, summed in client-id order.
pub fn weighted_aggregate(updates: &[ClientUpdate], weights: &WeightVector, base: &ParamVector) -> Result<ParamVector> {
    ensure_nonempty(updates)?;
    if weights.len() != updates.len() {
        return Err(Error::Shape(format!("{} weights for {} updates", weights.len(), updates.len())));
    }
    let mut sum = ParamVector::zeros(base.layout().clone());
    for i in canonical_order(updates) {
        sum.add_scaled(&updates[i].delta, weights.as_slice()[i])?;
    }
    let mut out = base.clone();
    out.add_scaled(&sum, 1.0)?;
    Ok(out)
}

/// Sample-count weighted mean of the deltas applied to `base`.
pub fn fedavg(updates: &[ClientUpdate], base: &ParamVector) -> Result<ParamVector> {
    ensure_nonempty(updates)?;
    weighted_aggregate(updates, &WeightVector::from_sample_counts(updates)?, base)
}

/// Uniform mean of the deltas.
pub fn mean_delta(updates: &[ClientUpdate]) -> Result<ParamVector> {
    ensure_nonempty(updates)?;
    let mut sum = ParamVector::zeros(updates[0].delta.layout().clone());
    for i in canonical_order(updates) {
        sum.add_scaled(&updates[i].delta, 1.0)?;
    }
    sum.scale(1.0 / updates.len() as f64);
    Ok(sum)
}

/// Per-client quality score kept as an exponential moving average.
///
/// Each round a client observes `1 + cos(delta_i, applied global delta)`, in
/// `[0, 2]`; the weight formula uses the average clipped to `[0.5, 1.5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityHistory {
    ema: BTreeMap<ClientId, f64>,
    /// Weight on the newest observation.
    rate: f64,
}

impl Default for QualityHistory {
    fn default() -> Self {
        QualityHistory { ema: BTreeMap::new(), rate: 0.3 }
    }
}

impl QualityHistory {
    pub const MIN: f64 = 0.5;
    pub const MAX: f64 = 1.5;

    pub fn with_rate(rate: f64) -> QualityHistory {
        QualityHistory { ema: BTreeMap::new(), rate: rate.clamp(0.0, 1.0) }
    }

    pub fn raw(&self, client: ClientId) -> f64 {
        self.ema.get(&client).copied().unwrap_or(1.0)
    }

    pub fn quality(&self, client: ClientId) -> f64 {
        self.raw(client).clamp(Self::MIN, Self::MAX)
    }

    pub fn set(&mut self, client: ClientId, value: f64) {
        self.ema.insert(client, value);
    }

    pub fn observe(&mut self, client: ClientId, observation: f64) {
        let prev = self.raw(client);
        self.ema.insert(client, (1.0 - self.rate) * prev + self.rate * observation);
    }

    /// Scores every update against the delta the server actually applied.
    pub fn observe_round(&mut self, updates: &[ClientUpdate], applied: &ParamVector) {
        for u in updates {
            self.observe(u.client_id, 1.0 + u.delta.cosine(applied));
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Dynamic weights `w_i ∝ (n_i / sum n) * q_i * m_i`, where `q_i` is the
/// clipped quality history and `m_i = clip(median norm / ||delta_i||, 0.5, 1.5)`.
pub fn compute_weights(updates: &[ClientUpdate], history: &QualityHistory) -> Result<WeightVector> {
    ensure_nonempty(updates)?;
    let norms: Vec<f64> = updates.iter().map(|u| u.delta.norm_l2()).collect();
    let med = median(&mut norms.clone());
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    let raw = updates
        .iter()
        .zip(&norms)
        .map(|(u, &norm)| {
            let magnitude = (med / norm.max(1e-12)).clamp(0.5, 1.5);
            (u.sample_count as f64 / total) * history.quality(u.client_id) * magnitude
        })
        .collect();
    WeightVector::normalize(raw)
}

/// Result of scoring updates for anomalies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub scores: Vec<(ClientId, f64)>,
    pub threshold: f64,
    pub filtered: Vec<ClientId>,
    pub lambdas: [f64; 3],
}

/// `S_i = l1 ||delta_i|| + l2 (1 - cos(delta_i, mean)) + l3 max(0, dL_i)`;
/// clients scoring above `mean(S) + filter_c * std(S)` are filtered.
pub fn anomaly_scores(
    updates: &[ClientUpdate],
    global_mean_delta: &ParamVector,
    lambdas: [f64; 3],
    filter_c: f64,
) -> AnomalyReport {
    let [l1, l2, l3] = lambdas;
    let scores: Vec<(ClientId, f64)> = updates
        .iter()
        .map(|u| {
            let s = l1 * u.delta.norm_l2()
                + l2 * (1.0 - u.delta.cosine(global_mean_delta))
                + l3 * u.loss_delta.max(0.0);
            (u.client_id, s)
        })
        .collect();
    if scores.is_empty() {
        return AnomalyReport { scores, threshold: 0.0, filtered: Vec::new(), lambdas };
    }
    let n = scores.len() as f64;
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, s)| (lo.min(s), hi.max(s)));
    let threshold = if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        // all scores equal: the rounded mean may sit a hair below them
        hi
    } else {
        let mean = scores.iter().map(|&(_, s)| s).sum::<f64>() / n;
        let var = scores.iter().map(|&(_, s)| (s - mean) * (s - mean)).sum::<f64>() / n;
        mean + filter_c * var.sqrt()
    };
    let mut filtered: Vec<ClientId> = scores.iter().filter(|&&(_, s)| s > threshold).map(|&(id, _)| id).collect();
    filtered.sort_unstable();
    AnomalyReport { scores, threshold, filtered, lambdas }
}

/// Krum score of every update: the sum of squared distances to its
/// `n - f - 2` nearest neighbours.
pub fn krum_scores(updates: &[ClientUpdate], f: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    if n < 2 * f + 3 {
        return Err(Error::Precondition(format!("krum needs n >= 2f + 3, got n = {n}, f = {f}")));
    }
    let neighbours = n - f - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = updates[i].delta.squared_distance(&updates[j].delta);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect())
}

/// Multi-Krum: ids of the `m_select` updates with the lowest Krum scores,
/// ordered by score then by client id.
pub fn krum_select(updates: &[ClientUpdate], f: usize, m_select: usize) -> Result<Vec<ClientId>> {
    let scores = krum_scores(updates, f)?;
    let n = updates.len();
    if m_select == 0 || m_select > n - f - 2 {
        return Err(Error::Precondition(format!("multi-krum selection {m_select} outside 1..={}", n - f - 2)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(updates[a].client_id.cmp(&updates[b].client_id)));
    Ok(order[..m_select].iter().map(|&i| updates[i].client_id).collect())
}

/// `rho^staleness` while `staleness <= tau`, else 0.
pub fn staleness_discount(staleness: u32, tau: u32, rho: f64) -> f64 {
    if staleness > tau {
        0.0
    } else {
        rho.powi(staleness as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Weighted,
    Robust,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Weighted => "weighted",
            Strategy::Robust => "robust",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub strategy: Strategy,
    /// Assumed number of byzantine clients.
    pub krum_f: usize,
    /// Multi-Krum selection size; `None` selects the maximum `n - f - 2`.
    pub multi_krum_m: Option<usize>,
    pub lambdas: [f64; 3],
    pub filter_c: f64,
    pub staleness_tau: u32,
    pub staleness_rho: f64,
    /// EMA rate of the quality history.
    pub history_rate: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            strategy: Strategy::Robust,
            krum_f: 1,
            multi_krum_m: None,
            lambdas: [1.0, 1.0, 1.0],
            filter_c: 2.0,
            staleness_tau: 3,
            staleness_rho: 0.5,
            history_rate: 0.3,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.staleness_rho > 0.0 && self.staleness_rho <= 1.0) {
            return Err(invalid("staleness_rho must lie in (0, 1]"));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(invalid("lambdas must be finite and non-negative"));
        }
        if !self.filter_c.is_finite() {
            return Err(invalid("filter_c must be finite"));
        }
        if self.multi_krum_m == Some(0) {
            return Err(invalid("multi_krum_m must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.history_rate) {
            return Err(invalid("history_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// What the server did with one batch of updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub params: ParamVector,
    pub anomaly: Option<AnomalyReport>,
    /// Clients whose updates carry non-zero weight, in client-id order.
    pub selected: Vec<ClientId>,
    pub weights: Vec<(ClientId, f64)>,
    /// Set when the robust pipeline could not run Krum, or when every
    /// update was discounted to zero and the base model was kept.
    pub fallback: bool,
}

fn subset(updates: &[ClientUpdate], keep: &[ClientId]) -> Vec<ClientUpdate> {
    updates.iter().filter(|u| keep.contains(&u.client_id)).cloned().collect()
}

/// Multiplies each weight by its staleness discount and renormalizes.
/// `None` when every update was discounted away.
pub fn fold_staleness(weights: &WeightVector, updates: &[ClientUpdate], tau: u32, rho: f64) -> Option<WeightVector> {
    let raw: Vec<f64> = weights
        .as_slice()
        .iter()
        .zip(updates)
        .map(|(w, u)| w * staleness_discount(u.staleness, tau, rho))
        .collect();
    WeightVector::normalize(raw).ok()
}

fn finish(
    updates: Vec<ClientUpdate>,
    weights: WeightVector,
    cfg: &AggregatorConfig,
    base: &ParamVector,
    anomaly: Option<AnomalyReport>,
    mut fallback: bool,
) -> Result<AggregationOutcome> {
    let (params, weights) = match fold_staleness(&weights, &updates, cfg.staleness_tau, cfg.staleness_rho) {
        Some(w) => (weighted_aggregate(&updates, &w, base)?, w),
        None => {
            fallback = true;
            (base.clone(), WeightVector(vec![0.0; updates.len()]))
        }
    };
    let mut pairs: Vec<(ClientId, f64)> = updates.iter().map(|u| u.client_id).zip(weights.0).collect();
    pairs.sort_by_key(|p| p.0);
    let selected = pairs.iter().filter(|p| p.1 > 0.0).map(|p| p.0).collect();
    Ok(AggregationOutcome { params, anomaly, selected, weights: pairs, fallback })
}

/// Anomaly filter, then Multi-Krum on the survivors, then dynamic weighting
/// of the selected updates with staleness folded into the weights.
///
/// When fewer than `2f + 3` updates survive the filter, Krum is skipped and
/// the survivors are weighted directly; the outcome is flagged as a fallback.
pub fn robust_aggregate(
    updates: &[ClientUpdate],
    cfg: &AggregatorConfig,
    base: &ParamVector,
    history: &QualityHistory,
) -> Result<AggregationOutcome> {
    ensure_nonempty(updates)?;
    let mean = mean_delta(updates)?;
    let report = anomaly_scores(updates, &mean, cfg.lambdas, cfg.filter_c);
    let survivors: Vec<ClientUpdate> =
        updates.iter().filter(|u| !report.filtered.contains(&u.client_id)).cloned().collect();
    if survivors.is_empty() {
        return Ok(AggregationOutcome {
            params: base.clone(),
            anomaly: Some(report),
            selected: Vec::new(),
            weights: Vec::new(),
            fallback: true,
        });
    }
    let f = cfg.krum_f;
    let n = survivors.len();
    if n < 2 * f + 3 {
        let weights = compute_weights(&survivors, history)?;
        return finish(survivors, weights, cfg, base, Some(report), true);
    }
    let m_select = cfg.multi_krum_m.unwrap_or(n - f - 2).min(n - f - 2);
    let chosen = krum_select(&survivors, f, m_select)?;
    let selected = subset(&survivors, &chosen);
    let weights = compute_weights(&selected, history)?;
    finish(selected, weights, cfg, base, Some(report), false)
}

/// Dispatches on the configured strategy. Staleness discounts apply to
/// every strategy.
pub fn aggregate(
    updates: &[ClientUpdate],
    cfg: &AggregatorConfig,
    base: &ParamVector,
    history: &QualityHistory,
) -> Result<AggregationOutcome> {
    ensure_nonempty(updates)?;
    match cfg.strategy {
        Strategy::Fedavg => {
            let w = WeightVector::from_sample_counts(updates)?;
            finish(updates.to_vec(), w, cfg, base, None, false)
        }
        Strategy::Weighted => {
            let w = compute_weights(updates, history)?;
            finish(updates.to_vec(), w, cfg, base, None, false)
        }
        Strategy::Robust => robust_aggregate(updates, cfg, base, history),
    }
}
