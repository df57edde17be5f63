//! Discrete-event orchestration of a client -> edge -> cloud federation.
//!
//! A round samples participants, trains them locally (in parallel, each on
//! its own RNG stream), applies the attacker, clips and noises the deltas,
//! uploads them through either the compression stack or secret sharing,
//! lets the edges forward, aggregates in the cloud and evaluates the new
//! model on the held-out set.
//!
//! In synchronous mode the round lasts until the slowest edge delivers. In
//! asynchronous mode updates travel through an event queue ordered by
//! `(arrival time, send sequence)`; a round closes once a quorum of its own
//! updates has arrived, and anything older that lands first is folded in with
//! a staleness discount.

pub mod attack;
pub mod report;
pub mod topology;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use log::debug;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregatorConfig, QualityHistory};
use crate::comms::wire::dense_frame_len;
use crate::comms::{transmit, ClientEncoder, CommsConfig, Direction, ServerDecoder, TrafficLedger};
use crate::data::{partition, train_holdout_split, PartitionSpec};
use crate::error::{invalid, Error, Result};
use crate::model::{evaluate, local_train, ClientId, ClientUpdate, Dataset, EncoderConfig, ParamVector, TrainConfig};
use crate::privacy::{add_gaussian_noise, calibrate_sigma, per_client_budget, PrivacyLedger, DEFAULT_DELTA};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::secure_agg::{secure_aggregate, serialized_len, split_shares, ShareAccumulator};

pub use attack::{defense_rate, inject_attack, AttackMode, AttackSpec};
pub use report::{measure_latency, rounds_to_target, total_bytes, total_bytes_up, RoundReport};
pub use topology::{client_path_seconds, sync_round_time, ClientNode, ClientPath, EdgeNode, NetworkConfig, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub epsilon_total: f64,
    pub delta: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig { enabled: false, epsilon_total: 2.0, delta: DEFAULT_DELTA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub enabled: bool,
    pub shares: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig { enabled: false, shares: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub seed: u64,
    pub rounds: usize,
    pub mode: Mode,
    pub participation: f64,
    pub model: EncoderConfig,
    pub training: TrainConfig,
    pub aggregator: AggregatorConfig,
    pub privacy: PrivacyConfig,
    pub comms: CommsConfig,
    pub mpc: MpcConfig,
    pub attack: AttackSpec,
    pub network: NetworkConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            seed: 42,
            rounds: 30,
            mode: Mode::Sync,
            participation: 0.8,
            model: EncoderConfig::default(),
            training: TrainConfig::default(),
            aggregator: AggregatorConfig::default(),
            privacy: PrivacyConfig::default(),
            comms: CommsConfig::dense(),
            mpc: MpcConfig::default(),
            attack: AttackSpec::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.aggregator.validate()?;
        self.comms.validate()?;
        self.network.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(invalid("participation must lie in (0, 1]"));
        }
        if self.mpc.enabled {
            if self.comms.enabled {
                return Err(invalid("mpc and comms compression are mutually exclusive"));
            }
            if self.mode == Mode::Async {
                return Err(invalid("mpc runs in sync mode only"));
            }
            if self.mpc.shares == 0 {
                return Err(invalid("mpc.shares must be at least 1"));
            }
        }
        if self.privacy.enabled {
            if !(self.privacy.epsilon_total > 0.0 && self.privacy.epsilon_total.is_finite()) {
                return Err(invalid("privacy.epsilon_total must be positive"));
            }
            if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
                return Err(invalid("privacy.delta must lie in (0, 1)"));
            }
            if self.training.clip.is_none() {
                return Err(invalid("privacy needs training.clip (it sets the sensitivity)"));
            }
            if self.rounds == 0 {
                return Err(invalid("privacy needs at least one round"));
            }
        }
        Ok(())
    }
}

/// Splits off the held-out set and partitions the rest across clients.
pub fn federate(data: &Dataset, holdout_fraction: f64, spec: &PartitionSpec, seed: u64) -> Result<(Vec<Dataset>, Dataset)> {
    let (train, holdout) = train_holdout_split(data, holdout_fraction, derive_seed(seed, Stream::Data, 1, 0))?;
    let shards = partition(&train, spec, derive_seed(seed, Stream::Partition, 0, 0))?;
    Ok((shards, holdout))
}

#[derive(Debug)]
struct Arrival {
    time: f64,
    seq: u64,
    sent_round: usize,
    update: ClientUpdate,
}

impl PartialEq for Arrival {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Arrival {}

impl PartialOrd for Arrival {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Arrival {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

/// An update after the coordinator's per-client pipeline, ready to travel.
struct Outgoing {
    update: ClientUpdate,
    path_seconds: f64,
    upload_bytes: u64,
}

pub struct Simulation {
    cfg: SimulationConfig,
    topology: Topology,
    holdout: Dataset,
    global: ParamVector,
    history: QualityHistory,
    ledger: Option<PrivacyLedger>,
    encoders: Vec<ClientEncoder>,
    decoder: ServerDecoder,
    traffic: TrafficLedger,
    round: usize,
    clock: f64,
    in_flight: BinaryHeap<Reverse<Arrival>>,
    busy: BTreeSet<ClientId>,
    seq: u64,
}

impl Simulation {
    /// Builds the federation. Label-flipping attackers get their labels
    /// rotated here, once.
    pub fn new(cfg: SimulationConfig, shards: Vec<Dataset>, holdout: Dataset) -> Result<Simulation> {
        cfg.validate()?;
        cfg.attack.validate(shards.len())?;
        let input = cfg.model.input_dim();
        let classes = cfg.model.classes();
        for d in shards.iter().chain(std::iter::once(&holdout)) {
            if d.dim() != input || d.classes() > classes {
                return Err(Error::Shape(format!(
                    "data has {} features and {} classes, model expects {} and {}",
                    d.dim(),
                    d.classes(),
                    input,
                    classes
                )));
            }
        }
        if holdout.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shards = shards
            .into_iter()
            .enumerate()
            .map(|(i, d)| if cfg.attack.flips_labels(i as ClientId) { d.with_rotated_labels() } else { d })
            .collect();
        let topology = Topology::build(shards, &cfg.network, cfg.seed)?;
        topology.validate()?;
        let global = cfg.model.init_params(derive_seed(cfg.seed, Stream::Init, 0, 0));
        let ledger = if cfg.privacy.enabled { Some(PrivacyLedger::new(cfg.privacy.epsilon_total, cfg.rounds)?) } else { None };
        let encoders = vec![ClientEncoder::default(); topology.len()];
        Ok(Simulation {
            history: QualityHistory::with_rate(cfg.aggregator.history_rate),
            cfg,
            topology,
            holdout,
            global,
            ledger,
            encoders,
            decoder: ServerDecoder::default(),
            traffic: TrafficLedger::default(),
            round: 0,
            clock: 0.0,
            in_flight: BinaryHeap::new(),
            busy: BTreeSet::new(),
            seq: 0,
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn traffic(&self) -> &TrafficLedger {
        &self.traffic
    }

    pub fn ledger(&self) -> Option<&PrivacyLedger> {
        self.ledger.as_ref()
    }

    pub fn history(&self) -> &QualityHistory {
        &self.history
    }

    /// Simulated seconds elapsed so far.
    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Completed rounds.
    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Held-out accuracy and loss of the current model.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate(&self.global, &self.cfg.model, &self.holdout)
    }

    /// Runs every configured round.
    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        (0..self.cfg.rounds).map(|_| self.run_round()).collect()
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let report = match self.cfg.mode {
            Mode::Sync => self.sync_round()?,
            Mode::Async => self.async_round()?,
        };
        debug!(
            "round {}: acc {:.4} received {} excluded {} ({:.3}s)",
            report.round,
            report.accuracy,
            report.received.len(),
            report.excluded.len(),
            report.seconds
        );
        self.round += 1;
        Ok(report)
    }

    fn sample(&self, round: usize) -> Vec<ClientId> {
        let mut rng = stream_rng(self.cfg.seed, Stream::Participation, round as u64, 0);
        let p = self.cfg.participation;
        // one draw per client regardless of availability keeps streams aligned
        self.topology
            .clients
            .iter()
            .filter_map(|c| {
                let hit = rng.random::<f64>() < p;
                (hit && !self.busy.contains(&c.id)).then_some(c.id)
            })
            .collect()
    }

    fn train(&self, round: usize, ids: &[ClientId]) -> Result<Vec<ClientUpdate>> {
        ids.par_iter()
            .map(|&id| {
                let node = &self.topology.clients[id as usize];
                let seed = derive_seed(self.cfg.seed, Stream::Train, round as u64, id as u64);
                local_train(&node.data, &self.global, &self.cfg.model, &self.cfg.training, seed, id)
            })
            .collect()
    }

    /// Privacy accounting and noise. Clients the ledger cannot fund drop out.
    fn privatize(&mut self, round: usize, updates: Vec<ClientUpdate>) -> Result<(Vec<ClientUpdate>, Vec<ClientId>, f64)> {
        let Some(ledger) = self.ledger.as_mut() else {
            return Ok((updates, Vec::new(), 0.0));
        };
        let sensitivity = self.cfg.training.clip.expect("validated");
        let eps_t = ledger.round_budget(round);
        let gamma = |u: &ClientUpdate| self.history.quality(u.client_id);
        let denom: f64 = updates.iter().map(|u| u.sample_count as f64 * gamma(u)).sum();
        let mut kept = Vec::with_capacity(updates.len());
        let mut skipped = Vec::new();
        let mut spent = 0.0;
        for mut u in updates {
            let eps = if eps_t > 0.0 { per_client_budget(eps_t, u.sample_count as f64, gamma(&u), denom)? } else { 0.0 };
            if eps <= 0.0 || !ledger.try_spend(round, u.client_id, eps) {
                skipped.push(u.client_id);
                continue;
            }
            spent += eps;
            let sigma = calibrate_sigma(eps, self.cfg.privacy.delta, sensitivity)?;
            let seed = derive_seed(self.cfg.seed, Stream::Noise, round as u64, u.client_id as u64);
            u.delta = add_gaussian_noise(&u.delta, sigma, seed)?;
            kept.push(u);
        }
        Ok((kept, skipped, spent))
    }

    /// Everything a client does in a round up to the moment its payload
    /// leaves: train, attack, privatize, encode. Plaintext uploads are decoded
    /// immediately, since the decoder is deterministic.
    fn prepare(&mut self, round: usize, ids: &[ClientId]) -> Result<(Vec<Outgoing>, Vec<ClientId>, f64)> {
        let dim = self.global.len();
        let down = dense_frame_len(dim) as u64;
        for &id in ids {
            self.traffic.record(round, Direction::Down, id, down);
        }
        let updates = inject_attack(self.train(round, ids)?, &self.cfg.attack);
        let (updates, budget_skipped, spent) = self.privatize(round, updates)?;
        let layout = self.global.layout().clone();
        let epochs = self.cfg.training.epochs;
        let mut out = Vec::with_capacity(updates.len());
        for mut u in updates {
            let id = u.client_id;
            let upload_bytes = if self.cfg.mpc.enabled {
                serialized_len(self.cfg.mpc.shares, dim) as u64
            } else {
                let frame = self.encoders[id as usize].encode(&u.delta, &self.cfg.comms, round as u32, id)?;
                let (_, decoded) = self.decoder.decode(&frame, &layout)?;
                u.delta = decoded;
                frame.len() as u64
            };
            self.traffic.record(round, Direction::Up, id, upload_bytes);
            let node = &self.topology.clients[id as usize];
            let path_seconds = client_path_seconds(node, &self.cfg.network, epochs, down, upload_bytes)?;
            out.push(Outgoing { update: u, path_seconds, upload_bytes });
        }
        Ok((out, budget_skipped, spent))
    }

    fn sync_round(&mut self) -> Result<RoundReport> {
        let round = self.round;
        let ids = self.sample(round);
        let (outgoing, budget_skipped, spent) = self.prepare(round, &ids)?;

        let mut paths = Vec::with_capacity(outgoing.len());
        let edge_bytes = if self.cfg.mpc.enabled {
            // each edge forwards its per-slot share sums, not the client payloads
            let per_edge = serialized_len(self.cfg.mpc.shares, self.global.len()) as u64;
            let mut busy_edges = BTreeSet::new();
            for o in &outgoing {
                let edge = self.topology.clients[o.update.client_id as usize].edge;
                busy_edges.insert(edge);
                paths.push(ClientPath { edge, seconds: o.path_seconds, bytes: 0 });
            }
            for &edge in &busy_edges {
                paths.push(ClientPath { edge, seconds: 0.0, bytes: per_edge });
            }
            busy_edges.into_iter().map(|e| (e, per_edge)).collect::<Vec<_>>()
        } else {
            let mut per_edge = vec![0u64; self.topology.edges.len()];
            for o in &outgoing {
                let edge = self.topology.clients[o.update.client_id as usize].edge;
                per_edge[edge] += o.upload_bytes;
                paths.push(ClientPath { edge, seconds: o.path_seconds, bytes: o.upload_bytes });
            }
            per_edge.into_iter().enumerate().filter(|&(_, b)| b > 0).collect()
        };
        for (edge, bytes) in edge_bytes {
            self.traffic.record(round, Direction::EdgeUp, edge as u32, bytes);
        }
        let seconds = if outgoing.is_empty() {
            self.cfg.network.aggregation_seconds
        } else {
            sync_round_time(&paths, &self.topology.edges, self.cfg.network.aggregation_seconds)?
        };
        self.clock += seconds;

        let updates: Vec<ClientUpdate> = outgoing.into_iter().map(|o| o.update).collect();
        let mut report = if self.cfg.mpc.enabled { self.apply_secure(round, updates)? } else { self.apply(updates)? };
        report.participants = ids;
        report.budget_skipped = budget_skipped;
        report.epsilon_spent = spent;
        report.seconds = seconds;
        self.finish_report(round, report)
    }

    fn async_round(&mut self) -> Result<RoundReport> {
        let round = self.round;
        let start = self.clock;
        let ids = self.sample(round);
        let (outgoing, budget_skipped, spent) = self.prepare(round, &ids)?;
        let sent = outgoing.len();
        for o in outgoing {
            let id = o.update.client_id;
            let edge = &self.topology.edges[self.topology.clients[id as usize].edge];
            self.traffic.record(round, Direction::EdgeUp, edge.id as u32, o.upload_bytes);
            let time = start + o.path_seconds + transmit(o.upload_bytes, &edge.link)?;
            self.busy.insert(id);
            self.in_flight.push(Reverse(Arrival { time, seq: self.seq, sent_round: round, update: o.update }));
            self.seq += 1;
        }

        let needed = if sent > 0 {
            ((self.cfg.network.async_quorum * sent as f64).ceil() as usize).max(1)
        } else {
            usize::from(!self.in_flight.is_empty())
        };
        let mut arrived: Vec<Arrival> = Vec::new();
        let mut own = 0usize;
        while own < needed {
            let Some(Reverse(a)) = self.in_flight.pop() else { break };
            if a.sent_round == round || sent == 0 {
                own += 1;
            }
            arrived.push(a);
        }
        let close = arrived.last().map_or(start, |a| a.time.max(start));
        while self.in_flight.peek().is_some_and(|Reverse(a)| a.time <= close) {
            arrived.push(self.in_flight.pop().expect("peeked").0);
        }
        self.clock = close + self.cfg.network.aggregation_seconds;

        let mut updates: Vec<ClientUpdate> = arrived
            .into_iter()
            .map(|a| {
                self.busy.remove(&a.update.client_id);
                let mut u = a.update;
                u.staleness = (round - a.sent_round) as u32;
                u
            })
            .collect();
        updates.sort_by_key(|u| u.client_id);
        let mut report = self.apply(updates)?;
        report.participants = ids;
        report.budget_skipped = budget_skipped;
        report.epsilon_spent = spent;
        report.seconds = self.clock - start;
        self.finish_report(round, report)
    }

    fn apply(&mut self, updates: Vec<ClientUpdate>) -> Result<RoundReport> {
        let mut report = RoundReport::default();
        if updates.is_empty() {
            report.skipped = true;
            return Ok(report);
        }
        for u in &updates {
            *report.staleness_histogram.entry(u.staleness).or_insert(0) += 1;
        }
        let outcome = aggregate(&updates, &self.cfg.aggregator, &self.global, &self.history)?;
        let applied = outcome.params.sub(&self.global)?;
        self.history.observe_round(&updates, &applied);
        self.global = outcome.params;
        report.received = updates.iter().map(|u| u.client_id).collect();
        report.filtered = outcome.anomaly.map(|a| a.filtered).unwrap_or_default();
        report.selected = outcome.selected;
        report.excluded = report.received.iter().copied().filter(|id| !report.selected.contains(id)).collect();
        report.fallback = outcome.fallback;
        Ok(report)
    }

    /// Secret-shared aggregation: clients split their deltas, edges keep
    /// per-slot sums, the cloud only ever sees those sums.
    fn apply_secure(&mut self, round: usize, updates: Vec<ClientUpdate>) -> Result<RoundReport> {
        let mut report = RoundReport::default();
        if updates.is_empty() {
            report.skipped = true;
            return Ok(report);
        }
        let m = self.cfg.mpc.shares;
        let len = self.global.len();
        let mut edges: Vec<ShareAccumulator> = (0..self.topology.edges.len()).map(|_| ShareAccumulator::new(m, len)).collect();
        for u in &updates {
            let seed = derive_seed(self.cfg.seed, Stream::Shares, round as u64, u.client_id as u64);
            let set = split_shares(u.client_id, &u.delta, m, seed)?;
            edges[self.topology.clients[u.client_id as usize].edge].add(&set)?;
        }
        let sets: Vec<_> = edges
            .into_iter()
            .enumerate()
            .filter(|(_, acc)| acc.clients() > 0)
            .map(|(i, acc)| acc.into_share_set(i as ClientId))
            .collect();
        let mean = secure_aggregate(&sets, updates.len(), self.global.layout())?;
        self.history.observe_round(&updates, &mean);
        self.global.add_scaled(&mean, 1.0)?;
        for u in &updates {
            *report.staleness_histogram.entry(u.staleness).or_insert(0) += 1;
        }
        report.received = updates.iter().map(|u| u.client_id).collect();
        report.selected = report.received.clone();
        Ok(report)
    }

    fn finish_report(&mut self, round: usize, mut report: RoundReport) -> Result<RoundReport> {
        let (accuracy, loss) = self.evaluate()?;
        report.round = round + 1;
        report.accuracy = accuracy;
        report.loss = loss;
        report.bytes_up = self.traffic.round_total(round, Direction::Up);
        report.bytes_down = self.traffic.round_total(round, Direction::Down);
        report.bytes_edge = self.traffic.round_total(round, Direction::EdgeUp);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Strategy;
    use crate::data::{gen_synthetic, PartitionKind, SyntheticSpec};

    fn setup(cfg: &SimulationConfig, clients: usize) -> (Vec<Dataset>, Dataset) {
        let data = gen_synthetic(&SyntheticSpec { n: 600, ..SyntheticSpec::default() }, cfg.seed).unwrap();
        let spec = PartitionSpec { kind: PartitionKind::Iid {}, n_clients: clients };
        federate(&data, 0.2, &spec, cfg.seed).unwrap()
    }

    fn small(rounds: usize) -> SimulationConfig {
        SimulationConfig { rounds, training: TrainConfig { epochs: 1, ..TrainConfig::default() }, ..SimulationConfig::default() }
    }

    #[test]
    fn single_client_round_applies_its_delta() {
        let cfg = SimulationConfig {
            participation: 1.0,
            aggregator: AggregatorConfig { strategy: Strategy::Fedavg, ..AggregatorConfig::default() },
            ..small(1)
        };
        let (shards, holdout) = setup(&cfg, 1);
        let mut sim = Simulation::new(cfg.clone(), shards.clone(), holdout).unwrap();
        let base = sim.global().clone();
        sim.run_round().unwrap();
        let seed = derive_seed(cfg.seed, Stream::Train, 0, 0);
        let u = local_train(&shards[0], &base, &cfg.model, &cfg.training, seed, 0).unwrap();
        // dense uploads travel as 32-bit floats
        let sent: Vec<f64> = u.delta.values().iter().map(|&v| v as f32 as f64).collect();
        let expected: Vec<f64> = base.values().iter().zip(&sent).map(|(b, d)| b + d).collect();
        assert_eq!(sim.global().values(), expected.as_slice());
    }

    #[test]
    fn reports_match_traffic_ledger() {
        let cfg = SimulationConfig { comms: CommsConfig::full(), ..small(3) };
        let (shards, holdout) = setup(&cfg, 4);
        let mut sim = Simulation::new(cfg, shards, holdout).unwrap();
        let reports = sim.run().unwrap();
        let up: u64 = reports.iter().map(|r| r.bytes_up).sum();
        assert_eq!(up, sim.traffic().total(Direction::Up));
        let edge: u64 = reports.iter().map(|r| r.bytes_edge).sum();
        assert_eq!(edge, sim.traffic().total(Direction::EdgeUp));
    }

    #[test]
    fn mpc_and_comms_are_exclusive() {
        let cfg = SimulationConfig { comms: CommsConfig::full(), mpc: MpcConfig { enabled: true, shares: 2 }, ..small(1) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn async_rounds_record_staleness() {
        let cfg = SimulationConfig { mode: Mode::Async, participation: 1.0, ..small(6) };
        let (shards, holdout) = setup(&cfg, 6);
        let mut sim = Simulation::new(cfg, shards, holdout).unwrap();
        let reports = sim.run().unwrap();
        let stale: usize = reports.iter().flat_map(|r| r.staleness_histogram.iter()).filter(|(&s, _)| s > 0).map(|(_, &c)| c).sum();
        assert!(stale > 0, "expected some late updates");
        assert!(reports.iter().all(|r| r.seconds > 0.0));
    }
}
