//! Client -> edge -> cloud layout and path timing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comms::{transmit, LinkModel};
use crate::error::{invalid, Error, Result};
use crate::model::{ClientId, Dataset};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub edges: usize,
    /// Client to edge.
    pub uplink: LinkModel,
    /// Model broadcast to each client.
    pub downlink: LinkModel,
    /// Edge to cloud.
    pub edge_link: LinkModel,
    /// Seconds of local compute per sample per epoch on the fastest device.
    pub compute_per_sample: f64,
    /// Devices are up to `1 + speed_spread` times slower than the fastest.
    pub speed_spread: f64,
    /// Seconds the cloud spends aggregating.
    pub aggregation_seconds: f64,
    /// Async mode: fraction of a round's updates that closes the round.
    pub async_quorum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            edges: 2,
            uplink: LinkModel { bandwidth: 50_000.0, latency: 0.02 },
            downlink: LinkModel { bandwidth: 1_000_000.0, latency: 0.02 },
            edge_link: LinkModel { bandwidth: 10_000_000.0, latency: 0.01 },
            compute_per_sample: 2e-5,
            speed_spread: 1.0,
            aggregation_seconds: 0.005,
            async_quorum: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edges == 0 {
            return Err(invalid("network.edges must be at least 1"));
        }
        self.uplink.validate()?;
        self.downlink.validate()?;
        self.edge_link.validate()?;
        for (name, v) in [
            ("network.compute_per_sample", self.compute_per_sample),
            ("network.speed_spread", self.speed_spread),
            ("network.aggregation_seconds", self.aggregation_seconds),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.async_quorum > 0.0 && self.async_quorum <= 1.0) {
            return Err(invalid("network.async_quorum must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientNode {
    pub id: ClientId,
    pub edge: usize,
    pub data: Dataset,
    /// Multiplier on compute time, at least 1.
    pub slowdown: f64,
    pub uplink: LinkModel,
}

#[derive(Debug, Clone)]
pub struct EdgeNode {
    pub id: usize,
    pub link: LinkModel,
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub clients: Vec<ClientNode>,
    pub edges: Vec<EdgeNode>,
    pub downlink: LinkModel,
}

impl Topology {
    /// Client `i` joins edge `i mod edges`; device slowdowns are drawn from
    /// the topology stream.
    pub fn build(shards: Vec<Dataset>, net: &NetworkConfig, seed: u64) -> Result<Topology> {
        net.validate()?;
        if shards.is_empty() {
            return Err(Error::Empty("client shards"));
        }
        let mut rng = stream_rng(seed, Stream::Topology, 0, 0);
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(i, data)| ClientNode {
                id: i as ClientId,
                edge: i % net.edges,
                data,
                slowdown: 1.0 + net.speed_spread * rng.random::<f64>(),
                uplink: net.uplink,
            })
            .collect();
        let edges = (0..net.edges).map(|id| EdgeNode { id, link: net.edge_link }).collect();
        Ok(Topology { clients, edges, downlink: net.downlink })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clients.iter().find(|c| c.edge >= self.edges.len()) {
            return Err(invalid(format!("client {} maps to missing edge {}", c.id, c.edge)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }
}

/// One client's contribution to a synchronous round: the time from round
/// start until its payload reaches the edge, and the payload size the edge
/// forwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientPath {
    pub edge: usize,
    pub seconds: f64,
    pub bytes: u64,
}

/// Broadcast, local compute, then upload.
pub fn client_path_seconds(
    client: &ClientNode,
    net: &NetworkConfig,
    epochs: usize,
    download_bytes: u64,
    upload_bytes: u64,
) -> Result<f64> {
    let down = transmit(download_bytes, &net.downlink)?;
    let compute = client.data.len() as f64 * epochs as f64 * net.compute_per_sample * client.slowdown;
    let up = transmit(upload_bytes, &client.uplink)?;
    Ok(down + compute + up)
}

/// Each edge waits for its slowest client and then forwards everything it
/// holds; the round ends when the slowest edge lands plus aggregation time.
pub fn sync_round_time(paths: &[ClientPath], edges: &[EdgeNode], aggregation_seconds: f64) -> Result<f64> {
    let mut slowest = 0.0f64;
    for edge in edges {
        let members: Vec<&ClientPath> = paths.iter().filter(|p| p.edge == edge.id).collect();
        if members.is_empty() {
            continue;
        }
        let ready = members.iter().map(|p| p.seconds).fold(0.0, f64::max);
        let bytes = members.iter().map(|p| p.bytes).sum();
        slowest = slowest.max(ready + transmit(bytes, &edge.link)?);
    }
    if let Some(p) = paths.iter().find(|p| p.edge >= edges.len()) {
        return Err(invalid(format!("path references missing edge {}", p.edge)));
    }
    Ok(slowest + aggregation_seconds)
}
