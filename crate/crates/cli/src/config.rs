//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use fedpriv_core::aggregation::AggregatorConfig;
use fedpriv_core::comms::CommsConfig;
use fedpriv_core::data::{gen_synthetic, load_idx, PartitionKind, PartitionSpec, SyntheticSpec};
use fedpriv_core::model::{Activation, EncoderConfig, TrainConfig};
use fedpriv_core::simulation::{
    federate, AttackMode, AttackSpec, Mode, MpcConfig, NetworkConfig, PrivacyConfig, SimulationConfig,
};
use fedpriv_core::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients: usize,
    pub participation: f64,
    pub mode: Mode,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub aggregator: AggregatorConfig,
    pub privacy: PrivacyConfig,
    pub comms: CommsConfig,
    pub mpc: MpcConfig,
    pub attack: AttackSection,
    pub network: NetworkConfig,
    pub data: DataSection,
    /// Absolute accuracy for rounds-to-target; defaults to 0.9 of the best
    /// accuracy reached in the run or comparison.
    pub target_accuracy: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            rounds: 30,
            local_epochs: 5,
            clients: 10,
            participation: 0.8,
            mode: Mode::Sync,
            model: ModelSection::default(),
            training: TrainingSection::default(),
            aggregator: AggregatorConfig::default(),
            privacy: PrivacyConfig::default(),
            comms: CommsConfig::dense(),
            mpc: MpcConfig::default(),
            attack: AttackSection::default(),
            network: NetworkConfig::default(),
            data: DataSection::default(),
            target_accuracy: None,
        }
    }
}

/// Hidden layers only; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: vec![32], activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch: usize,
    pub lr: f64,
    pub clip: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection { batch: t.batch, lr: t.lr, clip: t.clip }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub enabled: bool,
    pub mode: AttackMode,
    /// Clients `0..malicious` turn malicious.
    pub malicious: u32,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection { enabled: false, mode: AttackMode::NormBoost { factor: 10.0 }, malicious: 0 }
    }
}

impl AttackSection {
    pub fn spec(&self) -> AttackSpec {
        if self.enabled {
            AttackSpec::first(self.mode, self.malicious)
        } else {
            AttackSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub partition: PartitionKind,
    pub holdout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            partition: PartitionKind::Dirichlet { alpha: 0.3 },
            holdout_fraction: 0.2,
        }
    }
}

/// Everything a simulation needs, resolved from a config.
pub struct Prepared {
    pub sim: SimulationConfig,
    pub shards: Vec<Dataset>,
    pub holdout: Dataset,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        ExperimentConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: &str| Err(CliError::Config(format!("{key}: {msg}")));
        if self.clients == 0 {
            return bad("clients", "must be at least 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", "must lie in (0, 1]");
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return bad("data.holdout_fraction", "must lie in (0, 1)");
        }
        if self.attack.enabled && self.attack.malicious as usize > self.clients {
            return bad("attack.malicious", "exceeds the number of clients");
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return bad("target_accuracy", "must lie in [0, 1]");
            }
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden", "layer widths must be positive");
        }
        let mut sim = self.simulation_config(2, 2);
        sim.rounds = sim.rounds.max(1);
        sim.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    fn simulation_config(&self, input: usize, classes: usize) -> SimulationConfig {
        let mut dims = vec![input];
        dims.extend(&self.model.hidden);
        dims.push(classes);
        let activations = vec![self.model.activation; self.model.hidden.len()];
        SimulationConfig {
            seed: self.seed,
            rounds: self.rounds,
            mode: self.mode,
            participation: self.participation,
            model: EncoderConfig { layer_dims: dims, activations },
            training: TrainConfig {
                epochs: self.local_epochs,
                batch: self.training.batch,
                lr: self.training.lr,
                clip: self.training.clip,
            },
            aggregator: self.aggregator.clone(),
            privacy: self.privacy.clone(),
            comms: self.comms.clone(),
            mpc: self.mpc.clone(),
            attack: self.attack.spec(),
            network: self.network.clone(),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        Ok(match &self.data.source {
            DataSource::Synthetic(spec) => gen_synthetic(spec, self.seed)?,
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
        })
    }

    /// Loads the data, splits it and builds the simulation config.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let data = self.load_dataset()?;
        let spec = PartitionSpec { kind: self.data.partition, n_clients: self.clients };
        let (shards, holdout) = federate(&data, self.data.holdout_fraction, &spec, self.seed)?;
        let sim = self.simulation_config(data.dim(), data.classes());
        Ok(Prepared { sim, shards, holdout })
    }
}
