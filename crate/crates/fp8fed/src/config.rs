//! Run configuration: a TOML schema with audited defaults, strict
//! validation, and builders that translate the file into the engine's
//! native structs.
//!
//! Every section is optional and every key has a default, so the empty
//! file is a complete (i.i.d., 100-client, 300-round) recipe. Unknown
//! keys and sections are rejected rather than ignored — a typo should
//! fail loudly, not silently run the default. `to_toml` re-serializes
//! the *effective* configuration (defaults and command-line overrides
//! applied), which is what gets archived next to every run's metrics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Fp8Format};
use crate::data::{PartitionSpec, Scheme};
use crate::fed::{Aggregation, CommMode, FedConfig};
use crate::qat::{LocalUpdateConfig, Loss, ModelSpec, QatError, QuantMode};
use crate::server_opt::{AlphaAt, ObjectiveDraws, ServerOptConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// The TOML layer's message already carries line and column context.
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration ({origin}): {reason}")]
    Invalid { origin: String, reason: String },
}

/// Quantization recipe selected by `[quant].method`.
///
/// The method picks the training mode, the link mode, and the
/// aggregation rule as a bundle; `train =` / `comm =` keys override the
/// first two individually for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full-precision training and links, plain federated averaging.
    Fp32,
    /// Quantization-aware local training (deterministic rounding),
    /// unbiased stochastic rounding on both links, federated averaging.
    Uq,
    /// `uq` plus the server-side post-aggregation optimizer.
    UqPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    CrossEntropy,
    HalfMse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceChoice {
    Synthetic,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    Iid,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainChoice {
    Off,
    Det,
    Rand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommChoice {
    Off,
    Det,
    Rand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveChoice {
    Det,
    RandFixedSeed,
    RandResampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaAtChoice {
    UpdatedWeights,
    FederatedAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub rounds: usize,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, rounds: 300, threads: 1, out: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden-layer widths; empty means multinomial logistic regression.
    pub hidden: Vec<usize>,
    pub loss: LossChoice,
    /// Quantize hidden activations during training (weights always
    /// follow the training mode). Off by default: the parity studies
    /// compress the model and the links, not the forward features.
    pub quantize_activations: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![32], loss: LossChoice::CrossEntropy, quantize_activations: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceChoice,
    /// CSV file for `source = "csv"`; header row, feature columns, one
    /// trailing integer label column.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// The remaining keys describe the synthetic blob generator and are
    /// ignored for CSV input (class count is inferred from the labels).
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    pub separation: f64,
    /// Fraction of examples held out for server-side evaluation.
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: SourceChoice::Synthetic,
            path: None,
            classes: 10,
            dims: 20,
            samples: 5000,
            separation: 6.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: SchemeChoice,
    /// Symmetric Dirichlet concentration for the label-skew scheme;
    /// smaller is more heterogeneous. Ignored for `iid`.
    pub concentration: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { scheme: SchemeChoice::Iid, concentration: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedSection {
    pub clients: usize,
    /// Fraction of clients activated each round.
    pub participation: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for FederatedSection {
    fn default() -> Self {
        Self {
            clients: 100,
            participation: 0.1,
            local_steps: 5,
            batch_size: 50,
            lr: 0.1,
            weight_decay: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub method: Method,
    pub exp_bits: u32,
    pub man_bits: u32,
    /// Override the method's training-time rounding mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainChoice>,
    /// Override the method's link rounding mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm: Option<CommChoice>,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self { method: Method::Uq, exp_bits: 4, man_bits: 3, train: None, comm: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerOptSection {
    pub gd_steps: usize,
    pub lr_grid: Vec<f64>,
    pub alpha_grid_points: usize,
    pub objective: ObjectiveChoice,
    pub alpha_at: AlphaAtChoice,
}

impl Default for ServerOptSection {
    fn default() -> Self {
        let d = ServerOptConfig::default();
        Self {
            gd_steps: d.gd_steps,
            lr_grid: d.lr_grid,
            alpha_grid_points: d.alpha_grid_points,
            objective: ObjectiveChoice::RandFixedSeed,
            alpha_at: AlphaAtChoice::UpdatedWeights,
        }
    }
}

/// The complete, self-describing recipe for one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub partition: PartitionSection,
    pub federated: FederatedSection,
    pub quant: QuantSection,
    pub server_opt: ServerOptSection,
}

/// Parse and validate a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Parse and validate configuration text; `origin` names it in errors.
pub fn parse_config_str(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text)
        .map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
    cfg.validate(origin)?;
    Ok(cfg)
}

impl RunConfig {
    /// Reject every recipe the engine would choke on, with one clear
    /// reason. `origin` names the file (or other source) in the error.
    pub fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        let fail = |reason: String| {
            Err(ConfigError::Invalid { origin: origin.to_string(), reason })
        };
        if self.run.rounds == 0 {
            return fail("run.rounds must be >= 1".into());
        }
        if self.run.threads == 0 {
            return fail("run.threads must be >= 1".into());
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return fail("model.hidden widths must be >= 1".into());
        }
        match self.data.source {
            SourceChoice::Synthetic => {
                if self.data.classes < 2 {
                    return fail("data.classes must be >= 2".into());
                }
                if self.data.dims < self.data.classes {
                    return fail(format!(
                        "data.dims must be >= data.classes to place {} class means, got {}",
                        self.data.classes, self.data.dims
                    ));
                }
                if !(self.data.separation.is_finite() && self.data.separation >= 0.0) {
                    return fail("data.separation must be finite and >= 0".into());
                }
                let test_n =
                    ((self.data.samples as f64) * self.data.test_fraction).round() as usize;
                let train_n = self.data.samples.saturating_sub(test_n);
                if train_n < self.federated.clients {
                    return fail(format!(
                        "{} training examples cannot cover {} clients; raise data.samples or lower data.test_fraction",
                        train_n, self.federated.clients
                    ));
                }
            }
            SourceChoice::Csv => match &self.data.path {
                None => return fail("data.path is required when data.source = \"csv\"".into()),
                Some(p) if !p.exists() => {
                    return fail(format!("data.path {} does not exist", p.display()));
                }
                Some(_) => {}
            },
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return fail(format!(
                "data.test_fraction must be in (0, 1), got {}",
                self.data.test_fraction
            ));
        }
        if self.partition.scheme == SchemeChoice::Dirichlet
            && !(self.partition.concentration.is_finite() && self.partition.concentration > 0.0)
        {
            return fail("partition.concentration must be finite and > 0".into());
        }
        if self.federated.clients == 0 {
            return fail("federated.clients must be >= 1".into());
        }
        if !(self.federated.participation > 0.0 && self.federated.participation <= 1.0) {
            return fail(format!(
                "federated.participation must be in (0, 1], got {}",
                self.federated.participation
            ));
        }
        if self.federated.participation * (self.federated.clients as f64) < 1.0 - 1e-9 {
            return fail(format!(
                "participation * clients must be >= 1 so at least one client is active, got {} * {}",
                self.federated.participation, self.federated.clients
            ));
        }
        if self.federated.local_steps == 0 {
            return fail("federated.local_steps must be >= 1".into());
        }
        if self.federated.batch_size == 0 {
            return fail("federated.batch_size must be >= 1".into());
        }
        if !(self.federated.lr.is_finite() && self.federated.lr > 0.0) {
            return fail("federated.lr must be finite and > 0".into());
        }
        if !(self.federated.weight_decay.is_finite() && self.federated.weight_decay >= 0.0) {
            return fail("federated.weight_decay must be finite and >= 0".into());
        }
        if let Err(e) = Fp8Format::new(self.quant.exp_bits, self.quant.man_bits) {
            return fail(e.to_string());
        }
        if self.effective_comm() != CommMode::Off
            && 1 + self.quant.exp_bits + self.quant.man_bits != 8
        {
            return fail(format!(
                "quantized links pack one byte per value, so 1 + exp_bits + man_bits must be 8; got 1 + {} + {}",
                self.quant.exp_bits, self.quant.man_bits
            ));
        }
        if matches!(self.effective_aggregation(), Aggregation::ServerOpt(_)) {
            if let Err(e) = self.server_opt_config().validate() {
                return fail(e.to_string());
            }
        }
        Ok(())
    }

    /// Serialize the effective configuration for the run archive.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }

    pub fn method_label(&self) -> &'static str {
        match self.quant.method {
            Method::Fp32 => "fp32",
            Method::Uq => "uq",
            Method::UqPlus => "uq_plus",
        }
    }

    /// Training-time rounding mode: the method's preset unless
    /// overridden by `quant.train`.
    pub fn effective_train(&self) -> QuantMode {
        let preset = match self.quant.method {
            Method::Fp32 => QuantMode::Off,
            Method::Uq | Method::UqPlus => QuantMode::Det,
        };
        match self.quant.train {
            None => preset,
            Some(TrainChoice::Off) => QuantMode::Off,
            Some(TrainChoice::Det) => QuantMode::Det,
            Some(TrainChoice::Rand) => QuantMode::Rand,
        }
    }

    /// Link rounding mode: the method's preset unless overridden by
    /// `quant.comm`.
    pub fn effective_comm(&self) -> CommMode {
        let preset = match self.quant.method {
            Method::Fp32 => CommMode::Off,
            Method::Uq | Method::UqPlus => CommMode::Rand,
        };
        match self.quant.comm {
            None => preset,
            Some(CommChoice::Off) => CommMode::Off,
            Some(CommChoice::Det) => CommMode::Det,
            Some(CommChoice::Rand) => CommMode::Rand,
        }
    }

    /// Aggregation rule: the server optimizer runs exactly for
    /// `method = "uq_plus"`.
    pub fn effective_aggregation(&self) -> Aggregation {
        match self.quant.method {
            Method::Fp32 | Method::Uq => Aggregation::FedAvg,
            Method::UqPlus => Aggregation::ServerOpt(self.server_opt_config()),
        }
    }

    pub fn fp8_format(&self) -> Result<Fp8Format, CodecError> {
        Fp8Format::new(self.quant.exp_bits, self.quant.man_bits)
    }

    /// Build the network described by `[model]` for the given dataset
    /// shape.
    pub fn model_spec(&self, input_dims: usize, classes: usize) -> Result<ModelSpec, QatError> {
        let mut dims = Vec::with_capacity(self.model.hidden.len() + 2);
        dims.push(input_dims);
        dims.extend_from_slice(&self.model.hidden);
        dims.push(classes);
        let loss = match self.model.loss {
            LossChoice::CrossEntropy => Loss::CrossEntropy,
            LossChoice::HalfMse => Loss::HalfMse,
        };
        let mut spec = ModelSpec::mlp(&dims, loss, self.effective_train())?;
        spec.fmt = self.fp8_format().map_err(|e| QatError::BadSpec { reason: e.to_string() })?;
        spec.quantize_activations = self.model.quantize_activations;
        Ok(spec)
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            seed: self.run.seed,
            rounds: self.run.rounds,
            participation: self.federated.participation,
            local: LocalUpdateConfig {
                steps: self.federated.local_steps,
                batch_size: self.federated.batch_size,
                lr: self.federated.lr,
                weight_decay: self.federated.weight_decay,
                // Clips follow the model learning rate.
                clip_lr: None,
            },
            comm: self.effective_comm(),
            aggregation: self.effective_aggregation(),
            threads: self.run.threads,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let scheme = match self.partition.scheme {
            SchemeChoice::Iid => Scheme::Iid,
            SchemeChoice::Dirichlet => {
                Scheme::Dirichlet { concentration: self.partition.concentration }
            }
        };
        PartitionSpec { scheme, clients: self.federated.clients, seed: self.run.seed }
    }

    pub fn server_opt_config(&self) -> ServerOptConfig {
        ServerOptConfig {
            gd_steps: self.server_opt.gd_steps,
            lr_grid: self.server_opt.lr_grid.clone(),
            alpha_grid_points: self.server_opt.alpha_grid_points,
            objective: match self.server_opt.objective {
                ObjectiveChoice::Det => ObjectiveDraws::Det,
                ObjectiveChoice::RandFixedSeed => ObjectiveDraws::RandFixedSeed,
                ObjectiveChoice::RandResampled => ObjectiveDraws::RandResampled,
            },
            alpha_at: match self.server_opt.alpha_at {
                AlphaAtChoice::UpdatedWeights => AlphaAt::UpdatedWeights,
                AlphaAtChoice::FederatedAverage => AlphaAt::FederatedAverage,
            },
        }
    }
}
