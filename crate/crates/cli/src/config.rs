//! Experiment configuration: a flat, strictly-checked JSON document.
//!
//! Unknown keys are rejected so a config file is an unambiguous record of
//! what ran. Defaults: lambda 1, batch size 100, 10 local epochs, learning
//! rate 1e-3, Adam, step-decay schedule starting at 1e4 shrinking by 0.1
//! every 30 rounds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedamp_core::attention::{AttentionFunction, WeightMode};
use fedamp_core::data::{
    gen_synthetic, partition_iid, partition_pathological, partition_practical, PartitionPreset,
    SyntheticSpec,
};
use fedamp_core::federation::{Algorithm, FaultModel};
use fedamp_core::models::{Client, ClientDataset, LossModel};
use fedamp_core::optim::{SolverConfig, SolverMethod, StepSchedule};
use fedamp_core::Error;

fn default_lambda() -> f64 {
    1.0
}
fn default_attention() -> String {
    "negexp".into()
}
fn default_attention_sigma() -> f64 {
    1.0
}
fn default_attention_theta() -> f64 {
    3.0
}
fn default_weight_mode() -> String {
    "clamped".into()
}
fn default_heur_sigma() -> f64 {
    25.0
}
fn default_mu() -> f64 {
    0.01
}
fn default_finetune_epochs() -> usize {
    10
}
fn default_schedule() -> String {
    "step_decay".into()
}
fn default_alpha0() -> f64 {
    1e4
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_decay_period() -> usize {
    30
}
fn default_diminishing_a() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_method() -> String {
    "adam".into()
}
fn default_model() -> String {
    "logistic".into()
}
fn default_hidden() -> usize {
    16
}
fn default_data() -> String {
    "synthetic".into()
}
fn default_groups() -> usize {
    3
}
fn default_clients_per_group() -> usize {
    5
}
fn default_classes() -> usize {
    6
}
fn default_features() -> usize {
    8
}
fn default_mean_shift() -> f64 {
    1.0
}
fn default_noise_std() -> f64 {
    0.5
}
fn default_dominance() -> f64 {
    0.8
}
fn default_test_per_client() -> usize {
    100
}
fn default_out_dir() -> String {
    "out".into()
}
fn default_record_collab() -> bool {
    true
}

/// The raw config document. Flat keys, strict schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // Algorithm.
    pub algorithm: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_attention")]
    pub attention: String,
    #[serde(default = "default_attention_sigma")]
    pub attention_sigma: f64,
    #[serde(default = "default_attention_theta")]
    pub attention_theta: f64,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: String,
    #[serde(default = "default_heur_sigma")]
    pub heur_sigma: f64,
    /// Uniform self-attention weight; when absent, each client's weight is
    /// `1 / (N_i + 1)` with `N_i` its same-group peer count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_weight: Option<f64>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,

    // Server step-size schedule (attentive algorithms only).
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_period")]
    pub decay_period: usize,
    #[serde(default = "default_diminishing_a")]
    pub diminishing_a: f64,

    // Local solver.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_method")]
    pub method: String,

    // Model.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_hidden")]
    pub hidden: usize,

    // Data source.
    #[serde(default = "default_data")]
    pub data: String,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_clients_per_group")]
    pub clients_per_group: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_mean_shift")]
    pub mean_shift: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_dominance")]
    pub dominance: f64,
    /// Per-group train sample counts; a single entry applies to every group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_client: Option<Vec<usize>>,
    #[serde(default = "default_test_per_client")]
    pub test_per_client: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass_file: Option<PathBuf>,
    /// Client count for the iid / pathological partitions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<usize>,

    // Faults.
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_jitter: Option<(usize, usize)>,
    /// Exclude a round's dropped clients from that round's aggregation
    /// instead of mixing in their stale models.
    #[serde(default)]
    pub exclude_dropped: bool,

    // Run control.
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_record_collab")]
    pub record_collab: bool,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Error> {
    let config: ExperimentConfig = serde_json::from_str(text)
        .map_err(|e| config_err(format!("invalid config document: {e}")))?;
    validate(&config)?;
    Ok(config)
}

fn validate(config: &ExperimentConfig) -> Result<(), Error> {
    match config.algorithm.as_str() {
        "fedamp" | "heurfedamp" | "fedavg" | "fedprox" | "fedavg_ft" | "fedprox_ft"
        | "separate" => {}
        other => return Err(config_err(format!("algorithm: unknown value '{other}'"))),
    }
    match config.attention.as_str() {
        "negexp" | "linear" | "tamed_sqrt" | "mcp" | "scad" => {}
        other => return Err(config_err(format!("attention: unknown value '{other}'"))),
    }
    match config.weight_mode.as_str() {
        "clamped" | "strict" => {}
        other => return Err(config_err(format!("weight_mode: unknown value '{other}'"))),
    }
    match config.schedule.as_str() {
        "step_decay" | "constant_theory" | "diminishing" => {}
        other => return Err(config_err(format!("schedule: unknown value '{other}'"))),
    }
    match config.method.as_str() {
        "adam" | "sgd" => {}
        other => return Err(config_err(format!("method: unknown value '{other}'"))),
    }
    match config.model.as_str() {
        "logistic" | "mlp" | "linear_regression" => {}
        other => return Err(config_err(format!("model: unknown value '{other}'"))),
    }
    if !(config.drop_rate.is_finite() && (0.0..1.0).contains(&config.drop_rate)) {
        return Err(config_err(format!(
            "drop_rate: must lie in [0, 1), got {}",
            config.drop_rate
        )));
    }
    if let Some(s) = config.self_weight {
        if !(s.is_finite() && (0.0..1.0).contains(&s)) {
            return Err(config_err(format!(
                "self_weight: must lie in [0, 1), got {s}"
            )));
        }
    }
    match config.data.as_str() {
        "synthetic" => {}
        "idx" => {
            if config.train_images.is_none() || config.train_labels.is_none() {
                return Err(config_err(
                    "idx data needs train_images and train_labels paths",
                ));
            }
            let partition = config
                .partition
                .as_deref()
                .ok_or_else(|| config_err("idx data needs a partition setting"))?;
            match partition {
                "iid" | "pathological" => {
                    if config.clients.is_none() {
                        return Err(config_err(format!(
                            "partition '{partition}' needs a clients count"
                        )));
                    }
                }
                "practical" => {
                    let preset = config
                        .preset
                        .as_deref()
                        .ok_or_else(|| config_err("practical partition needs a preset"))?;
                    match preset {
                        "emnist62" | "mnist100" | "fmnist100" => {}
                        "cifar100_100" => {
                            if config.superclass_file.is_none() {
                                return Err(config_err(
                                    "preset cifar100_100 needs a superclass_file",
                                ));
                            }
                        }
                        other => {
                            return Err(config_err(format!("preset: unknown value '{other}'")))
                        }
                    }
                }
                other => return Err(config_err(format!("partition: unknown value '{other}'"))),
            }
        }
        other => return Err(config_err(format!("data: unknown value '{other}'"))),
    }
    let m = planned_clients(config)?;
    if config.algorithm == "heurfedamp" && m < 2 {
        return Err(config_err(
            "heurfedamp needs at least 2 clients (no peers to weight)",
        ));
    }
    Ok(())
}

/// Client count the config will produce (for presets, the fixed layout).
fn planned_clients(config: &ExperimentConfig) -> Result<usize, Error> {
    match config.data.as_str() {
        "synthetic" => Ok(config.groups * config.clients_per_group),
        _ => match config.partition.as_deref() {
            Some("practical") => Ok(match config.preset.as_deref() {
                Some("emnist62") => 62,
                _ => 100,
            }),
            _ => config
                .clients
                .ok_or_else(|| config_err("clients count missing")),
        },
    }
}

/// Everything `run` needs, built from a validated config.
pub struct Experiment {
    pub clients: Vec<Client>,
    pub algorithm: Algorithm,
    pub solver: SolverConfig,
    pub faults: FaultModel,
    pub rounds: usize,
    pub seed: u64,
    pub record_collab: bool,
}

/// Builds the runnable experiment: loads or generates data, then assembles
/// the algorithm, solver and fault model. `seed_override` takes precedence
/// over the config's seed.
pub fn build_experiment(
    config: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<Experiment, Error> {
    let seed = seed_override.unwrap_or(config.seed);
    let datasets = load_datasets(config, seed)?;
    if datasets.is_empty() {
        return Err(config_err("no clients produced by the data settings"));
    }
    let feature_dim = datasets[0].train.feature_dim();
    let classes = datasets[0].train.classes();

    let model = match config.model.as_str() {
        "logistic" => LossModel::logistic(feature_dim, classes),
        "mlp" => LossModel::mlp(feature_dim, config.hidden, classes),
        "linear_regression" => LossModel::linear_regression(feature_dim),
        other => return Err(config_err(format!("model: unknown value '{other}'"))),
    };
    let clients: Vec<Client> = datasets
        .into_iter()
        .map(|data| Client {
            model: model.clone(),
            data,
        })
        .collect();

    let algorithm = build_algorithm(config, &clients)?;
    algorithm.validate()?;
    let solver = SolverConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        method: match config.method.as_str() {
            "sgd" => SolverMethod::Sgd,
            _ => SolverMethod::Adam,
        },
    };
    solver.validate()?;
    let faults = FaultModel {
        drop_rate: config.drop_rate,
        epoch_jitter: config.epoch_jitter,
        exclude_dropped: config.exclude_dropped,
    };
    faults.validate()?;

    Ok(Experiment {
        clients,
        algorithm,
        solver,
        faults,
        rounds: config.rounds,
        seed,
        record_collab: config.record_collab,
    })
}

fn build_schedule(config: &ExperimentConfig) -> Result<StepSchedule, Error> {
    match config.schedule.as_str() {
        "constant_theory" => {
            if config.rounds == 0 {
                return Err(config_err("constant_theory schedule needs rounds >= 1"));
            }
            StepSchedule::constant_theory(config.lambda, config.rounds)
        }
        "diminishing" => StepSchedule::diminishing(config.diminishing_a),
        _ => StepSchedule::step_decay(config.alpha0, config.decay_factor, config.decay_period),
    }
}

fn build_algorithm(config: &ExperimentConfig, clients: &[Client]) -> Result<Algorithm, Error> {
    Ok(match config.algorithm.as_str() {
        "fedamp" => Algorithm::FedAmp {
            attention: build_attention(config)?,
            schedule: build_schedule(config)?,
            mode: match config.weight_mode.as_str() {
                "strict" => WeightMode::Strict,
                _ => WeightMode::Clamped,
            },
            lambda: config.lambda,
        },
        "heurfedamp" => Algorithm::HeurFedAmp {
            sigma: config.heur_sigma,
            self_weights: self_weights(config, clients),
            schedule: build_schedule(config)?,
            lambda: config.lambda,
        },
        "fedavg" => Algorithm::FedAvg,
        "fedprox" => Algorithm::FedProx { mu: config.mu },
        "fedavg_ft" => Algorithm::FedAvgFt {
            finetune_epochs: config.finetune_epochs,
        },
        "fedprox_ft" => Algorithm::FedProxFt {
            mu: config.mu,
            finetune_epochs: config.finetune_epochs,
        },
        _ => Algorithm::Separate,
    })
}

fn build_attention(config: &ExperimentConfig) -> Result<AttentionFunction, Error> {
    match config.attention.as_str() {
        "linear" => Ok(AttentionFunction::linear()),
        "tamed_sqrt" => AttentionFunction::tamed_sqrt(config.attention_sigma),
        "mcp" => AttentionFunction::mcp(config.attention_sigma, config.attention_theta),
        "scad" => AttentionFunction::scad(config.attention_sigma, config.attention_theta),
        _ => AttentionFunction::neg_exp(config.attention_sigma),
    }
}

/// Per-client self-attention weights: a configured uniform value, or
/// `1 / (N_i + 1)` from the same-group peer count.
fn self_weights(config: &ExperimentConfig, clients: &[Client]) -> Vec<f64> {
    if let Some(s) = config.self_weight {
        return vec![s; clients.len()];
    }
    clients
        .iter()
        .map(|c| {
            let peers = clients
                .iter()
                .filter(|o| o.data.group_id == c.data.group_id)
                .count()
                - 1;
            1.0 / (peers as f64 + 1.0)
        })
        .collect()
}

fn load_datasets(config: &ExperimentConfig, seed: u64) -> Result<Vec<ClientDataset>, Error> {
    match config.data.as_str() {
        "synthetic" => {
            let train_per_client = match &config.train_per_client {
                None => vec![200; config.groups],
                Some(v) if v.len() == 1 => vec![v[0]; config.groups],
                Some(v) => v.clone(),
            };
            gen_synthetic(&SyntheticSpec {
                groups: config.groups,
                clients_per_group: config.clients_per_group,
                classes: config.classes,
                feature_dim: config.features,
                mean_shift: config.mean_shift,
                noise_std: config.noise_std,
                dominance: config.dominance,
                train_per_client,
                test_per_client: config.test_per_client,
                seed,
            })
        }
        _ => {
            let pool = load_idx_pool(config)?;
            match config.partition.as_deref() {
                Some("iid") => partition_iid(
                    &pool,
                    config.clients.unwrap_or(1),
                    config.test_per_client,
                    seed,
                ),
                Some("pathological") => partition_pathological(
                    &pool,
                    config.clients.unwrap_or(1),
                    config.test_per_client,
                    seed,
                ),
                _ => {
                    let preset = load_preset(config)?;
                    partition_practical(&pool, &preset, seed)
                }
            }
        }
    }
}

fn load_idx_pool(config: &ExperimentConfig) -> Result<fedamp_core::models::LabeledDataset, Error> {
    let images_path = config.train_images.as_ref().expect("validated");
    let labels_path = config.train_labels.as_ref().expect("validated");
    let images = fedamp_core::data::read_idx(&read_file(images_path)?)?;
    let labels = fedamp_core::data::read_idx(&read_file(labels_path)?)?;
    let classes = preset_classes(config);
    fedamp_core::data::assemble_idx(images, labels, classes)
}

fn preset_classes(config: &ExperimentConfig) -> usize {
    match config.preset.as_deref() {
        Some("emnist62") => 62,
        Some("cifar100_100") => 100,
        Some(_) => 10,
        None => config.classes,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))
}

fn load_preset(config: &ExperimentConfig) -> Result<PartitionPreset, Error> {
    match config.preset.as_deref() {
        Some("emnist62") => Ok(PartitionPreset::emnist62()),
        Some("mnist100") => Ok(PartitionPreset::mnist100()),
        Some("fmnist100") => Ok(PartitionPreset::fmnist100()),
        Some("cifar100_100") => {
            let path = config.superclass_file.as_ref().expect("validated");
            let text = String::from_utf8(read_file(path)?)
                .map_err(|e| config_err(format!("superclass file is not UTF-8: {e}")))?;
            let table: Vec<usize> = serde_json::from_str(&text).map_err(|e| {
                config_err(format!("superclass file must be a JSON array of ints: {e}"))
            })?;
            PartitionPreset::cifar100_100(&table)
        }
        other => Err(config_err(format!("preset: unknown value '{other:?}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"algorithm": "fedamp", "rounds": 5}"#.into()
    }

    #[test]
    fn minimal_config_applies_defaults_and_round_trips() {
        let config = parse_config(&minimal()).unwrap();
        assert_eq!(config.lambda, 1.0);
        assert_eq!(config.batch_size, 100);
        assert_eq!(config.epochs, 10);
        assert_eq!(config.learning_rate, 1e-3);
        assert_eq!(config.alpha0, 1e4);
        assert_eq!(config.decay_factor, 0.1);
        assert_eq!(config.decay_period, 30);
        let text = serde_json::to_string(&config).unwrap();
        let reparsed = parse_config(&text).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn large_sigma_grid_value_accepted() {
        let config = parse_config(
            r#"{"algorithm": "fedamp", "rounds": 90, "attention_sigma": 100.0}"#,
        )
        .unwrap();
        assert_eq!(config.attention_sigma, 100.0);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config(r#"{"algorithm": "fedamp", "rounds": 5, "typo_key": 1}"#)
            .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("typo_key"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_drop_rate_rejected() {
        let err =
            parse_config(r#"{"algorithm": "fedamp", "rounds": 5, "drop_rate": -0.1}"#).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("drop_rate"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heurfedamp_single_client_conflict() {
        let err = parse_config(
            r#"{"algorithm": "heurfedamp", "rounds": 5, "groups": 1, "clients_per_group": 1}"#,
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("heurfedamp"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_experiment_produces_clients() {
        let config = parse_config(
            r#"{"algorithm": "fedamp", "rounds": 3, "groups": 2, "clients_per_group": 3,
                "classes": 4, "train_per_client": [50], "test_per_client": 20}"#,
        )
        .unwrap();
        let experiment = build_experiment(&config, None).unwrap();
        assert_eq!(experiment.clients.len(), 6);
        assert_eq!(experiment.clients[0].data.train.len(), 50);
        assert_eq!(experiment.clients[0].data.test.len(), 20);
    }

    #[test]
    fn peer_count_self_weights() {
        let config = parse_config(
            r#"{"algorithm": "heurfedamp", "rounds": 2, "groups": 2, "clients_per_group": 3,
                "train_per_client": [30]}"#,
        )
        .unwrap();
        let experiment = build_experiment(&config, None).unwrap();
        match experiment.algorithm {
            Algorithm::HeurFedAmp { self_weights, .. } => {
                // Groups of 3: N_i = 2 peers, weight 1/3.
                assert_eq!(self_weights, vec![1.0 / 3.0; 6]);
            }
            other => panic!("unexpected algorithm {other:?}"),
        }
    }

    #[test]
    fn seed_override_wins() {
        let config = parse_config(r#"{"algorithm": "separate", "rounds": 1, "seed": 7}"#).unwrap();
        let experiment = build_experiment(&config, Some(99)).unwrap();
        assert_eq!(experiment.seed, 99);
    }

    #[test]
    fn alternative_schedules_build() {
        let constant = parse_config(
            r#"{"algorithm": "fedamp", "rounds": 16, "schedule": "constant_theory",
                "lambda": 2.0, "train_per_client": [30]}"#,
        )
        .unwrap();
        let experiment = build_experiment(&constant, None).unwrap();
        match experiment.algorithm {
            Algorithm::FedAmp { schedule, .. } => {
                assert_eq!(schedule.step_size(1).unwrap(), 0.5); // 2 / sqrt(16)
                assert!(schedule.step_size(17).is_err());
            }
            other => panic!("unexpected {other:?}"),
        }

        let diminishing = parse_config(
            r#"{"algorithm": "heurfedamp", "rounds": 4, "schedule": "diminishing",
                "diminishing_a": 3.0, "train_per_client": [30]}"#,
        )
        .unwrap();
        let experiment = build_experiment(&diminishing, None).unwrap();
        match experiment.algorithm {
            Algorithm::HeurFedAmp { schedule, .. } => {
                assert_eq!(schedule.step_size(3).unwrap(), 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
