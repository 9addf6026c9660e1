//! Experiment configuration: JSON parsing, validation, presets.
//!
//! Validation walks the document once and reports every violation
//! together; unknown keys are rejected so typos cannot silently fall back
//! to defaults.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::data::{desk5_specs, paper7_specs, ClientDatasetSpec};
use crate::fedcore::{AblationFlags, Method};
use crate::model::{default_model_spec, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Inproc,
    Socket,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum DataConfig {
    Preset(String),
    Custom(Vec<ClientDatasetSpec>),
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Named(String),
    Custom(Vec<LayerSpec>),
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_clients: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub method: Method,
    pub lambda: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha_sc: f64,
    pub prox_mu: f64,
    pub synth_batch: usize,
    pub ablation: AblationFlags,
    pub transport: TransportKind,
    pub socket_port: u16,
    pub data: DataConfig,
    pub model: ModelConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults with the given method.
    pub fn defaults(method: Method) -> Self {
        Self {
            seed: 42,
            num_clients: 5,
            rounds: 30,
            local_epochs: 2,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            method,
            lambda: 0.4,
            gamma: 0.25,
            epsilon: 0.1,
            alpha_sc: 1.0,
            prox_mu: 0.01,
            synth_batch: 4,
            ablation: AblationFlags::default(),
            transport: TransportKind::Inproc,
            socket_port: 0,
            data: DataConfig::Preset("desk5".to_string()),
            model: ModelConfig::Named("default".to_string()),
        }
    }

    /// Larger preset mirroring a 7-client, 60-round x 5-epoch protocol.
    pub fn paper_scale(method: Method) -> Self {
        Self {
            rounds: 60,
            local_epochs: 5,
            num_clients: 7,
            data: DataConfig::Preset("paper7".to_string()),
            ..Self::defaults(method)
        }
    }

    pub fn client_specs(&self) -> Result<Vec<ClientDatasetSpec>, ConfigErrors> {
        match &self.data {
            DataConfig::Preset(name) => match name.as_str() {
                "desk5" => Ok(desk5_specs()),
                "paper7" => Ok(paper7_specs()),
                other => Err(ConfigErrors::single(
                    "data",
                    format!("unknown preset '{other}' (expected desk5 or paper7)"),
                )),
            },
            DataConfig::Custom(specs) => Ok(specs.clone()),
        }
    }

    pub fn model_spec(&self) -> Result<Vec<LayerSpec>, ConfigErrors> {
        match &self.model {
            ModelConfig::Named(name) => match name.as_str() {
                "default" => Ok(default_model_spec()),
                other => Err(ConfigErrors::single(
                    "model",
                    format!("unknown model '{other}' (expected \"default\" or a layer list)"),
                )),
            },
            ModelConfig::Custom(spec) => Ok(spec.clone()),
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl ConfigErrors {
    fn single(field: &str, message: String) -> Self {
        Self(vec![ConfigIssue {
            field: field.to_string(),
            message,
        }])
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "configuration invalid ({} problem(s)):", self.0.len())?;
        for issue in &self.0 {
            writeln!(f, "  - {}: {}", issue.field, issue.message)?;
        }
        Ok(())
    }
}

struct Validator {
    issues: Vec<ConfigIssue>,
}

impl Validator {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn f64_in(&mut self, map: &serde_json::Map<String, Value>, key: &str, lo: f64, hi: f64, default: f64) -> f64 {
        match map.get(key) {
            None => default,
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() && x >= lo && x <= hi => x,
                Some(x) => {
                    self.push(key, format!("{x} outside [{lo}, {hi}]"));
                    default
                }
                None => {
                    self.push(key, format!("expected a number, got {v}"));
                    default
                }
            },
        }
    }

    fn uint(&mut self, map: &serde_json::Map<String, Value>, key: &str, min: u64, default: u64) -> u64 {
        match map.get(key) {
            None => default,
            Some(v) => match v.as_u64() {
                Some(x) if x >= min => x,
                Some(x) => {
                    self.push(key, format!("{x} must be at least {min}"));
                    default
                }
                None => {
                    self.push(key, format!("expected a non-negative integer, got {v}"));
                    default
                }
            },
        }
    }

    fn boolean(&mut self, map: &serde_json::Map<String, Value>, key: &str, default: bool) -> bool {
        match map.get(key) {
            None => default,
            Some(Value::Bool(b)) => *b,
            Some(v) => {
                self.push(key, format!("expected true or false, got {v}"));
                default
            }
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "num_clients",
    "rounds",
    "local_epochs",
    "lr",
    "beta1",
    "beta2",
    "method",
    "lambda",
    "gamma",
    "epsilon",
    "alpha_sc",
    "prox_mu",
    "synth_batch",
    "ablation",
    "transport",
    "socket_port",
    "data",
    "model",
];

/// Parses and fully validates a JSON config document. Whitespace-only input
/// counts as an empty object, so required fields are reported by name.
pub fn parse_config_str(content: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let trimmed = content.trim();
    let value: Value = if trimmed.is_empty() {
        Value::Object(serde_json::Map::new())
    } else {
        serde_json::from_str(trimmed)
            .map_err(|e| ConfigErrors::single("document", format!("invalid JSON: {e}")))?
    };
    let map = match value {
        Value::Object(map) => map,
        other => {
            return Err(ConfigErrors::single(
                "document",
                format!("expected a JSON object, got {other}"),
            ))
        }
    };

    let mut v = Validator { issues: Vec::new() };
    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            v.push(key, "unknown key");
        }
    }

    let method = match map.get("method") {
        None => {
            v.push("method", "required field (fedavg, fedprox, fedbn, or fedsoda)");
            Method::FedSoda
        }
        Some(Value::String(s)) => s.parse::<Method>().unwrap_or_else(|e| {
            v.push("method", e);
            Method::FedSoda
        }),
        Some(other) => {
            v.push("method", format!("expected a string, got {other}"));
            Method::FedSoda
        }
    };

    let seed = v.uint(&map, "seed", 0, 42);
    let num_clients = v.uint(&map, "num_clients", 1, 5) as usize;
    let rounds = v.uint(&map, "rounds", 0, 30) as u32;
    let local_epochs = v.uint(&map, "local_epochs", 0, 2) as u32;
    let lr = v.f64_in(&map, "lr", f64::MIN_POSITIVE, 1.0, 1e-4);
    let beta1 = v.f64_in(&map, "beta1", 0.0, 0.999_999, 0.9);
    let beta2 = v.f64_in(&map, "beta2", 0.0, 0.999_999, 0.95);
    let lambda = v.f64_in(&map, "lambda", 0.0, 1.0, 0.4);
    let gamma = v.f64_in(&map, "gamma", 0.0, 1.0, 0.25);
    let epsilon = v.f64_in(&map, "epsilon", 0.0, 1.0, 0.1);
    let alpha_sc = v.f64_in(&map, "alpha_sc", 0.0, 1e6, 1.0);
    let prox_mu = v.f64_in(&map, "prox_mu", 0.0, 1e9, 0.01);
    let synth_batch = v.uint(&map, "synth_batch", 1, 4) as usize;
    let socket_port = v.uint(&map, "socket_port", 0, 0) as u16;

    let ablation = match map.get("ablation") {
        None => AblationFlags::default(),
        Some(Value::Object(obj)) => {
            for key in obj.keys() {
                if !["so", "da", "lsc"].contains(&key.as_str()) {
                    v.push(&format!("ablation.{key}"), "unknown key");
                }
            }
            AblationFlags {
                so: v.boolean(obj, "so", true),
                da: v.boolean(obj, "da", true),
                lsc: v.boolean(obj, "lsc", true),
            }
        }
        Some(other) => {
            v.push("ablation", format!("expected an object, got {other}"));
            AblationFlags::default()
        }
    };

    let transport = match map.get("transport") {
        None => TransportKind::Inproc,
        Some(Value::String(s)) => match s.as_str() {
            "inproc" => TransportKind::Inproc,
            "socket" => TransportKind::Socket,
            other => {
                v.push("transport", format!("unknown backend '{other}' (inproc or socket)"));
                TransportKind::Inproc
            }
        },
        Some(other) => {
            v.push("transport", format!("expected a string, got {other}"));
            TransportKind::Inproc
        }
    };

    let data = match map.get("data") {
        None => DataConfig::Preset("desk5".to_string()),
        Some(Value::String(s)) => {
            if !["desk5", "paper7"].contains(&s.as_str()) {
                v.push("data", format!("unknown preset '{s}' (desk5 or paper7)"));
            }
            DataConfig::Preset(s.clone())
        }
        Some(arr @ Value::Array(_)) => {
            match serde_json::from_value::<Vec<ClientDatasetSpec>>(arr.clone()) {
                Ok(specs) => {
                    for spec in &specs {
                        if let Err(e) = spec.validate() {
                            v.push("data", e.to_string());
                        }
                    }
                    DataConfig::Custom(specs)
                }
                Err(e) => {
                    v.push("data", format!("bad client spec list: {e}"));
                    DataConfig::Preset("desk5".to_string())
                }
            }
        }
        Some(other) => {
            v.push("data", format!("expected a preset name or client spec list, got {other}"));
            DataConfig::Preset("desk5".to_string())
        }
    };

    let model = match map.get("model") {
        None => ModelConfig::Named("default".to_string()),
        Some(Value::String(s)) => {
            if s != "default" {
                v.push("model", format!("unknown model '{s}'"));
            }
            ModelConfig::Named(s.clone())
        }
        Some(arr @ Value::Array(_)) => match serde_json::from_value::<Vec<LayerSpec>>(arr.clone()) {
            Ok(spec) => {
                if let Err(e) = crate::model::build_model::<f32>(&spec, 0) {
                    v.push("model", e.to_string());
                }
                ModelConfig::Custom(spec)
            }
            Err(e) => {
                v.push("model", format!("bad layer list: {e}"));
                ModelConfig::Named("default".to_string())
            }
        },
        Some(other) => {
            v.push("model", format!("expected \"default\" or a layer list, got {other}"));
            ModelConfig::Named("default".to_string())
        }
    };

    // Cross-field check: the federation size must match num_clients.
    let preset_len = match &data {
        DataConfig::Preset(name) => match name.as_str() {
            "desk5" => Some(5),
            "paper7" => Some(7),
            _ => None,
        },
        DataConfig::Custom(specs) => Some(specs.len()),
    };
    if let Some(n) = preset_len {
        if n != num_clients {
            v.push(
                "num_clients",
                format!("{num_clients} does not match the {n} clients in `data`"),
            );
        }
    }

    if !v.issues.is_empty() {
        return Err(ConfigErrors(v.issues));
    }
    Ok(ExperimentConfig {
        seed,
        num_clients,
        rounds,
        local_epochs,
        lr,
        beta1,
        beta2,
        method,
        lambda,
        gamma,
        epsilon,
        alpha_sc,
        prox_mu,
        synth_batch,
        ablation,
        transport,
        socket_port,
        data,
        model,
    })
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, ConfigErrors> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors::single("document", format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&content)
}
