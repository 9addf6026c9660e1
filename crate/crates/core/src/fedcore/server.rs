//! Server-side state and the per-method aggregation dispatch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::model::{LayerSpec, ParamSet};
use crate::tensor::Tensor;

use super::aggregate::{dynamic_aggregate, fedavg_aggregate, AggError};
use super::similarity::{cross_assess, normalize_similarity, SimilarityError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedAvg,
    FedProx,
    FedBn,
    FedSoda,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FedAvg, Method::FedProx, Method::FedBn, Method::FedSoda];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedBn => "fedbn",
            Method::FedSoda => "fedsoda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedavg" => Ok(Method::FedAvg),
            "fedprox" => Ok(Method::FedProx),
            "fedbn" => Ok(Method::FedBn),
            "fedsoda" => Ok(Method::FedSoda),
            other => Err(format!(
                "unknown method '{other}' (expected fedavg, fedprox, fedbn, or fedsoda)"
            )),
        }
    }
}

/// Module toggles for the fedsoda method. Baselines ignore them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub so: bool,
    pub da: bool,
    pub lsc: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { so: true, da: true, lsc: true }
    }
}

/// What the server learned about a client at registration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientInfo {
    pub client_id: u16,
    pub n_train: usize,
    pub stats: ChannelStats,
    pub image_h: usize,
    pub image_w: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum AggregateError {
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("method {0} requires probe tensors for cross-assessment")]
    MissingProbes(Method),
}

pub struct ServerState {
    pub round: u32,
    pub spec: Vec<LayerSpec>,
    pub global: ParamSet<f32>,
    pub registry: Vec<ClientInfo>,
    pub method: Method,
    pub lambda: f64,
    pub flags: AblationFlags,
}

impl ServerState {
    pub fn new(spec: Vec<LayerSpec>, global: ParamSet<f32>, method: Method, lambda: f64, flags: AblationFlags) -> Self {
        Self {
            round: 0,
            spec,
            global,
            registry: Vec::new(),
            method,
            lambda,
            flags,
        }
    }

    /// Whether this configuration cross-assesses at all (and therefore
    /// needs probe tensors at aggregation time).
    pub fn wants_probes(&self) -> bool {
        self.method == Method::FedSoda && (self.flags.so || self.flags.da)
    }

    /// Whether clients maintain banks and upload them (otherwise any
    /// probes are server-generated unit Gaussians).
    pub fn wants_client_banks(&self) -> bool {
        self.method == Method::FedSoda && self.flags.so
    }

    /// Folds the received client updates into the next global model.
    ///
    /// fedavg/fedprox: sample-count-weighted mean. fedbn: the same, but
    /// normalization layers keep the server's previous values (clients
    /// never load them anyway). fedsoda: cross-assessment plus stratified
    /// aggregation, degrading per the ablation flags — without `da` the
    /// similarity is layer-averaged into a single per-pair weight; without
    /// `so` and `da` both, plain FedAvg.
    pub fn aggregate(
        &mut self,
        updates: &[ParamSet<f32>],
        probes: Option<&[Tensor<f32>]>,
    ) -> Result<(), AggregateError> {
        let counts: Vec<usize> = self.registry.iter().map(|c| c.n_train).collect();
        let next = match self.method {
            Method::FedAvg | Method::FedProx => fedavg_aggregate(updates, &counts)?,
            Method::FedBn => {
                let mut next = fedavg_aggregate(updates, &counts)?;
                for (layer, prev) in next.iter_mut().zip(&self.global) {
                    if prev.is_norm() {
                        *layer = prev.clone();
                    }
                }
                next
            }
            Method::FedSoda => {
                if !self.flags.so && !self.flags.da {
                    fedavg_aggregate(updates, &counts)?
                } else {
                    let probes = probes.ok_or(AggregateError::MissingProbes(self.method))?;
                    let mut cube = cross_assess(&self.spec, updates, probes)?;
                    normalize_similarity(&mut cube);
                    if self.flags.da {
                        dynamic_aggregate(updates, &cube, self.lambda)?
                    } else {
                        // SO without DA: one layer-averaged weight per
                        // client pair modulates the aggregation uniformly
                        // across layers.
                        dynamic_aggregate(updates, &cube.layer_averaged(), self.lambda)?
                    }
                }
            }
        };
        self.global = next;
        Ok(())
    }
}
