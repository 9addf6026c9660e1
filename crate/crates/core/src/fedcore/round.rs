//! Synchronous round protocol over frame links.
//!
//! Per-connection frame sequence (positional; both sides run the same
//! state machine):
//!
//! ```text
//! client -> server   Register                       (once)
//! server -> client   GlobalModel round 0            (initial evaluation)
//! client -> server   MetricsReport round 0
//! per round t = 1..=R:
//!   server -> client GlobalModel t                  (train broadcast)
//!   client -> server SyntheticUpload t              (only when banks are on)
//!   client -> server ModelUpdate t
//!   server -> client GlobalModel t                  (freshly aggregated, for eval)
//!   client -> server MetricsReport t
//! server -> client   Shutdown
//! ```
//!
//! The server is a barrier: it aggregates only after every registered
//! client's update arrived; a missing update aborts the round with a
//! diagnostic naming the client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ChannelStats;
use crate::ftns::{decode_tensor_typed, encode_tensor, FtnsError};
use crate::model::{decode_param_set, encode_param_set, ModelError};
use crate::seeding::rng_for;
use crate::tensor::Tensor;
use crate::transport::{Frame, FrameLink, MsgType, TransportError};

use super::client::{evaluate_model, local_train, ClientState, LocalTrainConfig, TrainError};
use super::server::{AggregateError, ClientInfo, ServerState};
use super::synthetic::gen_synthetic;

const SYNTH_TAG: u64 = 0x53_594e;
const PROBE_TAG: u64 = 0x50_5242;

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("round {round}: no {expected:?} from client {client}: {source}")]
    Barrier {
        round: u32,
        client: u16,
        expected: MsgType,
        #[source]
        source: TransportError,
    },
    #[error("round {round}: client {client} sent {got:?}, expected {expected:?}")]
    UnexpectedFrame {
        round: u32,
        client: u16,
        expected: MsgType,
        got: MsgType,
    },
    #[error("client in slot {slot} announced id {announced}")]
    BadRegistration { slot: u16, announced: u16 },
    #[error("malformed {context} payload: {message}")]
    Payload { context: &'static str, message: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Ftns(#[from] FtnsError),
}

/// Registration payload (JSON).
#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterMsg {
    pub client_id: u16,
    pub n_train: usize,
    pub stats: ChannelStats,
    pub image_h: usize,
    pub image_w: usize,
}

/// Per-round report payload (JSON). For round 0 the losses are eval-split
/// losses of the initial model; afterwards they are training averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsMsg {
    pub client_id: u16,
    pub round: u32,
    pub dice: f64,
    pub accuracy: f64,
    pub loss_ce: f64,
    pub loss_sc: f64,
}

/// Mean segmentation quality over an eval split.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOutcome {
    pub dice: f64,
    pub accuracy: f64,
    pub loss_ce: f64,
    pub loss_sc: f64,
}

/// Shared protocol knobs.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub rounds: u32,
    pub gamma: f64,
    pub synth_batch: usize,
    pub timeout: Duration,
    pub train: LocalTrainConfig,
    /// Clients maintain EMA banks and upload them.
    pub client_banks: bool,
}

fn expect_frame(
    link: &mut dyn FrameLink,
    expected: MsgType,
    round: u32,
    client: u16,
    timeout: Duration,
) -> Result<Frame, RoundError> {
    let frame = link.recv_timeout(timeout).map_err(|source| RoundError::Barrier {
        round,
        client,
        expected,
        source,
    })?;
    if frame.msg_type != expected {
        return Err(RoundError::UnexpectedFrame {
            round,
            client,
            expected,
            got: frame.msg_type,
        });
    }
    Ok(frame)
}

fn json_payload<T: serde::de::DeserializeOwned>(
    frame: &Frame,
    context: &'static str,
) -> Result<T, RoundError> {
    serde_json::from_slice(&frame.payload).map_err(|e| RoundError::Payload {
        context,
        message: e.to_string(),
    })
}

/// Runs one client's side of the whole experiment over `link`.
pub fn client_worker(
    link: &mut dyn FrameLink,
    client: &mut ClientState,
    proto: &ProtocolConfig,
) -> Result<(), RoundError> {
    let id = client.id;
    let with_sc = proto.train.lsc_on;
    let register = RegisterMsg {
        client_id: id,
        n_train: client.dataset.n_train(),
        stats: client.stats,
        image_h: client.dataset.spec.image_h,
        image_w: client.dataset.spec.image_w,
    };
    link.send(&Frame::new(
        MsgType::Register,
        0,
        id,
        serde_json::to_vec(&register).expect("register serializes"),
    ))?;

    let load = |client: &mut ClientState, payload: &[u8]| -> Result<(), RoundError> {
        let global = decode_param_set::<f32>(payload)?;
        let filter = if proto.train.method == super::Method::FedBn {
            crate::model::LoadFilter::SkipNorm
        } else {
            crate::model::LoadFilter::All
        };
        client.model.params_load(&global, filter)?;
        Ok(())
    };

    // Initial evaluation of the untouched global model.
    let frame = expect_frame(link, MsgType::GlobalModel, 0, id, proto.timeout)?;
    load(client, &frame.payload)?;
    let outcome = evaluate_model(&mut client.model, &client.dataset.eval, proto.train.epsilon, with_sc)?;
    let report = MetricsMsg {
        client_id: id,
        round: 0,
        dice: outcome.dice,
        accuracy: outcome.accuracy,
        loss_ce: outcome.loss_ce,
        loss_sc: outcome.loss_sc,
    };
    link.send(&Frame::new(
        MsgType::MetricsReport,
        0,
        id,
        serde_json::to_vec(&report).expect("metrics serialize"),
    ))?;

    for t in 1..=proto.rounds {
        let frame = expect_frame(link, MsgType::GlobalModel, t, id, proto.timeout)?;
        let global = decode_param_set::<f32>(&frame.payload)?;

        // Fresh probes fold into the bank before training.
        if proto.client_banks {
            let spec = &client.dataset.spec;
            let mut rng = rng_for(client.master_seed, &[SYNTH_TAG, id as u64, t as u64]);
            let fresh: Tensor<f32> = gen_synthetic(
                &client.stats,
                1,
                spec.image_h,
                spec.image_w,
                proto.synth_batch,
                &mut rng,
            );
            client
                .bank
                .update(fresh, proto.gamma)
                .map_err(|e| RoundError::Payload {
                    context: "bank update",
                    message: e.to_string(),
                })?;
        }

        let (params, train_metrics) = local_train(client, &global, t, &proto.train)?;

        if proto.client_banks {
            let bank = client.bank.value().expect("bank initialized above");
            link.send(&Frame::new(
                MsgType::SyntheticUpload,
                t,
                id,
                encode_tensor(bank),
            ))?;
        }
        link.send(&Frame::new(
            MsgType::ModelUpdate,
            t,
            id,
            encode_param_set(&params),
        ))?;

        // Evaluate the freshly aggregated model.
        let frame = expect_frame(link, MsgType::GlobalModel, t, id, proto.timeout)?;
        load(client, &frame.payload)?;
        let outcome =
            evaluate_model(&mut client.model, &client.dataset.eval, proto.train.epsilon, with_sc)?;
        let report = MetricsMsg {
            client_id: id,
            round: t,
            dice: outcome.dice,
            accuracy: outcome.accuracy,
            loss_ce: train_metrics.loss_ce,
            loss_sc: train_metrics.loss_sc,
        };
        link.send(&Frame::new(
            MsgType::MetricsReport,
            t,
            id,
            serde_json::to_vec(&report).expect("metrics serialize"),
        ))?;
    }

    // Orderly shutdown; a closed link at this point is equivalent.
    match link.recv_timeout(proto.timeout) {
        Ok(frame) if frame.msg_type == MsgType::Shutdown => Ok(()),
        Ok(frame) => Err(RoundError::UnexpectedFrame {
            round: proto.rounds,
            client: id,
            expected: MsgType::Shutdown,
            got: frame.msg_type,
        }),
        Err(TransportError::Closed) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

/// Runs the server's side over one link per client, invoking `on_row` for
/// every metrics report in (round, client) order.
pub fn serve_rounds(
    links: &mut [Box<dyn FrameLink>],
    server: &mut ServerState,
    master_seed: u64,
    proto: &ProtocolConfig,
    mut on_row: impl FnMut(&MetricsMsg),
) -> Result<(), RoundError> {
    let m = links.len();
    let timeout = proto.timeout;

    // Registration barrier: slot k must announce id k.
    for (k, link) in links.iter_mut().enumerate() {
        let frame = expect_frame(link.as_mut(), MsgType::Register, 0, k as u16, timeout)?;
        let reg: RegisterMsg = json_payload(&frame, "register")?;
        if reg.client_id != k as u16 {
            return Err(RoundError::BadRegistration {
                slot: k as u16,
                announced: reg.client_id,
            });
        }
        server.registry.push(ClientInfo {
            client_id: reg.client_id,
            n_train: reg.n_train,
            stats: reg.stats,
            image_h: reg.image_h,
            image_w: reg.image_w,
        });
    }

    let broadcast = |links: &mut [Box<dyn FrameLink>],
                         server: &ServerState,
                         round: u32|
     -> Result<(), RoundError> {
        let payload = encode_param_set(&server.global);
        for (k, link) in links.iter_mut().enumerate() {
            link.send(&Frame::new(MsgType::GlobalModel, round, k as u16, payload.clone()))?;
        }
        Ok(())
    };

    let collect_reports = |links: &mut [Box<dyn FrameLink>],
                           round: u32,
                           on_row: &mut dyn FnMut(&MetricsMsg)|
     -> Result<(), RoundError> {
        for (k, link) in links.iter_mut().enumerate() {
            let frame = expect_frame(link.as_mut(), MsgType::MetricsReport, round, k as u16, timeout)?;
            let msg: MetricsMsg = json_payload(&frame, "metrics report")?;
            on_row(&msg);
        }
        Ok(())
    };

    broadcast(links, server, 0)?;
    collect_reports(links, 0, &mut on_row)?;

    for t in 1..=proto.rounds {
        server.round = t;
        broadcast(links, server, t)?;

        let probes: Option<Vec<Tensor<f32>>> = if server.wants_probes() {
            if server.wants_client_banks() {
                let mut probes = Vec::with_capacity(m);
                for (k, link) in links.iter_mut().enumerate() {
                    let frame =
                        expect_frame(link.as_mut(), MsgType::SyntheticUpload, t, k as u16, timeout)?;
                    probes.push(decode_tensor_typed::<f32>(&frame.payload)?);
                }
                Some(probes)
            } else {
                // Cross-assessment without client statistics: fresh
                // unit-Gaussian probes shaped like each client's images.
                let unit = ChannelStats { mean: 0.0, std: 1.0 };
                Some(
                    server
                        .registry
                        .iter()
                        .enumerate()
                        .map(|(k, info)| {
                            let mut rng =
                                rng_for(master_seed, &[PROBE_TAG, k as u64, t as u64]);
                            gen_synthetic(
                                &unit,
                                1,
                                info.image_h,
                                info.image_w,
                                proto.synth_batch,
                                &mut rng,
                            )
                        })
                        .collect(),
                )
            }
        } else {
            None
        };

        let mut updates = Vec::with_capacity(m);
        for (k, link) in links.iter_mut().enumerate() {
            let frame = expect_frame(link.as_mut(), MsgType::ModelUpdate, t, k as u16, timeout)?;
            updates.push(decode_param_set::<f32>(&frame.payload)?);
        }

        server.aggregate(&updates, probes.as_deref())?;

        broadcast(links, server, t)?;
        collect_reports(links, t, &mut on_row)?;
    }

    for (k, link) in links.iter_mut().enumerate() {
        link.send(&Frame::new(MsgType::Shutdown, proto.rounds, k as u16, vec![]))?;
    }
    Ok(())
}
