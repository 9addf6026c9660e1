//! Experiment runner: wires data, clients, transport, and the round
//! protocol together, and drives the comparison/ablation/sweep matrices.

use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ExperimentConfig, TransportKind};
use crate::data::{compute_stats, generate_federation, DataError};
use crate::model::{build_model, ModelError};
use crate::seeding::fnv1a64;
use crate::transport::{inproc_pair, FrameLink, MsgType, ReplayLink, SocketLink};

use super::client::{ClientState, LocalTrainConfig};
use super::round::{client_worker, serve_rounds, MetricsMsg, ProtocolConfig, RoundError};
use super::server::{AblationFlags, Method, ServerState};

/// Barrier timeout: generous, since a slow client is usually just still
/// training. Tests that exercise the abort path use their own links.
const BARRIER_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigErrors),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("server: {0}")]
    Server(#[from] RoundError),
    #[error("client {client}: {source}")]
    Client {
        client: u16,
        #[source]
        source: RoundError,
    },
    #[error("client thread {0} panicked")]
    ClientPanic(u16),
    #[error("socket setup: {0}")]
    SocketSetup(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One per-round, per-client record; serialized as one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: u32,
    pub client_id: u16,
    pub method: Method,
    pub dice: f64,
    pub accuracy: f64,
    pub loss_ce: f64,
    pub loss_sc: f64,
}

pub const ROUNDS_CSV_HEADER: &str = "round,client_id,method,dice,accuracy,loss_ce,loss_sc";
pub const SUMMARY_CSV_HEADER: &str = "method,avg_dice,avg_accuracy";

/// Rounds averaged into the summary (the tail of the run).
pub const SUMMARY_WINDOW: u32 = 5;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<RoundRow>,
    pub avg_dice: f64,
    pub avg_accuracy: f64,
    pub rounds_csv: String,
    /// FNV-1a of the rounds CSV bytes; two runs are byte-identical iff
    /// their hashes match.
    pub run_hash: u64,
}

fn render_rounds_csv(rows: &[RoundRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.round, r.client_id, r.method, r.dice, r.accuracy, r.loss_ce, r.loss_sc
        ));
    }
    out
}

/// Mean dice/accuracy over all clients in the final `SUMMARY_WINDOW`
/// rounds (or the initial evaluation when the run had no rounds).
pub fn summarize(rows: &[RoundRow], rounds: u32) -> (f64, f64) {
    let cutoff = rounds.saturating_sub(SUMMARY_WINDOW.min(rounds).saturating_sub(1));
    let window: Vec<&RoundRow> = if rounds == 0 {
        rows.iter().filter(|r| r.round == 0).collect()
    } else {
        rows.iter().filter(|r| r.round >= cutoff && r.round >= 1).collect()
    };
    if window.is_empty() {
        return (0.0, 0.0);
    }
    let n = window.len() as f64;
    let dice = window.iter().map(|r| r.dice).sum::<f64>() / n;
    let acc = window.iter().map(|r| r.accuracy).sum::<f64>() / n;
    (dice, acc)
}

fn protocol_config(config: &ExperimentConfig) -> ProtocolConfig {
    let lsc_on = config.method == Method::FedSoda && config.ablation.lsc;
    ProtocolConfig {
        rounds: config.rounds,
        gamma: config.gamma,
        synth_batch: config.synth_batch,
        timeout: BARRIER_TIMEOUT,
        train: LocalTrainConfig {
            method: config.method,
            epochs: config.local_epochs,
            epsilon: config.epsilon,
            alpha_sc: config.alpha_sc,
            prox_mu: config.prox_mu,
            lsc_on,
        },
        client_banks: config.method == Method::FedSoda && config.ablation.so,
    }
}

fn build_clients(config: &ExperimentConfig) -> Result<Vec<ClientState>, ExperimentError> {
    let specs = config.client_specs()?;
    let model_spec = config.model_spec()?;
    let federation = generate_federation(&specs, config.seed)?;
    federation
        .into_iter()
        .enumerate()
        .map(|(k, dataset)| {
            let stats = compute_stats(&dataset);
            let model = build_model(&model_spec, config.seed)?;
            Ok(ClientState::new(
                k as u16,
                model,
                dataset,
                stats,
                config.seed,
                config.lr,
                config.beta1,
                config.beta2,
            ))
        })
        .collect()
}

fn make_socket_links(
    m: usize,
    port: u16,
    timeout: Duration,
) -> Result<(Vec<Option<Box<dyn FrameLink>>>, Vec<Box<dyn FrameLink>>), ExperimentError> {
    let listener = TcpListener::bind(("127.0.0.1", port))
        .map_err(|e| ExperimentError::SocketSetup(format!("bind: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| ExperimentError::SocketSetup(format!("local_addr: {e}")))?;

    // Client ends connect eagerly; the server end identifies each
    // connection by its registration frame.
    let client_links: Vec<Box<dyn FrameLink>> = (0..m)
        .map(|_| {
            TcpStream::connect(addr)
                .map(|s| Box::new(SocketLink::new(s)) as Box<dyn FrameLink>)
                .map_err(|e| ExperimentError::SocketSetup(format!("connect: {e}")))
        })
        .collect::<Result<_, _>>()?;

    let mut server_links: Vec<Option<Box<dyn FrameLink>>> = (0..m).map(|_| None).collect();
    for _ in 0..m {
        let (stream, _) = listener
            .accept()
            .map_err(|e| ExperimentError::SocketSetup(format!("accept: {e}")))?;
        let mut link = SocketLink::new(stream);
        let frame = link
            .recv_timeout(timeout)
            .map_err(|e| ExperimentError::SocketSetup(format!("registration read: {e}")))?;
        if frame.msg_type != MsgType::Register {
            return Err(ExperimentError::SocketSetup(format!(
                "expected Register, got {:?}",
                frame.msg_type
            )));
        }
        let id = frame.client_id as usize;
        if id >= m || server_links[id].is_some() {
            return Err(ExperimentError::SocketSetup(format!(
                "bad or duplicate registration for client {id}"
            )));
        }
        server_links[id] = Some(Box::new(ReplayLink::new(frame, link)));
    }
    Ok((server_links, client_links))
}

/// Runs one full experiment and returns every per-round record plus the
/// rendered CSV. Deterministic: identical config (seed included) gives a
/// byte-identical CSV on either transport backend.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    let proto = protocol_config(config);
    let mut clients = build_clients(config)?;
    let m = clients.len();
    let model_spec = config.model_spec()?;
    let global = build_model::<f32>(&model_spec, config.seed)?.params_export();
    let mut server = ServerState::new(
        model_spec,
        global,
        config.method,
        config.lambda,
        config.ablation,
    );

    // Wire up links. Client workers send Register as their very first
    // frame; for sockets that frame doubles as connection identification.
    let (mut server_links, client_links): (Vec<Box<dyn FrameLink>>, Vec<Box<dyn FrameLink>>) =
        match config.transport {
            TransportKind::Inproc => {
                let mut s = Vec::with_capacity(m);
                let mut c = Vec::with_capacity(m);
                for _ in 0..m {
                    let (server_end, client_end) = inproc_pair();
                    s.push(Box::new(server_end) as Box<dyn FrameLink>);
                    c.push(Box::new(client_end) as Box<dyn FrameLink>);
                }
                (s, c)
            }
            TransportKind::Socket => {
                let (s, c) = make_socket_links(m, config.socket_port, proto.timeout)?;
                (s.into_iter().map(|l| l.expect("every slot filled")).collect(), c)
            }
        };

    let mut rows: Vec<RoundRow> = Vec::new();
    let method = config.method;
    let seed = config.seed;

    let result: Result<(), ExperimentError> = thread::scope(|scope| {
        let mut handles = Vec::with_capacity(m);
        for (client, mut link) in clients.iter_mut().zip(client_links) {
            let proto = proto.clone();
            handles.push(scope.spawn(move || {
                let id = client.id;
                (id, client_worker(link.as_mut(), client, &proto))
            }));
        }

        let server_result = serve_rounds(&mut server_links, &mut server, seed, &proto, |msg: &MetricsMsg| {
            rows.push(RoundRow {
                round: msg.round,
                client_id: msg.client_id,
                method,
                dice: msg.dice,
                accuracy: msg.accuracy,
                loss_ce: msg.loss_ce,
                loss_sc: msg.loss_sc,
            });
        });
        // Unblock any client still waiting if the server bailed out.
        drop(server_links);

        let mut client_error: Option<ExperimentError> = None;
        for handle in handles {
            match handle.join() {
                Ok((_, Ok(()))) => {}
                Ok((id, Err(e))) => {
                    client_error.get_or_insert(ExperimentError::Client { client: id, source: e });
                }
                Err(_) => {
                    client_error.get_or_insert(ExperimentError::ClientPanic(u16::MAX));
                }
            }
        }
        match server_result {
            Err(e) => Err(ExperimentError::Server(e)),
            Ok(()) => match client_error {
                Some(e) => Err(e),
                None => Ok(()),
            },
        }
    });
    result?;

    let rounds_csv = render_rounds_csv(&rows);
    let run_hash = fnv1a64(rounds_csv.as_bytes());
    let (avg_dice, avg_accuracy) = summarize(&rows, config.rounds);
    Ok(RunResult {
        rows,
        avg_dice,
        avg_accuracy,
        rounds_csv,
        run_hash,
    })
}

/// One named run in a comparison/ablation/sweep matrix.
#[derive(Debug)]
pub struct LabeledRun {
    pub label: String,
    pub result: RunResult,
}

fn run_matrix(
    runs: Vec<(String, ExperimentConfig)>,
) -> Result<Vec<LabeledRun>, ExperimentError> {
    let sequential = runs
        .iter()
        .any(|(_, c)| c.transport == TransportKind::Socket && c.socket_port != 0);
    let results: Vec<Result<LabeledRun, ExperimentError>> = if sequential {
        // A fixed socket port cannot be shared by concurrent runs.
        runs.into_iter()
            .map(|(label, config)| run_experiment(&config).map(|result| LabeledRun { label, result }))
            .collect()
    } else {
        runs.into_par_iter()
            .map(|(label, config)| run_experiment(&config).map(|result| LabeledRun { label, result }))
            .collect()
    };
    results.into_iter().collect()
}

/// Runs the same configuration once per method (Table-1-shaped matrix).
pub fn compare(
    base: &ExperimentConfig,
    methods: &[Method],
) -> Result<Vec<LabeledRun>, ExperimentError> {
    let runs = methods
        .iter()
        .map(|&method| {
            let config = ExperimentConfig { method, ..base.clone() };
            (method.as_str().to_string(), config)
        })
        .collect();
    run_matrix(runs)
}

/// The five-row module toggle matrix: none, SO, DA, SO+DA, SO+DA+L_sc.
pub fn ablation_rows() -> [(&'static str, AblationFlags); 5] {
    [
        ("none", AblationFlags { so: false, da: false, lsc: false }),
        ("so", AblationFlags { so: true, da: false, lsc: false }),
        ("da", AblationFlags { so: false, da: true, lsc: false }),
        ("so+da", AblationFlags { so: true, da: true, lsc: false }),
        ("so+da+lsc", AblationFlags { so: true, da: true, lsc: true }),
    ]
}

/// Runs the ablation matrix (always under the fedsoda method).
pub fn ablate(base: &ExperimentConfig) -> Result<Vec<LabeledRun>, ExperimentError> {
    let runs = ablation_rows()
        .into_iter()
        .map(|(label, ablation)| {
            let config = ExperimentConfig {
                method: Method::FedSoda,
                ablation,
                ..base.clone()
            };
            (label.to_string(), config)
        })
        .collect();
    run_matrix(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Gamma,
}

impl SweepParam {
    pub fn default_values(&self) -> &'static [f64] {
        match self {
            SweepParam::Lambda => &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            SweepParam::Gamma => &[0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }
}

/// Sweeps lambda or gamma over `values` under fedsoda.
pub fn sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<LabeledRun>, ExperimentError> {
    let runs = values
        .iter()
        .map(|&v| {
            let mut config = ExperimentConfig {
                method: Method::FedSoda,
                ..base.clone()
            };
            match param {
                SweepParam::Lambda => config.lambda = v,
                SweepParam::Gamma => config.gamma = v,
            }
            (format!("{}={v}", param.name()), config)
        })
        .collect();
    run_matrix(runs)
}

/// Writes one rounds CSV per run plus the joint summary CSV.
pub fn write_outputs(out_dir: &Path, runs: &[LabeledRun]) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    let mut summary = String::from(SUMMARY_CSV_HEADER);
    summary.push('\n');
    for run in runs {
        let file = out_dir.join(format!("rounds_{}.csv", run.label.replace(['=', '+'], "_")));
        let mut f = std::fs::File::create(&file)?;
        f.write_all(run.result.rounds_csv.as_bytes())?;
        summary.push_str(&format!(
            "{},{:.6},{:.6}\n",
            run.label, run.result.avg_dice, run.result.avg_accuracy
        ));
    }
    std::fs::write(out_dir.join("summary.csv"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(method);
        cfg.rounds = 1;
        cfg.local_epochs = 1;
        // Small custom federation keeps unit tests quick.
        cfg.num_clients = 2;
        cfg.data = crate::config::DataConfig::Custom(
            (0..2)
                .map(|i| crate::data::ClientDatasetSpec {
                    client_id: i,
                    n_samples: 5,
                    image_h: 12,
                    image_w: 12,
                    blob_radius: (2.0, 4.0),
                    blobs_per_image: (1, 2),
                    fg_intensity: 0.8,
                    bg_intensity: 0.2,
                    noise_std: 0.05,
                    seed: i as u64,
                })
                .collect(),
        );
        cfg
    }

    #[test]
    fn zero_rounds_emits_only_initial_rows() {
        let mut cfg = smoke_config(Method::FedAvg);
        cfg.rounds = 0;
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.rows.len(), 2);
        assert!(result.rows.iter().all(|r| r.round == 0));
        assert_eq!(result.rounds_csv.lines().count(), 3);
        assert!(result.rounds_csv.starts_with(ROUNDS_CSV_HEADER));
    }

    #[test]
    fn every_method_runs_a_round() {
        for method in Method::ALL {
            let result = run_experiment(&smoke_config(method)).unwrap();
            assert_eq!(result.rows.len(), 4, "{method}");
            for r in &result.rows {
                assert!(r.dice.is_finite() && r.loss_ce.is_finite(), "{method}");
            }
        }
    }

    #[test]
    fn identical_config_gives_identical_csv() {
        let cfg = smoke_config(Method::FedSoda);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.rounds_csv, b.rounds_csv);
        assert_eq!(a.run_hash, b.run_hash);
        let mut other = cfg;
        other.seed = 43;
        let c = run_experiment(&other).unwrap();
        assert_ne!(a.rounds_csv, c.rounds_csv);
    }

    #[test]
    fn summary_matches_recomputation_from_rows() {
        let cfg = smoke_config(Method::FedAvg);
        let result = run_experiment(&cfg).unwrap();
        let (dice, acc) = summarize(&result.rows, 1);
        assert_eq!(result.avg_dice, dice);
        assert_eq!(result.avg_accuracy, acc);
        // rounds = 1 means the window is exactly round 1.
        let manual: Vec<&RoundRow> = result.rows.iter().filter(|r| r.round == 1).collect();
        let expect = manual.iter().map(|r| r.dice).sum::<f64>() / manual.len() as f64;
        assert_eq!(dice, expect);
    }

    #[test]
    fn ablation_matrix_has_five_distinct_rows() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].1, AblationFlags { so: false, da: false, lsc: false });
        assert_eq!(rows[4].1, AblationFlags::default());
    }
}
