//! `fedsoda` — experiment runner for the federated segmentation simulator.
//!
//! Subcommands map onto the experiment drivers: `run` executes one
//! configuration, `compare` runs a method matrix, `ablate` the five-row
//! module toggle matrix, `sweep` a lambda/gamma sweep, `gen-data` writes a
//! federation to disk, and `grad-check` verifies the backward passes.
//! Every command writes CSVs under `--out` and exits nonzero on any error.
//! `FEDSODA_LOG={error,info,debug}` controls log verbosity.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use fedsoda_core::config::{parse_config_file, ExperimentConfig, TransportKind};
use fedsoda_core::data::compute_stats;
use fedsoda_core::fedcore::{
    ablate, compare, run_experiment, sweep, LabeledRun, Method, SweepParam,
};
use fedsoda_core::ftns::write_ftns;
use fedsoda_core::gradcheck::{grad_check, grad_check_fixture, GradCheckConfig};
use fedsoda_core::model::build_model;

#[derive(Parser)]
#[command(name = "fedsoda", version, about = "Federated segmentation simulator")]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for CSVs and datasets.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the configured transport backend.
    #[arg(long, global = true, value_enum)]
    transport: Option<TransportArg>,

    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Socket,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment with the configured method.
    Run,
    /// Run the same configuration once per method.
    Compare {
        /// Comma-separated methods, e.g. fedavg,fedprox,fedbn,fedsoda.
        #[arg(long, value_delimiter = ',', default_values_t = [
            "fedavg".to_string(), "fedprox".to_string(), "fedbn".to_string(), "fedsoda".to_string()
        ])]
        methods: Vec<String>,
    },
    /// Run the five-row module toggle matrix under fedsoda.
    Ablate,
    /// Sweep lambda or gamma under fedsoda.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepArg,
        /// Override the default sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Generate the configured federation and write it as FTNS files.
    GenData,
    /// Verify every layer's backward pass against finite differences.
    GradCheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Lambda,
    Gamma,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => parse_config_file(path).map_err(|e| anyhow::anyhow!("{e}"))?,
        None => ExperimentConfig::defaults(Method::FedSoda),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(t) = cli.transport {
        config.transport = match t {
            TransportArg::Inproc => TransportKind::Inproc,
            TransportArg::Socket => TransportKind::Socket,
        };
    }
    Ok(config)
}

fn report(out: &Path, runs: &[LabeledRun]) -> Result<()> {
    fedsoda_core::fedcore::write_outputs(out, runs)?;
    for run in runs {
        println!(
            "{:<14} avg_dice={:.4} avg_accuracy={:.4} hash={:016x}",
            run.label, run.result.avg_dice, run.result.avg_accuracy, run.result.run_hash
        );
    }
    println!("wrote {} run(s) to {}", runs.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSODA_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;

    if cli.print_config {
        println!("{}", config.to_pretty_json());
        return Ok(());
    }

    match &cli.command {
        Command::Run => {
            info!("running method {} for {} rounds", config.method, config.rounds);
            let result = run_experiment(&config)?;
            let runs = vec![LabeledRun {
                label: config.method.as_str().to_string(),
                result,
            }];
            report(&cli.out, &runs)?;
        }
        Command::Compare { methods } => {
            let methods: Vec<Method> = methods
                .iter()
                .map(|s| s.parse::<Method>().map_err(|e| anyhow::anyhow!(e)))
                .collect::<Result<_>>()?;
            if methods.is_empty() {
                bail!("--methods list is empty");
            }
            let runs = compare(&config, &methods)?;
            report(&cli.out, &runs)?;
        }
        Command::Ablate => {
            let runs = ablate(&config)?;
            report(&cli.out, &runs)?;
        }
        Command::Sweep { param, values } => {
            let param = match param {
                SweepArg::Lambda => SweepParam::Lambda,
                SweepArg::Gamma => SweepParam::Gamma,
            };
            let values = match values {
                Some(v) if !v.is_empty() => v.clone(),
                _ => param.default_values().to_vec(),
            };
            for &v in &values {
                if !(0.0..=1.0).contains(&v) {
                    bail!("sweep value {v} outside [0, 1]");
                }
            }
            let runs = sweep(&config, param, &values)?;
            report(&cli.out, &runs)?;
        }
        Command::GenData => gen_data(&config, &cli.out)?,
        Command::GradCheck => run_grad_check(&config)?,
    }
    Ok(())
}

fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let specs = config.client_specs().map_err(|e| anyhow::anyhow!("{e}"))?;
    let federation = fedsoda_core::data::generate_federation(&specs, config.seed)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = String::from("[\n");
    for (i, dataset) in federation.iter().enumerate() {
        let dir = out.join(format!("client_{}", dataset.spec.client_id));
        std::fs::create_dir_all(&dir)?;
        for (split, samples) in [("train", &dataset.train), ("eval", &dataset.eval)] {
            for (j, sample) in samples.iter().enumerate() {
                write_ftns(&dir.join(format!("{split}_{j:04}_image.ftns")), &sample.image)?;
                write_ftns(&dir.join(format!("{split}_{j:04}_mask.ftns")), &sample.mask)?;
            }
        }
        let stats = compute_stats(dataset);
        write!(
            manifest,
            "  {{\"client_id\": {}, \"n_train\": {}, \"n_eval\": {}, \"image_h\": {}, \"image_w\": {}, \"mean\": {:.6}, \"std\": {:.6}}}{}\n",
            dataset.spec.client_id,
            dataset.train.len(),
            dataset.eval.len(),
            dataset.spec.image_h,
            dataset.spec.image_w,
            stats.mean,
            stats.std,
            if i + 1 < federation.len() { "," } else { "" }
        )?;
    }
    manifest.push_str("]\n");
    std::fs::write(out.join("manifest.json"), manifest)?;
    println!(
        "wrote {} client dataset(s) to {}",
        federation.len(),
        out.display()
    );
    Ok(())
}

fn run_grad_check(config: &ExperimentConfig) -> Result<()> {
    let spec = config.model_spec().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut model = build_model::<f64>(&spec, config.seed)?;
    let (input, target) = grad_check_fixture(model.input_channels(), 12, config.seed);
    let cfg = GradCheckConfig::default();
    let report = grad_check(&mut model, &input, &target, &cfg)?;
    for layer in &report.layers {
        println!(
            "layer {:>2} ({:<4}) coords={:>3} max_rel_err={:.3e} {}",
            layer.layer_index,
            layer.kind,
            layer.coords_checked,
            layer.max_rel_error,
            if layer.passed() { "PASS" } else { "FAIL" }
        );
    }
    if !report.passed() {
        bail!(
            "gradient check failed for layer ordinal(s) {:?}",
            report.failing_layers()
        );
    }
    println!("gradient check passed");
    Ok(())
}
