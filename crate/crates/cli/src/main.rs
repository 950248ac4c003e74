//! `fedstage` command-line driver.
//!
//! Exit codes: 0 success, 2 usage, 3 config, 4 I/O, 5 protocol or
//! transport, 6 training, 7 statistics.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedstage_core::harness::{
    emit_gain_curve, gain_curve_csv, pretrain_scenario, replay_paper_stats, run_scenario,
    ClientConfig, HarnessError, ScenarioConfig,
};
use fedstage_core::model::ModelError;
use fedstage_core::protocol::{client_run, ClientRequest, ProtocolError, ServerState};
use fedstage_core::transport::{read_checkpoint, serve, write_checkpoint, RemoteClient, TransportError};
use fedstage_core::trust::StatsError;
use fedstage_core::{evaluate, synth};

#[derive(Parser)]
#[command(name = "fedstage", version, about = "Staged federated fine-tuning with a trust gate")]
struct Cli {
    /// Replaces `global_seed` from the config (for `client`, mixes into its seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the server backbone and write it as a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        visible_fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        mim_seed: Option<u64>,
    },
    /// Run a whole scenario in-process and write the JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the mean-gain curve as CSV.
        #[arg(long)]
        gain_csv: Option<PathBuf>,
    },
    /// Paired t-test and gate verdict on the published stage accuracies.
    ReplayPaperStats {
        #[arg(long)]
        json: bool,
    },
    /// Serve the base model over TCP until the configured stages are done.
    Serve {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        config: PathBuf,
        /// Start from this checkpoint instead of pre-training.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Number of stages to serve; defaults to the config's stage count.
        #[arg(long)]
        stages: Option<u64>,
        /// Write the final base here on exit.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fetch the base, fine-tune on a local synthetic domain, submit the update.
    Client {
        #[arg(long)]
        connect: String,
        /// Client config JSON (id, domain spec, split sizes, SGD settings, seeds).
        #[arg(long)]
        domain: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Config,
    Io,
    Protocol,
    Training,
    Statistics,
}

impl Class {
    fn code(self) -> u8 {
        match self {
            Class::Config => 3,
            Class::Io => 4,
            Class::Protocol => 5,
            Class::Training => 6,
            Class::Statistics => 7,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Class::Config => "config",
            Class::Io => "io",
            Class::Protocol => "protocol",
            Class::Training => "training",
            Class::Statistics => "statistics",
        }
    }
}

struct Failure {
    class: Class,
    message: String,
}

impl Failure {
    fn new(class: Class, message: impl fmt::Display) -> Self {
        Self { class, message: message.to_string() }
    }
}

fn model_class(e: &ModelError) -> Class {
    match e {
        ModelError::Layout(_) | ModelError::InvalidArchitecture(_) | ModelError::InvalidRequest(_) => Class::Config,
        _ => Class::Training,
    }
}

fn protocol_class(e: &ProtocolError) -> Class {
    match e {
        ProtocolError::Model(m) => model_class(m),
        ProtocolError::Stats(_) => Class::Statistics,
        _ => Class::Protocol,
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let class = match &e {
            HarnessError::Config(_) => Class::Config,
            HarnessError::EmptySeries => Class::Statistics,
            HarnessError::Step { source, .. } => protocol_class(source),
        };
        Failure::new(class, e)
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        Failure::new(protocol_class(&e), e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(model_class(&e), e)
    }
}

impl From<TransportError> for Failure {
    fn from(e: TransportError) -> Self {
        let class = if matches!(e, TransportError::Io(_)) { Class::Io } else { Class::Protocol };
        Failure::new(class, e)
    }
}

impl From<StatsError> for Failure {
    fn from(e: StatsError) -> Self {
        Failure::new(Class::Statistics, e)
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(Class::Io, format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(Class::Io, format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut config = ScenarioConfig::from_json(&read_text(path)?)?;
    if let Some(s) = seed {
        config.global_seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn json_failure(e: serde_json::Error) -> Failure {
    Failure::new(Class::Io, e)
}

fn cmd_pretrain(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    overrides: (Option<f64>, Option<usize>, Option<f64>, Option<u64>),
) -> Result<(), Failure> {
    let mut config = load_scenario(config, seed)?;
    let mim = &mut config.pretrain.mim;
    let (fraction, epochs, lr, mim_seed) = overrides;
    mim.visible_fraction = fraction.unwrap_or(mim.visible_fraction);
    mim.epochs = epochs.unwrap_or(mim.epochs);
    mim.lr = lr.unwrap_or(mim.lr);
    mim.seed = mim_seed.unwrap_or(mim.seed);
    let (outcome, num_images) = pretrain_scenario(&config)?;
    write_checkpoint(out, &outcome.encoder)?;
    let first = outcome.loss_history.first().copied().unwrap_or(f64::NAN);
    let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained on {num_images} images, {} epochs, loss {first:.6} -> {last:.6}",
        outcome.loss_history.len()
    );
    println!("wrote {} ({} parameters)", out.display(), outcome.encoder.len());
    Ok(())
}

fn cmd_run(config: &Path, out: &Path, gain_csv: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let config = load_scenario(config, seed)?;
    let report = run_scenario(&config)?;
    write_text(out, &serde_json::to_string_pretty(&report).map_err(json_failure)?)?;
    print!("{}", report.render_table());
    if let Some(path) = gain_csv {
        write_text(path, &gain_curve_csv(&emit_gain_curve(&report)?))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_replay(json: bool) -> Result<(), Failure> {
    let decision = replay_paper_stats()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&decision).map_err(json_failure)?);
        return Ok(());
    }
    let r = &decision.report;
    println!("control     mean {:.2}  sd {:.2}", r.control_mean, r.control_sd);
    println!("experiment  mean {:.2}  sd {:.2}", r.experiment_mean, r.experiment_sd);
    println!("t({}) = {:.4}  p = {:.4}  d = {:.4}", r.dof, r.t, r.p_two_tailed, r.cohens_d);
    println!("verdict: {:?}", decision.verdict);
    for reason in &decision.reasons {
        println!("  {reason}");
    }
    Ok(())
}

fn cmd_serve(
    listen: &str,
    config: &Path,
    base: Option<&Path>,
    stages: Option<u64>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let config = load_scenario(config, seed)?;
    let base = match base {
        Some(path) => read_checkpoint(path)?,
        None => pretrain_scenario(&config)?.0.encoder,
    };
    let stages = stages.unwrap_or(config.stages.len() as u64);
    let state = ServerState::new(base, config.clients_per_stage())?.with_head_seed_root(config.global_seed);
    let handle = serve(state, listen, Some(stages))?;
    println!("listening on {}", handle.local_addr());
    let _ = std::io::stdout().flush();
    let state = handle.wait();
    for record in state.history() {
        println!(
            "stage {}: clients {} adopted {}",
            record.stage_index,
            record.client_ids.join(","),
            record.adopted
        );
    }
    if let Some(path) = out {
        write_checkpoint(path, state.base())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_client(connect: &str, domain: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut client: ClientConfig =
        serde_json::from_str(&read_text(domain)?).map_err(|e| Failure::new(Class::Config, e))?;
    client.validate()?;
    if let Some(s) = seed {
        client = client.resolved(s);
    }
    let (train, test) = synth::generate(&client.domain, client.n_train, client.n_test)?;
    let mut remote = RemoteClient::connect(connect)?;
    let request = ClientRequest { client_id: client.client_id.clone(), num_classes: client.domain.num_classes };
    let model = remote.request_model(&request)?;
    let run = client_run(&client.client_id, &model, &train, &client.sgd())?;
    let accuracy = 100.0 * evaluate(&run.fine_tuned, &test)?;
    let ack = remote.submit_update(&run.update)?;
    println!(
        "client {}: test accuracy {accuracy:.2}%, stage {} closed, adopted {}",
        client.client_id, ack.stage_index, ack.adopted
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain { config, out, visible_fraction, epochs, lr, mim_seed } => {
            cmd_pretrain(config, out, cli.seed, (*visible_fraction, *epochs, *lr, *mim_seed))
        }
        Command::Run { config, out, gain_csv } => cmd_run(config, out, gain_csv.as_deref(), cli.seed),
        Command::ReplayPaperStats { json } => cmd_replay(*json),
        Command::Serve { listen, config, base, stages, out } => {
            cmd_serve(listen, config, base.as_deref(), *stages, out.as_deref(), cli.seed)
        }
        Command::Client { connect, domain } => cmd_client(connect, domain, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.class.name(), f.message);
            ExitCode::from(f.class.code())
        }
    }
}
