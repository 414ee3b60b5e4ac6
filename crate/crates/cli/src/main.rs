//! Operator entry points: one binary exposing the bootstrap server, the
//! three chain roles, the worker, the auditor, the simulator and key
//! generation.
//!
//! Exit codes: 0 success, 1 configuration error, 2 timeout or protocol
//! error, 3 audit verification failure, 64 usage error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;

use splitchain_core::identity::NodeIdentity;
use splitchain_core::ledger::{audit_all, audit_epoch, compute_incentives, NodeType};
use splitchain_core::net::{
    load_chain, run_bootstrap_server, run_chain_node, run_worker, BootstrapServerOptions,
    ChainNodeOptions, WorkerOptions,
};
use splitchain_core::nn::LossKind;
use splitchain_core::partition::NodeLayerDescription;
use splitchain_core::runtime::{LossEntry, ModelConfig, RuntimeError};
use splitchain_core::sim::{run_monolithic_oracle, run_sim, Scenario, SimError};
use splitchain_core::wire::to_canonical_bytes;

const EXIT_CONFIG: u8 = 1;
const EXIT_PROTOCOL: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "splitchain", version, about = "Train a split neural network over a node chain with a blockchain audit ledger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Phase I bootstrap server: registration, compute benchmark,
    /// layer split, genesis block.
    Bootstrap(BootstrapArgs),
    /// Run a chain node (data source, intermediate or terminal).
    Node(NodeArgs),
    /// Run a transaction-validating worker.
    Worker(WorkerArgs),
    /// Verify a persisted chain and report per-epoch contributions.
    Audit(AuditArgs),
    /// Run a scenario in the deterministic in-process simulator.
    Sim(SimArgs),
    /// Generate an identity key file (32-byte hex seed).
    Keygen(KeygenArgs),
}

#[derive(Args)]
struct BootstrapArgs {
    /// Model configuration file (canonical JSON).
    #[arg(long)]
    config: PathBuf,
    /// Address to listen on, e.g. 127.0.0.1:7000.
    #[arg(long)]
    listen: String,
    #[arg(long)]
    expect_sources: usize,
    #[arg(long)]
    expect_intermediates: usize,
    #[arg(long)]
    expect_workers: usize,
    /// Number of benchmark problems per intermediate node.
    #[arg(long, default_value_t = 5)]
    pow_count: usize,
    /// Required leading zero bits per problem.
    #[arg(long, default_value_t = 16)]
    pow_bits: u8,
    /// Registration timeout in seconds.
    #[arg(long, default_value_t = 60)]
    registration_timeout_secs: u64,
    /// Identity key file; an ephemeral key is derived from the seed if absent.
    #[arg(long)]
    key: Option<PathBuf>,
    /// Seed for challenge generation (and the ephemeral key). Printed when
    /// drawn from entropy.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json and nld.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Source,
    Intermediate,
    Terminal,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Mse,
    Xent,
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long, value_enum)]
    role: RoleArg,
    /// Bootstrap server address, e.g. 127.0.0.1:7000.
    #[arg(long)]
    bootstrap: String,
    /// Identity key file (32-byte hex seed).
    #[arg(long)]
    key: PathBuf,
    /// Source only: IDX image file then IDX label file.
    #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
    data: Option<Vec<PathBuf>>,
    /// Label classes in the IDX data.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Terminal only: loss function override.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Directory for weights.json, txns.jsonl and (terminal) loss.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Seconds to wait for the chain configuration.
    #[arg(long, default_value_t = 600)]
    config_timeout_secs: u64,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    bootstrap: String,
    #[arg(long)]
    key: PathBuf,
    /// Append-only chain file this worker maintains.
    #[arg(long)]
    chain_file: PathBuf,
    #[arg(long, default_value_t = 500)]
    round_interval_ms: u64,
    #[arg(long, default_value_t = 64)]
    max_block_txns: usize,
    #[arg(long, default_value_t = 600)]
    config_timeout_secs: u64,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    chain_file: PathBuf,
    /// Audit a single epoch.
    #[arg(long, conflicts_with = "all")]
    epoch: Option<u32>,
    /// Audit every epoch on the chain.
    #[arg(long)]
    all: bool,
    /// Also evaluate the incentive rule.
    #[arg(long, requires = "tau", requires = "budget")]
    incentives: bool,
    /// Loss threshold below which intermediates are paid.
    #[arg(long)]
    tau: Option<f64>,
    /// Total incentive budget in whole units.
    #[arg(long)]
    budget: Option<u64>,
    /// Final training loss (alternative: --loss-file).
    #[arg(long, conflicts_with = "loss_file")]
    final_loss: Option<f64>,
    /// Terminal loss log; the final epoch's mean is used.
    #[arg(long)]
    loss_file: Option<PathBuf>,
    /// Node-layer description written by the bootstrap server; overrides the
    /// parameter counts recorded in the genesis block.
    #[arg(long)]
    nld: Option<PathBuf>,
    /// Pretty-print the report instead of canonical JSON.
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario file (canonical JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for report.json and loss.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario's seed. Printed when drawn from entropy.
    #[arg(long)]
    seed: Option<u64>,
    /// Also run the monolithic reference trainer and report the largest
    /// per-iteration loss deviation.
    #[arg(long)]
    compare_oracle: bool,
}

#[derive(Args)]
struct KeygenArgs {
    /// Where to write the 32-byte hex seed.
    #[arg(long)]
    out: PathBuf,
    /// Derive the key from this seed instead of entropy. Printed when drawn
    /// from entropy.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Bootstrap(args) => cmd_bootstrap(args),
        Command::Node(args) => cmd_node(args),
        Command::Worker(args) => cmd_worker(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Sim(args) => cmd_sim(args),
        Command::Keygen(args) => cmd_keygen(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

/// Resolves a seed, drawing from entropy (and announcing it) when the flag
/// is absent.
fn resolve_seed(flag: Option<u64>) -> u64 {
    match flag {
        Some(seed) => seed,
        None => {
            let seed = rand::thread_rng().next_u64();
            println!("seed: {seed}");
            seed
        }
    }
}

fn identity_from_key_file(path: &PathBuf) -> Result<NodeIdentity, ExitCode> {
    let hex_seed = std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    NodeIdentity::from_seed_hex(&hex_seed).map_err(|e| fail(EXIT_CONFIG, e))
}

fn runtime_exit(e: RuntimeError) -> ExitCode {
    let code = match &e {
        RuntimeError::Config(_) | RuntimeError::Data(_) => EXIT_CONFIG,
        _ => EXIT_PROTOCOL,
    };
    fail(code, e)
}

fn cmd_bootstrap(args: BootstrapArgs) -> Result<(), ExitCode> {
    if args.expect_sources == 0 {
        return Err(fail(EXIT_CONFIG, "--expect-sources must be at least 1"));
    }
    let model = ModelConfig::from_json_file(&args.config).map_err(runtime_exit)?;
    let seed = resolve_seed(args.seed);
    let identity = match &args.key {
        Some(path) => identity_from_key_file(path)?,
        None => NodeIdentity::derived("bootstrap-server", seed),
    };
    let options = BootstrapServerOptions {
        listen: args.listen,
        model,
        expect_sources: args.expect_sources,
        expect_intermediates: args.expect_intermediates,
        expect_workers: args.expect_workers,
        pow_count: args.pow_count,
        pow_bits: args.pow_bits,
        pow_seed: seed,
        registration_timeout: Duration::from_secs(args.registration_timeout_secs),
    };
    let report = run_bootstrap_server(&options, &identity).map_err(runtime_exit)?;
    let json = to_canonical_bytes(&report).map_err(|e| fail(EXIT_PROTOCOL, e))?;
    println!("{}", String::from_utf8_lossy(&json));
    if let Some(dir) = args.out {
        write_json(&dir, "report.json", &report)?;
        write_json(&dir, "nld.json", &report.nld)?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(dir: &PathBuf, name: &str, value: &T) -> Result<(), ExitCode> {
    std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_CONFIG, e))?;
    let bytes = to_canonical_bytes(value).map_err(|e| fail(EXIT_PROTOCOL, e))?;
    std::fs::write(dir.join(name), bytes).map_err(|e| fail(EXIT_CONFIG, e))?;
    Ok(())
}

fn cmd_node(args: NodeArgs) -> Result<(), ExitCode> {
    let role = match args.role {
        RoleArg::Source => NodeType::DataSource,
        RoleArg::Intermediate => NodeType::Intermediate,
        RoleArg::Terminal => NodeType::Terminal,
    };
    let data = args.data.map(|paths| (paths[0].clone(), paths[1].clone()));
    if role == NodeType::DataSource && data.is_none() {
        return Err(fail(EXIT_CONFIG, "--role source requires --data IMAGES LABELS"));
    }
    let identity = identity_from_key_file(&args.key)?;
    let options = ChainNodeOptions {
        role,
        bootstrap_addr: args.bootstrap,
        data,
        label_classes: args.classes,
        loss_override: args.loss.map(|l| match l {
            LossArg::Mse => LossKind::Mse,
            LossArg::Xent => LossKind::CrossEntropySoftmax,
        }),
        out_dir: args.out,
        config_timeout: Duration::from_secs(args.config_timeout_secs),
    };
    let report = run_chain_node(&options, &identity).map_err(runtime_exit)?;
    let json = to_canonical_bytes(&report).map_err(|e| fail(EXIT_PROTOCOL, e))?;
    println!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

fn cmd_worker(args: WorkerArgs) -> Result<(), ExitCode> {
    let identity = identity_from_key_file(&args.key)?;
    let options = WorkerOptions {
        bootstrap_addr: args.bootstrap,
        chain_file: args.chain_file,
        round_interval: Duration::from_millis(args.round_interval_ms),
        max_block_txns: args.max_block_txns,
        config_timeout: Duration::from_secs(args.config_timeout_secs),
        drain_timeout: Duration::from_secs(30),
    };
    let report = run_worker(&options, &identity).map_err(runtime_exit)?;
    let json = to_canonical_bytes(&report).map_err(|e| fail(EXIT_PROTOCOL, e))?;
    println!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<(), ExitCode> {
    let chain = load_chain(&args.chain_file).map_err(|e| fail(EXIT_VERIFY, e))?;
    if let splitchain_core::ledger::ChainVerdict::Invalid { height, reason } = chain.verify() {
        return Err(fail(
            EXIT_VERIFY,
            format!("chain fails verification at height {height}: {reason}"),
        ));
    }
    let reports = if let Some(epoch) = args.epoch {
        vec![audit_epoch(&chain, epoch).map_err(|e| fail(EXIT_VERIFY, e))?]
    } else {
        audit_all(&chain).map_err(|e| fail(EXIT_VERIFY, e))?
    };

    #[derive(serde::Serialize)]
    struct AuditOutput {
        chain_height: u64,
        committed_txns: usize,
        epochs: Vec<splitchain_core::ledger::AuditReport>,
        #[serde(skip_serializing_if = "Option::is_none")]
        incentives: Option<std::collections::BTreeMap<String, u64>>,
    }
    let mut output = AuditOutput {
        chain_height: chain.height(),
        committed_txns: chain.committed_txn_count(),
        epochs: reports,
        incentives: None,
    };

    if args.incentives {
        let tau = args.tau.expect("clap requires tau");
        let budget = args.budget.expect("clap requires budget");
        let final_loss = match (args.final_loss, &args.loss_file) {
            (Some(v), _) => v,
            (None, Some(path)) => final_loss_from_csv(path)?,
            (None, None) => {
                return Err(fail(EXIT_CONFIG, "--incentives needs --final-loss or --loss-file"))
            }
        };
        let nld = match &args.nld {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| fail(EXIT_CONFIG, e))?;
                serde_json::from_slice::<NodeLayerDescription>(&bytes)
                    .map_err(|e| fail(EXIT_CONFIG, e))?
            }
            None => nld_from_genesis(&chain),
        };
        let payouts = compute_incentives(&nld, final_loss, tau, budget)
            .map_err(|e| fail(EXIT_CONFIG, e))?;
        output.incentives = Some(
            payouts
                .into_iter()
                .map(|(addr, amount)| (addr.as_str().to_owned(), amount))
                .collect(),
        );
    }

    let text = if args.pretty {
        serde_json::to_string_pretty(&output).map_err(|e| fail(EXIT_PROTOCOL, e))?
    } else {
        String::from_utf8_lossy(&to_canonical_bytes(&output).map_err(|e| fail(EXIT_PROTOCOL, e))?)
            .into_owned()
    };
    println!("{text}");
    Ok(())
}

/// Rebuilds parameter counts from the genesis block when no NLD file is
/// given; layer shapes are unknown here, so each intermediate is summarized
/// as one pseudo-layer holding its recorded count.
fn nld_from_genesis(chain: &splitchain_core::ledger::Chain) -> NodeLayerDescription {
    use splitchain_core::nn::{Activation, LayerSpec};
    use splitchain_core::partition::NodeAssignment;
    let content = &chain.genesis.content;
    let assignments = content
        .intermediate_addresses
        .iter()
        .map(|addr| {
            let count = content
                .intermediate_parameter_counts
                .get(addr.as_str())
                .copied()
                .unwrap_or(0);
            NodeAssignment {
                node_address: addr.clone(),
                layers: vec![LayerSpec::dense(count.max(1) as usize, 1, Activation::Identity)],
            }
        })
        .collect();
    NodeLayerDescription { assignments }
}

fn final_loss_from_csv(path: &PathBuf) -> Result<f64, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(EXIT_CONFIG, e))?;
    let mut entries: Vec<LossEntry> = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let (Some(e), Some(i), Some(l)) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        entries.push(LossEntry {
            epoch: e.parse().map_err(|err| fail(EXIT_CONFIG, format!("bad loss file: {err}")))?,
            iteration: i.parse().map_err(|err| fail(EXIT_CONFIG, format!("bad loss file: {err}")))?,
            loss: l.parse().map_err(|err| fail(EXIT_CONFIG, format!("bad loss file: {err}")))?,
        });
    }
    let last_epoch = entries
        .iter()
        .map(|e| e.epoch)
        .max()
        .ok_or_else(|| fail(EXIT_CONFIG, "loss file holds no entries"))?;
    let tail: Vec<f64> = entries
        .iter()
        .filter(|e| e.epoch == last_epoch)
        .map(|e| e.loss)
        .collect();
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

fn sim_exit(e: SimError) -> ExitCode {
    fail(EXIT_CONFIG, e)
}

fn cmd_sim(args: SimArgs) -> Result<(), ExitCode> {
    let mut scenario = Scenario::from_json_file(&args.scenario).map_err(sim_exit)?;
    if args.seed.is_some() {
        scenario.seed = resolve_seed(args.seed);
    }
    let outcome = run_sim(&scenario).map_err(sim_exit)?;
    std::fs::create_dir_all(&args.out).map_err(|e| fail(EXIT_CONFIG, e))?;
    outcome
        .report
        .write_json(&args.out.join("report.json"))
        .map_err(sim_exit)?;
    outcome
        .report
        .write_loss_csv(&args.out.join("loss.csv"))
        .map_err(sim_exit)?;
    println!(
        "model {} | {} iterations | final training loss {:.6}{} | {} txns over {} blocks",
        outcome.report.model_name,
        outcome.report.losses.len(),
        outcome.report.final_training_loss,
        outcome
            .report
            .validation_loss
            .map(|v| format!(" | validation loss {v:.6}"))
            .unwrap_or_default(),
        outcome.report.committed_txns,
        outcome.report.chain_height,
    );
    if args.compare_oracle {
        let oracle = run_monolithic_oracle(&scenario).map_err(sim_exit)?;
        let max_dev = outcome
            .report
            .losses
            .iter()
            .zip(&oracle.losses)
            .map(|(a, b)| (a.loss - b.loss).abs())
            .fold(0.0f64, f64::max);
        println!("max loss deviation vs monolithic oracle: {max_dev:e}");
    }
    Ok(())
}

fn cmd_keygen(args: KeygenArgs) -> Result<(), ExitCode> {
    let seed_bytes: [u8; 32] = match args.seed {
        Some(seed) => {
            use sha2::digest::Digest;
            let mut hasher = sha2::Sha256::new();
            hasher.update(b"keygen");
            hasher.update(seed.to_be_bytes());
            hasher.finalize().into()
        }
        None => {
            let mut bytes = [0u8; 32];
            rand::thread_rng().fill_bytes(&mut bytes);
            bytes
        }
    };
    let identity = NodeIdentity::from_seed(&seed_bytes);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| fail(EXIT_CONFIG, e))?;
        }
    }
    std::fs::write(&args.out, hex::encode(seed_bytes)).map_err(|e| fail(EXIT_CONFIG, e))?;
    println!("address: {}", identity.address());
    Ok(())
}
