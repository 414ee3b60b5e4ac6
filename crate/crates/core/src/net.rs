//! Socket deployment: the bootstrap server, chain nodes and workers as real
//! processes on TCP (registration and chain tensors) and UDP (transactions
//! and blocks). All protocol decisions live in [`crate::runtime`] and
//! [`crate::ledger`]; this module only moves bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime};

use crate::data::{load_idx_with_classes, plan_batches, Dataset};
use crate::identity::{NodeAddress, NodeIdentity};
use crate::ledger::{Chain, NodeType, WorkerState};
use crate::partition::{generate_challenges, solve_pow, verify_pow, ComputeProfile, NodeLayerDescription};
use crate::runtime::{
    run_bootstrap_core, ChainNode, LossEntry, ModelConfig, Outbound, Registrant, RuntimeError,
    TrainingSchedule,
};
use crate::sim::derive_u64;
use crate::wire::message::{MessagePayload, RegistrationRecord, WireMessage};
use crate::wire::{frame_recv, frame_send, WireError};
use crate::Real;

fn send_msg(stream: &mut TcpStream, msg: &WireMessage) -> Result<(), WireError> {
    frame_send(stream, &msg.encode()?)
}

fn recv_msg(stream: &mut TcpStream) -> Result<WireMessage, WireError> {
    WireMessage::decode(&frame_recv(stream)?)
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Broadcasts a message to every worker endpoint as one datagram each.
struct WorkerBroadcaster {
    socket: UdpSocket,
    endpoints: Vec<SocketAddr>,
}

impl WorkerBroadcaster {
    fn new(endpoints: &[String]) -> Result<Self, RuntimeError> {
        let socket = UdpSocket::bind("0.0.0.0:0")?;
        let endpoints = endpoints
            .iter()
            .map(|e| {
                e.parse()
                    .map_err(|err| RuntimeError::Config(format!("bad worker endpoint {e}: {err}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { socket, endpoints })
    }

    fn broadcast(&self, msg: &WireMessage) -> Result<(), RuntimeError> {
        let bytes = msg.encode()?;
        crate::wire::frame::check_datagram(&bytes)?;
        for endpoint in &self.endpoints {
            self.socket.send_to(&bytes, endpoint)?;
        }
        Ok(())
    }
}

pub struct BootstrapServerOptions {
    pub listen: String,
    pub model: ModelConfig,
    pub expect_sources: usize,
    pub expect_intermediates: usize,
    pub expect_workers: usize,
    pub pow_count: usize,
    pub pow_bits: u8,
    pub pow_seed: u64,
    pub registration_timeout: Duration,
}

/// What Phase I produced; the CLI prints this as JSON.
#[derive(Debug, serde::Serialize)]
pub struct BootstrapReport {
    pub genesis_hash: String,
    pub profiles: Vec<ComputeProfile>,
    pub nld: NodeLayerDescription,
    pub chain_order: Vec<NodeAddress>,
    pub schedule: TrainingSchedule,
    pub excluded_for_bad_pow: Vec<NodeAddress>,
}

/// Runs Phase I over sockets: collects registrations, benchmarks the
/// intermediates with hash puzzles timed server-side, splits the model,
/// distributes configs, hands workers the genesis block, then returns. The
/// server plays no further part after this.
pub fn run_bootstrap_server(
    options: &BootstrapServerOptions,
    identity: &NodeIdentity,
) -> Result<BootstrapReport, RuntimeError> {
    options.model.validate()?;
    if options.expect_sources == 0 {
        return Err(RuntimeError::Config("expected source count must be positive".into()));
    }
    if options.expect_workers == 0 {
        return Err(RuntimeError::Config("expected worker count must be positive".into()));
    }
    let listener = TcpListener::bind(&options.listen)?;
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + options.registration_timeout;

    struct Pending {
        registrant: Registrant,
        stream: TcpStream,
    }
    let mut pending: Vec<Pending> = Vec::new();
    let counts = |pending: &[Pending], t: NodeType| {
        pending
            .iter()
            .filter(|p| p.registrant.record.node_type == t)
            .count()
    };
    loop {
        let done = counts(&pending, NodeType::DataSource) >= options.expect_sources
            && counts(&pending, NodeType::Intermediate) >= options.expect_intermediates
            && counts(&pending, NodeType::Terminal) >= 1
            && counts(&pending, NodeType::Worker) >= options.expect_workers;
        if done {
            break;
        }
        if Instant::now() > deadline {
            return Err(RuntimeError::Protocol(format!(
                "registration timed out with {} of {} participants",
                pending.len(),
                options.expect_sources + options.expect_intermediates + 1 + options.expect_workers
            )));
        }
        match listener.accept() {
            Ok((mut stream, peer)) => {
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(Duration::from_secs(10)))?;
                let msg = recv_msg(&mut stream)?;
                if !msg.verify_signature() {
                    continue; // unauthenticated registration attempt
                }
                let MessagePayload::Register(record) = msg.payload else {
                    continue;
                };
                record.validate()?;
                let address = record.public_key.address();
                if pending.iter().any(|p| p.registrant.address == address) {
                    continue; // duplicate registration
                }
                pending.push(Pending {
                    registrant: Registrant {
                        address,
                        record,
                        ip: peer.ip().to_string(),
                    },
                    stream,
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }

    // Benchmark the intermediates: one thread per node, m sequential
    // challenges each, elapsed measured here from dispatch to receipt.
    let mut timings: Vec<(NodeAddress, Vec<f64>)> = Vec::new();
    let mut excluded: Vec<NodeAddress> = Vec::new();
    let mut handles = Vec::new();
    for (idx, p) in pending.iter().enumerate() {
        if p.registrant.record.node_type != NodeType::Intermediate {
            continue;
        }
        let mut stream = p.stream.try_clone()?;
        stream.set_read_timeout(Some(Duration::from_secs(300)))?;
        let address = p.registrant.address.clone();
        let problems = generate_challenges(
            options.pow_count,
            options.pow_bits,
            derive_u64(options.pow_seed, address.as_str()),
        )?;
        handles.push(std::thread::spawn(move || -> (usize, NodeAddress, Result<Vec<f64>, RuntimeError>) {
            let mut node_timings = Vec::with_capacity(problems.len());
            for (i, problem) in problems.iter().enumerate() {
                let challenge = WireMessage::unsigned(MessagePayload::PowChallenge {
                    index: i as u32,
                    problem: problem.clone(),
                });
                let sent = Instant::now();
                if let Err(e) = send_msg(&mut stream, &challenge) {
                    return (idx, address, Err(e.into()));
                }
                let reply = match recv_msg(&mut stream) {
                    Ok(m) => m,
                    Err(e) => return (idx, address, Err(e.into())),
                };
                let elapsed = sent.elapsed().as_secs_f64().max(1e-9);
                let MessagePayload::PowSolution { index, solution } = reply.payload else {
                    return (idx, address, Err(RuntimeError::Protocol("expected POW_SOLUTION".into())));
                };
                if index as usize != i || !verify_pow(problem, &solution) {
                    return (idx, address, Err(RuntimeError::Protocol("proof-of-work verification failed".into())));
                }
                node_timings.push(elapsed);
            }
            (idx, address, Ok(node_timings))
        }));
    }
    let mut results: Vec<(usize, NodeAddress, Result<Vec<f64>, RuntimeError>)> = handles
        .into_iter()
        .map(|h| h.join().expect("pow thread panicked"))
        .collect();
    results.sort_by_key(|(idx, _, _)| *idx); // registration order
    let mut failed_indices = Vec::new();
    for (idx, address, result) in results {
        match result {
            Ok(t) => timings.push((address, t)),
            Err(_) => {
                excluded.push(address);
                failed_indices.push(idx);
            }
        }
    }
    // Nodes failing verification are dropped from the run entirely.
    let mut pending: Vec<Pending> = pending
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !failed_indices.contains(i))
        .map(|(_, p)| p)
        .collect();

    let registrants: Vec<Registrant> = pending.iter().map(|p| p.registrant.clone()).collect();
    let outcome = run_bootstrap_core(&options.model, identity, &registrants, &timings, now_unix())?;

    // Distribute: chain configs to chain nodes (empty config = excluded),
    // the genesis announcement to workers.
    let genesis_msg = WireMessage::signed(
        MessagePayload::Genesis(crate::wire::message::GenesisAnnouncement {
            block: outcome.genesis.clone(),
            worker_endpoints: outcome.worker_endpoints.clone(),
        }),
        identity,
    )?;
    for p in &mut pending {
        match p.registrant.record.node_type {
            NodeType::Worker => send_msg(&mut p.stream, &genesis_msg)?,
            _ => {
                let config = outcome
                    .configs
                    .get(&p.registrant.address)
                    .cloned()
                    .unwrap_or_else(|| excluded_config(&options.model, &outcome.worker_endpoints));
                let msg = WireMessage::signed(MessagePayload::ChainConfig(config), identity)?;
                send_msg(&mut p.stream, &msg)?;
            }
        }
    }

    Ok(BootstrapReport {
        genesis_hash: outcome.genesis_hash,
        profiles: outcome.profiles,
        nld: outcome.nld,
        chain_order: outcome.chain_order,
        schedule: outcome.schedule,
        excluded_for_bad_pow: excluded,
    })
}

/// Config handed to an intermediate that holds no layers: tells it it is not
/// part of the chain.
fn excluded_config(model: &ModelConfig, worker_endpoints: &[String]) -> crate::wire::message::ChainConfig {
    crate::wire::message::ChainConfig {
        model_name: model.model_name.clone(),
        role: NodeType::Intermediate,
        next_node_address: None,
        layer_specs: Vec::new(),
        epochs: model.training.epochs,
        batch_size: model.training.batch_size,
        learning_rate: model.training.learning_rate,
        loss_kind: None,
        weight_seed: 0,
        layer_index_base: 0,
        iterations_per_epoch: 0,
        iteration_base: 0,
        worker_endpoints: worker_endpoints.to_vec(),
        upstream_plan: Vec::new(),
        terminate_token: None,
    }
}

pub struct ChainNodeOptions {
    pub role: NodeType,
    pub bootstrap_addr: String,
    /// Source only: IDX image and label paths.
    pub data: Option<(PathBuf, PathBuf)>,
    pub label_classes: usize,
    /// Terminal only: overrides the loss selected by the bootstrap config.
    pub loss_override: Option<crate::nn::LossKind>,
    pub out_dir: PathBuf,
    pub config_timeout: Duration,
}

#[derive(Debug, serde::Serialize)]
pub struct ChainNodeReport {
    pub address: NodeAddress,
    pub role: NodeType,
    pub excluded: bool,
    pub iterations_completed: u64,
    pub transactions_created: usize,
    pub losses: Vec<LossEntry>,
}

/// Registers with the bootstrap server, then plays the node's chain role to
/// completion. Weights and the local transaction log persist under
/// `out_dir`; the terminal also writes `loss.csv`.
pub fn run_chain_node(
    options: &ChainNodeOptions,
    identity: &NodeIdentity,
) -> Result<ChainNodeReport, RuntimeError> {
    let dataset: Option<Dataset<Real>> = match (&options.data, options.role) {
        (Some((images, labels)), NodeType::DataSource) => {
            Some(load_idx_with_classes(images, labels, options.label_classes)?)
        }
        (None, NodeType::DataSource) => {
            return Err(RuntimeError::Config("data source requires --data image and label paths".into()))
        }
        (Some(_), _) => {
            return Err(RuntimeError::Config("only data sources take --data".into()))
        }
        (None, _) => None,
    };

    // Listen before registering so the upstream neighbor can always connect.
    let listener = TcpListener::bind("0.0.0.0:0")?;
    let listen_port = listener.local_addr()?.port();

    let mut bootstrap = TcpStream::connect(&options.bootstrap_addr)?;
    bootstrap.set_read_timeout(Some(options.config_timeout))?;
    let register = WireMessage::signed(
        MessagePayload::Register(RegistrationRecord {
            listen_port,
            node_type: options.role,
            public_key: identity.public_key(),
            data_point_count: dataset.as_ref().map(|d| d.len() as u64),
        }),
        identity,
    )?;
    send_msg(&mut bootstrap, &register)?;

    // Intermediates answer benchmark challenges until the config arrives.
    let mut config = None;
    while config.is_none() {
        let msg = recv_msg(&mut bootstrap)?;
        match msg.payload {
            MessagePayload::PowChallenge { index, problem } => {
                let solution = solve_pow(&problem);
                let reply = WireMessage::signed(
                    MessagePayload::PowSolution { index, solution },
                    identity,
                )?;
                send_msg(&mut bootstrap, &reply)?;
            }
            MessagePayload::ChainConfig(c) => {
                if !msg.signature.is_some() {
                    return Err(RuntimeError::Protocol("unsigned chain config".into()));
                }
                config = Some(c);
            }
            other => {
                return Err(RuntimeError::Protocol(format!(
                    "unexpected {} while awaiting config",
                    other.tag()
                )))
            }
        }
    }
    let mut config = config.expect("loop exits with config");
    drop(bootstrap);

    if config.layer_specs.is_empty() {
        // Not part of the chain this run.
        return Ok(ChainNodeReport {
            address: identity.address().clone(),
            role: options.role,
            excluded: true,
            iterations_completed: 0,
            transactions_created: 0,
            losses: Vec::new(),
        });
    }
    if let (Some(kind), NodeType::Terminal) = (options.loss_override, options.role) {
        config.loss_kind = Some(kind);
    }

    std::fs::create_dir_all(&options.out_dir)?;
    let broadcaster = WorkerBroadcaster::new(&config.worker_endpoints)?;
    let epochs = config.epochs;
    let iterations_per_epoch = config.iterations_per_epoch;
    let terminate_token = config.terminate_token.clone();
    let mut node = ChainNode::new(identity.clone(), config)?;

    let result = match options.role {
        NodeType::DataSource => run_source_loop(&mut node, &listener, dataset.unwrap(), &broadcaster),
        NodeType::Intermediate | NodeType::Terminal => {
            run_receiver_loop(&mut node, &listener, &broadcaster, epochs, iterations_per_epoch)
        }
        NodeType::Worker => Err(RuntimeError::Config("workers use run_worker".into())),
    };

    // Persist state whether the run finished or aborted; an abort leaves a
    // resumable checkpoint behind.
    node.save_weights(&options.out_dir.join("weights.json"))?;
    node.save_txn_log(&options.out_dir.join("txns.jsonl"))?;
    if node.role() == NodeType::Terminal {
        let mut file = std::fs::File::create(options.out_dir.join("loss.csv"))?;
        crate::runtime::write_loss_csv(&mut file, node.losses())?;
        file.flush()?;
    }
    let iterations_completed = result?;

    // The final updater tells the workers training is over.
    if let Some(token) = terminate_token {
        broadcaster.broadcast(&WireMessage::unsigned(MessagePayload::Terminate(token)))?;
    }

    Ok(ChainNodeReport {
        address: identity.address().clone(),
        role: options.role,
        excluded: false,
        iterations_completed,
        transactions_created: node.txn_log().len(),
        losses: node.losses().to_vec(),
    })
}

fn connect_next(endpoint: &str) -> Result<TcpStream, RuntimeError> {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        match TcpStream::connect(endpoint) {
            Ok(stream) => {
                stream.set_read_timeout(Some(Duration::from_secs(120)))?;
                return Ok(stream);
            }
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Routes a node's outbound set over the socket transports.
fn route_outbound(
    outbound: Vec<Outbound>,
    downstream: Option<&mut TcpStream>,
    upstream: Option<(&mut UpstreamHub, &NodeAddress)>,
    broadcaster: &WorkerBroadcaster,
) -> Result<(), RuntimeError> {
    let mut downstream = downstream;
    let mut upstream = upstream;
    for out in outbound {
        match out {
            Outbound::Workers(msg) => broadcaster.broadcast(&msg)?,
            Outbound::Next(msg) => {
                let stream = downstream
                    .as_deref_mut()
                    .ok_or_else(|| RuntimeError::Protocol("no downstream hop".into()))?;
                send_msg(stream, &msg)?;
            }
            Outbound::Prev(origin, msg) => {
                let (hub, _) = upstream
                    .as_mut()
                    .ok_or_else(|| RuntimeError::Protocol("no upstream hop".into()))?;
                hub.send_to_origin(&origin, &msg)?;
            }
        }
    }
    Ok(())
}

/// The source drives the schedule: one forward per batch, then it blocks on
/// the returning gradient before the next batch.
fn run_source_loop(
    node: &mut ChainNode,
    _listener: &TcpListener,
    dataset: Dataset<Real>,
    broadcaster: &WorkerBroadcaster,
) -> Result<u64, RuntimeError> {
    let config = node.config().clone();
    let endpoint = config
        .next_node_address
        .as_ref()
        .ok_or_else(|| RuntimeError::Config("source has no next hop".into()))?;
    let mut downstream = connect_next(endpoint)?;
    let plan = plan_batches(dataset.len(), config.batch_size.min(dataset.len()), None)?;
    let mut iterations = 0u64;
    for epoch in 0..config.epochs {
        for (b, slice) in plan.slices.iter().enumerate() {
            let iteration = config.iteration_base + b as u32;
            let values = dataset.samples.select_rows(slice);
            let labels = dataset.labels.select_rows(slice);
            let step = (|| -> Result<(), RuntimeError> {
                let outbound = node.start_batch(values, labels, epoch, iteration)?;
                route_outbound(outbound, Some(&mut downstream), None, broadcaster)?;
                let reply = recv_msg(&mut downstream)?;
                let produced = node.handle(reply)?;
                route_outbound(produced, Some(&mut downstream), None, broadcaster)?;
                Ok(())
            })();
            match step {
                Ok(()) => iterations += 1,
                Err(RuntimeError::Wire(WireError::Io(_)) | RuntimeError::Wire(WireError::Truncated)) => {
                    return Err(RuntimeError::ChainConnectionLost { epoch, iteration });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(iterations)
}

/// Accepted upstream connections with frames funneled through one channel,
/// so a node with several previous hops (the first hop after multiple
/// sources) reads whichever source is active without knowing the schedule.
struct UpstreamHub {
    rx: mpsc::Receiver<(usize, Result<Vec<u8>, WireError>)>,
    writers: Vec<TcpStream>,
    /// Learned lazily: the first FORWARD on a connection binds its origin.
    origin_of_conn: BTreeMap<NodeAddress, usize>,
}

impl UpstreamHub {
    fn accept(listener: &TcpListener, expected: usize) -> Result<Self, RuntimeError> {
        let (tx, rx) = mpsc::channel();
        let mut writers = Vec::with_capacity(expected);
        for conn_id in 0..expected {
            let (stream, _) = listener.accept()?;
            stream.set_read_timeout(Some(Duration::from_secs(300)))?;
            writers.push(stream.try_clone()?);
            let mut reader = stream;
            let tx = tx.clone();
            std::thread::spawn(move || loop {
                match frame_recv(&mut reader) {
                    Ok(bytes) => {
                        if tx.send((conn_id, Ok(bytes))).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send((conn_id, Err(e)));
                        return;
                    }
                }
            });
        }
        Ok(Self {
            rx,
            writers,
            origin_of_conn: BTreeMap::new(),
        })
    }

    fn recv(&mut self) -> Result<WireMessage, WireError> {
        let (conn_id, bytes) = self
            .rx
            .recv()
            .map_err(|_| WireError::Truncated)?;
        let msg = WireMessage::decode(&bytes?)?;
        if let MessagePayload::Forward(fwd) = &msg.payload {
            self.origin_of_conn
                .entry(fwd.origin_source.clone())
                .or_insert(conn_id);
        }
        Ok(msg)
    }

    fn send_to_origin(&mut self, origin: &NodeAddress, msg: &WireMessage) -> Result<(), WireError> {
        let conn_id = *self
            .origin_of_conn
            .get(origin)
            .ok_or(WireError::BadSignature)?;
        send_msg(&mut self.writers[conn_id], msg)
    }
}

/// Intermediates and the terminal respond to what arrives: a forward from
/// upstream, and (for intermediates) the matching gradient from downstream.
fn run_receiver_loop(
    node: &mut ChainNode,
    listener: &TcpListener,
    broadcaster: &WorkerBroadcaster,
    epochs: u32,
    iterations_per_epoch: u32,
) -> Result<u64, RuntimeError> {
    let config = node.config().clone();
    let upstream_conns = config.upstream_plan.len().max(1);
    let mut hub = UpstreamHub::accept(listener, upstream_conns)?;
    let mut downstream = match &config.next_node_address {
        Some(endpoint) => Some(connect_next(endpoint)?),
        None => None,
    };
    let total = u64::from(epochs) * u64::from(iterations_per_epoch);
    let mut completed = 0u64;
    while completed < total {
        let epoch = (completed / u64::from(iterations_per_epoch)) as u32;
        let iteration = (completed % u64::from(iterations_per_epoch)) as u32;
        let step = (|| -> Result<(), RuntimeError> {
            let forward = hub.recv()?;
            let origin = match &forward.payload {
                MessagePayload::Forward(f) => f.origin_source.clone(),
                other => {
                    return Err(RuntimeError::Protocol(format!(
                        "expected FORWARD, got {}",
                        other.tag()
                    )))
                }
            };
            let produced = node.handle(forward)?;
            route_outbound(produced, downstream.as_mut(), Some((&mut hub, &origin)), broadcaster)?;
            if let Some(stream) = downstream.as_mut() {
                // Intermediate: the gradient comes back on the downstream
                // stream before the next batch can start.
                let backward = recv_msg(stream)?;
                let produced = node.handle(backward)?;
                route_outbound(produced, None, Some((&mut hub, &origin)), broadcaster)?;
            }
            Ok(())
        })();
        match step {
            Ok(()) => completed += 1,
            Err(RuntimeError::Wire(WireError::Io(_)) | RuntimeError::Wire(WireError::Truncated)) => {
                return Err(RuntimeError::ChainConnectionLost { epoch, iteration });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(completed)
}

pub struct WorkerOptions {
    pub bootstrap_addr: String,
    pub chain_file: PathBuf,
    pub round_interval: Duration,
    pub max_block_txns: usize,
    pub config_timeout: Duration,
    /// How long to keep draining after TERMINATE before giving up.
    pub drain_timeout: Duration,
}

#[derive(Debug, serde::Serialize)]
pub struct WorkerReport {
    pub address: NodeAddress,
    pub chain_height: u64,
    pub committed_txns: usize,
}

/// Validates transactions and serves leader rounds until a verified
/// TERMINATE arrives and the mempool drains. The chain file grows append-only
/// as blocks commit.
pub fn run_worker(options: &WorkerOptions, identity: &NodeIdentity) -> Result<WorkerReport, RuntimeError> {
    let socket = UdpSocket::bind("0.0.0.0:0")?;
    let listen_port = socket.local_addr()?.port();

    let mut bootstrap = TcpStream::connect(&options.bootstrap_addr)?;
    bootstrap.set_read_timeout(Some(options.config_timeout))?;
    let register = WireMessage::signed(
        MessagePayload::Register(RegistrationRecord {
            listen_port,
            node_type: NodeType::Worker,
            public_key: identity.public_key(),
            data_point_count: None,
        }),
        identity,
    )?;
    send_msg(&mut bootstrap, &register)?;
    let announcement = recv_msg(&mut bootstrap)?;
    let MessagePayload::Genesis(genesis_msg) = announcement.payload else {
        return Err(RuntimeError::Protocol("expected GENESIS".into()));
    };
    drop(bootstrap);

    let genesis = genesis_msg.block;
    genesis
        .verify()
        .map_err(|e| RuntimeError::Protocol(format!("invalid genesis: {e}")))?;
    let genesis_hash = genesis.hash()?;
    let bootstrap_key = genesis.content.bootstrap_public_key;
    let mut state = WorkerState::new(identity.clone(), genesis)
        .map_err(|e| RuntimeError::Protocol(e.to_string()))?;

    // Peers exclude this worker's own endpoint.
    let own_port_suffix = format!(":{listen_port}");
    let peers: Vec<SocketAddr> = genesis_msg
        .worker_endpoints
        .iter()
        .filter(|e| !e.ends_with(&own_port_suffix))
        .map(|e| {
            e.parse()
                .map_err(|err| RuntimeError::Config(format!("bad worker endpoint {e}: {err}")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut chain_file = std::fs::OpenOptions::new()
        .create(true)
        .truncate(true)
        .write(true)
        .open(&options.chain_file)?;
    append_record(
        &mut chain_file,
        &crate::ledger::ChainRecord::Genesis(state.chain().genesis.clone()),
    )?;

    socket.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut buf = vec![0u8; 64 * 1024];
    let mut last_round = Instant::now();
    let mut terminating: Option<Instant> = None;

    loop {
        match socket.recv_from(&mut buf) {
            Ok((len, from)) => {
                let Ok(msg) = WireMessage::decode(&buf[..len]) else {
                    continue;
                };
                match msg.payload {
                    MessagePayload::Txn(txn) => {
                        state.submit_transaction(txn);
                    }
                    MessagePayload::ValidateReq(block) => {
                        let height = block.content.height;
                        let ok = state.receive_block(block.clone()).is_ok();
                        if ok {
                            append_record(&mut chain_file, &crate::ledger::ChainRecord::Block(block))?;
                        }
                        let ack = WireMessage::unsigned(MessagePayload::ValidateAck { height, ok });
                        let _ = socket.send_to(&ack.encode()?, from);
                    }
                    MessagePayload::Block(_) | MessagePayload::ValidateAck { .. } => {
                        // Commit announcements and acks are informational here.
                    }
                    MessagePayload::Terminate(token)
                        if token.verify(&bootstrap_key, &genesis_hash) && terminating.is_none() => {
                            terminating = Some(Instant::now());
                        }
                    _ => {}
                }
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(e) => return Err(e.into()),
        }

        let due = last_round.elapsed() >= options.round_interval
            || state.mempool_len() >= options.max_block_txns
            || (terminating.is_some() && state.mempool_len() > 0);
        if due {
            last_round = Instant::now();
            if state.is_leader().map_err(to_protocol)? && state.mempool_len() > 0 {
                if let Some(block) = state
                    .produce_block(options.max_block_txns, now_unix())
                    .map_err(to_protocol)?
                {
                    append_record(
                        &mut chain_file,
                        &crate::ledger::ChainRecord::Block(block.clone()),
                    )?;
                    let req = WireMessage::unsigned(MessagePayload::ValidateReq(block.clone()));
                    let req_bytes = req.encode()?;
                    let announce = WireMessage::unsigned(MessagePayload::Block(block)).encode()?;
                    for peer in &peers {
                        let _ = socket.send_to(&req_bytes, peer);
                        let _ = socket.send_to(&announce, peer);
                    }
                }
            }
        }

        if let Some(since) = terminating {
            if state.mempool_len() == 0 && since.elapsed() >= Duration::from_millis(600) {
                break;
            }
            if since.elapsed() > options.drain_timeout {
                return Err(RuntimeError::Protocol(format!(
                    "terminated with {} transactions still pending",
                    state.mempool_len()
                )));
            }
        }
    }
    chain_file.flush()?;

    Ok(WorkerReport {
        address: identity.address().clone(),
        chain_height: state.chain().height(),
        committed_txns: state.chain().committed_txn_count(),
    })
}

fn to_protocol(e: crate::ledger::LedgerError) -> RuntimeError {
    RuntimeError::Protocol(e.to_string())
}

fn append_record(file: &mut std::fs::File, record: &crate::ledger::ChainRecord) -> Result<(), RuntimeError> {
    let bytes = crate::wire::to_canonical_bytes(record)?;
    file.write_all(&bytes)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

/// Reads and verifies a persisted chain file.
pub fn load_chain(path: &std::path::Path) -> Result<Chain, crate::ledger::LedgerError> {
    let file = std::fs::File::open(path)?;
    Chain::read_jsonl(std::io::BufReader::new(file))
}
