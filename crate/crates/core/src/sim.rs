//! Deterministic in-process harness: the full topology (bootstrap, chain
//! nodes, workers) wired through in-memory queues that carry the same
//! encoded bytes the socket transport would. Benchmark timings are injected
//! so Phase I is reproducible; everything downstream of them is the real
//! protocol code.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{plan_batches, synthetic_blobs, Dataset};
use crate::identity::{NodeAddress, NodeIdentity};
use crate::ledger::{
    audit_all, AuditReport, Chain, LedgerError, NodeType, TxnKind, WorkerState,
};
use crate::nn::{
    loss_gradient, loss_value, ActivationBatch, DenseLayer, LabelBatch, SplitNetwork,
};
use crate::runtime::{
    run_bootstrap_core, run_validation, BootstrapOutcome, ChainNode, GradientFault, LossEntry,
    ModelConfig, Outbound, ProtocolEvent, Registrant, RuntimeError, TrainingSchedule,
};
use crate::scalar::Scalar;
use crate::wire::message::{MessagePayload, RegistrationRecord, WireMessage};
use crate::wire::WireError;
use crate::Real;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which training data the scenario runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic {
        n: usize,
        classes: usize,
        feature_width: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationSpec {
    /// Re-evaluate on the training set (forward only).
    TrainingSet,
    /// A fresh synthetic draw from the same distribution.
    Synthetic { n: usize },
    Idx { images: PathBuf, labels: PathBuf },
}

/// Addresses a fault target by chain position instead of address, since
/// addresses are derived from the scenario seed. Intermediate indices count
/// in chain (descending-CPF) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainPos {
    pub role: NodeType,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// The node fails to broadcast one transaction; the audit must notice.
    DropTransaction {
        node: ChainPos,
        epoch: u32,
        batch: u32,
        txn: TxnKind,
    },
    /// The node adds a constant to the gradient it sends upstream.
    CorruptGradient {
        node: ChainPos,
        epoch: u32,
        batch: u32,
        delta: f32,
    },
    /// The node goes silent at the given global iteration; the epoch aborts
    /// with a resumable checkpoint.
    KillNode { node: ChainPos, at_iteration: u32 },
}

fn default_workers() -> usize {
    1
}

fn default_max_block_txns() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataSpec,
    /// Data points per source, in registration order; empty means one source
    /// holding the whole dataset.
    #[serde(default)]
    pub source_counts: Vec<u64>,
    /// Injected benchmark solve times, one list per intermediate node.
    #[serde(default)]
    pub intermediate_timings: Vec<Vec<f64>>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_max_block_txns")]
    pub max_block_txns: usize,
    #[serde(default)]
    pub shuffle_each_epoch: bool,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSpec>,
}

impl Scenario {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, SimError> {
        let bytes = std::fs::read(path)?;
        let scenario: Self = serde_json::from_slice(&bytes)
            .map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), SimError> {
        self.model.validate()?;
        if self.workers == 0 {
            return Err(SimError::Scenario("at least one worker is required".into()));
        }
        if self.max_block_txns == 0 {
            return Err(SimError::Scenario("max_block_txns must be positive".into()));
        }
        if !self.model.intermediate_layers.is_empty() && self.intermediate_timings.is_empty() {
            return Err(SimError::Scenario(
                "model has intermediate layers but the scenario declares no intermediates".into(),
            ));
        }
        Ok(())
    }

    /// Seed for a named sub-stream of the scenario's randomness.
    fn derive(&self, label: &str) -> u64 {
        derive_u64(self.seed, label)
    }

    fn weight_seed(&self) -> u64 {
        if self.model.training.weight_seed != 0 {
            self.model.training.weight_seed
        } else {
            self.derive("weights")
        }
    }
}

pub fn derive_u64(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(b"sim-substream");
    hasher.update(seed.to_be_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub epoch: u32,
    pub iteration: u32,
}

/// The serializable run summary. Equality ignores the wall-clock field so a
/// re-run with the same seed compares bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub model_name: String,
    pub losses: Vec<LossEntry>,
    pub final_training_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    pub committed_txns: usize,
    pub chain_height: u64,
    pub chain_node_count: usize,
    pub iterations_per_epoch: u32,
    pub epochs: u32,
    /// Modeled Phase I duration: total injected solve time, matching the
    /// single-machine setting where solves contend for the same CPU.
    pub bootstrap_time_modeled_secs: f64,
    pub training_ticks: u64,
    pub wall_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<AbortInfo>,
}

impl PartialEq for SimReport {
    fn eq(&self, other: &Self) -> bool {
        self.model_name == other.model_name
            && self.losses == other.losses
            && self.final_training_loss == other.final_training_loss
            && self.validation_loss == other.validation_loss
            && self.committed_txns == other.committed_txns
            && self.chain_height == other.chain_height
            && self.chain_node_count == other.chain_node_count
            && self.iterations_per_epoch == other.iterations_per_epoch
            && self.epochs == other.epochs
            && self.bootstrap_time_modeled_secs == other.bootstrap_time_modeled_secs
            && self.training_ticks == other.training_ticks
            && self.aborted == other.aborted
    }
}

/// Everything a test may want to inspect after a run. Equality ignores wall
/// time (via [`SimReport`]'s equality).
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub report: SimReport,
    /// Final parameters per chain node, in chain order.
    pub final_networks: Vec<(NodeAddress, Vec<DenseLayer<Real>>)>,
    /// One chain copy per worker; identical on clean runs.
    pub chains: Vec<Chain>,
    pub event_logs: Vec<(NodeAddress, Vec<ProtocolEvent>)>,
    pub audits: Vec<AuditReport>,
    pub nld: crate::partition::NodeLayerDescription,
    pub genesis_hash: String,
    pub schedule: TrainingSchedule,
    /// Width of the first FORWARD payload each node emitted.
    pub first_forward_widths: Vec<(NodeAddress, usize)>,
}

struct LoadedData {
    train: Dataset<Real>,
    validation: Option<Dataset<Real>>,
}

fn load_data(scenario: &Scenario) -> Result<LoadedData, SimError> {
    // A synthetic validation holdout must come from the training draw's
    // distribution, so both are cut from one contiguous sample.
    let synthetic_holdout = match (&scenario.data, &scenario.validation) {
        (DataSpec::Synthetic { .. }, Some(ValidationSpec::Synthetic { n })) => *n,
        (DataSpec::Idx { .. }, Some(ValidationSpec::Synthetic { .. })) => {
            return Err(SimError::Scenario(
                "synthetic validation requires synthetic training data".into(),
            ))
        }
        _ => 0,
    };
    let (train, mut validation) = match &scenario.data {
        DataSpec::Synthetic {
            n,
            classes,
            feature_width,
        } => {
            let full = synthetic_blobs(
                n + synthetic_holdout,
                *classes,
                *feature_width,
                scenario.derive("data"),
            )?;
            if synthetic_holdout > 0 {
                let (train, holdout) = full.split_at(*n);
                (train, Some(holdout))
            } else {
                (full, None)
            }
        }
        DataSpec::Idx { images, labels } => (crate::data::load_idx(images, labels)?, None),
    };
    validation = match &scenario.validation {
        None => None,
        Some(ValidationSpec::TrainingSet) => Some(train.clone()),
        Some(ValidationSpec::Synthetic { .. }) => validation,
        Some(ValidationSpec::Idx { images, labels }) => Some(crate::data::load_idx(images, labels)?),
    };
    Ok(LoadedData { train, validation })
}

/// Per-source contiguous shard boundaries over the training set.
fn source_shards(scenario: &Scenario, n: u64) -> Result<Vec<(u64, u64)>, SimError> {
    if scenario.source_counts.is_empty() {
        return Ok(vec![(0, n)]);
    }
    let total: u64 = scenario.source_counts.iter().sum();
    if total != n {
        return Err(SimError::Scenario(format!(
            "source counts sum to {total} but the dataset holds {n}"
        )));
    }
    let mut shards = Vec::with_capacity(scenario.source_counts.len());
    let mut start = 0;
    for &count in &scenario.source_counts {
        if count == 0 {
            return Err(SimError::Scenario("source with zero data points".into()));
        }
        shards.push((start, count));
        start += count;
    }
    Ok(shards)
}

struct Topology {
    nodes: Vec<ChainNode>,
    node_index: BTreeMap<NodeAddress, usize>,
    /// Chain successor of each node (sources all point at the first member).
    next_of: Vec<Option<usize>>,
    /// Chain predecessor; `None` means "route backward to the origin source".
    prev_of: Vec<Option<usize>>,
    workers: Vec<WorkerState>,
    source_indices: Vec<usize>,
}

fn instantiate(
    scenario: &Scenario,
    shards: &[(u64, u64)],
) -> Result<(Topology, BootstrapOutcome, f64), SimError> {
    let seed = scenario.seed;
    let label = |role: &str| format!("sim-{seed}-{role}");
    let bootstrap_id = NodeIdentity::derived(&label("bootstrap"), 0);
    let n_intermediates = scenario.intermediate_timings.len();

    let mut identities: Vec<(NodeIdentity, NodeType, Option<u64>)> = Vec::new();
    for (i, &(_, count)) in shards.iter().enumerate() {
        identities.push((
            NodeIdentity::derived(&label("source"), i as u64),
            NodeType::DataSource,
            Some(count),
        ));
    }
    for i in 0..n_intermediates {
        identities.push((
            NodeIdentity::derived(&label("intermediate"), i as u64),
            NodeType::Intermediate,
            None,
        ));
    }
    identities.push((
        NodeIdentity::derived(&label("terminal"), 0),
        NodeType::Terminal,
        None,
    ));
    let worker_identities: Vec<NodeIdentity> = (0..scenario.workers)
        .map(|i| NodeIdentity::derived(&label("worker"), i as u64))
        .collect();

    let mut registrants = Vec::new();
    for (port, (identity, node_type, points)) in identities.iter().enumerate() {
        registrants.push(Registrant {
            address: identity.address().clone(),
            record: RegistrationRecord {
                listen_port: 7000 + port as u16,
                node_type: *node_type,
                public_key: identity.public_key(),
                data_point_count: *points,
            },
            ip: "127.0.0.1".into(),
        });
    }
    for (i, identity) in worker_identities.iter().enumerate() {
        registrants.push(Registrant {
            address: identity.address().clone(),
            record: RegistrationRecord {
                listen_port: 7500 + i as u16,
                node_type: NodeType::Worker,
                public_key: identity.public_key(),
                data_point_count: None,
            },
            ip: "127.0.0.1".into(),
        });
    }

    let timings: Vec<(NodeAddress, Vec<f64>)> = scenario
        .intermediate_timings
        .iter()
        .enumerate()
        .map(|(i, times)| {
            (
                identities[shards.len() + i].0.address().clone(),
                times.clone(),
            )
        })
        .collect();
    let modeled_bootstrap_secs: f64 = timings.iter().flat_map(|(_, t)| t).sum();

    let mut model = scenario.model.clone();
    model.training.weight_seed = scenario.weight_seed();
    let outcome = run_bootstrap_core(&model, &bootstrap_id, &registrants, &timings, 0)?;

    // Build chain nodes in chain order.
    let identity_by_address: BTreeMap<NodeAddress, NodeIdentity> = identities
        .into_iter()
        .map(|(id, _, _)| (id.address().clone(), id))
        .collect();
    let mut nodes = Vec::new();
    let mut node_index = BTreeMap::new();
    for addr in &outcome.chain_order {
        let identity = identity_by_address
            .get(addr)
            .expect("chain members registered")
            .clone();
        let config = outcome.configs[addr].clone();
        node_index.insert(addr.clone(), nodes.len());
        nodes.push(ChainNode::new(identity, config)?);
    }
    let n_sources = shards.len();
    let member_count = nodes.len() - n_sources; // intermediates + terminal
    let mut next_of = vec![None; nodes.len()];
    let mut prev_of = vec![None; nodes.len()];
    for slot in next_of.iter_mut().take(n_sources) {
        *slot = Some(n_sources); // first member after the sources
    }
    for k in 0..member_count {
        let idx = n_sources + k;
        if k + 1 < member_count {
            next_of[idx] = Some(idx + 1);
        }
        if k > 0 {
            prev_of[idx] = Some(idx - 1);
        }
        // k == 0 keeps None: gradients route to the origin source.
    }

    let workers = worker_identities
        .into_iter()
        .map(|id| WorkerState::new(id, outcome.genesis.clone()))
        .collect::<Result<Vec<_>, _>>()?;

    let topology = Topology {
        source_indices: (0..n_sources).collect(),
        nodes,
        node_index,
        next_of,
        prev_of,
        workers,
    };
    let _ = bootstrap_id;
    Ok((topology, outcome, modeled_bootstrap_secs))
}

struct Pump<'a> {
    topology: &'a mut Topology,
    scenario: &'a Scenario,
    fault_targets: Vec<(NodeAddress, Fault)>,
    dead: Vec<bool>,
    tick: u64,
    first_forward_widths: Vec<(NodeAddress, usize)>,
}

enum PumpOutcome {
    Done,
    ConnectionLost,
}

impl<'a> Pump<'a> {
    /// Routes every outbound message to quiescence, carrying encoded bytes
    /// through the same codecs the socket transport uses.
    fn flush(&mut self, from: usize, outbound: Vec<Outbound>) -> Result<PumpOutcome, SimError> {
        let mut queue: VecDeque<(usize, Option<usize>, Vec<u8>)> = VecDeque::new();
        self.enqueue(from, outbound, &mut queue)?;
        while let Some((sender, dest, bytes)) = queue.pop_front() {
            match dest {
                None => {
                    // Worker broadcast.
                    self.broadcast_to_workers(sender, &bytes)?;
                }
                Some(target) => {
                    if self.dead[target] || self.dead[sender] {
                        return Ok(PumpOutcome::ConnectionLost);
                    }
                    let msg = WireMessage::decode(&bytes)?;
                    if let MessagePayload::Forward(fwd) = &msg.payload {
                        let sender_addr = self.topology.nodes[sender].address().clone();
                        if !self
                            .first_forward_widths
                            .iter()
                            .any(|(a, _)| *a == sender_addr)
                        {
                            self.first_forward_widths
                                .push((sender_addr, fwd.output.width()));
                        }
                    }
                    let produced = self.topology.nodes[target].handle(msg)?;
                    self.enqueue(target, produced, &mut queue)?;
                }
            }
        }
        Ok(PumpOutcome::Done)
    }

    fn enqueue(
        &mut self,
        from: usize,
        outbound: Vec<Outbound>,
        queue: &mut VecDeque<(usize, Option<usize>, Vec<u8>)>,
    ) -> Result<(), SimError> {
        for out in outbound {
            match out {
                Outbound::Next(msg) => {
                    let dest = self.topology.next_of[from]
                        .ok_or_else(|| SimError::Scenario("terminal has no next hop".into()))?;
                    queue.push_back((from, Some(dest), msg.encode()?));
                }
                Outbound::Prev(origin, msg) => {
                    let dest = match self.topology.prev_of[from] {
                        Some(prev) => prev,
                        None => *self
                            .topology
                            .node_index
                            .get(&origin)
                            .ok_or_else(|| SimError::Scenario("unknown origin source".into()))?,
                    };
                    queue.push_back((from, Some(dest), msg.encode()?));
                }
                Outbound::Workers(msg) => {
                    if !self.is_dropped(from, &msg) {
                        queue.push_back((from, None, msg.encode()?));
                    }
                }
            }
        }
        Ok(())
    }

    fn is_dropped(&self, from: usize, msg: &WireMessage) -> bool {
        let MessagePayload::Txn(txn) = &msg.payload else {
            return false;
        };
        let from_addr = self.topology.nodes[from].address();
        self.fault_targets.iter().any(|(addr, fault)| {
            matches!(fault, Fault::DropTransaction { epoch, batch, txn: kind, .. }
                if addr == from_addr
                    && *epoch == txn.txn.epoch()
                    && *batch == txn.txn.batch_number()
                    && *kind == txn.txn.kind())
        })
    }

    fn broadcast_to_workers(&mut self, _sender: usize, bytes: &[u8]) -> Result<(), SimError> {
        crate::wire::frame::check_datagram(bytes)?;
        let msg = WireMessage::decode(bytes)?;
        if let MessagePayload::Txn(txn) = msg.payload {
            for worker in &mut self.topology.workers {
                worker.submit_transaction(txn.clone());
            }
            if self
                .topology
                .workers
                .first()
                .is_some_and(|w| w.mempool_len() >= self.scenario.max_block_txns)
            {
                self.worker_round()?;
            }
        }
        Ok(())
    }

    /// One leader round, mirroring the socket flow: the leader mines a block
    /// from its mempool, sends VALIDATE_REQ to its peers, collects acks, and
    /// announces the committed BLOCK.
    fn worker_round(&mut self) -> Result<(), SimError> {
        let workers = &mut self.topology.workers;
        if workers.iter().all(|w| w.mempool_len() == 0) {
            return Ok(());
        }
        let leader_addr = workers[0].current_leader()?;
        let leader_idx = workers
            .iter()
            .position(|w| *w.address() == leader_addr)
            .expect("leader is one of the workers");
        let Some(block) = workers[leader_idx].produce_block(self.scenario.max_block_txns, self.tick)?
        else {
            return Ok(());
        };
        let request = WireMessage::unsigned(MessagePayload::ValidateReq(block.clone())).encode()?;
        let mut acks = Vec::new();
        for (i, worker) in workers.iter_mut().enumerate() {
            if i == leader_idx {
                continue;
            }
            let msg = WireMessage::decode(&request)?;
            let MessagePayload::ValidateReq(candidate) = msg.payload else {
                unreachable!("encoded above")
            };
            let ok = worker.receive_block(candidate).is_ok();
            acks.push(
                WireMessage::unsigned(MessagePayload::ValidateAck {
                    height: block.content.height,
                    ok,
                })
                .encode()?,
            );
        }
        for ack_bytes in acks {
            let ack = WireMessage::decode(&ack_bytes)?;
            if let MessagePayload::ValidateAck { ok: false, height } = ack.payload {
                return Err(SimError::Scenario(format!(
                    "worker rejected block at height {height}"
                )));
            }
        }
        // Committed-block announcement; followers already hold it.
        let _announce = WireMessage::unsigned(MessagePayload::Block(block)).encode()?;
        Ok(())
    }

    fn drain_mempools(&mut self) -> Result<(), SimError> {
        while self.topology.workers.iter().any(|w| w.mempool_len() > 0) {
            self.tick += 1;
            self.worker_round()?;
        }
        Ok(())
    }
}

/// Executes Phases I and II for the scenario, fully deterministically.
pub fn run_sim(scenario: &Scenario) -> Result<SimOutcome, SimError> {
    scenario.validate()?;
    let wall_start = Instant::now();
    let data = load_data(scenario)?;
    let shards = source_shards(scenario, data.train.len() as u64)?;
    let (mut topology, bootstrap_outcome, modeled_secs) = instantiate(scenario, &shards)?;

    // Resolve fault targets to addresses.
    let fault_targets: Vec<(NodeAddress, Fault)> = scenario
        .faults
        .iter()
        .map(|fault| {
            let pos = match fault {
                Fault::DropTransaction { node, .. } => *node,
                Fault::CorruptGradient { node, .. } => *node,
                Fault::KillNode { node, .. } => *node,
            };
            resolve_pos(&topology, &bootstrap_outcome, pos).map(|addr| (addr, fault.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    // Gradient corruption installs directly on the node.
    for (addr, fault) in &fault_targets {
        if let Fault::CorruptGradient {
            epoch,
            batch,
            delta,
            ..
        } = fault
        {
            let idx = topology.node_index[addr];
            topology.nodes[idx].gradient_fault = Some(GradientFault {
                epoch: *epoch,
                iteration: *batch,
                delta: *delta,
            });
        }
    }

    let schedule = bootstrap_outcome.schedule.clone();
    let epochs = schedule.epochs;
    let batch_size = schedule.batch_size;
    let chain_len = topology.nodes.len();

    let mut pump_state = Pump {
        dead: vec![false; chain_len],
        fault_targets,
        scenario,
        tick: 0,
        first_forward_widths: Vec::new(),
        topology: &mut topology,
    };

    let mut aborted = None;
    let mut global_iteration = 0u32;
    'training: for epoch in 0..epochs {
        let mut iteration = 0u32;
        for (s, slot) in schedule.sources.clone().iter().enumerate() {
            let (shard_start, shard_n) = shards[s];
            let shuffle_seed = scenario
                .shuffle_each_epoch
                .then(|| derive_u64(scenario.seed, &format!("shuffle-{epoch}-{s}")));
            let plan = plan_batches(shard_n as usize, batch_size.min(shard_n as usize), shuffle_seed)?;
            debug_assert_eq!(plan.iterations() as u32, slot.batches_per_epoch);
            for slice in &plan.slices {
                // Kill faults trip at iteration boundaries.
                for (addr, fault) in &pump_state.fault_targets {
                    if let Fault::KillNode { at_iteration, .. } = fault {
                        if *at_iteration == global_iteration {
                            let idx = pump_state.topology.node_index[addr];
                            pump_state.dead[idx] = true;
                        }
                    }
                }
                let global_indices: Vec<u32> =
                    slice.iter().map(|&i| shard_start as u32 + i).collect();
                let values = data.train.samples.select_rows(&global_indices);
                let labels = data.train.labels.select_rows(&global_indices);
                let source_idx = pump_state.topology.source_indices[s];
                if pump_state.dead[source_idx] {
                    aborted = Some(AbortInfo { epoch, iteration });
                    break 'training;
                }
                let outbound = pump_state.topology.nodes[source_idx]
                    .start_batch(values, labels, epoch, iteration)?;
                match pump_state.flush(source_idx, outbound)? {
                    PumpOutcome::Done => {}
                    PumpOutcome::ConnectionLost => {
                        aborted = Some(AbortInfo { epoch, iteration });
                        break 'training;
                    }
                }
                iteration += 1;
                global_iteration += 1;
                pump_state.tick += 1;
                pump_state.worker_round()?;
            }
        }
    }

    // The final updater releases the pre-signed terminate token; workers
    // drain their mempools and stop.
    let last_source = pump_state.topology.source_indices[schedule.sources.len() - 1];
    if let Some(token) = pump_state.topology.nodes[last_source]
        .config()
        .terminate_token
        .clone()
    {
        let bytes = WireMessage::unsigned(MessagePayload::Terminate(token.clone())).encode()?;
        let msg = WireMessage::decode(&bytes)?;
        if let MessagePayload::Terminate(received) = msg.payload {
            let genesis = &pump_state.topology.workers[0].chain().genesis;
            if !received.verify(
                &genesis.content.bootstrap_public_key,
                &bootstrap_outcome.genesis_hash,
            ) {
                return Err(SimError::Scenario("terminate token failed verification".into()));
            }
        }
    }
    pump_state.drain_mempools()?;
    let training_ticks = pump_state.tick;
    let first_forward_widths = std::mem::take(&mut pump_state.first_forward_widths);

    // Validation: forward-only over the chain slices.
    let validation_loss = match (&data.validation, aborted) {
        (Some(validation), None) => {
            // The first source's copy of the initial layers, then every
            // downstream chain member in order.
            let mut slices: Vec<&SplitNetwork<Real>> = vec![topology.nodes[0].network()];
            slices.extend(topology.nodes[shards.len()..].iter().map(ChainNode::network));
            Some(run_validation(
                &slices,
                scenario.model.training.loss,
                &validation.samples,
                &validation.labels,
                batch_size,
            )?)
        }
        _ => None,
    };

    let losses: Vec<LossEntry> = topology
        .nodes
        .iter()
        .find(|n| n.role() == NodeType::Terminal)
        .map(|n| n.losses().to_vec())
        .unwrap_or_default();
    let iterations_per_epoch = schedule.iterations_per_epoch();
    let final_training_loss = mean_last_epoch(&losses, iterations_per_epoch);

    let chains: Vec<Chain> = topology.workers.iter().map(|w| w.chain().clone()).collect();
    let audits = audit_all(&chains[0])?;
    let committed_txns = chains[0].committed_txn_count();
    let chain_height = chains[0].height();

    let final_networks = topology
        .nodes
        .iter()
        .map(|n| (n.address().clone(), n.network().layers().to_vec()))
        .collect();
    let event_logs = topology
        .nodes
        .iter()
        .map(|n| (n.address().clone(), n.events().to_vec()))
        .collect();

    let report = SimReport {
        model_name: scenario.model.model_name.clone(),
        losses,
        final_training_loss,
        validation_loss,
        committed_txns,
        chain_height,
        chain_node_count: chain_len,
        iterations_per_epoch,
        epochs,
        bootstrap_time_modeled_secs: modeled_secs,
        training_ticks,
        wall_secs: wall_start.elapsed().as_secs_f64(),
        aborted,
    };
    Ok(SimOutcome {
        report,
        final_networks,
        chains,
        event_logs,
        audits,
        nld: bootstrap_outcome.nld,
        genesis_hash: bootstrap_outcome.genesis_hash,
        schedule,
        first_forward_widths,
    })
}

fn resolve_pos(
    topology: &Topology,
    outcome: &BootstrapOutcome,
    pos: ChainPos,
) -> Result<NodeAddress, SimError> {
    let addr = match pos.role {
        NodeType::DataSource => outcome
            .genesis
            .content
            .data_source_addresses
            .get(pos.index)
            .cloned(),
        NodeType::Intermediate => {
            // Chain order: skip the sources.
            let sources = outcome.genesis.content.data_source_addresses.len();
            outcome.chain_order.get(sources + pos.index).cloned()
        }
        NodeType::Terminal => Some(outcome.genesis.content.terminal_address.clone()),
        NodeType::Worker => None,
    };
    let addr = addr.ok_or_else(|| SimError::Scenario(format!("no node at {pos:?}")))?;
    if !topology.node_index.contains_key(&addr) {
        return Err(SimError::Scenario(format!("{pos:?} is not a chain member")));
    }
    Ok(addr)
}

fn mean_last_epoch(losses: &[LossEntry], iterations_per_epoch: u32) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let tail = losses
        .len()
        .saturating_sub(iterations_per_epoch.max(1) as usize);
    let window = &losses[tail..];
    window.iter().map(|l| l.loss).sum::<f64>() / window.len() as f64
}

/// Reference trainer: the same model, data order, seeds and arithmetic, run
/// as one network on one node. Split runs must match it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MonolithicOutcome {
    pub losses: Vec<LossEntry>,
    pub final_layers: Vec<DenseLayer<Real>>,
    pub final_training_loss: f64,
    pub validation_loss: Option<f64>,
}

pub fn run_monolithic_oracle(scenario: &Scenario) -> Result<MonolithicOutcome, SimError> {
    scenario.validate()?;
    let data = load_data(scenario)?;
    let shards = source_shards(scenario, data.train.len() as u64)?;
    let mut model = scenario.model.clone();
    model.training.weight_seed = scenario.weight_seed();

    let full_specs = model.full_layers();
    let mut network: SplitNetwork<Real> =
        SplitNetwork::init(&full_specs, model.training.weight_seed, 0)?;
    let lr = model.training.learning_rate as Real;
    let loss_kind = model.training.loss;
    let batch_size = model.training.batch_size;

    let mut losses = Vec::new();
    for epoch in 0..model.training.epochs {
        let mut iteration = 0u32;
        for (s, &(shard_start, shard_n)) in shards.iter().enumerate() {
            let shuffle_seed = scenario
                .shuffle_each_epoch
                .then(|| derive_u64(scenario.seed, &format!("shuffle-{epoch}-{s}")));
            let plan = plan_batches(shard_n as usize, batch_size.min(shard_n as usize), shuffle_seed)?;
            for slice in &plan.slices {
                let global_indices: Vec<u32> =
                    slice.iter().map(|&i| shard_start as u32 + i).collect();
                let values = data.train.samples.select_rows(&global_indices);
                let labels = LabelBatch::new(data.train.labels.select_rows(&global_indices));
                let input = ActivationBatch::new(values, epoch, iteration);
                let output = network.forward(&input)?;
                let loss = loss_value(loss_kind, &output, &labels)?;
                losses.push(LossEntry {
                    epoch,
                    iteration,
                    loss: loss.as_f64(),
                });
                let upstream = loss_gradient(loss_kind, &output, &labels)?;
                network.backward(&upstream, lr)?;
                iteration += 1;
            }
        }
    }

    let iterations_per_epoch = losses
        .iter()
        .filter(|l| l.epoch == 0)
        .count()
        .max(1) as u32;
    let final_training_loss = mean_last_epoch(&losses, iterations_per_epoch);
    let validation_loss = match &data.validation {
        Some(validation) => Some(run_validation(
            &[&network],
            loss_kind,
            &validation.samples,
            &validation.labels,
            batch_size,
        )?),
        None => None,
    };
    Ok(MonolithicOutcome {
        losses,
        final_layers: network.into_layers(),
        final_training_loss,
        validation_loss,
    })
}

/// Runs a fault scenario; identical to [`run_sim`], the faults come from the
/// scenario itself.
pub fn inject_fault(scenario: &Scenario) -> Result<SimOutcome, SimError> {
    run_sim(scenario)
}

impl SimReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<(), SimError> {
        let bytes = crate::wire::to_canonical_bytes(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn write_loss_csv(&self, path: &std::path::Path) -> Result<(), SimError> {
        let mut out = Vec::new();
        crate::runtime::write_loss_csv(&mut out, &self.losses)?;
        std::fs::write(path, out)?;
        Ok(())
    }
}
