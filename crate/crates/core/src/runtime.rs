//! Role state machines for the computation chain and the bootstrap
//! procedure. The logic here is transport-agnostic: the in-process simulator
//! and the socket deployment both drive these types, so the protocol behaves
//! identically in tests and on real networks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::identity::{sha256_hex, NodeAddress, NodeIdentity};
use crate::ledger::{
    GenesisBlock, GenesisContent, GradientTransaction, NodeType, OutputTransaction,
    SignedTransaction, TransactionBody, ZERO_HASH,
};
use crate::matrix::Matrix;
use crate::nn::{
    loss_gradient, loss_value, ActivationBatch, DenseLayer, GradientBatch, LabelBatch, LayerSpec,
    LossKind, NnError, SplitNetwork,
};
use crate::scalar::Scalar;
use crate::partition::{
    compute_cpf, partition_layers, ComputeProfile, ModelLayerDescription, NodeLayerDescription,
    PartitionError,
};
use crate::wire::message::{
    BackwardMsg, ChainConfig, ForwardMsg, MessagePayload, RegistrationRecord, TerminateToken,
    UpstreamEntry, WireMessage,
};
use crate::wire::{to_canonical_bytes, WireError};
use crate::Real;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("network error: {0}")]
    Nn(#[from] NnError),
    #[error("wire error: {0}")]
    Wire(#[from] WireError),
    #[error("partition error: {0}")]
    Partition(#[from] PartitionError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("chain connection lost at epoch {epoch}, iteration {iteration}; weights checkpointed")]
    ChainConnectionLost { epoch: u32, iteration: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The model-configuration file: the full architecture split into the three
/// chain segments, plus training and incentive parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_name: String,
    pub input_shape: Vec<usize>,
    pub data_source_layers: Vec<LayerSpec>,
    #[serde(default)]
    pub intermediate_layers: Vec<LayerSpec>,
    pub terminal_layers: Vec<LayerSpec>,
    pub training: TrainingParams,
    #[serde(default)]
    pub incentive: IncentiveParams,
}

fn default_learning_rate() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingParams {
    pub epochs: u32,
    pub batch_size: usize,
    /// Plain SGD step size; 0.05 unless the model file says otherwise.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub loss: LossKind,
    /// Seed for layer weight initialization; derived per layer index.
    #[serde(default)]
    pub weight_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncentiveParams {
    pub tau: f64,
    pub budget: u64,
}

impl Default for IncentiveParams {
    fn default() -> Self {
        Self {
            tau: 0.2,
            budget: 1_000_000,
        }
    }
}

impl ModelConfig {
    pub fn input_width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn from_json_file(path: &Path) -> Result<Self, RuntimeError> {
        let bytes = std::fs::read(path)?;
        let config: Self = serde_json::from_slice(&bytes)
            .map_err(|e| RuntimeError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks the segment widths form one consistent layer chain.
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.data_source_layers.is_empty() {
            return Err(RuntimeError::Config("data-source segment is empty".into()));
        }
        if self.terminal_layers.is_empty() {
            return Err(RuntimeError::Config("terminal segment is empty".into()));
        }
        let full = self.full_layers();
        for layer in &full {
            layer.spec_validate()?;
        }
        if full[0].input_width != self.input_width() {
            return Err(RuntimeError::Config(format!(
                "input shape width {} does not match first layer input {}",
                self.input_width(),
                full[0].input_width
            )));
        }
        for pair in full.windows(2) {
            if pair[0].output_width != pair[1].input_width {
                return Err(RuntimeError::Config(format!(
                    "layer widths {} -> {} are incompatible",
                    pair[0].output_width, pair[1].input_width
                )));
            }
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(RuntimeError::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn full_layers(&self) -> Vec<LayerSpec> {
        self.data_source_layers
            .iter()
            .chain(&self.intermediate_layers)
            .chain(&self.terminal_layers)
            .cloned()
            .collect()
    }

    pub fn mld(&self) -> ModelLayerDescription {
        ModelLayerDescription {
            boundary_width: self
                .data_source_layers
                .last()
                .map_or(0, |l| l.output_width),
            hidden: self.intermediate_layers.clone(),
        }
    }
}

trait SpecValidate {
    fn spec_validate(&self) -> Result<(), RuntimeError>;
}

impl SpecValidate for LayerSpec {
    fn spec_validate(&self) -> Result<(), RuntimeError> {
        self.validate().map_err(RuntimeError::Nn)
    }
}

/// One registered participant as the bootstrap server sees it.
#[derive(Debug, Clone)]
pub struct Registrant {
    pub address: NodeAddress,
    pub record: RegistrationRecord,
    /// IP the registration connection came from; combined with the record's
    /// listen port to form the node's endpoint.
    pub ip: String,
}

impl Registrant {
    pub fn endpoint(&self) -> String {
        format!("{}:{}", self.ip, self.record.listen_port)
    }
}

/// Epoch-level plan: which source feeds the chain when, and how many batches
/// each contributes. Batch numbers are global per epoch, so transaction keys
/// stay unique with multiple sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub epochs: u32,
    pub batch_size: usize,
    pub sources: Vec<SourceSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSlot {
    pub address: NodeAddress,
    pub data_points: u64,
    pub batches_per_epoch: u32,
    pub iteration_base: u32,
}

impl TrainingSchedule {
    pub fn iterations_per_epoch(&self) -> u32 {
        self.sources.iter().map(|s| s.batches_per_epoch).sum()
    }
}

/// Everything Phase I produces: per-node configs, the signed genesis block,
/// and the intermediate artifacts a report wants to show.
#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    pub configs: BTreeMap<NodeAddress, ChainConfig>,
    pub genesis: GenesisBlock,
    pub genesis_hash: String,
    pub nld: NodeLayerDescription,
    pub profiles: Vec<ComputeProfile>,
    pub schedule: TrainingSchedule,
    pub worker_endpoints: Vec<String>,
    /// Chain-node addresses in computation-chain order.
    pub chain_order: Vec<NodeAddress>,
}

/// Pure Phase I: consumes the registrations and the measured benchmark
/// timings and produces the chain configuration and the genesis block. The
/// socket server measures real solve times; the simulator injects them.
pub fn run_bootstrap_core(
    model: &ModelConfig,
    bootstrap: &NodeIdentity,
    registrants: &[Registrant],
    timings: &[(NodeAddress, Vec<f64>)],
    timestamp: u64,
) -> Result<BootstrapOutcome, RuntimeError> {
    model.validate()?;
    let sources: Vec<&Registrant> = registrants
        .iter()
        .filter(|r| r.record.node_type == NodeType::DataSource)
        .collect();
    let terminals: Vec<&Registrant> = registrants
        .iter()
        .filter(|r| r.record.node_type == NodeType::Terminal)
        .collect();
    let workers: Vec<&Registrant> = registrants
        .iter()
        .filter(|r| r.record.node_type == NodeType::Worker)
        .collect();
    if sources.is_empty() {
        return Err(RuntimeError::Config("at least one data source is required".into()));
    }
    if terminals.len() != 1 {
        return Err(RuntimeError::Config(format!(
            "exactly one terminal is required, got {}",
            terminals.len()
        )));
    }
    if workers.is_empty() {
        return Err(RuntimeError::Config("at least one worker is required".into()));
    }
    let terminal = terminals[0];
    for r in registrants {
        r.record.validate().map_err(RuntimeError::Wire)?;
    }

    // Benchmark outcome -> layer assignment.
    let (profiles, nld) = if model.intermediate_layers.is_empty() {
        if !timings.is_empty() {
            // Nothing to assign; every intermediate is excluded.
            let profiles = compute_cpf(timings)?;
            let assignments = profiles
                .iter()
                .map(|p| crate::partition::NodeAssignment {
                    node_address: p.node_address.clone(),
                    layers: Vec::new(),
                })
                .collect();
            (profiles, NodeLayerDescription { assignments })
        } else {
            (Vec::new(), NodeLayerDescription { assignments: Vec::new() })
        }
    } else {
        if timings.is_empty() {
            return Err(RuntimeError::Config(
                "model has intermediate layers but no intermediate nodes registered".into(),
            ));
        }
        let profiles = compute_cpf(timings)?;
        let nld = partition_layers(&model.mld(), &profiles)?;
        (profiles, nld)
    };

    // Chain order: sources -> intermediates holding layers (descending CPF
    // order, which is the NLD order) -> terminal.
    let members: Vec<&crate::partition::NodeAssignment> = nld.chain_members().collect();
    let registrant_by_address: BTreeMap<&NodeAddress, &Registrant> =
        registrants.iter().map(|r| (&r.address, r)).collect();
    for member in &members {
        if !registrant_by_address.contains_key(&member.node_address) {
            return Err(RuntimeError::Config(format!(
                "profiled node {} never registered",
                member.node_address
            )));
        }
    }

    let batch_size = model.training.batch_size;
    let mut slots = Vec::with_capacity(sources.len());
    let mut iteration_base = 0u32;
    for source in &sources {
        let n = source.record.data_point_count.unwrap_or(0);
        if n < batch_size as u64 {
            return Err(RuntimeError::Config(format!(
                "source {} holds {n} points, fewer than the batch size {batch_size}",
                source.address
            )));
        }
        let batches = n.div_ceil(batch_size as u64) as u32;
        slots.push(SourceSlot {
            address: source.address.clone(),
            data_points: n,
            batches_per_epoch: batches,
            iteration_base,
        });
        iteration_base += batches;
    }
    let schedule = TrainingSchedule {
        epochs: model.training.epochs,
        batch_size,
        sources: slots,
    };
    let iterations_per_epoch = schedule.iterations_per_epoch();

    let worker_endpoints: Vec<String> = workers.iter().map(|w| w.endpoint()).collect();

    // Genesis block first: the terminate token it anchors goes into the last
    // source's config.
    let genesis = GenesisBlock::create(
        GenesisContent {
            height: 0,
            previous_block_hash: ZERO_HASH.to_owned(),
            model_name: model.model_name.clone(),
            data_source_addresses: sources.iter().map(|s| s.address.clone()).collect(),
            intermediate_addresses: members.iter().map(|m| m.node_address.clone()).collect(),
            intermediate_parameter_counts: members
                .iter()
                .map(|m| (m.node_address.as_str().to_owned(), m.parameter_count()))
                .collect(),
            terminal_address: terminal.address.clone(),
            worker_addresses: workers.iter().map(|w| w.address.clone()).collect(),
            timestamp,
            bootstrap_public_key: bootstrap.public_key(),
        },
        bootstrap,
    )?;
    let genesis_hash = genesis.hash()?;
    let terminate_token = TerminateToken::create(genesis_hash.clone(), bootstrap)?;

    // Per-node configs.
    let mut configs: BTreeMap<NodeAddress, ChainConfig> = BTreeMap::new();
    let first_hop = members
        .first()
        .map(|m| m.node_address.clone())
        .unwrap_or_else(|| terminal.address.clone());
    let first_hop_endpoint = registrant_by_address[&first_hop].endpoint();
    let upstream_sources: Vec<UpstreamEntry> = schedule
        .sources
        .iter()
        .map(|s| UpstreamEntry {
            source: s.address.clone(),
            batches_per_epoch: s.batches_per_epoch,
        })
        .collect();

    let base_config = |role, layer_index_base, specs: Vec<LayerSpec>| ChainConfig {
        model_name: model.model_name.clone(),
        role,
        next_node_address: None,
        layer_specs: specs,
        epochs: model.training.epochs,
        batch_size,
        learning_rate: model.training.learning_rate,
        loss_kind: None,
        weight_seed: model.training.weight_seed,
        layer_index_base,
        iterations_per_epoch,
        iteration_base: 0,
        worker_endpoints: worker_endpoints.clone(),
        upstream_plan: Vec::new(),
        terminate_token: None,
    };

    for (i, source) in sources.iter().enumerate() {
        let mut config = base_config(NodeType::DataSource, 0, model.data_source_layers.clone());
        config.next_node_address = Some(first_hop_endpoint.clone());
        config.iteration_base = schedule.sources[i].iteration_base;
        if i == sources.len() - 1 {
            config.terminate_token = Some(terminate_token.clone());
        }
        configs.insert(source.address.clone(), config);
    }

    let mut layer_index = model.data_source_layers.len();
    for (k, member) in members.iter().enumerate() {
        let mut config = base_config(
            NodeType::Intermediate,
            layer_index,
            member.layers.clone(),
        );
        let next = members
            .get(k + 1)
            .map(|m| m.node_address.clone())
            .unwrap_or_else(|| terminal.address.clone());
        config.next_node_address = Some(registrant_by_address[&next].endpoint());
        config.upstream_plan = if k == 0 {
            upstream_sources.clone()
        } else {
            vec![UpstreamEntry {
                source: members[k - 1].node_address.clone(),
                batches_per_epoch: iterations_per_epoch,
            }]
        };
        layer_index += member.layers.len();
        configs.insert(member.node_address.clone(), config);
    }

    let mut terminal_config = base_config(
        NodeType::Terminal,
        model.data_source_layers.len() + model.intermediate_layers.len(),
        model.terminal_layers.clone(),
    );
    terminal_config.loss_kind = Some(model.training.loss);
    terminal_config.upstream_plan = if let Some(last) = members.last() {
        vec![UpstreamEntry {
            source: last.node_address.clone(),
            batches_per_epoch: iterations_per_epoch,
        }]
    } else {
        upstream_sources
    };
    configs.insert(terminal.address.clone(), terminal_config);

    let chain_order = sources
        .iter()
        .map(|s| s.address.clone())
        .chain(members.iter().map(|m| m.node_address.clone()))
        .chain(std::iter::once(terminal.address.clone()))
        .collect();

    Ok(BootstrapOutcome {
        configs,
        genesis,
        genesis_hash,
        nld,
        profiles,
        schedule,
        worker_endpoints,
        chain_order,
    })
}

/// One entry of the terminal's loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub epoch: u32,
    pub iteration: u32,
    pub loss: f64,
}

pub fn write_loss_csv<W: Write>(writer: &mut W, losses: &[LossEntry]) -> std::io::Result<()> {
    writeln!(writer, "epoch,iteration,loss")?;
    for entry in losses {
        writeln!(writer, "{},{},{}", entry.epoch, entry.iteration, entry.loss)?;
    }
    Ok(())
}

/// Protocol steps in the order they happened on one node; the simulator's
/// ordering assertions read these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolEvent {
    StartBatch { epoch: u32, iteration: u32 },
    ReceiveForward { epoch: u32, iteration: u32 },
    OutputTxn { epoch: u32, iteration: u32 },
    SendForward { epoch: u32, iteration: u32 },
    ReceiveGradient { epoch: u32, iteration: u32 },
    Update { epoch: u32, iteration: u32 },
    GradientTxn { epoch: u32, iteration: u32 },
    SendGradient { epoch: u32, iteration: u32 },
}

/// Destination classes a node can emit to; the transport resolves them.
#[derive(Debug, Clone)]
pub enum Outbound {
    /// To the next chain hop.
    Next(WireMessage),
    /// To the previous hop that originated the batch.
    Prev(NodeAddress, WireMessage),
    /// Broadcast to every worker.
    Workers(WireMessage),
}

/// Gradient corruption injected by fault scenarios: added to every entry of
/// the gradient this node sends for the matching batch.
#[derive(Debug, Clone, Copy)]
pub struct GradientFault {
    pub epoch: u32,
    pub iteration: u32,
    pub delta: Real,
}

#[derive(Debug, Clone)]
struct PendingBatch {
    origin: NodeAddress,
    epoch: u32,
    iteration: u32,
}

/// A chain node's protocol state machine. The surrounding driver (simulator
/// pump or socket loop) feeds it messages and routes what it returns.
pub struct ChainNode {
    identity: NodeIdentity,
    config: ChainConfig,
    network: SplitNetwork<Real>,
    pending: Option<PendingBatch>,
    last_completed: Option<(u32, u32)>,
    events: Vec<ProtocolEvent>,
    txn_log: Vec<SignedTransaction>,
    losses: Vec<LossEntry>,
    pub gradient_fault: Option<GradientFault>,
}

impl ChainNode {
    pub fn new(identity: NodeIdentity, config: ChainConfig) -> Result<Self, RuntimeError> {
        let network = SplitNetwork::init(
            &config.layer_specs,
            config.weight_seed,
            config.layer_index_base,
        )?;
        Ok(Self {
            identity,
            config,
            network,
            pending: None,
            last_completed: None,
            events: Vec::new(),
            txn_log: Vec::new(),
            losses: Vec::new(),
            gradient_fault: None,
        })
    }

    pub fn address(&self) -> &NodeAddress {
        self.identity.address()
    }

    pub fn role(&self) -> NodeType {
        self.config.role
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn network(&self) -> &SplitNetwork<Real> {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut SplitNetwork<Real> {
        &mut self.network
    }

    pub fn events(&self) -> &[ProtocolEvent] {
        &self.events
    }

    pub fn txn_log(&self) -> &[SignedTransaction] {
        &self.txn_log
    }

    pub fn losses(&self) -> &[LossEntry] {
        &self.losses
    }

    fn learning_rate(&self) -> Real {
        self.config.learning_rate as Real
    }

    fn make_output_txn(&mut self, output: &ActivationBatch<Real>) -> Result<WireMessage, RuntimeError> {
        let txn = SignedTransaction::create(
            TransactionBody::Output(OutputTransaction {
                node_type: self.config.role,
                epoch: output.epoch,
                batch_number: output.batch_number,
                layer_output_hash: sha256_hex(&to_canonical_bytes(output)?),
                node_address: self.identity.address().clone(),
            }),
            &self.identity,
        )?;
        self.txn_log.push(txn.clone());
        self.events.push(ProtocolEvent::OutputTxn {
            epoch: output.epoch,
            iteration: output.batch_number,
        });
        Ok(WireMessage::unsigned(MessagePayload::Txn(txn)))
    }

    fn make_gradient_txn(&mut self, gradient: &GradientBatch<Real>) -> Result<WireMessage, RuntimeError> {
        let txn = SignedTransaction::create(
            TransactionBody::Gradient(GradientTransaction {
                node_type: self.config.role,
                epoch: gradient.epoch,
                batch_number: gradient.batch_number,
                node_gradient_hash: sha256_hex(&to_canonical_bytes(gradient)?),
                node_address: self.identity.address().clone(),
            }),
            &self.identity,
        )?;
        self.txn_log.push(txn.clone());
        self.events.push(ProtocolEvent::GradientTxn {
            epoch: gradient.epoch,
            iteration: gradient.batch_number,
        });
        Ok(WireMessage::unsigned(MessagePayload::Txn(txn)))
    }

    fn begin_batch(&mut self, origin: NodeAddress, epoch: u32, iteration: u32) -> Result<(), RuntimeError> {
        if let Some(pending) = &self.pending {
            return Err(RuntimeError::Protocol(format!(
                "forward for ({epoch},{iteration}) while ({},{}) awaits its gradient",
                pending.epoch, pending.iteration
            )));
        }
        if let Some(last) = self.last_completed {
            if (epoch, iteration) <= last {
                return Err(RuntimeError::Protocol(format!(
                    "batch ({epoch},{iteration}) does not advance past ({},{})",
                    last.0, last.1
                )));
            }
        }
        self.pending = Some(PendingBatch {
            origin,
            epoch,
            iteration,
        });
        Ok(())
    }

    /// Source entry point: push one batch of local data into the chain.
    /// Returns the output transaction broadcast and the forward send, in
    /// protocol order.
    pub fn start_batch(
        &mut self,
        values: Matrix<Real>,
        labels: Matrix<Real>,
        epoch: u32,
        iteration: u32,
    ) -> Result<Vec<Outbound>, RuntimeError> {
        if self.config.role != NodeType::DataSource {
            return Err(RuntimeError::Protocol("only data sources start batches".into()));
        }
        self.begin_batch(self.identity.address().clone(), epoch, iteration)?;
        self.events.push(ProtocolEvent::StartBatch { epoch, iteration });
        let input = ActivationBatch::new(values, epoch, iteration);
        let output = self.network.forward(&input)?;
        let txn = self.make_output_txn(&output)?;
        self.events.push(ProtocolEvent::SendForward { epoch, iteration });
        let forward = WireMessage::unsigned(MessagePayload::Forward(ForwardMsg {
            origin_source: self.identity.address().clone(),
            output,
            labels,
        }));
        Ok(vec![Outbound::Workers(txn), Outbound::Next(forward)])
    }

    /// Handles a chain message addressed to this node.
    pub fn handle(&mut self, msg: WireMessage) -> Result<Vec<Outbound>, RuntimeError> {
        match msg.payload {
            MessagePayload::Forward(fwd) => self.on_forward(fwd),
            MessagePayload::Backward(bwd) => self.on_backward(bwd),
            other => Err(RuntimeError::Protocol(format!(
                "chain node received unexpected {} message",
                other.tag()
            ))),
        }
    }

    fn on_forward(&mut self, fwd: ForwardMsg) -> Result<Vec<Outbound>, RuntimeError> {
        if self.config.role == NodeType::DataSource {
            return Err(RuntimeError::Protocol("data source received a forward".into()));
        }
        let epoch = fwd.output.epoch;
        let iteration = fwd.output.batch_number;
        self.begin_batch(fwd.origin_source.clone(), epoch, iteration)?;
        self.events.push(ProtocolEvent::ReceiveForward { epoch, iteration });
        let output = self.network.forward(&fwd.output)?;
        let txn = self.make_output_txn(&output)?;

        match self.config.role {
            NodeType::Intermediate => {
                self.events.push(ProtocolEvent::SendForward { epoch, iteration });
                let forward = WireMessage::unsigned(MessagePayload::Forward(ForwardMsg {
                    origin_source: fwd.origin_source,
                    output,
                    labels: fwd.labels,
                }));
                Ok(vec![Outbound::Workers(txn), Outbound::Next(forward)])
            }
            NodeType::Terminal => {
                let loss_kind = self
                    .config
                    .loss_kind
                    .ok_or_else(|| RuntimeError::Config("terminal has no loss kind".into()))?;
                let labels = LabelBatch::new(fwd.labels);
                let loss = loss_value(loss_kind, &output, &labels)?;
                self.losses.push(LossEntry {
                    epoch,
                    iteration,
                    loss: loss.as_f64(),
                });
                let upstream = loss_gradient(loss_kind, &output, &labels)?;
                let mut input_grad = self.network.backward(&upstream, self.learning_rate())?;
                self.events.push(ProtocolEvent::Update { epoch, iteration });
                self.apply_gradient_fault(&mut input_grad);
                let grad_txn = self.make_gradient_txn(&input_grad)?;
                self.events.push(ProtocolEvent::SendGradient { epoch, iteration });
                let origin = self.pending.take().expect("pending set by begin_batch").origin;
                self.last_completed = Some((epoch, iteration));
                let backward = WireMessage::unsigned(MessagePayload::Backward(BackwardMsg {
                    origin_source: origin.clone(),
                    gradient: input_grad,
                }));
                Ok(vec![
                    Outbound::Workers(txn),
                    Outbound::Workers(grad_txn),
                    Outbound::Prev(origin, backward),
                ])
            }
            _ => unreachable!("roles checked above"),
        }
    }

    fn on_backward(&mut self, bwd: BackwardMsg) -> Result<Vec<Outbound>, RuntimeError> {
        if self.config.role == NodeType::Terminal {
            return Err(RuntimeError::Protocol("terminal received a backward".into()));
        }
        let epoch = bwd.gradient.epoch;
        let iteration = bwd.gradient.batch_number;
        let pending = self.pending.take().ok_or_else(|| {
            RuntimeError::Protocol(format!("gradient for ({epoch},{iteration}) without a forward"))
        })?;
        if (pending.epoch, pending.iteration) != (epoch, iteration) {
            return Err(RuntimeError::Protocol(format!(
                "gradient for ({epoch},{iteration}) does not match pending ({},{})",
                pending.epoch, pending.iteration
            )));
        }
        self.events.push(ProtocolEvent::ReceiveGradient { epoch, iteration });
        let mut input_grad = self.network.backward(&bwd.gradient, self.learning_rate())?;
        self.events.push(ProtocolEvent::Update { epoch, iteration });
        self.apply_gradient_fault(&mut input_grad);
        let grad_txn = self.make_gradient_txn(&input_grad)?;
        self.last_completed = Some((epoch, iteration));
        match self.config.role {
            NodeType::DataSource => Ok(vec![Outbound::Workers(grad_txn)]),
            NodeType::Intermediate => {
                self.events.push(ProtocolEvent::SendGradient { epoch, iteration });
                let backward = WireMessage::unsigned(MessagePayload::Backward(BackwardMsg {
                    origin_source: pending.origin.clone(),
                    gradient: input_grad,
                }));
                Ok(vec![
                    Outbound::Workers(grad_txn),
                    Outbound::Prev(pending.origin, backward),
                ])
            }
            _ => unreachable!("roles checked above"),
        }
    }

    fn apply_gradient_fault(&mut self, gradient: &mut GradientBatch<Real>) {
        if let Some(fault) = self.gradient_fault {
            if fault.epoch == gradient.epoch && fault.iteration == gradient.batch_number {
                for v in gradient.values.as_mut_slice() {
                    *v += fault.delta;
                }
            }
        }
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), RuntimeError> {
        let bytes = to_canonical_bytes(&self.network.layers())?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), RuntimeError> {
        let bytes = std::fs::read(path)?;
        let layers: Vec<DenseLayer<Real>> = serde_json::from_slice(&bytes)
            .map_err(|e| RuntimeError::Config(format!("{}: {e}", path.display())))?;
        self.network = SplitNetwork::new(layers)?;
        Ok(())
    }

    pub fn save_txn_log(&self, path: &Path) -> Result<(), RuntimeError> {
        let mut out = Vec::new();
        for txn in &self.txn_log {
            out.extend_from_slice(&to_canonical_bytes(txn)?);
            out.push(b'\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Forward-only pass over a validation set through the chain's slices in
/// order; no weight updates, no transactions. Returns the mean loss across
/// validation batches.
pub fn run_validation(
    slices: &[&SplitNetwork<Real>],
    loss_kind: LossKind,
    samples: &Matrix<Real>,
    labels: &Matrix<Real>,
    batch_size: usize,
) -> Result<f64, RuntimeError> {
    if samples.rows() == 0 {
        return Err(RuntimeError::Config("validation set is empty".into()));
    }
    let plan = crate::data::plan_batches(samples.rows(), batch_size.min(samples.rows()), None)?;
    let mut total = 0.0;
    for slice_indices in &plan.slices {
        let mut current = samples.select_rows(slice_indices);
        for network in slices {
            current = network.forward_inference(&current)?;
        }
        let predicted = ActivationBatch::new(current, 0, 0);
        let batch_labels = LabelBatch::new(labels.select_rows(slice_indices));
        total += loss_value(loss_kind, &predicted, &batch_labels)?.as_f64();
    }
    Ok(total / plan.iterations() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn test_model() -> ModelConfig {
        ModelConfig {
            model_name: "widths-8-16-16-8-3".into(),
            input_shape: vec![8],
            data_source_layers: vec![LayerSpec::dense(8, 16, Activation::ReLU)],
            intermediate_layers: vec![
                LayerSpec::dense(16, 16, Activation::ReLU),
                LayerSpec::dense(16, 8, Activation::ReLU),
            ],
            terminal_layers: vec![LayerSpec::dense(8, 3, Activation::Identity)],
            training: TrainingParams {
                epochs: 2,
                batch_size: 16,
                learning_rate: 0.05,
                loss: LossKind::CrossEntropySoftmax,
                weight_seed: 7,
            },
            incentive: IncentiveParams::default(),
        }
    }

    fn registrant(identity: &NodeIdentity, node_type: NodeType, port: u16, points: Option<u64>) -> Registrant {
        Registrant {
            address: identity.address().clone(),
            record: RegistrationRecord {
                listen_port: port,
                node_type,
                public_key: identity.public_key(),
                data_point_count: points,
            },
            ip: "127.0.0.1".into(),
        }
    }

    #[test]
    fn bootstrap_assigns_larger_share_to_higher_cpf() {
        let model = test_model();
        let bootstrap = NodeIdentity::derived("bs", 0);
        let ids: Vec<NodeIdentity> = (0..5).map(|i| NodeIdentity::derived("n", i)).collect();
        let registrants = vec![
            registrant(&ids[0], NodeType::DataSource, 9000, Some(64)),
            registrant(&ids[1], NodeType::Intermediate, 9001, None),
            registrant(&ids[2], NodeType::Intermediate, 9002, None),
            registrant(&ids[3], NodeType::Terminal, 9003, None),
            registrant(&ids[4], NodeType::Worker, 9004, None),
        ];
        // T = (1s, 2s) -> CPF (2/3, 1/3): the faster node must receive at
        // least as many weight parameters as the slower one.
        let timings = vec![
            (ids[1].address().clone(), vec![2.0]),
            (ids[2].address().clone(), vec![1.0]),
        ];
        let outcome =
            run_bootstrap_core(&model, &bootstrap, &registrants, &timings, 0).unwrap();
        assert_eq!(outcome.nld.assignments.len(), 2);
        assert_eq!(outcome.nld.assignments[0].node_address, *ids[2].address());
        let first = outcome.nld.assignments[0].parameter_count();
        let second = outcome.nld.assignments[1].parameter_count();
        assert!(first >= second, "{first} < {second}");
        assert!(outcome.genesis.verify().is_ok());
        assert_eq!(
            outcome.chain_order,
            vec![
                ids[0].address().clone(),
                ids[2].address().clone(),
                ids[1].address().clone(),
                ids[3].address().clone(),
            ]
        );
        // Next-hop wiring follows the chain order.
        let source_cfg = &outcome.configs[ids[0].address()];
        assert_eq!(source_cfg.next_node_address.as_deref(), Some("127.0.0.1:9002"));
        let terminal_cfg = &outcome.configs[ids[3].address()];
        assert!(terminal_cfg.next_node_address.is_none());
        assert_eq!(terminal_cfg.loss_kind, Some(LossKind::CrossEntropySoftmax));
        assert!(source_cfg.terminate_token.is_some());
    }

    #[test]
    fn bootstrap_degenerate_chain_without_intermediates() {
        let mut model = test_model();
        model.intermediate_layers.clear();
        model.terminal_layers = vec![
            LayerSpec::dense(16, 8, Activation::ReLU),
            LayerSpec::dense(8, 3, Activation::Identity),
        ];
        let bootstrap = NodeIdentity::derived("bs", 0);
        let ids: Vec<NodeIdentity> = (0..3).map(|i| NodeIdentity::derived("n", i)).collect();
        let registrants = vec![
            registrant(&ids[0], NodeType::DataSource, 9000, Some(64)),
            registrant(&ids[1], NodeType::Terminal, 9001, None),
            registrant(&ids[2], NodeType::Worker, 9002, None),
        ];
        let outcome = run_bootstrap_core(&model, &bootstrap, &registrants, &[], 0).unwrap();
        assert!(outcome.nld.assignments.is_empty());
        let source_cfg = &outcome.configs[ids[0].address()];
        assert_eq!(source_cfg.next_node_address.as_deref(), Some("127.0.0.1:9001"));
    }

    #[test]
    fn bootstrap_excludes_surplus_intermediate() {
        let model = test_model();
        let bootstrap = NodeIdentity::derived("bs", 0);
        let ids: Vec<NodeIdentity> = (0..6).map(|i| NodeIdentity::derived("n", i)).collect();
        let registrants = vec![
            registrant(&ids[0], NodeType::DataSource, 9000, Some(64)),
            registrant(&ids[1], NodeType::Intermediate, 9001, None),
            registrant(&ids[2], NodeType::Intermediate, 9002, None),
            registrant(&ids[3], NodeType::Intermediate, 9005, None),
            registrant(&ids[4], NodeType::Terminal, 9003, None),
            registrant(&ids[5], NodeType::Worker, 9004, None),
        ];
        let timings = vec![
            (ids[1].address().clone(), vec![1.0]),
            (ids[2].address().clone(), vec![1.0]),
            (ids[3].address().clone(), vec![1.0]),
        ];
        let outcome = run_bootstrap_core(&model, &bootstrap, &registrants, &timings, 0).unwrap();
        // Two hidden layers, three equal nodes: the last gets nothing.
        assert_eq!(outcome.nld.chain_members().count(), 2);
        assert_eq!(outcome.genesis.content.intermediate_addresses.len(), 2);
        assert!(!outcome.configs.contains_key(ids[3].address()));
    }

    #[test]
    fn bootstrap_rejects_missing_roles() {
        let model = test_model();
        let bootstrap = NodeIdentity::derived("bs", 0);
        let ids: Vec<NodeIdentity> = (0..4).map(|i| NodeIdentity::derived("n", i)).collect();
        let no_source = vec![
            registrant(&ids[1], NodeType::Intermediate, 9001, None),
            registrant(&ids[2], NodeType::Terminal, 9002, None),
            registrant(&ids[3], NodeType::Worker, 9003, None),
        ];
        assert!(matches!(
            run_bootstrap_core(&model, &bootstrap, &no_source, &[], 0),
            Err(RuntimeError::Config(_))
        ));
        let no_terminal = vec![
            registrant(&ids[0], NodeType::DataSource, 9000, Some(64)),
            registrant(&ids[3], NodeType::Worker, 9003, None),
        ];
        assert!(matches!(
            run_bootstrap_core(&model, &bootstrap, &no_terminal, &[], 0),
            Err(RuntimeError::Config(_))
        ));
    }

    #[test]
    fn model_config_validation_catches_width_breaks() {
        let mut model = test_model();
        assert!(model.validate().is_ok());
        model.intermediate_layers[0] = LayerSpec::dense(12, 16, Activation::ReLU);
        assert!(model.validate().is_err());

        let mut model = test_model();
        model.input_shape = vec![2, 2];
        assert!(model.validate().is_err());
    }

    #[test]
    fn loss_csv_format() {
        let mut out = Vec::new();
        write_loss_csv(
            &mut out,
            &[LossEntry {
                epoch: 0,
                iteration: 3,
                loss: 0.25,
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,iteration,loss\n0,3,0.25\n");
    }
}
