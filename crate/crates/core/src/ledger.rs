//! Blockchain substrate: signed output/gradient transactions, the genesis
//! block, worker validation and block production, hash-minimizing leader
//! sortition, chain verification, audit queries and the incentive rule.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{
    sha256_bytes, sha256_hex, verify_canonical, NodeAddress, NodeIdentity, PublicKeyBytes,
    SignatureBytes,
};
use crate::partition::NodeLayerDescription;
use crate::wire::{to_canonical_bytes, WireError};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("worker set is empty")]
    EmptyWorkerSet,
    #[error("node is not the leader for this round")]
    NotLeader,
    #[error("invalid genesis block: {0}")]
    InvalidGenesis(String),
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error("chain failed verification at height {height}: {reason}")]
    UnverifiableChain { height: u64, reason: String },
    #[error("invalid incentive input: {0}")]
    BadIncentiveInput(String),
    #[error("chain file line {line}: {reason}")]
    BadChainFile { line: usize, reason: String },
    #[error("wire error: {0}")]
    Wire(#[from] WireError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    DataSource,
    Intermediate,
    Terminal,
    Worker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxnKind {
    Output,
    Gradient,
}

/// Record of one forward output: the hash binds the exact activation bytes a
/// node produced for `(epoch, batch_number)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputTransaction {
    pub node_type: NodeType,
    pub epoch: u32,
    pub batch_number: u32,
    /// SHA-256 of the canonical bytes of the node's layer output.
    pub layer_output_hash: String,
    pub node_address: NodeAddress,
}

/// Record of one backward step: the hash binds the gradient the node
/// computed up to the first layer of its slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientTransaction {
    pub node_type: NodeType,
    pub epoch: u32,
    pub batch_number: u32,
    /// SHA-256 of the canonical bytes of the gradient at the slice input.
    pub node_gradient_hash: String,
    pub node_address: NodeAddress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TransactionBody {
    Output(OutputTransaction),
    Gradient(GradientTransaction),
}

impl TransactionBody {
    pub fn node_address(&self) -> &NodeAddress {
        match self {
            TransactionBody::Output(t) => &t.node_address,
            TransactionBody::Gradient(t) => &t.node_address,
        }
    }

    pub fn epoch(&self) -> u32 {
        match self {
            TransactionBody::Output(t) => t.epoch,
            TransactionBody::Gradient(t) => t.epoch,
        }
    }

    pub fn batch_number(&self) -> u32 {
        match self {
            TransactionBody::Output(t) => t.batch_number,
            TransactionBody::Gradient(t) => t.batch_number,
        }
    }

    pub fn kind(&self) -> TxnKind {
        match self {
            TransactionBody::Output(_) => TxnKind::Output,
            TransactionBody::Gradient(_) => TxnKind::Gradient,
        }
    }

    pub fn node_type(&self) -> NodeType {
        match self {
            TransactionBody::Output(t) => t.node_type,
            TransactionBody::Gradient(t) => t.node_type,
        }
    }
}

/// Identity of a transaction for duplicate suppression.
pub type TxnKey = (NodeAddress, TxnKind, u32, u32);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedTransaction {
    pub txn: TransactionBody,
    pub public_key: PublicKeyBytes,
    pub signature: SignatureBytes,
}

impl SignedTransaction {
    pub fn create(txn: TransactionBody, identity: &NodeIdentity) -> Result<Self, WireError> {
        debug_assert_eq!(txn.node_address(), identity.address());
        let signature = identity.sign_canonical(&txn)?;
        Ok(Self {
            txn,
            public_key: identity.public_key(),
            signature,
        })
    }

    /// Signature valid and the claimed address really is the hash of the
    /// attached public key.
    pub fn verify(&self) -> bool {
        self.public_key.address() == *self.txn.node_address()
            && verify_canonical(&self.public_key, &self.txn, &self.signature)
    }

    pub fn key(&self) -> TxnKey {
        (
            self.txn.node_address().clone(),
            self.txn.kind(),
            self.txn.epoch(),
            self.txn.batch_number(),
        )
    }
}

pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// The signed portion of the genesis block. Heights and the zero previous
/// hash make the genesis a regular link in the hash chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenesisContent {
    pub height: u64,
    pub previous_block_hash: String,
    pub model_name: String,
    pub data_source_addresses: Vec<NodeAddress>,
    /// Chain intermediates only; excluded registrants never appear. The
    /// order is not significant.
    pub intermediate_addresses: Vec<NodeAddress>,
    /// Weight-parameter count held by each intermediate, keyed by address;
    /// lets an auditor evaluate the incentive rule from the chain alone.
    pub intermediate_parameter_counts: BTreeMap<String, u64>,
    pub terminal_address: NodeAddress,
    pub worker_addresses: Vec<NodeAddress>,
    pub timestamp: u64,
    pub bootstrap_public_key: PublicKeyBytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenesisBlock {
    pub content: GenesisContent,
    pub signature: SignatureBytes,
}

impl GenesisBlock {
    pub fn create(mut content: GenesisContent, bootstrap: &NodeIdentity) -> Result<Self, WireError> {
        content.height = 0;
        content.previous_block_hash = ZERO_HASH.to_owned();
        content.bootstrap_public_key = bootstrap.public_key();
        let signature = bootstrap.sign_canonical(&content)?;
        Ok(Self { content, signature })
    }

    pub fn verify(&self) -> Result<(), LedgerError> {
        let c = &self.content;
        if c.height != 0 {
            return Err(LedgerError::InvalidGenesis(format!("height {}", c.height)));
        }
        if c.previous_block_hash != ZERO_HASH {
            return Err(LedgerError::InvalidGenesis("previous hash not zero".into()));
        }
        if c.worker_addresses.is_empty() {
            return Err(LedgerError::InvalidGenesis("no workers".into()));
        }
        for addr in c.intermediate_parameter_counts.keys() {
            let parsed = NodeAddress::parse(addr)
                .map_err(|e| LedgerError::InvalidGenesis(e.to_string()))?;
            if !c.intermediate_addresses.contains(&parsed) {
                return Err(LedgerError::InvalidGenesis(format!(
                    "parameter count for unknown intermediate {addr}"
                )));
            }
        }
        if !verify_canonical(&c.bootstrap_public_key, c, &self.signature) {
            return Err(LedgerError::InvalidGenesis("bad bootstrap signature".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String, WireError> {
        Ok(sha256_hex(&to_canonical_bytes(self)?))
    }

    /// Addresses allowed to author transactions.
    pub fn chain_registry(&self) -> BTreeSet<NodeAddress> {
        let c = &self.content;
        c.data_source_addresses
            .iter()
            .chain(&c.intermediate_addresses)
            .chain(std::iter::once(&c.terminal_address))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockContent {
    pub height: u64,
    pub previous_block_hash: String,
    pub timestamp: u64,
    pub transactions: Vec<SignedTransaction>,
    pub leader_address: NodeAddress,
    pub leader_public_key: PublicKeyBytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub content: BlockContent,
    pub signature: SignatureBytes,
}

impl Block {
    pub fn hash(&self) -> Result<String, WireError> {
        Ok(sha256_hex(&to_canonical_bytes(self)?))
    }
}

/// One line of the persisted chain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record")]
pub enum ChainRecord {
    Genesis(GenesisBlock),
    Block(Block),
}

/// Deterministic sortition: the worker whose `SHA256(address || round_seed)`
/// is smallest leads the round. Every worker computes the same winner from
/// the same inputs.
pub fn select_leader(workers: &[NodeAddress], round_seed: &[u8]) -> Result<NodeAddress, LedgerError> {
    workers
        .iter()
        .min_by_key(|addr| {
            let mut input = Vec::with_capacity(addr.as_str().len() + round_seed.len());
            input.extend_from_slice(addr.as_str().as_bytes());
            input.extend_from_slice(round_seed);
            sha256_bytes(&input)
        })
        .cloned()
        .ok_or(LedgerError::EmptyWorkerSet)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub genesis: GenesisBlock,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainVerdict {
    Valid,
    Invalid { height: u64, reason: String },
}

impl ChainVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainVerdict::Valid)
    }
}

impl Chain {
    pub fn new(genesis: GenesisBlock) -> Self {
        Self {
            genesis,
            blocks: Vec::new(),
        }
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn tip_hash(&self) -> Result<String, WireError> {
        match self.blocks.last() {
            Some(block) => block.hash(),
            None => self.genesis.hash(),
        }
    }

    /// Seed for the next leader round: the raw digest of the tip record.
    pub fn round_seed(&self) -> Result<[u8; 32], WireError> {
        let hex_digest = self.tip_hash()?;
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&hex_digest, &mut seed).expect("tip hash is 64 hex chars");
        Ok(seed)
    }

    pub fn committed_txn_count(&self) -> usize {
        self.blocks.iter().map(|b| b.content.transactions.len()).sum()
    }

    pub fn committed_keys(&self) -> BTreeSet<TxnKey> {
        self.blocks
            .iter()
            .flat_map(|b| &b.content.transactions)
            .map(SignedTransaction::key)
            .collect()
    }

    /// Full structural verification: genesis shape and signature, hash links,
    /// height sequence, leader correctness per round, leader and transaction
    /// signatures, registry membership, and duplicate suppression.
    pub fn verify(&self) -> ChainVerdict {
        let invalid = |height: u64, reason: String| ChainVerdict::Invalid { height, reason };
        if let Err(e) = self.genesis.verify() {
            return invalid(0, e.to_string());
        }
        let registry = self.genesis.chain_registry();
        let workers = &self.genesis.content.worker_addresses;
        let mut prev_hash = match self.genesis.hash() {
            Ok(h) => h,
            Err(e) => return invalid(0, e.to_string()),
        };
        let mut prev_seed = match self.round_seed_of(&prev_hash) {
            Ok(s) => s,
            Err(e) => return invalid(0, e.to_string()),
        };
        let mut seen: BTreeSet<TxnKey> = BTreeSet::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let height = (i + 1) as u64;
            let c = &block.content;
            if c.height != height {
                return invalid(height, format!("height {} out of sequence", c.height));
            }
            if c.previous_block_hash != prev_hash {
                return invalid(height, "previous hash link broken".into());
            }
            match select_leader(workers, &prev_seed) {
                Ok(expected) if expected == c.leader_address => {}
                Ok(expected) => {
                    return invalid(height, format!("leader {} expected {}", c.leader_address, expected))
                }
                Err(e) => return invalid(height, e.to_string()),
            }
            if c.leader_public_key.address() != c.leader_address {
                return invalid(height, "leader key does not match address".into());
            }
            if !verify_canonical(&c.leader_public_key, c, &block.signature) {
                return invalid(height, "bad leader signature".into());
            }
            for txn in &c.transactions {
                if !txn.verify() {
                    return invalid(height, "bad transaction signature".into());
                }
                if !registry.contains(txn.txn.node_address()) {
                    return invalid(height, format!("unregistered sender {}", txn.txn.node_address()));
                }
                if !seen.insert(txn.key()) {
                    return invalid(height, "duplicate transaction".into());
                }
            }
            prev_hash = match block.hash() {
                Ok(h) => h,
                Err(e) => return invalid(height, e.to_string()),
            };
            prev_seed = match self.round_seed_of(&prev_hash) {
                Ok(s) => s,
                Err(e) => return invalid(height, e.to_string()),
            };
        }
        ChainVerdict::Valid
    }

    fn round_seed_of(&self, hex_digest: &str) -> Result<[u8; 32], String> {
        let mut seed = [0u8; 32];
        hex::decode_to_slice(hex_digest, &mut seed).map_err(|e| e.to_string())?;
        Ok(seed)
    }

    pub fn write_jsonl<W: Write>(&self, writer: &mut W) -> Result<(), LedgerError> {
        let genesis = to_canonical_bytes(&ChainRecord::Genesis(self.genesis.clone()))?;
        writer.write_all(&genesis)?;
        writer.write_all(b"\n")?;
        for block in &self.blocks {
            let bytes = to_canonical_bytes(&ChainRecord::Block(block.clone()))?;
            writer.write_all(&bytes)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, LedgerError> {
        let mut genesis = None;
        let mut blocks = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ChainRecord =
                serde_json::from_str(&line).map_err(|e| LedgerError::BadChainFile {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            match record {
                ChainRecord::Genesis(g) if genesis.is_none() && blocks.is_empty() => {
                    genesis = Some(g);
                }
                ChainRecord::Genesis(_) => {
                    return Err(LedgerError::BadChainFile {
                        line: i + 1,
                        reason: "genesis record out of place".into(),
                    })
                }
                ChainRecord::Block(b) => blocks.push(b),
            }
        }
        let genesis = genesis.ok_or(LedgerError::BadChainFile {
            line: 0,
            reason: "missing genesis record".into(),
        })?;
        Ok(Self { genesis, blocks })
    }
}

/// Why a transaction was rejected; surfaced in logs, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxnReject {
    BadSignature,
    Unregistered,
    Duplicate,
}

/// A worker's view of the ledger: its chain copy, mempool and the registry
/// learned from the genesis block.
pub struct WorkerState {
    identity: NodeIdentity,
    registry: BTreeSet<NodeAddress>,
    workers: Vec<NodeAddress>,
    chain: Chain,
    mempool: VecDeque<SignedTransaction>,
    seen: BTreeSet<TxnKey>,
}

impl WorkerState {
    pub fn new(identity: NodeIdentity, genesis: GenesisBlock) -> Result<Self, LedgerError> {
        genesis.verify()?;
        Ok(Self {
            registry: genesis.chain_registry(),
            workers: genesis.content.worker_addresses.clone(),
            chain: Chain::new(genesis),
            mempool: VecDeque::new(),
            seen: BTreeSet::new(),
            identity,
        })
    }

    pub fn address(&self) -> &NodeAddress {
        self.identity.address()
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn validate_transaction(&self, txn: &SignedTransaction) -> Result<(), TxnReject> {
        if !txn.verify() {
            return Err(TxnReject::BadSignature);
        }
        if !self.registry.contains(txn.txn.node_address()) {
            return Err(TxnReject::Unregistered);
        }
        if self.seen.contains(&txn.key()) {
            return Err(TxnReject::Duplicate);
        }
        Ok(())
    }

    /// Validates and mempools a broadcast transaction. Returns `false` (and
    /// leaves no trace) when validation fails.
    pub fn submit_transaction(&mut self, txn: SignedTransaction) -> bool {
        match self.validate_transaction(&txn) {
            Ok(()) => {
                self.seen.insert(txn.key());
                self.mempool.push_back(txn);
                true
            }
            Err(_) => false,
        }
    }

    pub fn current_leader(&self) -> Result<NodeAddress, LedgerError> {
        select_leader(&self.workers, &self.chain.round_seed()?)
    }

    pub fn is_leader(&self) -> Result<bool, LedgerError> {
        Ok(self.current_leader()? == *self.identity.address())
    }

    /// Drains up to `max_txns` mempool entries, in arrival order, into a
    /// block chained to the current tip, signs it and appends it locally.
    /// Returns `Ok(None)` when the mempool is empty.
    pub fn produce_block(&mut self, max_txns: usize, timestamp: u64) -> Result<Option<Block>, LedgerError> {
        if !self.is_leader()? {
            return Err(LedgerError::NotLeader);
        }
        if self.mempool.is_empty() {
            return Ok(None);
        }
        let take = max_txns.min(self.mempool.len());
        let transactions: Vec<SignedTransaction> = self.mempool.drain(..take).collect();
        let content = BlockContent {
            height: self.chain.height() + 1,
            previous_block_hash: self.chain.tip_hash()?,
            timestamp,
            transactions,
            leader_address: self.identity.address().clone(),
            leader_public_key: self.identity.public_key(),
        };
        let signature = self.identity.sign_canonical(&content)?;
        let block = Block { content, signature };
        self.chain.blocks.push(block.clone());
        Ok(Some(block))
    }

    /// Follower path: verifies a block broadcast by the round leader and
    /// appends it, dropping its transactions from the local mempool.
    pub fn receive_block(&mut self, block: Block) -> Result<(), LedgerError> {
        let c = &block.content;
        if c.height != self.chain.height() + 1 {
            return Err(LedgerError::InvalidBlock(format!(
                "height {} does not extend tip {}",
                c.height,
                self.chain.height()
            )));
        }
        if c.previous_block_hash != self.chain.tip_hash()? {
            return Err(LedgerError::InvalidBlock("previous hash mismatch".into()));
        }
        let expected = self.current_leader()?;
        if expected != c.leader_address {
            return Err(LedgerError::InvalidBlock(format!(
                "leader {} expected {expected}",
                c.leader_address
            )));
        }
        if c.leader_public_key.address() != c.leader_address {
            return Err(LedgerError::InvalidBlock("leader key mismatch".into()));
        }
        if !verify_canonical(&c.leader_public_key, c, &block.signature) {
            return Err(LedgerError::InvalidBlock("bad leader signature".into()));
        }
        for txn in &c.transactions {
            if !txn.verify() || !self.registry.contains(txn.txn.node_address()) {
                return Err(LedgerError::InvalidBlock("invalid transaction".into()));
            }
        }
        let committed: BTreeSet<TxnKey> = c.transactions.iter().map(SignedTransaction::key).collect();
        self.mempool.retain(|t| !committed.contains(&t.key()));
        for key in committed {
            self.seen.insert(key);
        }
        self.chain.blocks.push(block);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTxnCount {
    pub node_address: NodeAddress,
    pub outputs: u32,
    pub gradients: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingTxn {
    pub node_address: NodeAddress,
    pub batch_number: u32,
    pub kind: TxnKind,
}

/// What the chain shows for one epoch: who contributed data, how many
/// records each chain node committed, and which `(node, batch)` records are
/// missing against the two-per-node-per-iteration schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub epoch: u32,
    pub contributing_sources: Vec<NodeAddress>,
    pub node_counts: Vec<NodeTxnCount>,
    pub missing: Vec<MissingTxn>,
}

/// Audits one epoch of a verified chain. The expected iteration set is the
/// union of batch numbers any node recorded for the epoch; every chain node
/// must then show one output and one gradient record per iteration.
pub fn audit_epoch(chain: &Chain, epoch: u32) -> Result<AuditReport, LedgerError> {
    if let ChainVerdict::Invalid { height, reason } = chain.verify() {
        return Err(LedgerError::UnverifiableChain { height, reason });
    }
    Ok(audit_epoch_unchecked(chain, epoch))
}

fn audit_epoch_unchecked(chain: &Chain, epoch: u32) -> AuditReport {
    let mut batches: BTreeSet<u32> = BTreeSet::new();
    let mut outputs: BTreeMap<NodeAddress, BTreeSet<u32>> = BTreeMap::new();
    let mut gradients: BTreeMap<NodeAddress, BTreeSet<u32>> = BTreeMap::new();
    let mut contributing: BTreeSet<NodeAddress> = BTreeSet::new();
    for block in &chain.blocks {
        for txn in &block.content.transactions {
            if txn.txn.epoch() != epoch {
                continue;
            }
            batches.insert(txn.txn.batch_number());
            let addr = txn.txn.node_address().clone();
            match txn.txn.kind() {
                TxnKind::Output => {
                    if txn.txn.node_type() == NodeType::DataSource {
                        contributing.insert(addr.clone());
                    }
                    outputs.entry(addr).or_default().insert(txn.txn.batch_number());
                }
                TxnKind::Gradient => {
                    gradients.entry(addr).or_default().insert(txn.txn.batch_number());
                }
            }
        }
    }

    let mut node_counts = Vec::new();
    let mut missing = Vec::new();
    if !batches.is_empty() {
        for node in chain.genesis.chain_registry() {
            let out = outputs.get(&node).cloned().unwrap_or_default();
            let grad = gradients.get(&node).cloned().unwrap_or_default();
            node_counts.push(NodeTxnCount {
                node_address: node.clone(),
                outputs: out.len() as u32,
                gradients: grad.len() as u32,
            });
            for &batch in &batches {
                if !out.contains(&batch) {
                    missing.push(MissingTxn {
                        node_address: node.clone(),
                        batch_number: batch,
                        kind: TxnKind::Output,
                    });
                }
                if !grad.contains(&batch) {
                    missing.push(MissingTxn {
                        node_address: node.clone(),
                        batch_number: batch,
                        kind: TxnKind::Gradient,
                    });
                }
            }
        }
    }
    AuditReport {
        epoch,
        contributing_sources: contributing.into_iter().collect(),
        node_counts,
        missing,
    }
}

/// Audits every epoch that appears on the chain.
pub fn audit_all(chain: &Chain) -> Result<Vec<AuditReport>, LedgerError> {
    if let ChainVerdict::Invalid { height, reason } = chain.verify() {
        return Err(LedgerError::UnverifiableChain { height, reason });
    }
    let epochs: BTreeSet<u32> = chain
        .blocks
        .iter()
        .flat_map(|b| &b.content.transactions)
        .map(|t| t.txn.epoch())
        .collect();
    Ok(epochs.into_iter().map(|e| audit_epoch_unchecked(chain, e)).collect())
}

/// The incentive rule: nothing is paid unless the final training loss beat
/// the threshold; below it, the budget splits proportionally to each
/// intermediate's held weight-parameter count, rounded down to whole units.
pub fn compute_incentives(
    nld: &NodeLayerDescription,
    final_loss: f64,
    tau: f64,
    budget: u64,
) -> Result<BTreeMap<NodeAddress, u64>, LedgerError> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(LedgerError::BadIncentiveInput(format!("tau must be > 0, got {tau}")));
    }
    if !final_loss.is_finite() || final_loss < 0.0 {
        return Err(LedgerError::BadIncentiveInput(format!("final loss {final_loss}")));
    }
    let mut payouts: BTreeMap<NodeAddress, u64> = nld
        .assignments
        .iter()
        .map(|a| (a.node_address.clone(), 0))
        .collect();
    if final_loss >= tau {
        return Ok(payouts);
    }
    let total: u64 = nld.assignments.iter().map(|a| a.parameter_count()).sum();
    if total == 0 {
        return Ok(payouts);
    }
    for assignment in &nld.assignments {
        let share = u128::from(budget) * u128::from(assignment.parameter_count()) / u128::from(total);
        payouts.insert(assignment.node_address.clone(), share as u64);
    }
    Ok(payouts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use crate::partition::NodeAssignment;

    fn worker_identity(i: u64) -> NodeIdentity {
        NodeIdentity::derived("ledger-test-worker", i)
    }

    fn node_identity(i: u64) -> NodeIdentity {
        NodeIdentity::derived("ledger-test-node", i)
    }

    fn test_genesis(
        bootstrap: &NodeIdentity,
        sources: &[&NodeIdentity],
        intermediates: &[&NodeIdentity],
        terminal: &NodeIdentity,
        workers: &[&NodeIdentity],
    ) -> GenesisBlock {
        GenesisBlock::create(
            GenesisContent {
                height: 0,
                previous_block_hash: ZERO_HASH.into(),
                model_name: "test-model".into(),
                data_source_addresses: sources.iter().map(|s| s.address().clone()).collect(),
                intermediate_addresses: intermediates.iter().map(|s| s.address().clone()).collect(),
                intermediate_parameter_counts: BTreeMap::new(),
                terminal_address: terminal.address().clone(),
                worker_addresses: workers.iter().map(|s| s.address().clone()).collect(),
                timestamp: 0,
                bootstrap_public_key: bootstrap.public_key(),
            },
            bootstrap,
        )
        .unwrap()
    }

    fn output_txn(id: &NodeIdentity, epoch: u32, batch: u32) -> SignedTransaction {
        SignedTransaction::create(
            TransactionBody::Output(OutputTransaction {
                node_type: NodeType::DataSource,
                epoch,
                batch_number: batch,
                layer_output_hash: sha256_hex(format!("out-{epoch}-{batch}").as_bytes()),
                node_address: id.address().clone(),
            }),
            id,
        )
        .unwrap()
    }

    fn gradient_txn(id: &NodeIdentity, epoch: u32, batch: u32) -> SignedTransaction {
        SignedTransaction::create(
            TransactionBody::Gradient(GradientTransaction {
                node_type: NodeType::DataSource,
                epoch,
                batch_number: batch,
                node_gradient_hash: sha256_hex(format!("grad-{epoch}-{batch}").as_bytes()),
                node_address: id.address().clone(),
            }),
            id,
        )
        .unwrap()
    }

    /// Runs rounds across all workers until mempools drain, mirroring the
    /// broadcast protocol: the leader produces, the others receive.
    fn run_rounds(workers: &mut [WorkerState], max_txns: usize) {
        loop {
            if workers.iter().all(|w| w.mempool_len() == 0) {
                return;
            }
            let leader_addr = workers[0].current_leader().unwrap();
            let leader_idx = workers
                .iter()
                .position(|w| *w.address() == leader_addr)
                .unwrap();
            let block = workers[leader_idx]
                .produce_block(max_txns, 1)
                .unwrap()
                .expect("mempool non-empty");
            for (i, worker) in workers.iter_mut().enumerate() {
                if i != leader_idx {
                    worker.receive_block(block.clone()).unwrap();
                }
            }
        }
    }

    #[test]
    fn select_leader_golden_and_trivial_cases() {
        let only = NodeAddress::from_label("solo");
        assert_eq!(select_leader(&[only.clone()], b"seed").unwrap(), only);
        assert!(select_leader(&[], b"seed").is_err());

        // Frozen from an independent computation of the three digests.
        let workers: Vec<NodeAddress> = ["worker-a", "worker-b", "worker-c"]
            .iter()
            .map(|l| NodeAddress::from_label(l))
            .collect();
        let seed = sha256_bytes(b"round-seed-0");
        assert_eq!(
            select_leader(&workers, &seed).unwrap().as_str(),
            "0482c4aea1af397e54200017866d778ce32e1daac473f2cd09a9159d2e69b6ef"
        );
    }

    #[test]
    fn transaction_validation_paths() {
        let bootstrap = node_identity(0);
        let source = node_identity(1);
        let terminal = node_identity(2);
        let outsider = node_identity(3);
        let wid = worker_identity(0);
        let genesis = test_genesis(&bootstrap, &[&source], &[], &terminal, &[&wid]);
        let mut worker = WorkerState::new(worker_identity(0), genesis).unwrap();

        let good = output_txn(&source, 0, 0);
        assert_eq!(worker.validate_transaction(&good), Ok(()));
        assert!(worker.submit_transaction(good.clone()));

        // Duplicate suppression covers the mempool.
        assert_eq!(worker.validate_transaction(&good), Err(TxnReject::Duplicate));
        assert!(!worker.submit_transaction(good.clone()));

        // Flipping a hash byte breaks the signature.
        let mut tampered = good.clone();
        if let TransactionBody::Output(ref mut t) = tampered.txn {
            t.layer_output_hash = t.layer_output_hash.replace('a', "b");
        }
        assert_eq!(worker.validate_transaction(&tampered), Err(TxnReject::BadSignature));

        // Unregistered key is rejected even with a valid signature.
        let foreign = output_txn(&outsider, 0, 0);
        assert_eq!(worker.validate_transaction(&foreign), Err(TxnReject::Unregistered));
    }

    #[test]
    fn block_production_and_chaining() {
        let bootstrap = node_identity(0);
        let source = node_identity(1);
        let terminal = node_identity(2);
        let w0 = worker_identity(0);
        let genesis = test_genesis(&bootstrap, &[&source], &[], &terminal, &[&w0]);
        let mut worker = WorkerState::new(worker_identity(0), genesis.clone()).unwrap();

        // Empty mempool: no block.
        assert!(worker.produce_block(10, 0).unwrap().is_none());

        for b in 0..5 {
            assert!(worker.submit_transaction(output_txn(&source, 0, b)));
        }
        let block = worker.produce_block(10, 0).unwrap().unwrap();
        assert_eq!(block.content.transactions.len(), 5);
        assert_eq!(worker.mempool_len(), 0);
        assert_eq!(block.content.previous_block_hash, genesis.hash().unwrap());

        assert!(worker.submit_transaction(gradient_txn(&source, 0, 0)));
        let second = worker.produce_block(10, 1).unwrap().unwrap();
        assert_eq!(second.content.previous_block_hash, block.hash().unwrap());
        assert_eq!(second.content.height, 2);

        assert!(worker.chain().verify().is_valid());

        // A committed transaction can never re-enter the mempool.
        assert!(!worker.submit_transaction(gradient_txn(&source, 0, 0)));
    }

    #[test]
    fn non_leader_cannot_produce() {
        let bootstrap = node_identity(0);
        let source = node_identity(1);
        let terminal = node_identity(2);
        let w0 = worker_identity(0);
        let w1 = worker_identity(1);
        let genesis = test_genesis(&bootstrap, &[&source], &[], &terminal, &[&w0, &w1]);
        let mut a = WorkerState::new(worker_identity(0), genesis.clone()).unwrap();
        let mut b = WorkerState::new(worker_identity(1), genesis).unwrap();
        a.submit_transaction(output_txn(&source, 0, 0));
        b.submit_transaction(output_txn(&source, 0, 0));
        let leader = a.current_leader().unwrap();
        let (loser, _winner) = if leader == *a.address() {
            (&mut b, &mut a)
        } else {
            (&mut a, &mut b)
        };
        assert!(matches!(loser.produce_block(10, 0), Err(LedgerError::NotLeader)));
    }

    #[test]
    fn chain_tamper_evidence_and_reorder() {
        let bootstrap = node_identity(0);
        let source = node_identity(1);
        let terminal = node_identity(2);
        let w0 = worker_identity(0);
        let genesis = test_genesis(&bootstrap, &[&source], &[], &terminal, &[&w0]);
        let mut worker = WorkerState::new(worker_identity(0), genesis).unwrap();
        for b in 0..6 {
            worker.submit_transaction(output_txn(&source, 0, b));
            worker.produce_block(2, u64::from(b)).unwrap();
        }
        let chain = worker.chain().clone();
        assert!(chain.verify().is_valid());

        // Mutating a committed transaction invalidates the chain.
        let mut tampered = chain.clone();
        if let TransactionBody::Output(ref mut t) =
            tampered.blocks[0].content.transactions[0].txn
        {
            t.batch_number += 1;
        }
        assert!(!tampered.verify().is_valid());

        // Reordering two blocks breaks the links.
        let mut reordered = chain.clone();
        reordered.blocks.swap(0, 1);
        assert!(!reordered.verify().is_valid());

        // Any prefix of a valid chain is valid.
        let mut prefix = chain.clone();
        prefix.blocks.truncate(2);
        assert!(prefix.verify().is_valid());
    }

    #[test]
    fn followers_replicate_identical_chains() {
        let bootstrap = node_identity(0);
        let source = node_identity(1);
        let terminal = node_identity(2);
        let ws: Vec<NodeIdentity> = (0..3).map(worker_identity).collect();
        let genesis = test_genesis(
            &bootstrap,
            &[&source],
            &[],
            &terminal,
            &ws.iter().collect::<Vec<_>>(),
        );
        let mut workers: Vec<WorkerState> = (0..3)
            .map(|i| WorkerState::new(worker_identity(i), genesis.clone()).unwrap())
            .collect();
        for e in 0..2 {
            for b in 0..4 {
                let txns = [output_txn(&source, e, b), gradient_txn(&source, e, b)];
                for txn in txns {
                    for w in &mut workers {
                        assert!(w.submit_transaction(txn.clone()));
                    }
                }
            }
        }
        run_rounds(&mut workers, 64);
        let reference = workers[0].chain().clone();
        assert!(reference.verify().is_valid());
        assert_eq!(reference.committed_txn_count(), 16);
        for w in &workers[1..] {
            assert_eq!(*w.chain(), reference);
        }
    }

    #[test]
    fn chain_file_roundtrip() {
        let bootstrap = node_identity(0);
        let source = node_identity(1);
        let terminal = node_identity(2);
        let w0 = worker_identity(0);
        let genesis = test_genesis(&bootstrap, &[&source], &[], &terminal, &[&w0]);
        let mut worker = WorkerState::new(worker_identity(0), genesis).unwrap();
        worker.submit_transaction(output_txn(&source, 0, 0));
        worker.produce_block(10, 0).unwrap();

        let mut buf = Vec::new();
        worker.chain().write_jsonl(&mut buf).unwrap();
        let read = Chain::read_jsonl(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(read, *worker.chain());
        assert!(read.verify().is_valid());
    }

    #[test]
    fn audit_flags_exact_gaps() {
        let bootstrap = node_identity(0);
        let source = node_identity(1);
        let terminal = node_identity(2);
        let w0 = worker_identity(0);
        let genesis = test_genesis(&bootstrap, &[&source], &[], &terminal, &[&w0]);
        let mut worker = WorkerState::new(worker_identity(0), genesis).unwrap();
        // Complete epoch: both kinds for both chain nodes over 3 batches,
        // except the terminal's gradient for batch 1 which is "lost".
        for b in 0..3 {
            worker.submit_transaction(output_txn(&source, 0, b));
            worker.submit_transaction(gradient_txn(&source, 0, b));
            let mut out = output_txn(&terminal, 0, b);
            if let TransactionBody::Output(ref mut t) = out.txn {
                t.node_type = NodeType::Terminal;
            }
            let out = SignedTransaction::create(out.txn, &terminal).unwrap();
            worker.submit_transaction(out);
            if b != 1 {
                let mut grad = gradient_txn(&terminal, 0, b);
                if let TransactionBody::Gradient(ref mut t) = grad.txn {
                    t.node_type = NodeType::Terminal;
                }
                let grad = SignedTransaction::create(grad.txn, &terminal).unwrap();
                worker.submit_transaction(grad);
            }
        }
        worker.produce_block(64, 0).unwrap();
        let report = audit_epoch(worker.chain(), 0).unwrap();
        assert_eq!(report.contributing_sources, vec![source.address().clone()]);
        assert_eq!(
            report.missing,
            vec![MissingTxn {
                node_address: terminal.address().clone(),
                batch_number: 1,
                kind: TxnKind::Gradient,
            }]
        );
        // Epoch with no transactions: empty contributor list, no gaps.
        let empty = audit_epoch(worker.chain(), 9).unwrap();
        assert!(empty.contributing_sources.is_empty());
        assert!(empty.missing.is_empty());
    }

    fn nld_with_counts(counts: &[(u64, &str)]) -> NodeLayerDescription {
        NodeLayerDescription {
            assignments: counts
                .iter()
                .map(|&(count, label)| NodeAssignment {
                    node_address: NodeAddress::from_label(label),
                    // One layer of `count x 1` weights gives the wanted count.
                    layers: vec![LayerSpec::dense(count as usize, 1, Activation::ReLU)],
                })
                .collect(),
        }
    }

    #[test]
    fn incentives_follow_parameter_proportions() {
        let nld = nld_with_counts(&[(2080, "i1"), (3168, "i2")]);
        // Budget equal to the parameter total pays each node its count.
        let payouts = compute_incentives(&nld, 0.1, 0.2, 5248).unwrap();
        assert_eq!(payouts[&NodeAddress::from_label("i1")], 2080);
        assert_eq!(payouts[&NodeAddress::from_label("i2")], 3168);

        // Loss at or above the threshold pays nothing.
        let none = compute_incentives(&nld, 0.2, 0.2, 5248).unwrap();
        assert!(none.values().all(|&v| v == 0));

        // Single node takes the whole floored budget.
        let solo = nld_with_counts(&[(100, "only")]);
        let payouts = compute_incentives(&solo, 0.0, 0.2, 999).unwrap();
        assert_eq!(payouts[&NodeAddress::from_label("only")], 999);

        // Conservation: payouts never exceed the budget and come within
        // node_count - 1 units of it.
        let uneven = nld_with_counts(&[(3, "a"), (3, "b"), (4, "c")]);
        let payouts = compute_incentives(&uneven, 0.0, 0.2, 101).unwrap();
        let total: u64 = payouts.values().sum();
        assert!(total <= 101);
        assert!(total >= 101 - 2);

        assert!(compute_incentives(&nld, 0.1, 0.0, 10).is_err());
        assert!(compute_incentives(&nld, -1.0, 0.2, 10).is_err());
    }
}
