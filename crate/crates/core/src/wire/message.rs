//! The message envelope and every payload exchanged between processes.
//!
//! Control messages that need authentication carry the sender address, the
//! sender public key and an Ed25519 signature over the canonical payload
//! bytes. Chain tensors travel unsigned over their point-to-point streams;
//! their hashes are what end up signed, inside transactions.

use serde::{Deserialize, Serialize};

use crate::identity::{verify_canonical, NodeAddress, NodeIdentity, PublicKeyBytes, SignatureBytes};
use crate::ledger::{Block, GenesisBlock, NodeType, SignedTransaction};
use crate::matrix::Matrix;
use crate::nn::{ActivationBatch, GradientBatch, LayerSpec, LossKind};
use crate::partition::{PowProblem, PowSolution};
use crate::wire::{to_canonical_bytes, WireError};
use crate::Real;

/// What a node tells the bootstrap server when it joins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    /// Port this node listens on: chain nodes for their previous hop,
    /// workers for transaction datagrams.
    pub listen_port: u16,
    pub node_type: NodeType,
    pub public_key: PublicKeyBytes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_point_count: Option<u64>,
}

impl RegistrationRecord {
    pub fn validate(&self) -> Result<(), WireError> {
        match (self.node_type, self.data_point_count) {
            (NodeType::DataSource, Some(n)) if n >= 1 => Ok(()),
            (NodeType::DataSource, _) => Err(WireError::NonRepresentable(
                "data source must declare a positive data point count".into(),
            )),
            (_, None) => Ok(()),
            (_, Some(_)) => Err(WireError::NonRepresentable(
                "data point count is only valid for data sources".into(),
            )),
        }
    }
}

/// Pre-signed shutdown token: the bootstrap server signs it during Phase I
/// and the node that performs the final weight update releases it to the
/// workers, since the bootstrap server has exited by then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminateToken {
    pub genesis_hash: String,
    pub signature: SignatureBytes,
}

#[derive(Serialize)]
struct TerminateBody<'a> {
    genesis_hash: &'a str,
}

impl TerminateToken {
    pub fn create(genesis_hash: String, bootstrap: &NodeIdentity) -> Result<Self, WireError> {
        let signature = bootstrap.sign_canonical(&TerminateBody {
            genesis_hash: &genesis_hash,
        })?;
        Ok(Self {
            genesis_hash,
            signature,
        })
    }

    pub fn verify(&self, bootstrap_public_key: &PublicKeyBytes, genesis_hash: &str) -> bool {
        self.genesis_hash == genesis_hash
            && verify_canonical(
                bootstrap_public_key,
                &TerminateBody {
                    genesis_hash: &self.genesis_hash,
                },
                &self.signature,
            )
    }
}

/// Which sources feed a node, in schedule order, with their per-epoch batch
/// counts; lets receivers know whom to expect next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamEntry {
    pub source: NodeAddress,
    pub batches_per_epoch: u32,
}

/// Everything a chain node needs after bootstrapping: its slice of the
/// model, its neighbors, and the training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub model_name: String,
    pub role: NodeType,
    /// `ip:port` of the next node in the chain; absent on the terminal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_node_address: Option<String>,
    pub layer_specs: Vec<LayerSpec>,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Loss selection; only meaningful on the terminal node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_kind: Option<LossKind>,
    pub weight_seed: u64,
    /// Index of this slice's first layer within the full model, so layer
    /// initialization is independent of where the model is cut.
    pub layer_index_base: usize,
    pub iterations_per_epoch: u32,
    /// For sources: the iteration index their first batch occupies within
    /// each epoch (batch numbering is global per epoch across sources).
    pub iteration_base: u32,
    pub worker_endpoints: Vec<String>,
    /// For receiving nodes: the sources feeding this chain in order.
    #[serde(default)]
    pub upstream_plan: Vec<UpstreamEntry>,
    /// Present only on the source that performs the run's final update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminate_token: Option<TerminateToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenesisAnnouncement {
    pub block: GenesisBlock,
    /// `ip:port` of every worker, so workers can broadcast blocks to peers.
    pub worker_endpoints: Vec<String>,
}

/// Activations plus their labels moving toward the terminal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardMsg {
    pub origin_source: NodeAddress,
    pub output: ActivationBatch<Real>,
    pub labels: Matrix<Real>,
}

/// Loss gradient moving back toward the originating source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardMsg {
    pub origin_source: NodeAddress,
    pub gradient: GradientBatch<Real>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum MessagePayload {
    #[serde(rename = "REGISTER")]
    Register(RegistrationRecord),
    #[serde(rename = "POW_CHALLENGE")]
    PowChallenge { index: u32, problem: PowProblem },
    #[serde(rename = "POW_SOLUTION")]
    PowSolution { index: u32, solution: PowSolution },
    #[serde(rename = "CHAIN_CONFIG")]
    ChainConfig(ChainConfig),
    #[serde(rename = "GENESIS")]
    Genesis(GenesisAnnouncement),
    #[serde(rename = "FORWARD")]
    Forward(ForwardMsg),
    #[serde(rename = "BACKWARD")]
    Backward(BackwardMsg),
    #[serde(rename = "TXN")]
    Txn(SignedTransaction),
    #[serde(rename = "BLOCK")]
    Block(Block),
    #[serde(rename = "VALIDATE_REQ")]
    ValidateReq(Block),
    #[serde(rename = "VALIDATE_ACK")]
    ValidateAck { height: u64, ok: bool },
    #[serde(rename = "TERMINATE")]
    Terminate(TerminateToken),
}

impl MessagePayload {
    pub fn tag(&self) -> &'static str {
        match self {
            MessagePayload::Register(_) => "REGISTER",
            MessagePayload::PowChallenge { .. } => "POW_CHALLENGE",
            MessagePayload::PowSolution { .. } => "POW_SOLUTION",
            MessagePayload::ChainConfig(_) => "CHAIN_CONFIG",
            MessagePayload::Genesis(_) => "GENESIS",
            MessagePayload::Forward(_) => "FORWARD",
            MessagePayload::Backward(_) => "BACKWARD",
            MessagePayload::Txn(_) => "TXN",
            MessagePayload::Block(_) => "BLOCK",
            MessagePayload::ValidateReq(_) => "VALIDATE_REQ",
            MessagePayload::ValidateAck { .. } => "VALIDATE_ACK",
            MessagePayload::Terminate(_) => "TERMINATE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(flatten)]
    pub payload: MessagePayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender_address: Option<NodeAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender_public_key: Option<PublicKeyBytes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<SignatureBytes>,
}

impl WireMessage {
    pub fn unsigned(payload: MessagePayload) -> Self {
        Self {
            payload,
            sender_address: None,
            sender_public_key: None,
            signature: None,
        }
    }

    pub fn signed(payload: MessagePayload, identity: &NodeIdentity) -> Result<Self, WireError> {
        let signature = identity.sign_canonical(&payload)?;
        Ok(Self {
            payload,
            sender_address: Some(identity.address().clone()),
            sender_public_key: Some(identity.public_key()),
            signature: Some(signature),
        })
    }

    /// True when the envelope carries a signature that verifies against the
    /// attached key and the key hashes to the claimed sender address.
    pub fn verify_signature(&self) -> bool {
        let (Some(addr), Some(key), Some(sig)) =
            (&self.sender_address, &self.sender_public_key, &self.signature)
        else {
            return false;
        };
        key.address() == *addr && verify_canonical(key, &self.payload, sig)
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        to_canonical_bytes(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_roundtrips_and_sorts_keys() {
        let msg = WireMessage::unsigned(MessagePayload::ValidateAck { height: 3, ok: true });
        let bytes = msg.encode().unwrap();
        assert_eq!(
            bytes,
            br#"{"payload":{"height":3,"ok":true},"type":"VALIDATE_ACK"}"#
        );
        assert_eq!(WireMessage::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn forward_message_roundtrips_value_exactly() {
        let msg = WireMessage::unsigned(MessagePayload::Forward(ForwardMsg {
            origin_source: NodeAddress::from_label("src"),
            output: ActivationBatch::new(
                Matrix::from_rows(&[vec![0.1_f32, -2.75], vec![3.5e-7, 0.0]]),
                2,
                5,
            ),
            labels: Matrix::from_rows(&[vec![1.0_f32, 0.0], vec![0.0, 1.0]]),
        }));
        let bytes = msg.encode().unwrap();
        let back = WireMessage::decode(&bytes).unwrap();
        assert_eq!(back, msg);
        // Re-encoding the parse is byte-identical.
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn signed_envelope_verifies_and_rejects_tampering() {
        let id = NodeIdentity::derived("msg", 0);
        let msg = WireMessage::signed(
            MessagePayload::Register(RegistrationRecord {
                listen_port: 9000,
                node_type: NodeType::Intermediate,
                public_key: id.public_key(),
                data_point_count: None,
            }),
            &id,
        )
        .unwrap();
        assert!(msg.verify_signature());

        let mut tampered = msg.clone();
        if let MessagePayload::Register(ref mut r) = tampered.payload {
            r.listen_port = 9001;
        }
        assert!(!tampered.verify_signature());

        let unsigned = WireMessage::unsigned(tampered.payload);
        assert!(!unsigned.verify_signature());
    }

    #[test]
    fn registration_validation() {
        let id = NodeIdentity::derived("reg", 0);
        let mut rec = RegistrationRecord {
            listen_port: 1,
            node_type: NodeType::DataSource,
            public_key: id.public_key(),
            data_point_count: None,
        };
        assert!(rec.validate().is_err());
        rec.data_point_count = Some(10);
        assert!(rec.validate().is_ok());
        rec.node_type = NodeType::Worker;
        assert!(rec.validate().is_err());
        rec.data_point_count = None;
        assert!(rec.validate().is_ok());
    }

    #[test]
    fn terminate_token_binds_genesis_hash() {
        let bootstrap = NodeIdentity::derived("bootstrap", 0);
        let token = TerminateToken::create("aa".repeat(32), &bootstrap).unwrap();
        assert!(token.verify(&bootstrap.public_key(), &"aa".repeat(32)));
        assert!(!token.verify(&bootstrap.public_key(), &"bb".repeat(32)));
        let other = NodeIdentity::derived("bootstrap", 1);
        assert!(!token.verify(&other.public_key(), &"aa".repeat(32)));
    }
}
