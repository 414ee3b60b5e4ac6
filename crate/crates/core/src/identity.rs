//! Node identities: Ed25519 keypairs and the SHA-256-of-public-key addresses
//! every participant is known by on the chain.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ed25519_dalek::{Signer, Verifier};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{to_canonical_bytes, WireError};

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("address must be 64 lowercase hex chars, got {0:?}")]
    BadAddress(String),
    #[error("key seed must be 32 bytes of hex, got {0}")]
    BadSeed(String),
    #[error("canonical serialization failed: {0}")]
    Wire(#[from] WireError),
}

pub fn sha256_bytes(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// A participant address: the lowercase-hex SHA-256 digest of the 32-byte
/// public key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct NodeAddress(String);

impl NodeAddress {
    pub fn from_public_key(public_key: &[u8; 32]) -> Self {
        Self(sha256_hex(public_key))
    }

    pub fn parse(s: &str) -> Result<Self, IdentityError> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Self(s.to_owned()))
        } else {
            Err(IdentityError::BadAddress(s.to_owned()))
        }
    }

    /// Address derived from an arbitrary label; handy for tests and
    /// synthetic profiles that never sign anything.
    pub fn from_label(label: &str) -> Self {
        Self(sha256_hex(label.as_bytes()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for NodeAddress {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        NodeAddress::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// 32-byte Ed25519 public key; serialized as base64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublicKeyBytes(pub [u8; 32]);

impl PublicKeyBytes {
    pub fn address(&self) -> NodeAddress {
        NodeAddress::from_public_key(&self.0)
    }
}

/// 64-byte Ed25519 signature; serialized as base64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignatureBytes(pub [u8; 64]);

macro_rules! base64_serde {
    ($name:ident, $len:expr) => {
        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&BASE64.encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                let bytes = BASE64.decode(&s).map_err(serde::de::Error::custom)?;
                let arr: [u8; $len] = bytes
                    .try_into()
                    .map_err(|_| serde::de::Error::custom(concat!("expected ", $len, " bytes")))?;
                Ok($name(arr))
            }
        }
    };
}

base64_serde!(PublicKeyBytes, 32);
base64_serde!(SignatureBytes, 64);

/// Signing identity of one process. The address is cached because it is used
/// on every transaction.
#[derive(Clone)]
pub struct NodeIdentity {
    signing_key: ed25519_dalek::SigningKey,
    public_key: PublicKeyBytes,
    address: NodeAddress,
}

impl NodeIdentity {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        let signing_key = ed25519_dalek::SigningKey::from_bytes(seed);
        let public_key = PublicKeyBytes(signing_key.verifying_key().to_bytes());
        let address = public_key.address();
        Self {
            signing_key,
            public_key,
            address,
        }
    }

    pub fn from_seed_hex(hex_seed: &str) -> Result<Self, IdentityError> {
        let bytes = hex::decode(hex_seed.trim()).map_err(|e| IdentityError::BadSeed(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|v: Vec<u8>| IdentityError::BadSeed(format!("{} bytes", v.len())))?;
        Ok(Self::from_seed(&arr))
    }

    /// Deterministic identity for simulations: the seed is hashed from a
    /// label and an index.
    pub fn derived(label: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"identity-seed");
        hasher.update(label.as_bytes());
        hasher.update(index.to_be_bytes());
        Self::from_seed(&hasher.finalize().into())
    }

    pub fn public_key(&self) -> PublicKeyBytes {
        self.public_key
    }

    pub fn address(&self) -> &NodeAddress {
        &self.address
    }

    pub fn sign_raw(&self, message: &[u8]) -> SignatureBytes {
        SignatureBytes(self.signing_key.sign(message).to_bytes())
    }

    /// Signs the canonical serialization of `payload`.
    pub fn sign_canonical<T: Serialize>(&self, payload: &T) -> Result<SignatureBytes, WireError> {
        Ok(self.sign_raw(&to_canonical_bytes(payload)?))
    }
}

impl std::fmt::Debug for NodeIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeIdentity")
            .field("address", &self.address)
            .finish()
    }
}

/// Pure verification predicate: malformed keys or signatures yield `false`,
/// never a panic.
pub fn verify_raw(public_key: &PublicKeyBytes, message: &[u8], signature: &SignatureBytes) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    key.verify(message, &sig).is_ok()
}

pub fn verify_canonical<T: Serialize>(
    public_key: &PublicKeyBytes,
    payload: &T,
    signature: &SignatureBytes,
) -> bool {
    match to_canonical_bytes(payload) {
        Ok(bytes) => verify_raw(public_key, &bytes, signature),
        Err(_) => false,
    }
}
