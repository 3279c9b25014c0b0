//! Versioned JSON parameter snapshots.
//!
//! A checkpoint is one JSON document: format tag, version, the hash of the
//! config that produced it, an optional rng position, every parameter as
//! `{shape, values}`, and a SHA-256 checksum over the rest of the document.
//! Values are written with shortest round-trip formatting, so loading
//! reproduces them exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Array, ParamStore};

pub const FORMAT: &str = "g2a-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format tag `{0}`)")]
    Format(String),
    #[error("checkpoint version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: file is corrupt or was edited")]
    Checksum,
    #[error("checkpoint has no parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}`: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint was produced by config {found}, current config is {expected}")]
    ConfigMismatch { found: String, expected: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes: [u8; 32] = hex::decode(&self.seed).ok()?.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub rng: Option<RngState>,
    pub params: BTreeMap<String, ParamRecord>,
    #[serde(default)]
    pub checksum: String,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config_hash: config_hash.into(),
            meta: BTreeMap::new(),
            rng: None,
            params: BTreeMap::new(),
            checksum: String::new(),
        }
    }

    /// Adds every entry of `store` under `"{prefix}/{name}"`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for e in store.entries() {
            self.params.insert(
                format!("{prefix}/{}", e.name),
                ParamRecord { shape: e.value.shape().to_vec(), values: e.value.data().to_vec() },
            );
        }
    }

    /// Overwrites every entry of `store` from the records under `prefix`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let key = format!("{prefix}/{name}");
            let rec = self.params.get(&key).ok_or(CheckpointError::Missing(key.clone()))?;
            let expected = store.value(id).shape().to_vec();
            if rec.shape != expected {
                return Err(CheckpointError::Shape { name: key, found: rec.shape.clone(), expected });
            }
            let arr = Array::new(rec.shape.clone(), rec.values.clone())
                .map_err(|_| CheckpointError::Shape { name: key, found: rec.shape.clone(), expected })?;
            store.set_value(id, arr).expect("shape checked above");
        }
        Ok(())
    }

    fn digest(&self) -> String {
        let mut unsigned = self.clone();
        unsigned.checksum = String::new();
        let bytes = serde_json::to_vec(&unsigned).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        let mut signed = self.clone();
        signed.checksum = self.digest();
        serde_json::to_string(&signed).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(CheckpointError::Format(ck.format));
        }
        if ck.version != VERSION {
            return Err(CheckpointError::Version { found: ck.version, expected: VERSION });
        }
        if ck.digest() != ck.checksum {
            return Err(CheckpointError::Checksum);
        }
        Ok(ck)
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn expect_config(&self, hash: &str) -> Result<(), CheckpointError> {
        if self.config_hash != hash {
            return Err(CheckpointError::ConfigMismatch {
                found: self.config_hash.clone(),
                expected: hash.to_string(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngCore, SeedableRng};

    use super::*;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.init_uniform("a", &[3, 4], 3, &mut rng).unwrap();
        s.init_uniform("b", &[5], 1, &mut rng).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let store = random_store(1);
        let mut ck = Checkpoint::new("cfg");
        ck.add_store("net", &store);
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        let mut loaded = random_store(2);
        back.load_store("net", &mut loaded).unwrap();
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn tampering_detected() {
        let mut ck = Checkpoint::new("cfg");
        ck.add_store("net", &random_store(1));
        let text = ck.to_json();
        let needle = "\"values\":[";
        let at = text.find(needle).unwrap() + needle.len();
        let mut tampered = text.clone();
        tampered.insert_str(at, "1.0,");
        // Keep the shape consistent so only the checksum can catch it.
        let tampered = tampered.replacen("[3,4]", "[13]", 1);
        assert!(matches!(Checkpoint::from_json(&tampered), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn version_mismatch() {
        let mut ck = Checkpoint::new("cfg");
        ck.version = 99;
        let text = serde_json::to_string(&ck).unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(CheckpointError::Version { found: 99, .. })));
    }

    #[test]
    fn rng_state_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..17 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }
}
