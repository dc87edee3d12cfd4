use super::config::ModelConfig;
use super::model::RatingModel;
use super::trainer::EpochRecord;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "uirate-checkpoint";

/// One tensor: its shape and the little-endian f64 bytes, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightBlob {
    pub shape: Vec<usize>,
    pub data: String,
}

impl WeightBlob {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("bad weight encoding: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint("weight blob is not a whole number of f64 values".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// u128 word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    pub weights: BTreeMap<String, WeightBlob>,
}

impl Checkpoint {
    pub fn from_model(model: &RatingModel, epoch: usize, rng: &ChaCha8Rng, history: Vec<EpochRecord>) -> Self {
        Self {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            vocab: model.vocab().clone(),
            epoch,
            rng: RngState::capture(rng),
            history,
            weights: model
                .params
                .iter()
                .map(|(k, t)| (k.to_string(), WeightBlob::encode(t)))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<RatingModel> {
        let mut params = ParamSet::new();
        for (k, blob) in &self.weights {
            params.insert(k.clone(), blob.decode()?);
        }
        RatingModel::from_parts(&self.config, self.vocab.clone(), params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse and validate: the format tag and version are checked before the
    /// body, and the weight key set is checked against the architecture.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(s)?;
        let format = raw.get("format").and_then(|v| v.as_str());
        if format != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("not a checkpoint (format tag {format:?})")));
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {other:?} (this build reads {CHECKPOINT_VERSION})"
                )))
            }
        }
        let ck: Checkpoint =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        ck.to_model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
