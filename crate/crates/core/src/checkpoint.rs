//! Versioned, checksummed checkpoints of a run between stages.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length and
//! the SHA-256 of the payload (all little-endian), then a JSON payload.
//! The encoder and the stream are not stored; both are rebuilt from the
//! configuration and checked against recorded fingerprints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamWState, ParamStore};
use crate::backbone::{ClassEmbeddingTable, FrozenEncoder, LogitHead};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{build_stream, Session, StageRecord};
use crate::model::{Method, ModelState};
use crate::moe::{ExpertPool, GatingRule, RouterBank};
use crate::pges::{threshold_from_sets, TaskPrototypeSet};
use crate::trainer::TaskTrace;

pub const MAGIC: &[u8; 8] = b"DIMOECKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

/// Everything in a [`ModelState`] except the encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub embeddings: ClassEmbeddingTable,
    pub head: LogitHead,
    pub store: ParamStore,
    pub pool: ExpertPool,
    pub routers: RouterBank,
    pub prototypes: Vec<TaskPrototypeSet>,
    /// `None` while no prototypes exist (every sample falls back).
    pub threshold: Option<f64>,
    pub optimizer: AdamWState,
    pub gating: GatingRule,
    pub method: Method,
    pub completed: Vec<usize>,
    pub current: Option<usize>,
}

impl ModelSnapshot {
    pub fn capture(state: &ModelState) -> Self {
        Self {
            embeddings: state.embeddings.clone(),
            head: state.head,
            store: state.store.clone(),
            pool: state.pool.clone(),
            routers: state.routers.clone(),
            prototypes: state.prototypes.clone(),
            threshold: state.threshold.is_finite().then_some(state.threshold),
            optimizer: state.optimizer.clone(),
            gating: state.gating,
            method: state.method,
            completed: state.completed.clone(),
            current: state.current,
        }
    }

    pub fn restore(self, encoder: FrozenEncoder) -> Result<ModelState> {
        let mut store = self.store;
        store.restore_grad_buffers();
        let threshold = self.threshold.unwrap_or(f64::INFINITY);
        if threshold != threshold_from_sets(&self.prototypes) {
            return Err(Error::Integrity(
                "recorded threshold disagrees with the prototype banks".into(),
            ));
        }
        let state = ModelState {
            encoder,
            embeddings: self.embeddings,
            head: self.head,
            store,
            pool: self.pool,
            routers: self.routers,
            prototypes: self.prototypes,
            threshold,
            optimizer: self.optimizer,
            gating: self.gating,
            method: self.method,
            completed: self.completed,
            current: self.current,
        };
        state.check_consistency()?;
        Ok(state)
    }
}

/// Random streams are derived from the master seed per purpose and task,
/// so the next task index is the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngRecord {
    pub master_seed: u64,
    pub next_stage: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub encoder_fingerprint: String,
    pub rng: RngRecord,
    pub model: ModelSnapshot,
    pub stages: Vec<StageRecord>,
    pub traces: Vec<TaskTrace>,
}

impl Checkpoint {
    pub fn capture(session: &Session) -> Self {
        Self {
            config: session.config.clone(),
            config_hash: session.config.hash(),
            encoder_fingerprint: session.state.encoder.fingerprint(),
            rng: RngRecord {
                master_seed: session.config.seed,
                next_stage: session.stages.len(),
            },
            model: ModelSnapshot::capture(&session.state),
            stages: session.stages.clone(),
            traces: session.traces.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self)?;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Integrity(format!(
                "checkpoint truncated: {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(Error::Integrity(format!(
                "checkpoint payload is {} bytes, header says {len}",
                payload.len()
            )));
        }
        if Sha256::digest(payload).as_slice() != &bytes[20..52] {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut ckpt: Self = serde_json::from_slice(payload)
            .map_err(|e| Error::Integrity(format!("checkpoint payload: {e}")))?;
        ckpt.config = ckpt.config.resolved();
        if ckpt.config_hash != ckpt.config.hash() {
            return Err(Error::Integrity(
                "stored config hash does not match the config".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so a crash never leaves a half-written file
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the session, regenerating the encoder and the stream.
    pub fn into_session(self) -> Result<Session> {
        let encoder = FrozenEncoder::new(self.config.encoder.clone())?;
        if encoder.fingerprint() != self.encoder_fingerprint {
            return Err(Error::Integrity(
                "rebuilt encoder differs from the checkpointed one".into(),
            ));
        }
        if self.rng.next_stage != self.stages.len() || self.traces.len() != self.stages.len() {
            return Err(Error::Integrity("stage records are inconsistent".into()));
        }
        let stream = build_stream(&self.config)?;
        let mut session = Session::with_stream(self.config, stream)?;
        session.state = self.model.restore(encoder)?;
        session.stages = self.stages;
        session.traces = self.traces;
        Ok(session)
    }

    /// Resumes only under the same configuration.
    pub fn resume(self, config: &ExperimentConfig) -> Result<Session> {
        let expected = config.clone().resolved().hash();
        if self.config_hash != expected {
            return Err(Error::Config(format!(
                "checkpoint was written under config {} but the current config hashes to {}",
                &self.config_hash[..12],
                &expected[..12]
            )));
        }
        self.into_session()
    }
}

/// Re-evaluates a checkpoint and compares with the evaluation recorded when
/// it was written; any difference is an error.
pub fn verify(ckpt: Checkpoint) -> Result<Session> {
    let session = ckpt.into_session()?;
    let Some(last) = session.stages.last() else {
        return Ok(session);
    };
    let now = session.evaluate_now()?;
    if now != last.evals {
        return Err(Error::Integrity(format!(
            "evaluation after stage {} does not reproduce",
            last.stage
        )));
    }
    if session.state.parameter_hashes()? != last.parameter_hashes {
        return Err(Error::Integrity("parameter hashes do not reproduce".into()));
    }
    Ok(session)
}

pub fn stage_path(dir: &Path, stage: usize) -> std::path::PathBuf {
    dir.join(format!("stage_{stage:02}.ckpt"))
}

/// The checkpoint with the highest stage number in `dir`, if any.
pub fn latest_in(dir: &Path) -> Result<Option<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, std::path::PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let stage = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("stage_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(s) = stage {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
