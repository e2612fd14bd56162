//! Experiment configuration: a single JSON document with dotted-path
//! command-line overrides (`--set distill.mode=asymmetric`). The resolved
//! document is validated across modules before any work starts and hashed
//! into checkpoints for provenance.

use crate::codec::CodecConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::rollout::RolloutConfig;
use crate::teacher::TeacherConfig;
use crate::world::WorldConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricsOptions {
    /// Evaluate drift curves every `stride` chunks.
    pub stride: usize,
    /// Rollout length for `eval` and `ablate`, in chunks.
    pub eval_chunks: usize,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            stride: 1,
            eval_chunks: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub codec: CodecConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub rollout: RolloutConfig,
    pub metrics: MetricsOptions,
    pub seed: u64,
    /// Clips written by `gen-data`.
    pub corpus_clips: usize,
    /// Fraction of `gen-data` clips corrupted (round-robin over modes).
    pub corpus_corrupt_fraction: f64,
    pub thresholds: crate::corpus::Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            codec: CodecConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            rollout: RolloutConfig::default(),
            metrics: MetricsOptions::default(),
            seed: 0,
            corpus_clips: 20,
            corpus_corrupt_fraction: 0.5,
            thresholds: crate::corpus::Thresholds::default(),
        }
    }
}

impl ExperimentConfig {
    /// Cross-module invariants, checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.teacher.validate(&self.codec)?;
        self.distill.validate(&self.codec)?;
        self.rollout.validate(&self.codec)?;
        self.thresholds.validate()?;
        if self.metrics.stride == 0 || self.metrics.eval_chunks == 0 {
            return Err(Error::ConfigInvalid(
                "metrics stride and eval_chunks must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.corpus_corrupt_fraction) {
            return Err(Error::ConfigInvalid(
                "corpus_corrupt_fraction outside [0,1]".into(),
            ));
        }
        let t = self.teacher.chunk_frames;
        if self.distill.chunk_frames != t || self.rollout.chunk_frames != t {
            return Err(Error::ConfigInvalid(format!(
                "chunk_frames disagree: teacher {t}, distill {}, rollout {}",
                self.distill.chunk_frames, self.rollout.chunk_frames
            )));
        }
        if self.distill.tau != self.teacher.tau || self.rollout.tau != self.teacher.tau {
            return Err(Error::ConfigInvalid(format!(
                "tau disagrees: teacher {}, distill {}, rollout {}",
                self.teacher.tau, self.distill.tau, self.rollout.tau
            )));
        }
        if self.world.height % 8 != 0 || self.world.width % 8 != 0 {
            return Err(Error::ConfigInvalid(
                "frame dims must be multiples of 8 for hashing and pooling".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the canonical JSON form; stable provenance tag for
    /// checkpoints and run directories.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Parse a config document from raw JSON bytes (fuzz entry point).
pub fn parse_config_bytes(bytes: &[u8]) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_slice(bytes)?;
    config.validate()?;
    Ok(config)
}

/// Apply one `key=value` dotted-path override onto a JSON document.
/// The value parses as JSON when possible and falls back to a string, so
/// `--set distill.mode=asymmetric` and `--set seed=7` both work.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw_value) = assignment.split_once('=').ok_or_else(|| {
        Error::ConfigInvalid(format!("override `{assignment}` is not KEY=VALUE"))
    })?;
    if path.is_empty() {
        return Err(Error::ConfigInvalid("override has an empty key".into()));
    }
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));

    let mut cursor = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::ConfigInvalid(format!(
                "override `{assignment}` has an empty path segment"
            )));
        }
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::ConfigInvalid(format!(
                "override path `{path}` descends into a non-object at `{seg}`"
            ))
        })?;
        if i == segments.len() - 1 {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cursor = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Load a config file (or the default when `path` is `None`), apply
/// overrides, validate.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc = match path {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    for assignment in overrides {
        apply_override(&mut doc, assignment)?;
    }
    let config: ExperimentConfig = serde_json::from_value(doc)?;
    config.validate()?;
    Ok(config)
}
