//! Checkpoint format: a UTF-8 text manifest, a `---` separator line, then a
//! payload of concatenated raw little-endian f32 tensors.
//!
//! ```text
//! talkflow-checkpoint v1
//! role: teacher
//! step: 3000
//! config_hash: 9f3a...
//! frozen: true
//! arch: {"latent_h":8, ...}
//! tensor: embed.w f32 2048x64 0
//! ...
//! payload_bytes: 1179648
//! ---
//! <payload>
//! ```
//!
//! Offsets are payload-relative byte positions. The parser validates the
//! magic, every field, and that tensor extents are in-bounds, non-overlapping
//! and in order before reading any data; the first offending tensor is named
//! in the error. This parser is a fuzz entry point.

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelParams, Role};
use ndarray::Array2;
use std::path::Path;

const MAGIC: &str = "talkflow-checkpoint v1";
/// Upper bound on a single tensor's element count.
const MAX_TENSOR_ELEMS: usize = 1 << 28;

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub params: ModelParams,
    pub step: usize,
    pub config_hash: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(msg.into())
}

/// Serialize parameters to checkpoint bytes (f64 tensors stored as f32).
pub fn checkpoint_bytes(params: &ModelParams, step: usize, config_hash: &str) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("role: {}\n", params.role()));
    header.push_str(&format!("step: {step}\n"));
    header.push_str(&format!("config_hash: {config_hash}\n"));
    header.push_str(&format!("frozen: {}\n", params.is_frozen()));
    header.push_str(&format!(
        "arch: {}\n",
        serde_json::to_string(params.arch()).expect("arch serializes")
    ));
    let mut offset = 0usize;
    for (name, m) in params.tensors() {
        let (r, c) = m.dim();
        header.push_str(&format!("tensor: {name} f32 {r}x{c} {offset}\n"));
        offset += r * c * 4;
    }
    header.push_str(&format!("payload_bytes: {offset}\n"));
    header.push_str("---\n");

    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, m) in params.tensors() {
        for v in m.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    step: usize,
    config_hash: &str,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, checkpoint_bytes(params, step, config_hash))?;
    Ok(())
}

fn parse_field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(": "))
        .ok_or_else(|| corrupt(format!("expected `{key}: ...`, got `{line}`")))
}

fn parse_tensor_line(line: &str) -> Result<TensorEntry> {
    let rest = parse_field(line, "tensor")?;
    let parts: Vec<&str> = rest.split(' ').collect();
    if parts.len() != 4 {
        return Err(corrupt(format!("malformed tensor line `{line}`")));
    }
    let name = parts[0].to_string();
    if parts[1] != "f32" {
        return Err(corrupt(format!(
            "tensor {name}: unsupported dtype {}",
            parts[1]
        )));
    }
    let (r, c) = parts[2]
        .split_once('x')
        .ok_or_else(|| corrupt(format!("tensor {name}: bad shape {}", parts[2])))?;
    let rows: usize = r
        .parse()
        .map_err(|_| corrupt(format!("tensor {name}: bad rows {r}")))?;
    let cols: usize = c
        .parse()
        .map_err(|_| corrupt(format!("tensor {name}: bad cols {c}")))?;
    if rows == 0 || cols == 0 {
        return Err(corrupt(format!("tensor {name}: empty shape")));
    }
    if rows.saturating_mul(cols) > MAX_TENSOR_ELEMS {
        return Err(corrupt(format!("tensor {name}: shape too large")));
    }
    let offset: usize = parts[3]
        .parse()
        .map_err(|_| corrupt(format!("tensor {name}: bad offset {}", parts[3])))?;
    Ok(TensorEntry {
        name,
        rows,
        cols,
        offset,
    })
}

/// Parse checkpoint bytes into parameters.
pub fn parse_checkpoint_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    // Split header and payload on the separator line.
    let sep = b"\n---\n";
    let sep_pos = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| corrupt("missing `---` separator"))?;
    let header = std::str::from_utf8(&bytes[..sep_pos])
        .map_err(|e| corrupt(format!("header is not UTF-8: {e}")))?;
    let payload = &bytes[sep_pos + sep.len()..];

    let mut lines = header.lines();
    let magic = lines.next().ok_or_else(|| corrupt("empty header"))?;
    if magic != MAGIC {
        return Err(corrupt(format!("bad magic `{magic}`")));
    }
    let role_s = parse_field(lines.next().ok_or_else(|| corrupt("missing role"))?, "role")?;
    let role = match role_s {
        "teacher" => Role::Teacher,
        "student" => Role::Student,
        "critic" => Role::Critic,
        other => return Err(corrupt(format!("unknown role `{other}`"))),
    };
    let step: usize = parse_field(lines.next().ok_or_else(|| corrupt("missing step"))?, "step")?
        .parse()
        .map_err(|_| corrupt("bad step"))?;
    let config_hash = parse_field(
        lines.next().ok_or_else(|| corrupt("missing config_hash"))?,
        "config_hash",
    )?
    .to_string();
    let frozen: bool = parse_field(
        lines.next().ok_or_else(|| corrupt("missing frozen"))?,
        "frozen",
    )?
    .parse()
    .map_err(|_| corrupt("bad frozen flag"))?;
    let arch: ArchConfig = serde_json::from_str(parse_field(
        lines.next().ok_or_else(|| corrupt("missing arch"))?,
        "arch",
    )?)
    .map_err(|e| corrupt(format!("bad arch json: {e}")))?;

    let mut entries = Vec::new();
    let mut payload_bytes: Option<usize> = None;
    for line in lines {
        if line.starts_with("tensor: ") {
            entries.push(parse_tensor_line(line)?);
        } else if line.starts_with("payload_bytes: ") {
            payload_bytes = Some(
                parse_field(line, "payload_bytes")?
                    .parse()
                    .map_err(|_| corrupt("bad payload_bytes"))?,
            );
        } else {
            return Err(corrupt(format!("unexpected header line `{line}`")));
        }
    }
    let payload_bytes = payload_bytes.ok_or_else(|| corrupt("missing payload_bytes"))?;
    if payload.len() != payload_bytes {
        return Err(corrupt(format!(
            "payload holds {} bytes, header declares {payload_bytes}",
            payload.len()
        )));
    }

    // Offsets must be in order, non-overlapping, and in bounds.
    let mut cursor = 0usize;
    for e in &entries {
        let size = e.rows * e.cols * 4;
        if e.offset != cursor {
            return Err(corrupt(format!(
                "tensor {}: offset {} overlaps or leaves a gap (expected {cursor})",
                e.name, e.offset
            )));
        }
        let end = e.offset.checked_add(size).ok_or_else(|| {
            corrupt(format!("tensor {}: extent overflows", e.name))
        })?;
        if end > payload.len() {
            return Err(corrupt(format!(
                "tensor {}: extent {end} exceeds payload {}",
                e.name,
                payload.len()
            )));
        }
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(corrupt(format!(
            "payload has {} trailing bytes after the last tensor",
            payload.len() - cursor
        )));
    }

    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let size = e.rows * e.cols * 4;
        let raw = &payload[e.offset..e.offset + size];
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Array2::from_shape_vec((e.rows, e.cols), data).expect("sized above");
        tensors.push((e.name.clone(), m));
    }

    let mut params = ModelParams::from_tensors(arch, role, false, tensors)?;
    if frozen {
        params.freeze();
    }
    if !params.all_finite() {
        return Err(corrupt("checkpoint holds non-finite values"));
    }
    Ok(LoadedCheckpoint {
        params,
        step,
        config_hash,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    parse_checkpoint_bytes(&std::fs::read(path)?)
}

/// Strict load: refuse a checkpoint whose config hash disagrees.
pub fn load_checkpoint_strict(path: &Path, expected_hash: &str) -> Result<LoadedCheckpoint> {
    let loaded = load_checkpoint(path)?;
    if loaded.config_hash != expected_hash {
        return Err(corrupt(format!(
            "config hash mismatch: checkpoint {} vs run {expected_hash}",
            loaded.config_hash
        )));
    }
    Ok(loaded)
}
