//! Clip directory format: `clip.meta.json` plus raw little-endian `f32`
//! arrays (`frames.f32`, `audio.f32`, `phase.f32`) in row-major order.
//! Generated rollouts use the same layout minus the phase file, so metrics
//! consume either source identically.
//!
//! Readers validate every declared shape against the actual byte length
//! before touching the data; the meta parser is a fuzz entry point.

use crate::error::{Error, Result};
use crate::world::{Clip, CorruptionLabel, WorldConfig};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const META_FILE: &str = "clip.meta.json";
pub const ROLLOUT_META_FILE: &str = "rollout.meta.json";
pub const FRAMES_FILE: &str = "frames.f32";
pub const AUDIO_FILE: &str = "audio.f32";
pub const PHASE_FILE: &str = "phase.f32";

/// Upper bound on any single declared dimension; rejects absurd shapes
/// before allocation.
const MAX_DIM: usize = 1 << 24;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipMeta {
    pub config: WorldConfig,
    pub seed: u64,
    pub frames: usize,
    pub clip_id: String,
    pub corruption: CorruptionLabel,
    pub frames_shape: [usize; 3],
    pub audio_shape: [usize; 2],
    /// Present for ground-truth clips, absent for generated rollouts.
    pub phase_shape: Option<[usize; 1]>,
}

impl ClipMeta {
    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.frames_shape;
        let [ta, da] = self.audio_shape;
        if t == 0 || h == 0 || w == 0 || da == 0 {
            return Err(Error::ConfigInvalid("clip meta declares empty shape".into()));
        }
        if t > MAX_DIM || h > MAX_DIM || w > MAX_DIM || da > MAX_DIM {
            return Err(Error::ConfigInvalid("clip meta shape too large".into()));
        }
        // Product must fit without overflow.
        t.checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::ConfigInvalid("clip meta shape overflow".into()))?;
        if t != self.frames || ta != self.frames {
            return Err(Error::ConfigInvalid(format!(
                "clip meta frame counts disagree: {t} vs {ta} vs {}",
                self.frames
            )));
        }
        if let Some([tp]) = self.phase_shape {
            if tp != self.frames {
                return Err(Error::ConfigInvalid(
                    "phase length disagrees with frame count".into(),
                ));
            }
        }
        if h != self.config.height || w != self.config.width {
            return Err(Error::ConfigInvalid(
                "frame shape disagrees with world config".into(),
            ));
        }
        if da != self.config.audio_dim {
            return Err(Error::ConfigInvalid(
                "audio dim disagrees with world config".into(),
            ));
        }
        Ok(())
    }
}

/// Parse and validate a meta file from raw bytes.
pub fn parse_clip_meta(bytes: &[u8]) -> Result<ClipMeta> {
    let meta: ClipMeta = serde_json::from_slice(bytes)?;
    meta.validate()?;
    Ok(meta)
}

/// Write a raw little-endian f32 file.
pub fn write_f32_file(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in values {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Read a raw f32 file and require exactly `expected` values.
pub fn read_f32_file(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_f32_exact(&bytes, expected).map_err(|e| {
        Error::ConfigInvalid(format!("{}: {e}", path.display()))
    })
}

/// Decode little-endian f32 values, requiring an exact count.
pub fn decode_f32_exact(bytes: &[u8], expected: usize) -> std::result::Result<Vec<f64>, String> {
    if bytes.len() % 4 != 0 {
        return Err(format!("byte length {} not a multiple of 4", bytes.len()));
    }
    let n = bytes.len() / 4;
    if n != expected {
        return Err(format!("expected {expected} f32 values, file holds {n}"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Persist a ground-truth clip to a directory.
pub fn save_clip(dir: &Path, clip: &Clip, config: &WorldConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = clip.frames.dim();
    let (ta, da) = clip.audio.dim();
    let meta = ClipMeta {
        config: *config,
        seed,
        frames: t,
        clip_id: clip.clip_id.clone(),
        corruption: clip.corruption,
        frames_shape: [t, h, w],
        audio_shape: [ta, da],
        phase_shape: Some([t]),
    };
    meta.validate()?;
    std::fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    write_f32_file(&dir.join(FRAMES_FILE), clip.frames.iter().copied())?;
    write_f32_file(&dir.join(AUDIO_FILE), clip.audio.iter().copied())?;
    write_f32_file(
        &dir.join(PHASE_FILE),
        clip.phase_oracle().iter().copied(),
    )?;
    Ok(())
}

/// A clip loaded from disk. Phase is optional: generated rollouts have none.
#[derive(Debug, Clone)]
pub struct StoredClip {
    pub meta: ClipMeta,
    pub frames: Array3<f64>,
    pub audio: Array2<f64>,
    pub phase: Option<Array1<f64>>,
}

/// Load a clip directory, validating all shapes against file sizes.
pub fn load_clip(dir: &Path) -> Result<StoredClip> {
    let meta_path = if dir.join(META_FILE).exists() {
        dir.join(META_FILE)
    } else {
        dir.join(ROLLOUT_META_FILE)
    };
    let meta = parse_clip_meta(&std::fs::read(meta_path)?)?;
    let [t, h, w] = meta.frames_shape;
    let [ta, da] = meta.audio_shape;
    let frames = read_f32_file(&dir.join(FRAMES_FILE), t * h * w)?;
    let frames = Array3::from_shape_vec((t, h, w), frames).expect("checked shape");
    let audio = read_f32_file(&dir.join(AUDIO_FILE), ta * da)?;
    let audio = Array2::from_shape_vec((ta, da), audio).expect("checked shape");
    let phase = match meta.phase_shape {
        Some([tp]) => {
            let v = read_f32_file(&dir.join(PHASE_FILE), tp)?;
            Some(Array1::from_vec(v))
        }
        None => None,
    };
    Ok(StoredClip {
        meta,
        frames,
        audio,
        phase,
    })
}

/// Persist generated rollout frames in the clip layout (phase omitted).
pub fn save_rollout_frames(
    dir: &Path,
    frames: &Array3<f64>,
    audio: &Array2<f64>,
    config: &WorldConfig,
    seed: u64,
    id: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = frames.dim();
    let (ta, da) = audio.dim();
    let meta = ClipMeta {
        config: *config,
        seed,
        frames: t,
        clip_id: id.to_string(),
        corruption: CorruptionLabel::None,
        frames_shape: [t, h, w],
        audio_shape: [ta, da],
        phase_shape: None,
    };
    meta.validate()?;
    std::fs::write(
        dir.join(ROLLOUT_META_FILE),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    write_f32_file(&dir.join(FRAMES_FILE), frames.iter().copied())?;
    write_f32_file(&dir.join(AUDIO_FILE), audio.iter().copied())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_clip, generate_identity};

    #[test]
    fn round_trip_clip_directory() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig::default();
        let identity = generate_identity(&config, 1);
        let clip = generate_clip(&config, &identity, 17, 4);
        save_clip(dir.path(), &clip, &config, 4).unwrap();
        let loaded = load_clip(dir.path()).unwrap();
        assert_eq!(loaded.meta.clip_id, clip.clip_id);
        assert_eq!(loaded.frames.dim(), clip.frames.dim());
        // f32 round trip: 1e-6 relative on unit-scale values.
        let err = loaded
            .frames
            .iter()
            .zip(clip.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
        assert!(loaded.phase.is_some());
    }

    #[test]
    fn meta_validation_rejects_mismatches() {
        let config = WorldConfig::default();
        let meta = ClipMeta {
            config,
            seed: 0,
            frames: 17,
            clip_id: "x".into(),
            corruption: CorruptionLabel::None,
            frames_shape: [17, 16, 16],
            audio_shape: [16, 4], // disagrees with frames
            phase_shape: None,
        };
        assert!(meta.validate().is_err());
        let bad_json = b"{\"not\": \"a meta\"}";
        assert!(parse_clip_meta(bad_json).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig::default();
        let identity = generate_identity(&config, 2);
        let clip = generate_clip(&config, &identity, 17, 5);
        save_clip(dir.path(), &clip, &config, 5).unwrap();
        // Truncate frames.f32.
        let frames_path = dir.path().join(FRAMES_FILE);
        let bytes = std::fs::read(&frames_path).unwrap();
        std::fs::write(&frames_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_clip(dir.path()).is_err());
    }
}
