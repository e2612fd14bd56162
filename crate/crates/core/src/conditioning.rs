//! Conditioning signals: per-latent audio features, identity conditions via
//! temporal-replicate-then-encode (TRE) or encode-then-repeat (ETR), and
//! continuity references with provenance tracking.

use crate::codec::{self, CodecConfig, LatentChunk};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

/// Audio condition aligned to latent positions. Latent 0 maps to frame 0;
/// body latent j maps to frames `1+(j-1)s ..= js`; each row is the mean of
/// the mapped audio rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioCondition {
    pub per_latent: Array2<f64>,
    /// Inclusive source frame range per latent index.
    pub alignment: Vec<(usize, usize)>,
}

pub fn build_audio_condition(
    audio: &Array2<f64>,
    codec_config: &CodecConfig,
) -> Result<AudioCondition> {
    let (t, d_a) = audio.dim();
    if t == 0 || (t - 1) % codec_config.temporal_stride != 0 {
        return Err(Error::AudioShape(format!(
            "audio length {t} violates (T-1) % {} == 0",
            codec_config.temporal_stride
        )));
    }
    let s = codec_config.temporal_stride;
    let l = codec_config.latent_len(t);
    let mut per_latent = Array2::zeros((l, d_a));
    let mut alignment = Vec::with_capacity(l);
    per_latent.row_mut(0).assign(&audio.row(0));
    alignment.push((0, 0));
    for j in 1..l {
        let start = 1 + (j - 1) * s;
        let end = j * s;
        let mut acc = ndarray::Array1::zeros(d_a);
        for f in start..=end {
            acc = acc + audio.row(f);
        }
        acc /= s as f64;
        per_latent.row_mut(j).assign(&acc);
        alignment.push((start, end));
    }
    Ok(AudioCondition {
        per_latent,
        alignment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityScheme {
    /// Replicate the reference image into a pseudo-video, then encode it, so
    /// body latents carry the codec's temporal structure.
    Tre,
    /// Encode the image once through the spatial-only path and repeat the
    /// latent along time.
    Etr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCondition {
    pub latents: Array4<f64>,
    pub scheme: IdentityScheme,
}

/// TRE: encode a pseudo-video of `frames` identical copies of the reference.
pub fn build_tre(
    codec_config: &CodecConfig,
    identity_ref: &Array2<f64>,
    frames: usize,
) -> Result<IdentityCondition> {
    let (h, w) = identity_ref.dim();
    codec_config.check_frames(frames, h, w)?;
    let mut video = Array3::zeros((frames, h, w));
    for t in 0..frames {
        video
            .index_axis_mut(ndarray::Axis(0), t)
            .assign(identity_ref);
    }
    let lat = codec::encode(codec_config, &video)?;
    Ok(IdentityCondition {
        latents: lat.data,
        scheme: IdentityScheme::Tre,
    })
}

/// ETR: spatial-only encoding of the reference repeated `latent_len` times.
pub fn build_etr(
    codec_config: &CodecConfig,
    identity_ref: &Array2<f64>,
    latent_len: usize,
) -> Result<IdentityCondition> {
    let single = codec::encode_single_frame(codec_config, identity_ref)?;
    let (h, w, c) = single.dim();
    let mut latents = Array4::zeros((latent_len, h, w, c));
    for l in 0..latent_len {
        latents.index_axis_mut(ndarray::Axis(0), l).assign(&single);
    }
    Ok(IdentityCondition {
        latents,
        scheme: IdentityScheme::Etr,
    })
}

pub fn build_identity(
    codec_config: &CodecConfig,
    identity_ref: &Array2<f64>,
    frames: usize,
    scheme: IdentityScheme,
) -> Result<IdentityCondition> {
    match scheme {
        IdentityScheme::Tre => build_tre(codec_config, identity_ref, frames),
        IdentityScheme::Etr => build_etr(
            codec_config,
            identity_ref,
            codec_config.latent_len(frames),
        ),
    }
}

/// Where a continuity reference came from. Set once at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Built from ground-truth frames.
    Gt,
    /// Built from decoded model output.
    Gen,
    /// Built from replicated reference images (first-chunk convention).
    Ref,
}

/// Continuity reference: the encoded tail window of the preceding chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityRef {
    latents: Array4<f64>,
    provenance: Provenance,
}

impl ContinuityRef {
    /// Direct construction from raw latents. Prefer [`build_continuity`];
    /// this exists for micro-model harnesses that bypass the codec.
    pub fn from_latents(latents: Array4<f64>, provenance: Provenance) -> ContinuityRef {
        ContinuityRef {
            latents,
            provenance,
        }
    }

    pub fn latents(&self) -> &Array4<f64> {
        &self.latents
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn latent_len(&self) -> usize {
        self.latents.dim().0
    }
}

/// Source material for a continuity reference.
pub enum ContinuitySource<'a> {
    /// Ground-truth frames of the preceding chunk (full chunk; the tail
    /// `tau` frames are used).
    GtFrames(&'a Array3<f64>),
    /// Generated latents of the preceding chunk plus their frame count.
    GeneratedLatent(&'a LatentChunk, usize),
    /// The identity reference image (first-chunk convention).
    RefImage(&'a Array2<f64>),
}

pub fn build_continuity(
    codec_config: &CodecConfig,
    source: ContinuitySource<'_>,
    tau: usize,
) -> Result<ContinuityRef> {
    match source {
        ContinuitySource::GtFrames(frames) => {
            let t = frames.dim().0;
            codec_config.check_tau(tau, t)?;
            let tail = frames.slice(ndarray::s![t - tau.., .., ..]).to_owned();
            let lat = codec::encode(codec_config, &tail)?;
            Ok(ContinuityRef {
                latents: lat.data,
                provenance: Provenance::Gt,
            })
        }
        ContinuitySource::GeneratedLatent(latent, frames) => {
            let lat = codec::decode_then_reencode_tail(codec_config, latent, frames, tau)?;
            Ok(ContinuityRef {
                latents: lat.data,
                provenance: Provenance::Gen,
            })
        }
        ContinuitySource::RefImage(image) => {
            let (h, w) = image.dim();
            codec_config.check_tau(tau, tau)?;
            codec_config.check_frames(tau, h, w)?;
            let mut video = Array3::zeros((tau, h, w));
            for t in 0..tau {
                video.index_axis_mut(ndarray::Axis(0), t).assign(image);
            }
            let lat = codec::encode(codec_config, &video)?;
            Ok(ContinuityRef {
                latents: lat.data,
                provenance: Provenance::Ref,
            })
        }
    }
}

/// Everything a velocity network is conditioned on for one chunk.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub audio: AudioCondition,
    pub identity: IdentityCondition,
    pub continuity: ContinuityRef,
}

impl ConditioningBundle {
    /// Same audio and identity, different continuity reference.
    pub fn with_continuity(&self, continuity: ContinuityRef) -> ConditioningBundle {
        ConditioningBundle {
            audio: self.audio.clone(),
            identity: self.identity.clone(),
            continuity,
        }
    }
}

/// Channel-wise concatenation `[L, h, w, 2C]`, noisy channels first.
pub fn assemble_input(noisy: &LatentChunk, identity: &IdentityCondition) -> Array4<f64> {
    let (l, h, w, c) = noisy.data.dim();
    assert_eq!(
        identity.latents.dim(),
        (l, h, w, c),
        "identity condition shape mismatch"
    );
    let mut out = Array4::zeros((l, h, w, 2 * c));
    out.slice_mut(ndarray::s![.., .., .., 0..c]).assign(&noisy.data);
    out.slice_mut(ndarray::s![.., .., .., c..]).assign(&identity.latents);
    out
}
