//! Chunk-wise autoregressive inference: generate K chunks, decode each, and
//! thread continuity by decoding and re-encoding the tail window of the
//! previous chunk. No ground-truth frames are reachable from here; the only
//! inputs are the identity image and the audio stream.

use crate::codec::{self, CodecConfig, LatentChunk};
use crate::conditioning::{
    build_audio_condition, build_continuity, build_identity, ConditioningBundle,
    ContinuitySource, IdentityScheme, Provenance,
};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, Role};
use crate::util;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RolloutConfig {
    /// Number of chunks K.
    pub chunks: usize,
    /// Frames per chunk T.
    pub chunk_frames: usize,
    /// Denoising steps N.
    pub denoise_steps: usize,
    /// Continuity window tau.
    pub tau: usize,
    pub identity: IdentityScheme,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            chunks: 8,
            chunk_frames: 17,
            denoise_steps: 4,
            tau: 5,
            identity: IdentityScheme::Tre,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, codec_config: &CodecConfig) -> Result<()> {
        if self.chunks == 0 || self.denoise_steps == 0 {
            return Err(Error::ConfigInvalid(
                "rollout chunks and denoise_steps must be positive".into(),
            ));
        }
        codec_config.check_frames(self.chunk_frames, 2, 2)?;
        codec_config.check_tau(self.tau, self.chunk_frames)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Concatenated frames `[K*T, H, W]`; chunks do not overlap.
    pub frames: Array3<f64>,
    pub per_chunk_latents: Vec<LatentChunk>,
    pub chunk_wall_ms: Vec<f64>,
    pub kappa_provenances: Vec<Provenance>,
}

impl RolloutResult {
    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }
}

/// Per-chunk noise seed: fresh stream per (seed, chunk index).
pub fn chunk_noise_seed(seed: u64, chunk: usize) -> u64 {
    util::derive_seed(seed, &[0x2011a, chunk as u64])
}

/// Autoregressive rollout with any velocity network. Role is not checked;
/// use [`rollout`] for the deployment path.
pub fn rollout_with_params(
    params: &ModelParams,
    codec_config: &CodecConfig,
    identity_ref: &Array2<f64>,
    audio: &Array2<f64>,
    config: &RolloutConfig,
) -> Result<RolloutResult> {
    config.validate(codec_config)?;
    let (total_frames, _) = audio.dim();
    let k = config.chunks;
    let t = config.chunk_frames;
    if total_frames != k * t {
        return Err(Error::AudioShape(format!(
            "audio stream has {total_frames} rows, rollout needs {}",
            k * t
        )));
    }
    let (h, w) = identity_ref.dim();
    let identity = build_identity(codec_config, identity_ref, t, config.identity)?;
    let latent_len = codec_config.latent_len(t);
    let arch = params.arch();

    let mut frames = Array3::zeros((k * t, h, w));
    let mut latents: Vec<LatentChunk> = Vec::with_capacity(k);
    let mut wall = Vec::with_capacity(k);
    let mut provs = Vec::with_capacity(k);

    for chunk in 0..k {
        let started = std::time::Instant::now();
        let kappa = if chunk == 0 {
            build_continuity(
                codec_config,
                ContinuitySource::RefImage(identity_ref),
                config.tau,
            )
        } else {
            build_continuity(
                codec_config,
                ContinuitySource::GeneratedLatent(&latents[chunk - 1], t),
                config.tau,
            )
        }
        .map_err(|e| e.in_chunk(chunk))?;
        provs.push(kappa.provenance());

        let rows = audio.slice(ndarray::s![chunk * t..(chunk + 1) * t, ..]);
        let c_a = build_audio_condition(&rows.to_owned(), codec_config)
            .map_err(|e| e.in_chunk(chunk))?;
        let conds = ConditioningBundle {
            audio: c_a,
            identity: identity.clone(),
            continuity: kappa,
        };

        let mut rng = util::seeded_rng(chunk_noise_seed(config.seed, chunk), &[]);
        let z = model::sample_noise(arch, latent_len, &mut rng);
        let x_hat = model::euler_sample(params, &z, &conds, config.denoise_steps)
            .map_err(|e| e.in_chunk(chunk))?;
        let decoded =
            codec::decode(codec_config, &x_hat, t).map_err(|e| e.in_chunk(chunk))?;
        frames
            .slice_mut(ndarray::s![chunk * t..(chunk + 1) * t, .., ..])
            .assign(&decoded);
        latents.push(x_hat);
        wall.push(started.elapsed().as_secs_f64() * 1e3);
    }

    Ok(RolloutResult {
        frames,
        per_chunk_latents: latents,
        chunk_wall_ms: wall,
        kappa_provenances: provs,
    })
}

/// Deployment rollout: requires student-role parameters.
pub fn rollout(
    student: &ModelParams,
    codec_config: &CodecConfig,
    identity_ref: &Array2<f64>,
    audio: &Array2<f64>,
    config: &RolloutConfig,
) -> Result<RolloutResult> {
    if student.role() != Role::Student {
        return Err(Error::ConfigInvalid(format!(
            "rollout requires student-role parameters, got {}",
            student.role()
        )));
    }
    rollout_with_params(student, codec_config, identity_ref, audio, config)
}

/// Regenerate chunk `k` in isolation from its stored inputs; must reproduce
/// the in-loop chunk bitwise.
pub fn regenerate_chunk(
    params: &ModelParams,
    codec_config: &CodecConfig,
    identity_ref: &Array2<f64>,
    audio: &Array2<f64>,
    config: &RolloutConfig,
    result: &RolloutResult,
    chunk: usize,
) -> Result<LatentChunk> {
    let t = config.chunk_frames;
    let identity = build_identity(codec_config, identity_ref, t, config.identity)?;
    let kappa = if chunk == 0 {
        build_continuity(
            codec_config,
            ContinuitySource::RefImage(identity_ref),
            config.tau,
        )?
    } else {
        build_continuity(
            codec_config,
            ContinuitySource::GeneratedLatent(&result.per_chunk_latents[chunk - 1], t),
            config.tau,
        )?
    };
    let rows = audio.slice(ndarray::s![chunk * t..(chunk + 1) * t, ..]);
    let c_a = build_audio_condition(&rows.to_owned(), codec_config)?;
    let conds = ConditioningBundle {
        audio: c_a,
        identity,
        continuity: kappa,
    };
    let mut rng = util::seeded_rng(chunk_noise_seed(config.seed, chunk), &[]);
    let z = model::sample_noise(params.arch(), codec_config.latent_len(t), &mut rng);
    model::euler_sample(params, &z, &conds, config.denoise_steps)
}

/// Wall-clock frames per second over `measure_chunks` chunks, excluding one
/// warmup chunk.
pub fn measure_throughput(
    params: &ModelParams,
    codec_config: &CodecConfig,
    identity_ref: &Array2<f64>,
    audio: &Array2<f64>,
    config: &RolloutConfig,
    denoise_steps: usize,
) -> Result<f64> {
    let mut cfg = *config;
    cfg.denoise_steps = denoise_steps;
    assert!(cfg.chunks >= 5, "throughput measurement needs >= 5 chunks");

    // Warmup: one single-chunk rollout.
    let warm_cfg = RolloutConfig { chunks: 1, ..cfg };
    let warm_audio = audio.slice(ndarray::s![..cfg.chunk_frames, ..]).to_owned();
    rollout_with_params(params, codec_config, identity_ref, &warm_audio, &warm_cfg)?;

    let started = std::time::Instant::now();
    let result = rollout_with_params(params, codec_config, identity_ref, audio, &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    Ok(result.frame_count() as f64 / elapsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::model::{ArchConfig, ModelParams};
    use crate::world::{generate_clip, generate_identity, WorldConfig};

    fn tiny_setup() -> (WorldConfig, CodecConfig, ModelParams, Array2<f64>, Array2<f64>) {
        let world = WorldConfig {
            height: 4,
            width: 4,
            mask_rect: (2, 4, 1, 3),
            ..WorldConfig::default()
        };
        let codec_config = CodecConfig::default();
        let arch = ArchConfig {
            latent_h: 2,
            latent_w: 2,
            channels: 16,
            audio_dim: 4,
            model_dim: 16,
            n_heads: 2,
            n_blocks: 1,
            ff_dim: 16,
        };
        let params = ModelParams::init(arch, Role::Student, 7);
        let identity = generate_identity(&world, 3);
        let clip = generate_clip(&world, &identity, 2 * 17, 9);
        (world, codec_config, params, clip.identity_image.clone(), clip.audio)
    }

    #[test]
    fn frame_count_and_provenance_pattern() {
        let (_, codec_config, params, i_ref, audio) = tiny_setup();
        let config = RolloutConfig {
            chunks: 2,
            seed: 5,
            ..RolloutConfig::default()
        };
        let result = rollout(&params, &codec_config, &i_ref, &audio, &config).unwrap();
        assert_eq!(result.frame_count(), 34);
        assert_eq!(
            result.kappa_provenances,
            vec![Provenance::Ref, Provenance::Gen]
        );
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let (_, codec_config, params, i_ref, audio) = tiny_setup();
        let config = RolloutConfig {
            chunks: 2,
            seed: 11,
            ..RolloutConfig::default()
        };
        let a = rollout(&params, &codec_config, &i_ref, &audio, &config).unwrap();
        let b = rollout(&params, &codec_config, &i_ref, &audio, &config).unwrap();
        assert!(a
            .frames
            .iter()
            .zip(b.frames.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn chunk_regeneration_is_bitwise_pure() {
        let (_, codec_config, params, i_ref, audio) = tiny_setup();
        let config = RolloutConfig {
            chunks: 2,
            seed: 13,
            ..RolloutConfig::default()
        };
        let result = rollout(&params, &codec_config, &i_ref, &audio, &config).unwrap();
        for k in 0..2 {
            let regen =
                regenerate_chunk(&params, &codec_config, &i_ref, &audio, &config, &result, k)
                    .unwrap();
            assert!(regen
                .data
                .iter()
                .zip(result.per_chunk_latents[k].data.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn oracle_student_reproduces_gt_continuity() {
        // If chunk latents equal GT encodings, the gen-path continuity for
        // the next chunk equals the gt-path continuity exactly.
        let (world, codec_config, _, _, _) = tiny_setup();
        let identity = generate_identity(&world, 21);
        let clip = generate_clip(&world, &identity, 34, 22);
        let chunk0 = clip.frames.slice(ndarray::s![..17, .., ..]).to_owned();
        let gt_latent = crate::codec::encode(&codec_config, &chunk0).unwrap();
        let gen = build_continuity(
            &codec_config,
            ContinuitySource::GeneratedLatent(&gt_latent, 17),
            5,
        )
        .unwrap();
        let gt = build_continuity(&codec_config, ContinuitySource::GtFrames(&chunk0), 5).unwrap();
        let err = gen
            .latents()
            .iter()
            .zip(gt.latents().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-9);
    }

    #[test]
    fn role_check_on_deployment_path() {
        let (_, codec_config, params, i_ref, audio) = tiny_setup();
        let teacher = params.cloned_as(Role::Teacher);
        let config = RolloutConfig {
            chunks: 2,
            ..RolloutConfig::default()
        };
        assert!(rollout(&teacher, &codec_config, &i_ref, &audio, &config).is_err());
        assert!(
            rollout_with_params(&teacher, &codec_config, &i_ref, &audio, &config).is_ok()
        );
    }

    #[test]
    fn audio_length_mismatch_is_named() {
        let (_, codec_config, params, i_ref, audio) = tiny_setup();
        let config = RolloutConfig {
            chunks: 3,
            ..RolloutConfig::default()
        };
        let err = rollout(&params, &codec_config, &i_ref, &audio, &config).unwrap_err();
        assert_eq!(err.code(), "audio-shape");
    }
}
