//! Deterministic, exactly invertible causal spatio-temporal codec.
//!
//! Frames enter as `[T, H, W]` with `(T - 1) % s == 0`. The leading frame is
//! compressed purely spatially (orthonormal 2x2 Haar, space-to-channel) and
//! occupies latent position 0 with its temporal-detail channels zero. Each
//! subsequent block of `s` frames becomes one body latent: 2x2 spatial Haar
//! per frame, then an orthonormal two-level temporal Haar across the block.
//! Every block transform is orthogonal, so `decode` is the exact inverse and
//! per-block energy is preserved.
//!
//! Channel layout (C = 16 for s = 4): `c = 4 * temporal + spatial`, where
//! `temporal` indexes `[DC, level-2 detail, level-1 detail a, level-1 detail b]`
//! and `spatial` indexes `[LL, LH, HL, HH]`.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

pub const SPATIAL_BLOCK: usize = 2;
const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    /// Temporal stride: frames per body latent.
    pub temporal_stride: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { temporal_stride: 4 }
    }
}

impl CodecConfig {
    /// Channel dimension: one coefficient per (temporal, spatial) pair.
    pub fn channels(&self) -> usize {
        4 * self.temporal_stride
    }

    /// Latent temporal length for a `frames`-frame input.
    pub fn latent_len(&self, frames: usize) -> usize {
        1 + (frames - 1) / self.temporal_stride
    }

    /// Frame count decoded from `latent_len` latents.
    pub fn frame_count(&self, latent_len: usize) -> usize {
        1 + (latent_len - 1) * self.temporal_stride
    }

    pub fn check_frames(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        if frames == 0 || (frames - 1) % self.temporal_stride != 0 {
            return Err(Error::CodecShape(format!(
                "frame count {frames} violates (T-1) % {} == 0",
                self.temporal_stride
            )));
        }
        if h % SPATIAL_BLOCK != 0 || w % SPATIAL_BLOCK != 0 {
            return Err(Error::CodecShape(format!("H={h}, W={w} must be even")));
        }
        Ok(())
    }

    /// Validity of a continuity window length.
    pub fn check_tau(&self, tau: usize, frames: usize) -> Result<()> {
        if tau == 0 || (tau - 1) % self.temporal_stride != 0 {
            return Err(Error::TauStride(format!(
                "tau={tau} violates (tau-1) % {} == 0",
                self.temporal_stride
            )));
        }
        if tau > frames {
            return Err(Error::TauStride(format!("tau={tau} exceeds T={frames}")));
        }
        Ok(())
    }
}

/// Codec-space representation of one video chunk: `[L, h, w, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentChunk {
    pub data: Array4<f64>,
    /// True when latent 0 carries only spatial coefficients (all codec
    /// outputs). Generated latents are unconstrained and carry `false`.
    pub head_is_spatial_only: bool,
}

impl LatentChunk {
    pub fn latent_len(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        let (_, h, w, _) = self.data.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    pub fn zeros_like(&self) -> LatentChunk {
        LatentChunk {
            data: Array4::zeros(self.data.dim()),
            head_is_spatial_only: false,
        }
    }
}

/// Orthonormal 2x2 spatial Haar of one frame: `[H, W] -> [h, w, 4]` values
/// written into `out[i][j][spatial]`. The basis matrix is symmetric and
/// involutive, so the inverse uses the same coefficients.
fn spatial_forward(frame: ndarray::ArrayView2<f64>, out: &mut ndarray::ArrayViewMut3<f64>) {
    let (h2, w2) = frame.dim();
    for i in 0..h2 / 2 {
        for j in 0..w2 / 2 {
            let a = frame[[2 * i, 2 * j]];
            let b = frame[[2 * i, 2 * j + 1]];
            let c = frame[[2 * i + 1, 2 * j]];
            let d = frame[[2 * i + 1, 2 * j + 1]];
            out[[i, j, 0]] = 0.5 * (a + b + c + d);
            out[[i, j, 1]] = 0.5 * (a - b + c - d);
            out[[i, j, 2]] = 0.5 * (a + b - c - d);
            out[[i, j, 3]] = 0.5 * (a - b - c + d);
        }
    }
}

fn spatial_inverse(coeffs: ndarray::ArrayView3<f64>, frame: &mut ndarray::ArrayViewMut2<f64>) {
    let (h, w, _) = coeffs.dim();
    for i in 0..h {
        for j in 0..w {
            let ll = coeffs[[i, j, 0]];
            let lh = coeffs[[i, j, 1]];
            let hl = coeffs[[i, j, 2]];
            let hh = coeffs[[i, j, 3]];
            frame[[2 * i, 2 * j]] = 0.5 * (ll + lh + hl + hh);
            frame[[2 * i, 2 * j + 1]] = 0.5 * (ll - lh + hl - hh);
            frame[[2 * i + 1, 2 * j]] = 0.5 * (ll + lh - hl - hh);
            frame[[2 * i + 1, 2 * j + 1]] = 0.5 * (ll - lh - hl + hh);
        }
    }
}

/// Two-level temporal Haar over 4 samples. Rows of the transform matrix are
/// orthonormal: DC and the level-2 detail mix all four samples, the two
/// level-1 details mix neighboring pairs.
fn temporal_forward(x: [f64; 4]) -> [f64; 4] {
    [
        0.5 * (x[0] + x[1] + x[2] + x[3]),
        0.5 * (x[0] + x[1] - x[2] - x[3]),
        SQRT_HALF * (x[0] - x[1]),
        SQRT_HALF * (x[2] - x[3]),
    ]
}

fn temporal_inverse(c: [f64; 4]) -> [f64; 4] {
    [
        0.5 * c[0] + 0.5 * c[1] + SQRT_HALF * c[2],
        0.5 * c[0] + 0.5 * c[1] - SQRT_HALF * c[2],
        0.5 * c[0] - 0.5 * c[1] + SQRT_HALF * c[3],
        0.5 * c[0] - 0.5 * c[1] - SQRT_HALF * c[3],
    ]
}

/// Encode frames `[T, H, W]` into a latent chunk `[L, h, w, C]`.
pub fn encode(config: &CodecConfig, frames: &Array3<f64>) -> Result<LatentChunk> {
    let (t, h, w) = frames.dim();
    config.check_frames(t, h, w)?;
    let s = config.temporal_stride;
    let c = config.channels();
    let l = config.latent_len(t);
    let (lh, lw) = (h / 2, w / 2);
    let mut data = Array4::zeros((l, lh, lw, c));

    // Head: spatial-only coefficients of frame 0 in channels 0..4.
    {
        let mut head = Array3::zeros((lh, lw, 4));
        spatial_forward(frames.index_axis(ndarray::Axis(0), 0), &mut head.view_mut());
        for i in 0..lh {
            for j in 0..lw {
                for sc in 0..4 {
                    data[[0, i, j, sc]] = head[[i, j, sc]];
                }
            }
        }
    }

    // Body: frames 1+(b)*s .. (b+1)*s inclusive per latent 1+b.
    let mut spat = Array4::zeros((s, lh, lw, 4));
    for b in 0..l - 1 {
        for q in 0..s {
            let f = 1 + b * s + q;
            let mut view = spat.index_axis_mut(ndarray::Axis(0), q);
            spatial_forward(frames.index_axis(ndarray::Axis(0), f), &mut view);
        }
        for i in 0..lh {
            for j in 0..lw {
                for sc in 0..4 {
                    let xs = [
                        spat[[0, i, j, sc]],
                        spat[[1, i, j, sc]],
                        spat[[2, i, j, sc]],
                        spat[[3, i, j, sc]],
                    ];
                    let cs = temporal_forward(xs);
                    for (tc, &v) in cs.iter().enumerate() {
                        data[[1 + b, i, j, 4 * tc + sc]] = v;
                    }
                }
            }
        }
    }

    Ok(LatentChunk {
        data,
        head_is_spatial_only: true,
    })
}

/// Decode a latent chunk back to frames `[T, H, W]`. Exact inverse of
/// [`encode`]; position 0 reads only channels 0..4.
pub fn decode(config: &CodecConfig, latent: &LatentChunk, frames: usize) -> Result<Array3<f64>> {
    let (l, lh, lw, c) = latent.data.dim();
    if c != config.channels() {
        return Err(Error::CodecShape(format!(
            "latent has {c} channels, codec expects {}",
            config.channels()
        )));
    }
    if frames == 0 || config.latent_len(frames) != l {
        return Err(Error::CodecShape(format!(
            "latent length {l} inconsistent with frame count {frames}"
        )));
    }
    let s = config.temporal_stride;
    let (h, w) = (lh * 2, lw * 2);
    let mut out = Array3::zeros((frames, h, w));

    {
        let head = latent
            .data
            .slice(ndarray::s![0, .., .., 0..4])
            .to_owned();
        let mut frame0 = out.index_axis_mut(ndarray::Axis(0), 0);
        spatial_inverse(head.view(), &mut frame0);
    }

    let mut spat = Array4::zeros((s, lh, lw, 4));
    for b in 0..l - 1 {
        for i in 0..lh {
            for j in 0..lw {
                for sc in 0..4 {
                    let cs = [
                        latent.data[[1 + b, i, j, sc]],
                        latent.data[[1 + b, i, j, 4 + sc]],
                        latent.data[[1 + b, i, j, 8 + sc]],
                        latent.data[[1 + b, i, j, 12 + sc]],
                    ];
                    let xs = temporal_inverse(cs);
                    for (q, &v) in xs.iter().enumerate() {
                        spat[[q, i, j, sc]] = v;
                    }
                }
            }
        }
        for q in 0..s {
            let f = 1 + b * s + q;
            let mut frame = out.index_axis_mut(ndarray::Axis(0), f);
            spatial_inverse(spat.index_axis(ndarray::Axis(0), q), &mut frame);
        }
    }

    Ok(out)
}

/// Re-encode the tail `tau` frames of a decoded chunk so that the window's
/// first frame occupies the spatial-only head role. This differs from naive
/// latent slicing: a sliced head latent is a temporal aggregate of its block,
/// while the re-encoded head is a single spatially-coded frame.
pub fn decode_then_reencode_tail(
    config: &CodecConfig,
    latent: &LatentChunk,
    frames: usize,
    tau: usize,
) -> Result<LatentChunk> {
    config.check_tau(tau, frames)?;
    let video = decode(config, latent, frames)?;
    let tail = video.slice(ndarray::s![frames - tau.., .., ..]).to_owned();
    encode(config, &tail)
}

/// Encode a single frame through the spatial-only head path: `[h, w, C]`
/// with channels 4.. zero. Equals `encode` of a one-frame video.
pub fn encode_single_frame(
    config: &CodecConfig,
    frame: &ndarray::Array2<f64>,
) -> Result<Array3<f64>> {
    let (h, w) = frame.dim();
    config.check_frames(1, h, w)?;
    let c = config.channels();
    let mut out = Array3::zeros((h / 2, w / 2, c));
    let mut head = Array3::zeros((h / 2, w / 2, 4));
    spatial_forward(frame.view(), &mut head.view_mut());
    out.slice_mut(ndarray::s![.., .., 0..4]).assign(&head);
    Ok(out)
}
