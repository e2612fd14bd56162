//! Corpus construction cascade over clip-metadata records: visual-hash
//! dedup, standardization bookkeeping, the quality-filter conjunction, and
//! training-tuple construction.
//!
//! Records travel as newline-delimited JSON; the parser is a fuzz entry
//! point. Filtering is a pure conjunction of five predicates, so the
//! retained set is membership-stable under any permutation of the input.

use crate::error::{Error, Result};
use crate::util;
use crate::world::{Clip, WorldConfig};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Frame-variance floor for the toy face-visibility detector.
pub const VISIBILITY_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source: String,
    pub hash: u64,
    pub fps: f64,
    pub frames: usize,
    pub face_visibility: f64,
    pub quality: f64,
    pub sync_c: f64,
    pub sync_d: f64,
    pub hand_occlusion_flag: bool,
    pub keypoint_missing_flag: bool,
    pub path: String,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.face_visibility) {
            return Err(Error::ConfigInvalid(format!(
                "face_visibility {} outside [0,1]",
                self.face_visibility
            )));
        }
        if self.frames == 0 {
            return Err(Error::ConfigInvalid("record with zero frames".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Thresholds {
    pub gamma_f: f64,
    pub gamma_q: f64,
    pub gamma_c: f64,
    pub gamma_d: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        // gamma_c is a correlation floor and gamma_d a circular-lag ceiling
        // in frames; both are artifact choices for the toy sync proxy.
        Thresholds {
            gamma_f: 0.8,
            gamma_q: 0.5,
            gamma_c: 0.5,
            gamma_d: 2.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma_f) {
            return Err(Error::ConfigInvalid("gamma_f outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Difference-hash of the 8x8 average-pooled temporal-mean frame: bit i set
/// iff cell i exceeds the (lower) median cell. Median-relative, so uniform
/// brightness shifts leave the hash unchanged.
pub fn compute_hash(frames: &Array3<f64>) -> u64 {
    let (t, h, w) = frames.dim();
    assert!(h >= 8 && w >= 8, "hash pooling needs at least 8x8 frames");
    let mut mean = Array2::zeros((h, w));
    for f in 0..t {
        mean += &frames.index_axis(ndarray::Axis(0), f);
    }
    mean /= t as f64;

    let mut cells = [0.0f64; 64];
    for ci in 0..8 {
        let r0 = ci * h / 8;
        let r1 = (ci + 1) * h / 8;
        for cj in 0..8 {
            let c0 = cj * w / 8;
            let c1 = (cj + 1) * w / 8;
            let mut acc = 0.0;
            for i in r0..r1 {
                for j in c0..c1 {
                    acc += mean[[i, j]];
                }
            }
            cells[ci * 8 + cj] = acc / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    let median = util::median(&cells);
    let mut hash = 0u64;
    for (i, &c) in cells.iter().enumerate() {
        if c > median {
            hash |= 1u64 << i;
        }
    }
    hash
}

/// Keep the first occurrence of every hash; order preserved.
pub fn dedup(records: &[ClipRecord]) -> Vec<ClipRecord> {
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.hash))
        .cloned()
        .collect()
}

/// Toy face detector: a frame counts as face-visible when its mask-region
/// pixel variance exceeds the floor. Returns the visible fraction.
pub fn compute_visibility(config: &WorldConfig, frames: &Array3<f64>) -> f64 {
    let (t, _, _) = frames.dim();
    let (r0, r1, c0, c1) = config.mask_rect;
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let mut visible = 0usize;
    for f in 0..t {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                let v = frames[[f, i, j]];
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        if var > VISIBILITY_VAR_FLOOR {
            visible += 1;
        }
    }
    visible as f64 / t as f64
}

/// Pixel-noise estimate from second temporal differences outside the mask:
/// for iid noise, Var(x[t+1] - 2x[t] + x[t-1]) = 6 sigma^2.
fn estimate_noise(config: &WorldConfig, frames: &Array3<f64>) -> f64 {
    let (t, h, w) = frames.dim();
    if t < 3 {
        return 0.0;
    }
    let mask = config.mask();
    let mut acc = 0.0;
    let mut count = 0.0;
    for f in 1..t - 1 {
        for i in 0..h {
            for j in 0..w {
                if mask[[i, j]] == 0.0 {
                    let d = frames[[f + 1, i, j]] - 2.0 * frames[[f, i, j]]
                        + frames[[f - 1, i, j]];
                    acc += d * d;
                    count += 1.0;
                }
            }
        }
    }
    (acc / count / 6.0).max(0.0).sqrt()
}

/// Quality proxy in (0, 1]: decreasing in the estimated pixel noise.
pub fn quality_score(config: &WorldConfig, frames: &Array3<f64>) -> f64 {
    1.0 / (1.0 + 10.0 * estimate_noise(config, frames))
}

/// Best circular audio-video lag in frames (0 = aligned).
pub fn sync_lag(config: &WorldConfig, clip_frames: &Array3<f64>, audio: &Array2<f64>) -> f64 {
    let t = clip_frames.dim().0;
    let mask = config.mask();
    let mask_count: f64 = mask.sum();
    let series: Vec<f64> = (0..t)
        .map(|f| {
            let mut acc = 0.0;
            for i in 0..config.height {
                for j in 0..config.width {
                    acc += mask[[i, j]] * clip_frames[[f, i, j]];
                }
            }
            acc / mask_count
        })
        .collect();
    let mut best_shift = 0usize;
    let mut best_corr = f64::NEG_INFINITY;
    for shift in 0..t {
        let shifted: Vec<f64> = (0..t).map(|f| audio[[(f + shift) % t, 0]]).collect();
        if let Some(r) = util::pearson(&series, &shifted) {
            if r > best_corr {
                best_corr = r;
                best_shift = shift;
            }
        }
    }
    best_shift.min(t - best_shift) as f64
}

/// Compute a full metadata record for one clip.
pub fn build_record(
    config: &WorldConfig,
    clip: &Clip,
    source: &str,
    path: &str,
) -> ClipRecord {
    let sync = crate::metrics::sync_correlation(&clip.frames, &clip.audio, &config.mask());
    ClipRecord {
        clip_id: clip.clip_id.clone(),
        source: source.to_string(),
        hash: compute_hash(&clip.frames),
        fps: 25.0,
        frames: clip.len(),
        face_visibility: compute_visibility(config, &clip.frames),
        quality: quality_score(config, &clip.frames),
        sync_c: sync.value,
        sync_d: sync_lag(config, &clip.frames, &clip.audio),
        hand_occlusion_flag: false,
        keypoint_missing_flag: false,
        path: path.to_string(),
    }
}

/// Standardization bookkeeping: all records must declare the 25-FPS
/// convention and consistent frame dims before filtering.
pub fn standardize(records: &mut [ClipRecord]) -> Result<()> {
    for r in records.iter_mut() {
        if (r.fps - 25.0).abs() > 1e-9 {
            return Err(Error::ConfigInvalid(format!(
                "record {} declares fps {}, expected 25",
                r.clip_id, r.fps
            )));
        }
        r.validate()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FilterReport {
    pub total: usize,
    pub retained: usize,
    pub rejected_face: usize,
    pub rejected_quality: usize,
    pub rejected_sync_c: usize,
    pub rejected_sync_d: usize,
    pub rejected_flags: usize,
}

/// Exact conjunction of the five predicates. Returns the retained records
/// in input order plus per-predicate rejection counts.
pub fn filter(records: &[ClipRecord], thresholds: &Thresholds) -> (Vec<ClipRecord>, FilterReport) {
    let mut report = FilterReport {
        total: records.len(),
        ..FilterReport::default()
    };
    let mut retained = Vec::new();
    for r in records {
        let face_ok = r.face_visibility >= thresholds.gamma_f;
        let quality_ok = r.quality >= thresholds.gamma_q;
        let sync_c_ok = r.sync_c >= thresholds.gamma_c;
        let sync_d_ok = r.sync_d <= thresholds.gamma_d;
        let flags_ok = !r.hand_occlusion_flag && !r.keypoint_missing_flag;
        if !face_ok {
            report.rejected_face += 1;
        }
        if !quality_ok {
            report.rejected_quality += 1;
        }
        if !sync_c_ok {
            report.rejected_sync_c += 1;
        }
        if !sync_d_ok {
            report.rejected_sync_d += 1;
        }
        if !flags_ok {
            report.rejected_flags += 1;
        }
        if face_ok && quality_ok && sync_c_ok && sync_d_ok && flags_ok {
            retained.push(r.clone());
        }
    }
    report.retained = retained.len();
    (retained, report)
}

/// One training sample: locators into a stored clip.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingTuple {
    pub clip_id: String,
    pub clip_path: String,
    pub chunk_index: usize,
    pub frame_start: usize,
    pub frame_len: usize,
    /// Reference frame index within the clip (the identity anchor).
    pub ref_frame: usize,
    pub mask_rect: (usize, usize, usize, usize),
}

/// Consecutive non-overlapping chunks of `chunk_frames` frames; clips
/// shorter than one chunk yield nothing. The reference is clip frame 0.
pub fn build_tuples(
    retained: &[ClipRecord],
    config: &WorldConfig,
    chunk_frames: usize,
) -> Vec<TrainingTuple> {
    let mut out = Vec::new();
    for r in retained {
        let count = r.frames / chunk_frames;
        for k in 0..count {
            out.push(TrainingTuple {
                clip_id: r.clip_id.clone(),
                clip_path: r.path.clone(),
                chunk_index: k,
                frame_start: k * chunk_frames,
                frame_len: chunk_frames,
                ref_frame: 0,
                mask_rect: config.mask_rect,
            });
        }
    }
    out
}

/// Resolved tuple: reference image, chunk frames, chunk audio, mask.
pub struct ResolvedTuple {
    pub identity_ref: Array2<f64>,
    pub frames: Array3<f64>,
    pub audio: Array2<f64>,
    pub mask: Array2<f64>,
}

/// Resolve a tuple's locators against the directory its manifest lives in;
/// clip paths inside artifacts are stored relative so run directories stay
/// byte-reproducible.
pub fn resolve_tuple(tuple: &TrainingTuple, base: &Path) -> Result<ResolvedTuple> {
    let stored = crate::clipstore::load_clip(&base.join(&tuple.clip_path))?;
    let t = stored.frames.dim().0;
    if tuple.frame_start + tuple.frame_len > t || tuple.ref_frame >= t {
        return Err(Error::ConfigInvalid(format!(
            "tuple for {} addresses frames beyond clip length {t}",
            tuple.clip_id
        )));
    }
    let identity_ref = stored
        .frames
        .index_axis(ndarray::Axis(0), tuple.ref_frame)
        .to_owned();
    let frames = stored
        .frames
        .slice(ndarray::s![
            tuple.frame_start..tuple.frame_start + tuple.frame_len,
            ..,
            ..
        ])
        .to_owned();
    let audio = stored
        .audio
        .slice(ndarray::s![
            tuple.frame_start..tuple.frame_start + tuple.frame_len,
            ..
        ])
        .to_owned();
    let (r0, r1, c0, c1) = tuple.mask_rect;
    let (_, h, w) = frames.dim();
    let mask = Array2::from_shape_fn((h, w), |(i, j)| {
        if i >= r0 && i < r1 && j >= c0 && j < c1 {
            1.0
        } else {
            0.0
        }
    });
    Ok(ResolvedTuple {
        identity_ref,
        frames,
        audio,
        mask,
    })
}

/// Parse a newline-delimited JSON manifest. Blank lines are skipped; any
/// malformed line is an error naming its line number.
pub fn parse_manifest_bytes(bytes: &[u8]) -> Result<Vec<ClipRecord>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::ConfigInvalid(format!("manifest is not UTF-8: {e}")))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ClipRecord = serde_json::from_str(line).map_err(|e| {
            Error::ConfigInvalid(format!("manifest line {}: {e}", lineno + 1))
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    parse_manifest_bytes(&std::fs::read(path)?)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{corrupt_clip, generate_clip, generate_identity, CorruptionMode};

    fn make_record(id: &str, hash: u64) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            source: "test".into(),
            hash,
            fps: 25.0,
            frames: 34,
            face_visibility: 1.0,
            quality: 0.9,
            sync_c: 0.95,
            sync_d: 0.0,
            hand_occlusion_flag: false,
            keypoint_missing_flag: false,
            path: format!("/tmp/{id}"),
        }
    }

    #[test]
    fn hash_determinism_and_brightness_invariance() {
        let config = WorldConfig::default();
        let identity = generate_identity(&config, 1);
        let clip = generate_clip(&config, &identity, 17, 2);
        let h1 = compute_hash(&clip.frames);
        let h2 = compute_hash(&clip.frames);
        assert_eq!(h1, h2);

        let brighter = clip.frames.mapv(|v| v + 0.05);
        assert_eq!(h1, compute_hash(&brighter));
    }

    #[test]
    fn hash_separates_independent_clips() {
        let config = WorldConfig::default();
        let mut differing = 0;
        for s in 0..20u64 {
            let ia = generate_identity(&config, 100 + s);
            let ib = generate_identity(&config, 200 + s);
            let ca = generate_clip(&config, &ia, 17, 300 + s);
            let cb = generate_clip(&config, &ib, 17, 400 + s);
            if compute_hash(&ca.frames) != compute_hash(&cb.frames) {
                differing += 1;
            }
        }
        assert!(differing >= 19, "only {differing}/20 pairs differ");
    }

    #[test]
    fn dedup_first_occurrence_and_idempotence() {
        let records = vec![
            make_record("a", 1),
            make_record("b", 2),
            make_record("c", 1),
        ];
        let kept = dedup(&records);
        assert_eq!(
            kept.iter().map(|r| r.clip_id.as_str()).collect::<Vec<_>>(),
            vec!["a", "b"]
        );
        let twice = dedup(&kept);
        assert_eq!(kept, twice);
        assert!(dedup(&[]).is_empty());
        let distinct = vec![make_record("a", 1), make_record("b", 2)];
        assert_eq!(dedup(&distinct).len(), 2);
    }

    #[test]
    fn visibility_on_clean_and_occluded_clips() {
        let config = WorldConfig::default();
        let identity = generate_identity(&config, 3);
        let clip = generate_clip(&config, &identity, 20, 4);
        assert_eq!(compute_visibility(&config, &clip.frames), 1.0);

        let occluded = corrupt_clip(&config, &clip, &[CorruptionMode::Occlusion], 5);
        let rho = compute_visibility(&config, &occluded.frames);
        assert!(rho <= 0.6, "occluded visibility {rho}");

        // Hand-built detector outcome: zero the region on exactly 3 of 10.
        let clip10 = generate_clip(&config, &identity, 10, 6);
        let mut frames = clip10.frames.clone();
        let (r0, r1, c0, c1) = config.mask_rect;
        for t in [1usize, 4, 7] {
            for i in r0..r1 {
                for j in c0..c1 {
                    frames[[t, i, j]] = 0.0;
                }
            }
        }
        assert!((compute_visibility(&config, &frames) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn filter_examples_and_oracle_agreement() {
        let thresholds = Thresholds {
            gamma_f: 0.8,
            gamma_q: 0.5,
            gamma_c: 3.0,
            gamma_d: 10.0,
        };
        let mut good = make_record("good", 1);
        good.face_visibility = 0.9;
        good.quality = 0.8;
        good.sync_c = 6.0;
        good.sync_d = 8.0;
        let (kept, _) = filter(&[good.clone()], &thresholds);
        assert_eq!(kept.len(), 1);

        let mut bad = good.clone();
        bad.sync_d = 11.0;
        let (kept, report) = filter(&[bad], &thresholds);
        assert!(kept.is_empty());
        assert_eq!(report.rejected_sync_d, 1);

        // Brute-force oracle on random records.
        let mut rng = crate::util::seeded_rng(7, &[1]);
        use rand::Rng;
        let records: Vec<ClipRecord> = (0..200)
            .map(|i| {
                let mut r = make_record(&format!("r{i}"), i as u64);
                r.face_visibility = rng.gen_range(0.0..1.0);
                r.quality = rng.gen_range(0.0..1.0);
                r.sync_c = rng.gen_range(-1.0..8.0);
                r.sync_d = rng.gen_range(0.0..15.0);
                r.hand_occlusion_flag = rng.gen_bool(0.2);
                r.keypoint_missing_flag = rng.gen_bool(0.2);
                r
            })
            .collect();
        let (kept, _) = filter(&records, &thresholds);
        let oracle: Vec<&ClipRecord> = records
            .iter()
            .filter(|r| {
                r.face_visibility >= thresholds.gamma_f
                    && r.quality >= thresholds.gamma_q
                    && r.sync_c >= thresholds.gamma_c
                    && r.sync_d <= thresholds.gamma_d
                    && !r.hand_occlusion_flag
                    && !r.keypoint_missing_flag
            })
            .collect();
        assert_eq!(kept.len(), oracle.len());
        for (a, b) in kept.iter().zip(oracle) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn filter_is_permutation_stable() {
        let mut rng = crate::util::seeded_rng(9, &[2]);
        use rand::Rng;
        let records: Vec<ClipRecord> = (0..50)
            .map(|i| {
                let mut r = make_record(&format!("r{i}"), i as u64);
                r.face_visibility = rng.gen_range(0.5..1.0);
                r.sync_d = rng.gen_range(0.0..5.0);
                r
            })
            .collect();
        let thresholds = Thresholds::default();
        let (kept, _) = filter(&records, &thresholds);
        let mut reversed = records.clone();
        reversed.reverse();
        let (kept_rev, _) = filter(&reversed, &thresholds);
        let ids: std::collections::HashSet<_> = kept.iter().map(|r| &r.clip_id).collect();
        let ids_rev: std::collections::HashSet<_> = kept_rev.iter().map(|r| &r.clip_id).collect();
        assert_eq!(ids, ids_rev);
    }

    #[test]
    fn tuple_counts_and_resolution() {
        let config = WorldConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let identity = generate_identity(&config, 11);
        let clip = generate_clip(&config, &identity, 34, 12);
        let clip_dir = dir.path().join("clip0");
        crate::clipstore::save_clip(&clip_dir, &clip, &config, 12).unwrap();

        let mut record = build_record(&config, &clip, "synthetic", "clip0");
        record.frames = 34;
        let tuples = build_tuples(std::slice::from_ref(&record), &config, 17);
        assert_eq!(tuples.len(), 2);

        let mut short = record.clone();
        short.frames = 16;
        assert!(build_tuples(&[short], &config, 17).is_empty());

        for tuple in &tuples {
            let resolved = resolve_tuple(tuple, dir.path()).unwrap();
            assert_eq!(resolved.frames.dim().0, 17);
            assert_eq!(resolved.audio.dim().0, 17);
            assert_eq!(resolved.identity_ref.dim(), (16, 16));
        }
    }

    #[test]
    fn manifest_round_trip_and_bad_line() {
        let records = vec![make_record("a", 1), make_record("b", 2)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.ndjson");
        write_manifest(&path, &records).unwrap();
        let loaded = read_manifest(&path).unwrap();
        assert_eq!(records, loaded);

        let garbled = b"{\"clip_id\": \"a\"}\n";
        assert!(parse_manifest_bytes(garbled).is_err());
        assert!(parse_manifest_bytes(b"\n\n").unwrap().is_empty());
    }

    #[test]
    fn corrupted_clips_fail_their_targeted_predicates() {
        let config = WorldConfig::default();
        let thresholds = Thresholds::default();
        let identity = generate_identity(&config, 21);
        let clip = generate_clip(&config, &identity, 34, 22);

        let clean = build_record(&config, &clip, "synthetic", "mem");
        assert!(clean.face_visibility >= thresholds.gamma_f, "{clean:?}");
        assert!(clean.quality >= thresholds.gamma_q);
        assert!(clean.sync_c >= thresholds.gamma_c);
        assert!(clean.sync_d <= thresholds.gamma_d);

        let occ = corrupt_clip(&config, &clip, &[CorruptionMode::Occlusion], 1);
        let r_occ = build_record(&config, &occ, "synthetic", "mem");
        assert!(r_occ.face_visibility < thresholds.gamma_f);

        let desync = corrupt_clip(&config, &clip, &[CorruptionMode::Desync], 2);
        let r_desync = build_record(&config, &desync, "synthetic", "mem");
        assert!(
            r_desync.sync_c < thresholds.gamma_c || r_desync.sync_d > thresholds.gamma_d,
            "{r_desync:?}"
        );

        let lowq = corrupt_clip(&config, &clip, &[CorruptionMode::LowQuality], 3);
        let r_lowq = build_record(&config, &lowq, "synthetic", "mem");
        assert!(r_lowq.quality < thresholds.gamma_q, "{r_lowq:?}");
    }
}
