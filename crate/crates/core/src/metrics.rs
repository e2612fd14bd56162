//! Drift metrics: identity similarity outside the motion mask, a Fréchet
//! distance between Gaussian fits of pooled frame features, and the sync
//! correlation between masked-region intensity and the driving audio.
//!
//! In this world the identity is exactly the static pattern outside the
//! mask, so the mask-complement time-average cosine is the ground-truth
//! identity extractor rather than an approximation.

use crate::error::Result;
use crate::util;
use crate::world::WorldOracle;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3};
use serde::Serialize;
use std::path::Path;

/// Spatial pooling block for frame features.
const POOL: usize = 4;
/// Eigenvalues below this are treated as zero in matrix square roots.
const EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// Chunk indices (1-based) at which the curves are evaluated.
    pub horizon_points: Vec<usize>,
    pub id_sim: Vec<f64>,
    pub frechet: Vec<f64>,
    pub sync_corr: Vec<f64>,
    pub fps: Option<f64>,
    pub chunk_frames: usize,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// `report.json` plus `curves.csv` with a 25-FPS seconds column.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        let mut csv = String::from("chunk_index,seconds_equiv,id_sim,frechet,sync_corr\n");
        for (i, &p) in self.horizon_points.iter().enumerate() {
            let secs = (p * self.chunk_frames) as f64 / 25.0;
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p, secs, self.id_sim[i], self.frechet[i], self.sync_corr[i]
            ));
        }
        std::fs::write(dir.join("curves.csv"), csv)?;
        Ok(())
    }
}

/// Cosine similarity between the time-averaged window and the identity
/// pattern, restricted to pixels outside the mask.
pub fn identity_similarity(
    window: &Array3<f64>,
    identity: &Array2<f64>,
    mask: &Array2<f64>,
) -> f64 {
    let (_, h, w) = window.dim();
    assert_eq!(identity.dim(), (h, w));
    assert_eq!(mask.dim(), (h, w));
    let avg = window.mean_axis(ndarray::Axis(0)).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] == 0.0 {
                a.push(avg[[i, j]]);
                b.push(identity[[i, j]]);
            }
        }
    }
    util::cosine(&Array1::from_vec(a), &Array1::from_vec(b))
}

/// Per-frame pooled pixel features: 4x4 average pooling, flattened.
pub fn pooled_features(frames: &Array3<f64>) -> Array2<f64> {
    let (t, h, w) = frames.dim();
    assert!(
        h % POOL == 0 && w % POOL == 0,
        "frame dims must be multiples of {POOL}"
    );
    let (ph, pw) = (h / POOL, w / POOL);
    let mut out = Array2::zeros((t, ph * pw));
    for f in 0..t {
        for i in 0..ph {
            for j in 0..pw {
                let mut acc = 0.0;
                for di in 0..POOL {
                    for dj in 0..POOL {
                        acc += frames[[f, i * POOL + di, j * POOL + dj]];
                    }
                }
                out[[f, i * pw + j]] = acc / (POOL * POOL) as f64;
            }
        }
    }
    out
}

fn moments(features: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = features.dim();
    let mut mean = DVector::zeros(d);
    for r in 0..n {
        for c in 0..d {
            mean[c] += features[[r, c]];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        let row = DVector::from_iterator(d, (0..d).map(|c| features[[r, c]] - mean[c]));
        cov += &row * row.transpose();
    }
    cov /= n as f64;
    ((mean), cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = if *v < EIG_FLOOR { 0.0 } else { v.sqrt() };
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two moment pairs:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn frechet_from_moments(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> f64 {
    let mean_term = (mu1 - mu2).norm_squared();
    let root1 = sym_sqrt(sigma1);
    let inner = &root1 * sigma2 * &root1;
    let cross = sym_sqrt(&inner);
    let trace_term = sigma1.trace() + sigma2.trace() - 2.0 * cross.trace();
    (mean_term + trace_term).max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets `[n, d]`,
/// `[m, d]` with population moments. Requires `n, m > d`.
pub fn frechet_proxy(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (n, d) = a.dim();
    let (m, d2) = b.dim();
    assert_eq!(d, d2, "feature dims disagree");
    assert!(n > d && m > d, "need more samples than feature dims");
    let (mu1, s1) = moments(a);
    let (mu2, s2) = moments(b);
    frechet_from_moments(&mu1, &s1, &mu2, &s2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncResult {
    pub value: f64,
    pub degenerate: bool,
}

/// Pearson correlation between masked-region mean intensity and audio
/// column 0. Degenerate variance returns 0 with the flag set.
pub fn sync_correlation(
    frames: &Array3<f64>,
    audio: &Array2<f64>,
    mask: &Array2<f64>,
) -> SyncResult {
    let (t, h, w) = frames.dim();
    assert_eq!(audio.dim().0, t, "frame/audio length mismatch");
    let mask_count: f64 = mask.sum();
    assert!(mask_count > 0.0, "empty mask");
    let series: Vec<f64> = (0..t)
        .map(|f| {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += mask[[i, j]] * frames[[f, i, j]];
                }
            }
            acc / mask_count
        })
        .collect();
    let audio0: Vec<f64> = (0..t).map(|f| audio[[f, 0]]).collect();
    match util::pearson(&series, &audio0) {
        Some(v) => SyncResult {
            value: v,
            degenerate: false,
        },
        None => SyncResult {
            value: 0.0,
            degenerate: true,
        },
    }
}

/// Evaluate drift curves over a generated frame stream against freshly
/// generated ground truth from the oracle at the same temporal positions.
/// Windows span 2 chunks per evaluation point; identity similarity uses the
/// largest whole number of motion periods inside the window.
pub fn drift_curve(
    frames: &Array3<f64>,
    oracle: &WorldOracle,
    chunk_frames: usize,
    stride: usize,
    fps: Option<f64>,
    config_echo: serde_json::Value,
) -> MetricsReport {
    assert!(stride >= 1);
    let total = frames.dim().0;
    assert_eq!(total % chunk_frames, 0, "frames must hold whole chunks");
    let k = total / chunk_frames;
    let gt = oracle.clip(total);
    let identity = oracle.identity();
    let mask = oracle.config.mask();
    let period = oracle.config.period_frames().round().max(1.0) as usize;

    let mut points = Vec::new();
    let mut id_sim = Vec::new();
    let mut frechet = Vec::new();
    let mut sync = Vec::new();

    let mut j = stride;
    while j <= k {
        let end = j * chunk_frames;
        let start = end.saturating_sub(2 * chunk_frames);
        let window = frames.slice(ndarray::s![start..end, .., ..]).to_owned();
        let gt_window = gt.frames.slice(ndarray::s![start..end, .., ..]).to_owned();
        let audio_window = gt.audio.slice(ndarray::s![start..end, ..]).to_owned();

        // Whole-period trailing sub-window for the identity average.
        let len = end - start;
        let wm = if len >= period {
            (len / period) * period
        } else {
            len
        };
        let id_window = frames
            .slice(ndarray::s![end - wm..end, .., ..])
            .to_owned();

        points.push(j);
        id_sim.push(identity_similarity(&id_window, &identity, &mask));
        frechet.push(frechet_proxy(
            &pooled_features(&window),
            &pooled_features(&gt_window),
        ));
        sync.push(sync_correlation(&window, &audio_window, &mask).value);
        j += stride;
    }

    MetricsReport {
        horizon_points: points,
        id_sim,
        frechet,
        sync_corr: sync,
        fps,
        chunk_frames,
        config: config_echo,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_clip, generate_identity, WorldConfig};
    use ndarray::Array3;
    use rand_distr::Distribution;

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn identity_similarity_on_clean_clip_is_one() {
        let mut cfg = world();
        cfg.pixel_noise = 0.0;
        let identity = generate_identity(&cfg, 1);
        let clip = generate_clip(&cfg, &identity, 16, 2);
        let sim = identity_similarity(&clip.frames, &identity, &cfg.mask());
        assert!((sim - 1.0).abs() <= 1e-6, "sim {sim}");
    }

    #[test]
    fn identity_similarity_antipodal_and_noise() {
        let cfg = world();
        let identity = generate_identity(&cfg, 3);
        let neg = identity.mapv(|v| -v);
        let window = ndarray::stack(ndarray::Axis(0), &[neg.view(), neg.view()]).unwrap();
        let sim = identity_similarity(&window, &identity, &cfg.mask());
        assert!((sim + 1.0).abs() <= 1e-9);

        // Independent noise sigma=0.1 per pixel per frame averages down by
        // sqrt(16); cosine stays >= 0.99.
        let mut rng = crate::util::seeded_rng(5, &[1]);
        let noisy = Array3::from_shape_fn((16, cfg.height, cfg.width), |(_, i, j)| {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            identity[[i, j]] + 0.1 * z
        });
        let sim = identity_similarity(&noisy, &identity, &cfg.mask());
        assert!(sim >= 0.99, "noisy sim {sim}");
    }

    #[test]
    fn identity_similarity_invariant_to_masked_changes() {
        let cfg = world();
        let identity = generate_identity(&cfg, 7);
        let clip = generate_clip(&cfg, &identity, 16, 8);
        let base = identity_similarity(&clip.frames, &identity, &cfg.mask());
        let mut modified = clip.frames.clone();
        let (r0, r1, c0, c1) = cfg.mask_rect;
        for t in 0..16 {
            for i in r0..r1 {
                for j in c0..c1 {
                    modified[[t, i, j]] = 99.0;
                }
            }
        }
        let after = identity_similarity(&modified, &identity, &cfg.mask());
        assert_eq!(base, after);
    }

    #[test]
    fn frechet_identical_and_moment_cases() {
        let mut rng = crate::util::seeded_rng(11, &[3]);
        use rand::Rng;
        let a = Array2::from_shape_fn((40, 4), |_| rng.gen_range(-1.0..1.0));
        let f = frechet_proxy(&a, &a);
        assert!(f.abs() <= 1e-6, "identical sets give {f}");

        // 1-D exact moment cases. {-1, 1} has mean 0, var 1; {0, 2} has
        // mean 1, var 1 -> distance 1 (mean shift).
        let std01 = Array2::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap();
        let shifted = Array2::from_shape_vec((2, 1), vec![0.0, 2.0]).unwrap();
        let f1 = frechet_proxy(&std01, &shifted);
        assert!((f1 - 1.0).abs() <= 1e-9, "mean case {f1}");

        // {-2, 2} has var 4 -> Tr(1 + 4 - 2*2) = 1.
        let wide = Array2::from_shape_vec((2, 1), vec![-2.0, 2.0]).unwrap();
        let f2 = frechet_proxy(&std01, &wide);
        assert!((f2 - 1.0).abs() <= 1e-9, "variance case {f2}");
    }

    #[test]
    fn frechet_symmetry_and_nonnegativity() {
        let mut rng = crate::util::seeded_rng(13, &[4]);
        use rand::Rng;
        for trial in 0..10 {
            let a = Array2::from_shape_fn((12, 3), |_| rng.gen_range(-2.0..2.0));
            let b = Array2::from_shape_fn((15, 3), |_| rng.gen_range(-2.0..2.0));
            let fab = frechet_proxy(&a, &b);
            let fba = frechet_proxy(&b, &a);
            assert!(fab >= 0.0);
            assert!((fab - fba).abs() <= 1e-8, "trial {trial}: {fab} vs {fba}");
        }
    }

    #[test]
    fn sync_correlation_cases() {
        let mut cfg = world();
        cfg.pixel_noise = 0.0;
        cfg.phase_noise = 0.0;
        let identity = generate_identity(&cfg, 1);
        let clip = generate_clip(&cfg, &identity, 32, 2);
        let r = sync_correlation(&clip.frames, &clip.audio, &cfg.mask());
        assert!(!r.degenerate);
        assert!((r.value - 1.0).abs() <= 1e-6);

        // Phase shift by pi: flip the motion sign.
        let mut flipped = clip.frames.clone();
        let mask = cfg.mask();
        for t in 0..32 {
            let offset = cfg.motion_amp * clip.phase_oracle()[t].sin();
            for i in 0..cfg.height {
                for j in 0..cfg.width {
                    if mask[[i, j]] == 1.0 {
                        flipped[[t, i, j]] -= 2.0 * offset;
                    }
                }
            }
        }
        let r2 = sync_correlation(&flipped, &clip.audio, &cfg.mask());
        assert!((r2.value + 1.0).abs() <= 1e-2, "antiphase {}", r2.value);

        // Constant frames: degenerate.
        let flat = Array3::from_elem((8, cfg.height, cfg.width), 0.5);
        let audio = clip.audio.slice(ndarray::s![..8, ..]).to_owned();
        let r3 = sync_correlation(&flat, &audio, &cfg.mask());
        assert!(r3.degenerate);
        assert_eq!(r3.value, 0.0);
    }

    #[test]
    fn drift_curve_on_oracle_rollout() {
        let mut cfg = world();
        cfg.pixel_noise = 0.0;
        let oracle = WorldOracle {
            config: cfg,
            identity_seed: 5,
            clip_seed: 6,
        };
        let gt = oracle.clip(4 * 17);
        let report = drift_curve(&gt.frames, &oracle, 17, 1, None, serde_json::json!({}));
        assert_eq!(report.horizon_points, vec![1, 2, 3, 4]);
        for (&sim, &fr) in report.id_sim.iter().zip(&report.frechet) {
            assert!((sim - 1.0).abs() <= 1e-6, "sim {sim}");
            assert!(fr.abs() <= 1e-6, "frechet {fr}");
        }
        for &s in &report.sync_corr {
            assert!(s > 0.9, "sync {s}");
        }
    }

    #[test]
    fn drift_curve_detects_monotone_corruption() {
        let cfg = world();
        let oracle = WorldOracle {
            config: cfg,
            identity_seed: 9,
            clip_seed: 10,
        };
        let gt = oracle.clip(5 * 17);
        // Noise grows with chunk index: the identity curve must strictly
        // decrease.
        let mut rng = crate::util::seeded_rng(17, &[8]);
        let mut corrupted = gt.frames.clone();
        for k in 0..5usize {
            let sigma = 0.15 * k as f64;
            for t in k * 17..(k + 1) * 17 {
                for i in 0..cfg.height {
                    for j in 0..cfg.width {
                        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        corrupted[[t, i, j]] += sigma * z;
                    }
                }
            }
        }
        let report = drift_curve(&corrupted, &oracle, 17, 1, None, serde_json::json!({}));
        for w in report.id_sim.windows(2) {
            assert!(w[1] < w[0], "id_sim not decreasing: {:?}", report.id_sim);
        }
    }

    #[test]
    fn report_files_are_written() {
        let cfg = world();
        let oracle = WorldOracle {
            config: cfg,
            identity_seed: 1,
            clip_seed: 2,
        };
        let gt = oracle.clip(2 * 17);
        let report = drift_curve(&gt.frames, &oracle, 17, 1, Some(123.0), serde_json::json!({"k": 2}));
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        assert!(dir.path().join("report.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert!(csv.starts_with("chunk_index,seconds_equiv"));
        assert_eq!(csv.lines().count(), 3);
    }
}
