//! Batch experiment runner: seeded pipelines, run directories, checkpoint
//! persistence, metrics emission, and the ablation grid.
//!
//! Every invocation owns one output directory and writes: `config.json`
//! (the resolved snapshot), `run.json` (subcommand, seed, version, artifact
//! list; no wall-clock data, so re-runs are byte-identical), its artifacts,
//! and a `FAILED` marker if it aborts midway.

use crate::checkpoint::{load_checkpoint, load_checkpoint_strict, save_checkpoint};
use crate::clipstore;
use crate::config::ExperimentConfig;
use crate::conditioning::IdentityScheme;
use crate::corpus::{self, ClipRecord};
use crate::distill::{self, DistillConfig, DistillMode, DistillStepLog};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{ModelParams, Role};
use crate::rollout;
use crate::teacher::{self, TeacherStepLog};
use crate::util;
use crate::world::{corrupt_clip, generate_clip, generate_identity, CorruptionMode, WorldOracle};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const CRITIC_CKPT: &str = "critic.ckpt";

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    subcommand: &'a str,
    seed: u64,
    version: &'a str,
    config_hash: String,
    status: &'a str,
    artifacts: Vec<String>,
}

/// Execute `body` inside a prepared run directory. On error a `FAILED`
/// marker with the message is left next to any partial artifacts.
pub fn in_run_dir<F>(subcommand: &str, config: &ExperimentConfig, out: &Path, body: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<Vec<String>>,
{
    config.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), config.to_json_pretty())?;
    match body(out) {
        Ok(mut artifacts) => {
            artifacts.insert(0, "config.json".to_string());
            artifacts.push("run.json".to_string());
            let summary = RunSummary {
                subcommand,
                seed: config.seed,
                version: env!("CARGO_PKG_VERSION"),
                config_hash: config.hash(),
                status: "ok",
                artifacts,
            };
            std::fs::write(out.join("run.json"), serde_json::to_vec_pretty(&summary)?)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::write(out.join("FAILED"), e.to_string());
            Err(e)
        }
    }
}

fn write_teacher_csv(path: &Path, log: &[TeacherStepLog]) -> Result<()> {
    let mut csv = String::from("step,loss_total,loss_diff,loss_temp,loss_facial,wall_ms\n");
    for row in log {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.step, row.loss_total, row.loss_diff, row.loss_temp, row.loss_facial, row.wall_ms
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn write_distill_csv(path: &Path, log: &[DistillStepLog]) -> Result<()> {
    let mut csv = String::from("step,loss_dmd,loss_reg,loss_critic,w_t_mean,mode,wall_ms\n");
    for row in log {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.step, row.loss_dmd, row.loss_reg, row.loss_critic, row.w_t_mean, row.mode,
            row.wall_ms
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// `gen-data`: write a synthetic corpus (clean plus corrupted clips) and its
/// metadata manifest.
pub fn run_gen_data(config: &ExperimentConfig, out: &Path) -> Result<()> {
    in_run_dir("gen-data", config, out, |dir| {
        let corpus_dir = dir.join("corpus");
        std::fs::create_dir_all(&corpus_dir)?;
        let frames = config.teacher.chunks_per_clip * config.teacher.chunk_frames;
        let n = config.corpus_clips;
        let n_corrupt = (n as f64 * config.corpus_corrupt_fraction).round() as usize;
        let modes = [
            CorruptionMode::Occlusion,
            CorruptionMode::Desync,
            CorruptionMode::LowQuality,
        ];
        let mut records: Vec<ClipRecord> = Vec::with_capacity(n);
        for i in 0..n {
            let id_seed = util::derive_seed(config.seed, &[0x9e4, i as u64]);
            let clip_seed = util::derive_seed(config.seed, &[0x9e5, i as u64]);
            let identity = generate_identity(&config.world, id_seed);
            let clean = generate_clip(&config.world, &identity, frames, clip_seed);
            let clip = if i < n_corrupt {
                corrupt_clip(
                    &config.world,
                    &clean,
                    &[modes[i % modes.len()]],
                    util::derive_seed(config.seed, &[0x9e6, i as u64]),
                )
            } else {
                clean
            };
            let rel_path = format!("corpus/clip_{i:04}");
            clipstore::save_clip(&dir.join(&rel_path), &clip, &config.world, clip_seed)?;
            records.push(corpus::build_record(&config.world, &clip, "synthetic", &rel_path));
        }
        corpus::write_manifest(&dir.join("manifest.ndjson"), &records)?;
        let mut artifacts = vec!["manifest.ndjson".to_string()];
        artifacts.extend((0..n).map(|i| format!("corpus/clip_{i:04}")));
        Ok(artifacts)
    })
}

/// `filter-corpus`: standardize, dedup, filter, and build training tuples.
pub fn run_filter_corpus(
    config: &ExperimentConfig,
    manifest: &Path,
    out: &Path,
) -> Result<()> {
    let manifest = manifest.to_path_buf();
    in_run_dir("filter-corpus", config, out, move |dir| {
        let mut records = corpus::read_manifest(&manifest)?;
        corpus::standardize(&mut records)?;
        let unique = corpus::dedup(&records);
        let (retained, report) = corpus::filter(&unique, &config.thresholds);
        let tuples = corpus::build_tuples(&retained, &config.world, config.teacher.chunk_frames);
        corpus::write_manifest(&dir.join("retained.ndjson"), &retained)?;
        std::fs::write(
            dir.join("filter_report.json"),
            serde_json::to_vec_pretty(&report)?,
        )?;
        std::fs::write(dir.join("tuples.json"), serde_json::to_vec_pretty(&tuples)?)?;
        Ok(vec![
            "retained.ndjson".to_string(),
            "filter_report.json".to_string(),
            "tuples.json".to_string(),
        ])
    })
}

/// `train-teacher`: pre-train, freeze, checkpoint, log.
pub fn run_train_teacher(config: &ExperimentConfig, out: &Path) -> Result<()> {
    in_run_dir("train-teacher", config, out, |dir| {
        let mut teacher_config = config.teacher;
        teacher_config.seed = util::derive_seed(config.seed, &[0x7ea5eed]);
        let run = teacher::train_teacher(&config.world, &config.codec, &teacher_config)?;
        save_checkpoint(
            &dir.join(TEACHER_CKPT),
            &run.params,
            teacher_config.steps,
            &config.hash(),
        )?;
        write_teacher_csv(&dir.join("train_teacher.csv"), &run.log)?;
        std::fs::write(
            dir.join("teacher_validation.json"),
            serde_json::to_vec_pretty(&serde_json::json!({
                "val_zero_baseline": run.val_zero_baseline,
                "val_final": run.val_final,
                "ratio": run.val_final / run.val_zero_baseline,
            }))?,
        )?;
        Ok(vec![
            TEACHER_CKPT.to_string(),
            "train_teacher.csv".to_string(),
            "teacher_validation.json".to_string(),
        ])
    })
}

fn load_params_checked(
    path: &Path,
    config: &ExperimentConfig,
    strict: bool,
    role: Role,
) -> Result<ModelParams> {
    let loaded = if strict {
        load_checkpoint_strict(path, &config.hash())?
    } else {
        load_checkpoint(path)?
    };
    if loaded.params.role() != role {
        return Err(Error::ConfigInvalid(format!(
            "checkpoint {} holds {} parameters, expected {role}",
            path.display(),
            loaded.params.role()
        )));
    }
    Ok(loaded.params)
}

/// `distill`: load a frozen teacher, train student and critic.
pub fn run_distill(
    config: &ExperimentConfig,
    teacher_ckpt: &Path,
    out: &Path,
    strict: bool,
) -> Result<()> {
    let teacher_ckpt = teacher_ckpt.to_path_buf();
    in_run_dir("distill", config, out, move |dir| {
        let teacher = load_params_checked(&teacher_ckpt, config, strict, Role::Teacher)?;
        let mut distill_config = config.distill;
        distill_config.seed = util::derive_seed(config.seed, &[0xd15eed]);
        let run = distill::distill(&config.world, &config.codec, &distill_config, &teacher)?;
        save_checkpoint(
            &dir.join(STUDENT_CKPT),
            &run.student,
            distill_config.steps,
            &config.hash(),
        )?;
        save_checkpoint(
            &dir.join(CRITIC_CKPT),
            &run.critic,
            distill_config.steps,
            &config.hash(),
        )?;
        write_distill_csv(&dir.join("train_distill.csv"), &run.log)?;
        Ok(vec![
            STUDENT_CKPT.to_string(),
            CRITIC_CKPT.to_string(),
            "train_distill.csv".to_string(),
        ])
    })
}

/// Evaluation oracle for a config: identity and driving clip seeds are
/// derived from the experiment seed.
pub fn eval_oracle(config: &ExperimentConfig) -> WorldOracle {
    WorldOracle {
        config: config.world,
        identity_seed: util::derive_seed(config.seed, &[0xe0a1]),
        clip_seed: util::derive_seed(config.seed, &[0xe0a2]),
    }
}

/// `rollout`: generate frames from a student checkpoint and persist them in
/// the clip layout.
pub fn run_rollout(
    config: &ExperimentConfig,
    student_ckpt: &Path,
    out: &Path,
    strict: bool,
) -> Result<()> {
    let student_ckpt = student_ckpt.to_path_buf();
    in_run_dir("rollout", config, out, move |dir| {
        let student = load_params_checked(&student_ckpt, config, strict, Role::Student)?;
        let oracle = eval_oracle(config);
        let mut rollout_config = config.rollout;
        rollout_config.seed = util::derive_seed(config.seed, &[0x2011]);
        let total = rollout_config.chunks * rollout_config.chunk_frames;
        let gt = oracle.clip(total);
        let result = rollout::rollout(
            &student,
            &config.codec,
            &gt.identity_image,
            &gt.audio,
            &rollout_config,
        )?;
        clipstore::save_rollout_frames(
            dir,
            &result.frames,
            &gt.audio,
            &config.world,
            rollout_config.seed,
            &format!("rollout-{:016x}", rollout_config.seed),
        )?;
        std::fs::write(
            dir.join("timing.json"),
            serde_json::to_vec_pretty(&serde_json::json!({
                "chunk_wall_ms": result.chunk_wall_ms,
            }))?,
        )?;
        Ok(vec![
            clipstore::ROLLOUT_META_FILE.to_string(),
            clipstore::FRAMES_FILE.to_string(),
            clipstore::AUDIO_FILE.to_string(),
            "timing.json".to_string(),
        ])
    })
}

/// Drift curves plus throughput for a student checkpoint; the teacher
/// checkpoint, when given, provides the many-step sampling baseline.
pub fn run_eval(
    config: &ExperimentConfig,
    student_ckpt: &Path,
    teacher_ckpt: Option<&Path>,
    out: &Path,
    strict: bool,
) -> Result<()> {
    let student_ckpt = student_ckpt.to_path_buf();
    let teacher_ckpt = teacher_ckpt.map(Path::to_path_buf);
    in_run_dir("eval", config, out, move |dir| {
        let student = load_params_checked(&student_ckpt, config, strict, Role::Student)?;
        let report = eval_student(config, &student, teacher_ckpt.as_deref(), Some(dir))?;
        report.write(dir)?;
        let mut artifacts = vec!["report.json".to_string(), "curves.csv".to_string()];
        if teacher_ckpt.is_some() {
            artifacts.push("throughput.json".to_string());
        }
        Ok(artifacts)
    })
}

/// Shared evaluation path: rollout `eval_chunks`, drift curves against the
/// oracle, and throughput (student steps vs a 50-step teacher baseline when
/// a teacher is supplied).
pub fn eval_student(
    config: &ExperimentConfig,
    student: &ModelParams,
    teacher_ckpt: Option<&Path>,
    throughput_out: Option<&Path>,
) -> Result<MetricsReport> {
    let oracle = eval_oracle(config);
    let mut rollout_config = config.rollout;
    rollout_config.chunks = config.metrics.eval_chunks;
    rollout_config.seed = util::derive_seed(config.seed, &[0x2011]);
    let total = rollout_config.chunks * rollout_config.chunk_frames;
    let gt = oracle.clip(total);
    let result = rollout::rollout(
        student,
        &config.codec,
        &gt.identity_image,
        &gt.audio,
        &rollout_config,
    )?;

    // Throughput over at least 5 chunks.
    let mut tp_config = rollout_config;
    tp_config.chunks = rollout_config.chunks.max(5);
    let tp_total = tp_config.chunks * tp_config.chunk_frames;
    let tp_gt = oracle.clip(tp_total);
    let student_fps = rollout::measure_throughput(
        student,
        &config.codec,
        &tp_gt.identity_image,
        &tp_gt.audio,
        &tp_config,
        rollout_config.denoise_steps,
    )?;
    if let (Some(dir), Some(teacher_path)) = (throughput_out, teacher_ckpt) {
        let teacher = load_checkpoint(teacher_path)?.params;
        let teacher_fps = rollout::measure_throughput(
            &teacher,
            &config.codec,
            &tp_gt.identity_image,
            &tp_gt.audio,
            &tp_config,
            50,
        )?;
        std::fs::write(
            dir.join("throughput.json"),
            serde_json::to_vec_pretty(&serde_json::json!({
                "student_fps": student_fps,
                "student_steps": rollout_config.denoise_steps,
                "teacher_fps": teacher_fps,
                "teacher_steps": 50,
                "speedup": student_fps / teacher_fps,
            }))?,
        )?;
    }

    Ok(metrics::drift_curve(
        &result.frames,
        &oracle,
        rollout_config.chunk_frames,
        config.metrics.stride,
        Some(student_fps),
        serde_json::to_value(config).expect("config serializes"),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub identity: String,
    pub akd: bool,
    pub mode: String,
    pub id_sim_last: f64,
    pub frechet_last: f64,
    pub sync_last: f64,
}

fn last(v: &[f64]) -> f64 {
    *v.last().expect("non-empty curve")
}

fn rollout_metrics(
    config: &ExperimentConfig,
    params: &ModelParams,
    denoise_steps: usize,
) -> Result<MetricsReport> {
    let oracle = eval_oracle(config);
    let mut rollout_config = config.rollout;
    rollout_config.chunks = config.metrics.eval_chunks;
    rollout_config.identity = config.distill.identity;
    rollout_config.denoise_steps = denoise_steps;
    rollout_config.seed = util::derive_seed(config.seed, &[0x2011]);
    let total = rollout_config.chunks * rollout_config.chunk_frames;
    let gt = oracle.clip(total);
    let result = rollout::rollout_with_params(
        params,
        &config.codec,
        &gt.identity_image,
        &gt.audio,
        &rollout_config,
    )?;
    Ok(metrics::drift_curve(
        &result.frames,
        &oracle,
        rollout_config.chunk_frames,
        config.metrics.stride,
        None,
        serde_json::Value::Null,
    ))
}

/// `ablate`: the 2x2 identity-scheme vs distillation grid plus the three
/// conditioning-topology modes, one row per configuration.
pub fn run_ablate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    in_run_dir("ablate", config, out, |dir| {
        // One teacher per identity scheme.
        let schemes = [IdentityScheme::Tre, IdentityScheme::Etr];
        let teachers: Vec<Result<ModelParams>> = schemes
            .par_iter()
            .map(|&scheme| {
                let mut tc = config.teacher;
                tc.identity = scheme;
                tc.seed = util::derive_seed(config.seed, &[0x7ea5eed]);
                Ok(teacher::train_teacher(&config.world, &config.codec, &tc)?.params)
            })
            .collect();
        let mut teachers_iter = teachers.into_iter();
        let teacher_tre = teachers_iter.next().expect("two teachers")?;
        let teacher_etr = teachers_iter.next().expect("two teachers")?;

        let distill_cell = |scheme: IdentityScheme,
                            mode: DistillMode,
                            teacher: &ModelParams|
         -> Result<ModelParams> {
            let mut dc: DistillConfig = config.distill;
            dc.identity = scheme;
            dc.mode = mode;
            dc.seed = util::derive_seed(config.seed, &[0xd15eed]);
            Ok(distill::distill(&config.world, &config.codec, &dc, teacher)?.student)
        };

        let cells: Vec<(IdentityScheme, DistillMode, &ModelParams)> = vec![
            (IdentityScheme::Tre, DistillMode::Asymmetric, &teacher_tre),
            (IdentityScheme::Etr, DistillMode::Asymmetric, &teacher_etr),
            (IdentityScheme::Tre, DistillMode::SymmetricGt, &teacher_tre),
            (IdentityScheme::Tre, DistillMode::SymmetricGen, &teacher_tre),
        ];
        let students: Vec<Result<ModelParams>> = cells
            .par_iter()
            .map(|(scheme, mode, teacher)| distill_cell(*scheme, *mode, teacher))
            .collect();
        let mut students_iter = students.into_iter();
        let student_tre_asym = students_iter.next().expect("cell")?;
        let student_etr_asym = students_iter.next().expect("cell")?;
        let student_sym_gt = students_iter.next().expect("cell")?;
        let student_sym_gen = students_iter.next().expect("cell")?;

        let eval_cell = |scheme: IdentityScheme,
                         params: &ModelParams,
                         steps: usize|
         -> Result<MetricsReport> {
            let mut cfg = config.clone();
            cfg.distill.identity = scheme;
            rollout_metrics(&cfg, params, steps)
        };

        let n_student = config.distill.student_steps;
        let mut rows = Vec::new();
        let mut push_row = |setting: &str,
                            scheme: IdentityScheme,
                            akd: bool,
                            mode: &str,
                            report: &MetricsReport| {
            rows.push(AblationRow {
                setting: setting.to_string(),
                identity: match scheme {
                    IdentityScheme::Tre => "tre".into(),
                    IdentityScheme::Etr => "etr".into(),
                },
                akd,
                mode: mode.to_string(),
                id_sim_last: last(&report.id_sim),
                frechet_last: last(&report.frechet),
                sync_last: last(&report.sync_corr),
            });
        };

        // 2x2 grid: identity scheme x with/without distillation. The
        // without-distillation rows sample the teacher directly at 50 steps.
        let r = eval_cell(IdentityScheme::Tre, &teacher_tre, 50)?;
        push_row("tre_no_akd", IdentityScheme::Tre, false, "none", &r);
        let r = eval_cell(IdentityScheme::Etr, &teacher_etr, 50)?;
        push_row("etr_no_akd", IdentityScheme::Etr, false, "none", &r);
        let r_tre_asym = eval_cell(IdentityScheme::Tre, &student_tre_asym, n_student)?;
        push_row("tre_akd", IdentityScheme::Tre, true, "asymmetric", &r_tre_asym);
        let r = eval_cell(IdentityScheme::Etr, &student_etr_asym, n_student)?;
        push_row("etr_akd", IdentityScheme::Etr, true, "asymmetric", &r);

        // Conditioning-topology modes.
        push_row(
            "mode_asymmetric",
            IdentityScheme::Tre,
            true,
            "asymmetric",
            &r_tre_asym,
        );
        let r = eval_cell(IdentityScheme::Tre, &student_sym_gt, n_student)?;
        push_row("mode_symmetric_gt", IdentityScheme::Tre, true, "symmetric_gt", &r);
        let r = eval_cell(IdentityScheme::Tre, &student_sym_gen, n_student)?;
        push_row(
            "mode_symmetric_gen",
            IdentityScheme::Tre,
            true,
            "symmetric_gen",
            &r,
        );

        std::fs::write(
            dir.join("ablation.json"),
            serde_json::to_vec_pretty(&rows)?,
        )?;
        let mut csv =
            String::from("setting,identity,akd,mode,id_sim_last,frechet_last,sync_last\n");
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.setting,
                row.identity,
                row.akd,
                row.mode,
                row.id_sim_last,
                row.frechet_last,
                row.sync_last
            ));
        }
        std::fs::write(dir.join("ablation_table.csv"), csv)?;
        Ok(vec![
            "ablation.json".to_string(),
            "ablation_table.csv".to_string(),
        ])
    })
}

/// Compare two run directories for byte-identical artifacts, skipping files
/// with wall-clock content (`timing.json`, `*.csv` training logs carry a
/// wall_ms column compared structurally instead).
pub fn artifacts_bitwise_equal(a: &Path, b: &Path) -> Result<bool> {
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run.json"))?)?;
    let artifacts = run["artifacts"]
        .as_array()
        .ok_or_else(|| Error::ConfigInvalid("run.json missing artifacts".into()))?;
    for artifact in artifacts {
        let name = artifact
            .as_str()
            .ok_or_else(|| Error::ConfigInvalid("non-string artifact".into()))?;
        if name == "timing.json" || name == "throughput.json" {
            continue;
        }
        let pa = a.join(name);
        let pb = b.join(name);
        if pa.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(&pa)?
                .map(|e| e.map(|e| e.file_name()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            for entry in entries {
                if !file_equal_modulo_wall(&pa.join(&entry), &pb.join(&entry))? {
                    return Ok(false);
                }
            }
        } else if !file_equal_modulo_wall(&pa, &pb)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Byte equality, except wall-clock content: training CSVs compare without
/// their wall_ms column and report.json without its fps field.
fn file_equal_modulo_wall(a: &Path, b: &Path) -> Result<bool> {
    let ba = std::fs::read(a)?;
    let bb = std::fs::read(b)?;
    let name = a.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name == "report.json" {
        let mut va: serde_json::Value = serde_json::from_slice(&ba)?;
        let mut vb: serde_json::Value = serde_json::from_slice(&bb)?;
        va["fps"] = serde_json::Value::Null;
        vb["fps"] = serde_json::Value::Null;
        return Ok(va == vb);
    }
    let is_train_csv = name.starts_with("train_") && name.ends_with(".csv");
    if !is_train_csv {
        return Ok(ba == bb);
    }
    let sa = String::from_utf8_lossy(&ba);
    let sb = String::from_utf8_lossy(&bb);
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split(',').collect();
                // wall_ms is always the last column.
                cols.pop();
                cols.join(",")
            })
            .collect()
    };
    Ok(strip(&sa) == strip(&sb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.world.height = 8;
        config.world.width = 8;
        config.world.mask_rect = (4, 7, 2, 6);
        config.teacher.steps = 4;
        config.teacher.batch = 2;
        config.teacher.chunks_per_clip = 2;
        config.teacher.chunk_frames = 5;
        config.teacher.val_clips = 2;
        config.distill.steps = 3;
        config.distill.chunks_per_sample = 2;
        config.distill.chunk_frames = 5;
        config.rollout.chunk_frames = 5;
        config.rollout.chunks = 3;
        config.metrics.eval_chunks = 3;
        config.corpus_clips = 6;
        config.seed = 11;
        config
    }

    #[test]
    fn gen_data_writes_manifest_and_clips() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        run_gen_data(&config, dir.path()).unwrap();
        assert!(dir.path().join("manifest.ndjson").exists());
        assert!(dir.path().join("run.json").exists());
        let records = corpus::read_manifest(&dir.path().join("manifest.ndjson")).unwrap();
        assert_eq!(records.len(), 6);
        // Half corrupted by default fraction.
        let corrupted = records
            .iter()
            .filter(|r| {
                r.face_visibility < 0.8 || r.quality < 0.5 || r.sync_c < 0.5 || r.sync_d > 2.0
            })
            .count();
        assert_eq!(corrupted, 3, "{records:#?}");
    }

    #[test]
    fn filter_corpus_keeps_clean_set() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        run_gen_data(&config, &dir.path().join("data")).unwrap();
        run_filter_corpus(
            &config,
            &dir.path().join("data/manifest.ndjson"),
            &dir.path().join("filtered"),
        )
        .unwrap();
        let retained =
            corpus::read_manifest(&dir.path().join("filtered/retained.ndjson")).unwrap();
        assert_eq!(retained.len(), 3);
        let report: serde_json::Value = serde_json::from_slice(
            &std::fs::read(dir.path().join("filtered/filter_report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report["total"], 6);
        assert_eq!(report["retained"], 3);
    }

    #[test]
    fn pipeline_train_distill_rollout_eval() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        run_train_teacher(&config, &dir.path().join("teacher")).unwrap();
        let teacher_ckpt = dir.path().join("teacher").join(TEACHER_CKPT);
        assert!(teacher_ckpt.exists());

        run_distill(&config, &teacher_ckpt, &dir.path().join("student"), true).unwrap();
        let student_ckpt = dir.path().join("student").join(STUDENT_CKPT);
        assert!(student_ckpt.exists());

        run_rollout(&config, &student_ckpt, &dir.path().join("roll"), true).unwrap();
        assert!(dir.path().join("roll/frames.f32").exists());
        let stored = clipstore::load_clip(&dir.path().join("roll")).unwrap();
        assert_eq!(stored.frames.dim().0, 3 * 5);
        assert!(stored.phase.is_none());

        run_eval(
            &config,
            &student_ckpt,
            Some(&teacher_ckpt),
            &dir.path().join("eval"),
            true,
        )
        .unwrap();
        assert!(dir.path().join("eval/report.json").exists());
        assert!(dir.path().join("eval/curves.csv").exists());
        assert!(dir.path().join("eval/throughput.json").exists());
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        run_gen_data(&config, &dir.path().join("a")).unwrap();
        run_gen_data(&config, &dir.path().join("b")).unwrap();
        assert!(artifacts_bitwise_equal(&dir.path().join("a"), &dir.path().join("b")).unwrap());

        run_train_teacher(&config, &dir.path().join("t1")).unwrap();
        run_train_teacher(&config, &dir.path().join("t2")).unwrap();
        assert!(artifacts_bitwise_equal(&dir.path().join("t1"), &dir.path().join("t2")).unwrap());
    }

    #[test]
    fn failed_marker_on_bad_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let bogus = dir.path().join("missing.ckpt");
        let out = dir.path().join("out");
        assert!(run_distill(&config, &bogus, &out, false).is_err());
        assert!(out.join("FAILED").exists());
    }
}
