//! Few-step student distillation with a fake-score critic.
//!
//! Three networks: a frozen teacher anchored on ground-truth continuity
//! references, a student generating chunks autoregressively on its own
//! decoded references, and a critic tracking the student's sample
//! distribution. The student descends a score-difference surrogate whose
//! gradient with respect to the sample equals `w(t) (s_fake - s_real)`,
//! plus a Huber-style regression anchor toward the ground-truth latents.
//! Symmetric modes route the same references to every network and exist as
//! ablation arms.

use crate::autodiff::{array4_to_mat, Tape, Var};
use crate::codec::{self, CodecConfig, LatentChunk};
use crate::conditioning::{
    build_continuity, ConditioningBundle, ContinuitySource, IdentityScheme, Provenance,
};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, Role, TapeModel, TimeSampling};
use crate::optim::{AdamW, AdamWConfig};
use crate::teacher::{gt_chunk_conditioning, ClipSampler};
use crate::util;
use crate::world::WorldConfig;
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Teacher sees ground-truth references, student and critic see
    /// self-generated references.
    Asymmetric,
    /// Every network, including the student's generation pass, conditions on
    /// ground-truth references. Inference still runs on generated references,
    /// which reproduces the train-inference mismatch this arm measures.
    SymmetricGt,
    /// Every network conditions on self-generated references.
    SymmetricGen,
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DistillMode::Asymmetric => "asymmetric",
            DistillMode::SymmetricGt => "symmetric_gt",
            DistillMode::SymmetricGen => "symmetric_gen",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Student denoising steps N.
    pub student_steps: usize,
    pub lambda_reg: f64,
    /// Scale on the DMD surrogate; 1.0 nominal, 0 disables distribution
    /// matching (pure-regression degeneracy checks).
    pub dmd_scale: f64,
    pub critic_updates_per_student: usize,
    /// Chunks per training sample, generated autoregressively.
    pub chunks_per_sample: usize,
    pub chunk_frames: usize,
    pub tau: usize,
    pub time_sampling: TimeSampling,
    pub w_floor: f64,
    pub steps: usize,
    pub student_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub identity: IdentityScheme,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mode: DistillMode::Asymmetric,
            student_steps: 4,
            lambda_reg: 0.2,
            dmd_scale: 1.0,
            critic_updates_per_student: 2,
            chunks_per_sample: 3,
            chunk_frames: 17,
            tau: 5,
            time_sampling: TimeSampling::default(),
            w_floor: 1e-3,
            steps: 800,
            student_lr: 2e-4,
            critic_lr: 1e-3,
            weight_decay: 1e-4,
            identity: IdentityScheme::Tre,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, codec_config: &CodecConfig) -> Result<()> {
        if self.student_steps == 0 {
            return Err(Error::ConfigInvalid("student_steps must be >= 1".into()));
        }
        if self.lambda_reg < 0.0 || self.dmd_scale < 0.0 || self.w_floor <= 0.0 {
            return Err(Error::ConfigInvalid(
                "lambda_reg, dmd_scale must be >= 0 and w_floor > 0".into(),
            ));
        }
        if self.steps == 0 || self.chunks_per_sample == 0 {
            return Err(Error::ConfigInvalid(
                "steps and chunks_per_sample must be positive".into(),
            ));
        }
        codec_config.check_frames(self.chunk_frames, 2, 2)?;
        codec_config.check_tau(self.tau, self.chunk_frames)?;
        Ok(())
    }
}

/// Student/critic pair alongside the frozen teacher.
#[derive(Debug)]
pub struct DistillState {
    pub student: ModelParams,
    pub critic: ModelParams,
    pub teacher: ModelParams,
    pub step: usize,
}

impl DistillState {
    /// Both trainable networks start as copies of the teacher.
    pub fn new(teacher: &ModelParams) -> Result<DistillState> {
        if !teacher.is_frozen() {
            return Err(Error::TeacherNotFrozen);
        }
        Ok(DistillState {
            student: teacher.cloned_as(Role::Student),
            critic: teacher.cloned_as(Role::Critic),
            teacher: teacher.clone(),
            step: 0,
        })
    }
}

/// Timestep weighting: `(1-t)^2 / max(mean|gap|, floor)`. The quadratic
/// factor cancels the `1/(1-t)` amplification of score conversion near
/// `t -> 1`; the denominator normalizes per-sample gradient scale.
pub fn dmd_weight(t: f64, gap_mean_abs: f64, w_floor: f64) -> f64 {
    (1.0 - t) * (1.0 - t) / gap_mean_abs.max(w_floor)
}

/// Score gap and weight for one chunk: noise the student sample along the
/// linear path, score it under both networks, convert to scores.
pub struct DmdTerms {
    pub t: f64,
    /// `s_fake - s_real`, constant with respect to the student.
    pub gap: Array4<f64>,
    pub weight: f64,
}

pub fn dmd_terms(
    teacher: &ModelParams,
    critic: &ModelParams,
    x_hat: &Array4<f64>,
    conds_teacher: &ConditioningBundle,
    conds_critic: &ConditioningBundle,
    t: f64,
    eps: &Array4<f64>,
    w_floor: f64,
) -> Result<DmdTerms> {
    let xt = (1.0 - t) * eps + t * x_hat;
    let xt_lat = LatentChunk {
        data: xt.clone(),
        head_is_spatial_only: false,
    };
    let x_in_teacher = crate::conditioning::assemble_input(&xt_lat, &conds_teacher.identity);
    let v_real = model::forward(
        teacher,
        t,
        &x_in_teacher,
        &conds_teacher.audio,
        &conds_teacher.continuity,
    )?;
    let x_in_critic = crate::conditioning::assemble_input(&xt_lat, &conds_critic.identity);
    let v_fake = model::forward(
        critic,
        t,
        &x_in_critic,
        &conds_critic.audio,
        &conds_critic.continuity,
    )?;
    let s_real = model::score_from_velocity(&v_real, &xt, t)?;
    let s_fake = model::score_from_velocity(&v_fake, &xt, t)?;
    let gap = &s_fake - &s_real;
    let gap_mean_abs = gap.mapv(|v| v.abs()).mean().unwrap();
    let weight = dmd_weight(t, gap_mean_abs, w_floor);
    Ok(DmdTerms { t, gap, weight })
}

/// The scalar surrogate `w(t) <stopgrad(s_fake - s_real), x_hat>`, whose
/// gradient with respect to `x_hat` is the DMD integrand.
pub fn dmd_student_loss(
    state: &DistillState,
    x_hat: &Array4<f64>,
    conds_teacher: &ConditioningBundle,
    conds_critic: &ConditioningBundle,
    config: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let t = config.time_sampling.sample(rng);
    let eps = Array4::from_shape_fn(x_hat.dim(), |_| StandardNormal.sample(rng));
    let terms = dmd_terms(
        &state.teacher,
        &state.critic,
        x_hat,
        conds_teacher,
        conds_critic,
        t,
        &eps,
        config.w_floor,
    )?;
    Ok(terms.weight * (&terms.gap * x_hat).sum())
}

/// Critic flow-matching loss on the linear path toward a detached student
/// sample: target is `x_hat - eps`.
pub fn critic_loss(
    state: &DistillState,
    x_hat_detached: &Array4<f64>,
    conds_critic: &ConditioningBundle,
    config: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let t = config.time_sampling.sample(rng);
    let eps: Array4<f64> = Array4::from_shape_fn(x_hat_detached.dim(), |_| StandardNormal.sample(rng));
    let xt = (1.0 - t) * &eps + t * x_hat_detached;
    let sample = model::FlowSample {
        t,
        x0: eps.clone(),
        x1: x_hat_detached.clone(),
        xt,
        target: x_hat_detached - &eps,
    };
    model::fm_loss(&state.critic, &[sample], std::slice::from_ref(conds_critic))
}

/// Huber-style regression anchor on global norms: `0.5 ||d||_2^2` when
/// `||d||_1 <= 1`, else `||d||_1 - 0.5`.
pub fn regression_anchor(x_hat: &Array4<f64>, x_gt: &Array4<f64>) -> f64 {
    let d = x_hat - x_gt;
    let l1: f64 = d.iter().map(|v| v.abs()).sum();
    if l1 <= 1.0 {
        0.5 * d.iter().map(|v| v * v).sum::<f64>()
    } else {
        l1 - 0.5
    }
}

/// Tape version of [`regression_anchor`]; the branch is chosen on values.
fn regression_anchor_on_tape(tape: &mut Tape, x_hat: Var, x_gt: &Array4<f64>) -> Var {
    let gt = tape.constant(array4_to_mat(x_gt));
    let d = tape.sub(x_hat, gt);
    let l1_node = tape.sum_abs(d);
    let l1 = tape.scalar(l1_node);
    if l1 <= 1.0 {
        let sq = tape.mul(d, d);
        let s = tape.sum_all(sq);
        tape.scale(s, 0.5)
    } else {
        let neg_half = tape.constant(Array2::from_elem((1, 1), -0.5));
        tape.add(l1_node, neg_half)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistillStepLog {
    pub step: usize,
    pub loss_dmd: f64,
    pub loss_reg: f64,
    pub loss_critic: f64,
    pub w_t_mean: f64,
    pub mode: String,
    pub wall_ms: f64,
}

pub struct DistillRun {
    pub student: ModelParams,
    pub critic: ModelParams,
    pub log: Vec<DistillStepLog>,
}

fn mode_allows(mode: DistillMode, net: Role, p: Provenance) -> bool {
    if p == Provenance::Ref {
        return true;
    }
    match mode {
        DistillMode::Asymmetric => match net {
            Role::Teacher => p == Provenance::Gt,
            Role::Student | Role::Critic => p == Provenance::Gen,
        },
        DistillMode::SymmetricGt => p == Provenance::Gt,
        DistillMode::SymmetricGen => p == Provenance::Gen,
    }
}

/// Run the distillation loop and return the trained student.
pub fn distill(
    world: &WorldConfig,
    codec_config: &CodecConfig,
    config: &DistillConfig,
    teacher: &ModelParams,
) -> Result<DistillRun> {
    world.validate()?;
    config.validate(codec_config)?;
    let mut state = DistillState::new(teacher)?;
    let mut student_opt = AdamW::new(
        AdamWConfig::new(config.student_lr, config.weight_decay),
        &state.student,
    );
    let mut critic_opt = AdamW::new(
        AdamWConfig::new(config.critic_lr, config.weight_decay),
        &state.critic,
    );
    let sampler = ClipSampler {
        world: *world,
        frames: config.chunks_per_sample * config.chunk_frames,
    };
    let k_chunks = config.chunks_per_sample;
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let started = std::time::Instant::now();
        let stream = util::derive_seed(config.seed, &[0xd157, step as u64]);
        let (clip, _identity) = sampler.sample(stream, 0);
        let mut rng = util::seeded_rng(stream, &[0x57e9]);

        // Ground-truth conditioning per chunk (chunk 1 ref, then gt tails).
        let mut conds_gt = Vec::with_capacity(k_chunks);
        let mut gt_latents = Vec::with_capacity(k_chunks);
        for k in 0..k_chunks {
            let (conds, chunk) = gt_chunk_conditioning(
                codec_config,
                &clip,
                config.chunk_frames,
                config.tau,
                k,
                config.identity,
            )?;
            gt_latents.push(codec::encode(codec_config, &chunk)?.data);
            conds_gt.push(conds);
        }

        // Student generation pass: autoregressive chunks on one tape.
        let mut tape = Tape::new();
        let tm = TapeModel::insert(&mut tape, &state.student);
        let arch = *state.student.arch();
        let latent_len = codec_config.latent_len(config.chunk_frames);
        let mut x_hat_vars: Vec<Var> = Vec::with_capacity(k_chunks);
        let mut x_hat_vals: Vec<Array4<f64>> = Vec::with_capacity(k_chunks);
        let mut conds_student: Vec<ConditioningBundle> = Vec::with_capacity(k_chunks);

        for k in 0..k_chunks {
            let kappa = if k == 0 {
                conds_gt[0].continuity.clone()
            } else {
                match config.mode {
                    DistillMode::Asymmetric | DistillMode::SymmetricGen => {
                        // Detached at the chunk boundary: the reference is a
                        // constant built from the previous chunk's value.
                        let prev = LatentChunk {
                            data: x_hat_vals[k - 1].clone(),
                            head_is_spatial_only: false,
                        };
                        build_continuity(
                            codec_config,
                            ContinuitySource::GeneratedLatent(&prev, config.chunk_frames),
                            config.tau,
                        )?
                    }
                    DistillMode::SymmetricGt => conds_gt[k].continuity.clone(),
                }
            };
            assert!(
                mode_allows(config.mode, Role::Student, kappa.provenance()),
                "mode {} fed student a {:?} reference",
                config.mode,
                kappa.provenance()
            );
            let conds = conds_gt[k].with_continuity(kappa);
            let z = model::sample_noise(
                &arch,
                latent_len,
                &mut util::seeded_rng(stream, &[0x2e01, k as u64]),
            );
            let zv = tape.constant(array4_to_mat(&z));
            let x_hat = tm.euler_sample(&mut tape, zv, &conds, config.student_steps);
            let val = tape.value(x_hat).to_owned();
            let val = val
                .into_shape_with_order((latent_len, arch.latent_h, arch.latent_w, arch.channels))
                .unwrap();
            x_hat_vars.push(x_hat);
            x_hat_vals.push(val);
            conds_student.push(conds);
        }

        // Critic conditioning per chunk.
        let conds_critic: Vec<ConditioningBundle> = (0..k_chunks)
            .map(|k| match config.mode {
                DistillMode::Asymmetric | DistillMode::SymmetricGen => {
                    conds_student[k].clone()
                }
                DistillMode::SymmetricGt => conds_gt[k].clone(),
            })
            .collect();

        // Critic updates on stop-gradient samples.
        let mut critic_loss_acc = 0.0;
        for u in 0..config.critic_updates_per_student {
            let mut ctape = Tape::new();
            let ctm = TapeModel::insert(&mut ctape, &state.critic);
            let mut closses = Vec::with_capacity(k_chunks);
            for k in 0..k_chunks {
                assert!(
                    mode_allows(config.mode, Role::Critic, conds_critic[k].continuity.provenance()),
                    "mode {} fed critic a {:?} reference",
                    config.mode,
                    conds_critic[k].continuity.provenance()
                );
                let t = config.time_sampling.sample(&mut rng);
                let eps: Array4<f64> =
                    Array4::from_shape_fn(x_hat_vals[k].dim(), |_| StandardNormal.sample(&mut rng));
                let sample = model::FlowSample {
                    t,
                    x0: eps.clone(),
                    x1: x_hat_vals[k].clone(),
                    xt: (1.0 - t) * &eps + t * &x_hat_vals[k],
                    target: &x_hat_vals[k] - &eps,
                };
                closses.push(ctm.fm_loss(&mut ctape, &sample, &conds_critic[k]));
            }
            let mut closs = closses[0];
            for &l in &closses[1..] {
                closs = ctape.add(closs, l);
            }
            let closs = ctape.scale(closs, 1.0 / k_chunks as f64);
            let cval = ctape.scalar(closs);
            if !cval.is_finite() {
                return Err(Error::DistillDiverged { step });
            }
            if u == config.critic_updates_per_student - 1 {
                critic_loss_acc = cval;
            }
            let mut grads = ctape.backward(closs);
            let grads = ctm.collect_grads(&state.critic, &mut grads);
            critic_opt.step(&mut state.critic, &grads)?;
        }

        // Student update: surrogate plus regression anchor, mean over chunks.
        let mut dmd_acc = 0.0;
        let mut reg_acc = 0.0;
        let mut w_acc = 0.0;
        let mut chunk_losses = Vec::with_capacity(k_chunks);
        for k in 0..k_chunks {
            let teacher_conds = match config.mode {
                DistillMode::Asymmetric | DistillMode::SymmetricGt => &conds_gt[k],
                DistillMode::SymmetricGen => &conds_student[k],
            };
            assert!(
                mode_allows(
                    config.mode,
                    Role::Teacher,
                    teacher_conds.continuity.provenance()
                ),
                "mode {} fed teacher a {:?} reference",
                config.mode,
                teacher_conds.continuity.provenance()
            );
            let t = config.time_sampling.sample(&mut rng);
            let eps: Array4<f64> =
                Array4::from_shape_fn(x_hat_vals[k].dim(), |_| StandardNormal.sample(&mut rng));
            let terms = dmd_terms(
                &state.teacher,
                &state.critic,
                &x_hat_vals[k],
                teacher_conds,
                &conds_critic[k],
                t,
                &eps,
                config.w_floor,
            )?;
            w_acc += terms.weight;

            let gap_c = tape.constant(array4_to_mat(&terms.gap));
            let prod = tape.mul(gap_c, x_hat_vars[k]);
            let ip = tape.sum_all(prod);
            let surrogate = tape.scale(ip, terms.weight * config.dmd_scale);
            dmd_acc += tape.scalar(surrogate);

            let reg = regression_anchor_on_tape(&mut tape, x_hat_vars[k], &gt_latents[k]);
            reg_acc += tape.scalar(reg);
            let reg_w = tape.scale(reg, config.lambda_reg);
            chunk_losses.push(tape.add(surrogate, reg_w));
        }
        let mut total = chunk_losses[0];
        for &l in &chunk_losses[1..] {
            total = tape.add(total, l);
        }
        let total = tape.scale(total, 1.0 / k_chunks as f64);
        let total_val = tape.scalar(total);
        if !total_val.is_finite() {
            return Err(Error::DistillDiverged { step });
        }
        let mut grads = tape.backward(total);
        let grads = tm.collect_grads(&state.student, &mut grads);
        student_opt.step(&mut state.student, &grads)?;

        state.step = step + 1;
        log.push(DistillStepLog {
            step,
            loss_dmd: dmd_acc / k_chunks as f64,
            loss_reg: reg_acc / k_chunks as f64,
            loss_critic: critic_loss_acc,
            w_t_mean: w_acc / k_chunks as f64,
            mode: config.mode.to_string(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(DistillRun {
        student: state.student,
        critic: state.critic,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{AudioCondition, ContinuityRef, IdentityCondition};
    use crate::model::ArchConfig;
    use ndarray::Array2;

    fn micro_arch() -> ArchConfig {
        ArchConfig {
            latent_h: 1,
            latent_w: 1,
            channels: 2,
            audio_dim: 2,
            model_dim: 4,
            n_heads: 2,
            n_blocks: 1,
            ff_dim: 4,
        }
    }

    fn micro_conds() -> ConditioningBundle {
        let audio = AudioCondition {
            per_latent: Array2::from_shape_vec((2, 2), vec![0.2, -0.1, 0.4, 0.3]).unwrap(),
            alignment: vec![(0, 0), (1, 4)],
        };
        let identity = IdentityCondition {
            latents: Array4::from_shape_fn((2, 1, 1, 2), |(l, _, _, c)| {
                0.1 * (l + c) as f64 + 0.05
            }),
            scheme: IdentityScheme::Tre,
        };
        let kappa = ContinuityRef::from_latents(
            Array4::from_elem((1, 1, 1, 2), 0.2),
            Provenance::Ref,
        );
        ConditioningBundle {
            audio,
            identity,
            continuity: kappa,
        }
    }

    #[test]
    fn huber_anchor_unit_values() {
        let zero = Array4::zeros((1, 1, 1, 1));
        assert_eq!(regression_anchor(&zero, &zero), 0.0);
        let x = Array4::from_elem((1, 1, 1, 1), 0.6);
        assert!((regression_anchor(&x, &zero) - 0.18).abs() < 1e-12);
        let y = Array4::from_elem((1, 1, 1, 1), 3.0);
        assert!((regression_anchor(&y, &zero) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dmd_surrogate_zero_gap_and_linear_form() {
        // Identical networks and identical conditioning: zero gap, and the
        // surrogate gradient wrt x_hat is w * gap elementwise.
        let mut teacher = ModelParams::init(micro_arch(), Role::Teacher, 1);
        teacher.freeze();
        let state = DistillState::new(&teacher).unwrap();
        let conds = micro_conds();
        let x_hat = Array4::from_elem((2, 1, 1, 2), 0.3);
        let config = DistillConfig::default();
        let mut rng = util::seeded_rng(3, &[1]);
        let loss = dmd_student_loss(&state, &x_hat, &conds, &conds, &config, &mut rng).unwrap();
        // gap = 0 everywhere -> surrogate 0 (and gradient 0).
        assert_eq!(loss, 0.0);

        // Constant gap d: dsurrogate/dx_hat = w * d per element.
        let eps = Array4::zeros((2, 1, 1, 2));
        let terms = dmd_terms(
            &state.teacher,
            &state.critic,
            &x_hat,
            &conds,
            &conds,
            0.5,
            &eps,
            config.w_floor,
        )
        .unwrap();
        assert!(terms.gap.iter().all(|v| v.abs() < 1e-12));
        let d = 0.7;
        let gap = Array4::from_elem(x_hat.dim(), d);
        let w = dmd_weight(0.5, d, config.w_floor);
        // surrogate = w * sum(gap * x_hat): gradient is w * d everywhere.
        let mut tape = Tape::new();
        let xv = tape.param(array4_to_mat(&x_hat).into_shared());
        let gv = tape.constant(array4_to_mat(&gap));
        let prod = tape.mul(gv, xv);
        let s = tape.sum_all(prod);
        let s = tape.scale(s, w);
        let grads = tape.backward(s);
        let g = grads.get(xv).unwrap();
        assert!(g.iter().all(|v| (v - w * d).abs() < 1e-12));
    }

    #[test]
    fn critic_loss_trivial_cases() {
        let mut teacher = ModelParams::init(micro_arch(), Role::Teacher, 2);
        teacher.freeze();
        let state = DistillState::new(&teacher).unwrap();
        let conds = micro_conds();
        let config = DistillConfig::default();
        // x_hat = eps degenerate: target 0, zero-head critic predicts 0.
        // Use a fixed rng; critic_loss draws its own eps, so instead check
        // the zero-prediction case directly through fm_loss semantics:
        // target = x_hat - eps; when x_hat equals the drawn eps the loss is 0
        // only in expectation, so here assert the zero-sample case instead.
        let x_hat = Array4::zeros((2, 1, 1, 2));
        let mut rng = util::seeded_rng(7, &[2]);
        let loss = critic_loss(&state, &x_hat, &conds, &config, &mut rng).unwrap();
        // Zero-head critic predicts 0; target = -eps, so loss = mean(eps^2) > 0.
        assert!(loss > 0.0);

        // Perfect-prediction case: hand-built sample with x1 = eps makes the
        // target zero, so the zero critic is exact.
        let eps = Array4::from_elem((2, 1, 1, 2), 0.4);
        let sample = model::FlowSample {
            t: 0.5,
            x0: eps.clone(),
            x1: eps.clone(),
            xt: eps.clone(),
            target: &eps - &eps,
        };
        let l = model::fm_loss(&state.critic, &[sample], std::slice::from_ref(&conds)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn generate_student_chunk_gradient_through_unroll() {
        // FD check of d||euler(theta)||^2 / dtheta through the 4-step unroll
        // on a micro-model.
        let mut params = ModelParams::init(micro_arch(), Role::Student, 9);
        {
            let mut rng = util::seeded_rng(31, &[5]);
            use rand::Rng;
            let tensors = params.tensors_mut().unwrap();
            for (_, m) in tensors.iter_mut() {
                *m = Array2::from_shape_fn(m.dim(), |_| rng.gen_range(-0.4..0.4)).into_shared();
            }
        }
        assert!(params.param_count() <= 200);
        let conds = micro_conds();
        let z = {
            let mut rng = util::seeded_rng(8, &[1]);
            model::sample_noise(&micro_arch(), 2, &mut rng)
        };

        let loss_of = |p: &ModelParams| -> f64 {
            let mut tape = Tape::new();
            let tm = TapeModel::insert_frozen(&mut tape, p);
            let zv = tape.constant(array4_to_mat(&z));
            let out = tm.euler_sample(&mut tape, zv, &conds, 4);
            let sq = tape.mul(out, out);
            let l = tape.sum_all(sq);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let tm = TapeModel::insert(&mut tape, &params);
        let zv = tape.constant(array4_to_mat(&z));
        let out = tm.euler_sample(&mut tape, zv, &conds, 4);
        let sq = tape.mul(out, out);
        let l = tape.sum_all(sq);
        let mut grads = tape.backward(l);
        let analytic = tm.collect_grads(&params, &mut grads);

        let h = 1e-4;
        for ti in 0..params.tensors().len() {
            let dim = params.tensors()[ti].1.dim();
            for idx in 0..dim.0 * dim.1 {
                let (r, c) = (idx / dim.1, idx % dim.1);
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.tensors_mut().unwrap()[ti].1[[r, c]] += h;
                minus.tensors_mut().unwrap()[ti].1[[r, c]] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = analytic[ti][[r, c]];
                let denom = fd.abs().max(a.abs());
                if denom > 1e-7 {
                    assert!(
                        ((fd - a) / denom).abs() < 1e-3,
                        "tensor {ti} [{r},{c}]: fd {fd} analytic {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_dmd_oracle_converges() {
        // 1-D oracle: teacher N(2,1), analytic critic, affine student
        // x_hat = a z + b starting at N(0,1). The surrogate gradient
        // w(t) (s_fake - s_real) must drive (a, b) to (1, 2).
        let mut rng = util::seeded_rng(40, &[1]);
        let (mut a, mut b) = (1.0f64, 0.0f64);
        let (mut ma, mut mb, mut va, mut vb) = (0.0, 0.0, 0.0, 0.0);
        let (beta1, beta2, lr, eps_adam) = (0.9, 0.999, 5e-3, 1e-8);
        let ts = TimeSampling::default();
        for step in 1..=2000usize {
            let z: f64 = StandardNormal.sample(&mut rng);
            let eps: f64 = StandardNormal.sample(&mut rng);
            let t = ts.sample(&mut rng);
            let x_hat = a * z + b;
            let xt = (1.0 - t) * eps + t * x_hat;
            let var_fake = (1.0 - t) * (1.0 - t) + t * t * a * a;
            let var_real = (1.0 - t) * (1.0 - t) + t * t;
            let s_fake = -(xt - t * b) / var_fake;
            let s_real = -(xt - t * 2.0) / var_real;
            let gap = s_fake - s_real;
            let w = dmd_weight(t, gap.abs(), 1e-3);
            let g = w * gap;
            let (ga, gb) = (g * z, g);
            ma = beta1 * ma + (1.0 - beta1) * ga;
            mb = beta1 * mb + (1.0 - beta1) * gb;
            va = beta2 * va + (1.0 - beta2) * ga * ga;
            vb = beta2 * vb + (1.0 - beta2) * gb * gb;
            let bc1 = 1.0 - beta1.powi(step as i32);
            let bc2 = 1.0 - beta2.powi(step as i32);
            a -= lr * (ma / bc1) / ((va / bc2).sqrt() + eps_adam);
            b -= lr * (mb / bc1) / ((vb / bc2).sqrt() + eps_adam);
        }
        // Sample statistics of the distilled student.
        let mut rng2 = util::seeded_rng(41, &[2]);
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng2);
                a * z + b
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() <= 0.2, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.2, "var {var}");
    }

    #[test]
    fn distill_requires_frozen_teacher() {
        let teacher = ModelParams::init(micro_arch(), Role::Teacher, 1);
        assert!(matches!(
            DistillState::new(&teacher).unwrap_err(),
            Error::TeacherNotFrozen
        ));
    }
}
