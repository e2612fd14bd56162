//! The parameterized velocity field, flow-matching paths and losses, the
//! Euler ODE sampler, and the flow-to-score conversion operator.
//!
//! Architecture, fixed for reproducibility: each latent position becomes one
//! token through a linear embedding of its `h*w*2C` assembled values;
//! continuity latents become context tokens through the same embedding of
//! zero-padded inputs plus a learned context-type vector; a sinusoidal
//! embedding of `t` is added to every token and the projected audio row to
//! its aligned target token; the concatenated `[context; target]` sequence
//! runs through transformer blocks (self-attention + feedforward, residual);
//! a linear head maps target tokens back to `[h, w, C]` and context outputs
//! are discarded.

use crate::autodiff::{array4_to_mat, mat_to_latent, Gradients, Mat, Tape, Var};
use crate::codec::LatentChunk;
use crate::conditioning::{AudioCondition, ConditioningBundle, ContinuityRef};
use crate::error::{Error, Result};
use crate::util;
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Critic,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Teacher => f.write_str("teacher"),
            Role::Student => f.write_str("student"),
            Role::Critic => f.write_str("critic"),
        }
    }
}

/// Network dimensions. Latent spatial dims and channel count must match the
/// codec; model width is a free choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub latent_h: usize,
    pub latent_w: usize,
    pub channels: usize,
    pub audio_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            latent_h: 8,
            latent_w: 8,
            channels: 16,
            audio_dim: 4,
            model_dim: 64,
            n_heads: 4,
            n_blocks: 2,
            ff_dim: 256,
        }
    }
}

impl ArchConfig {
    pub fn token_in_dim(&self) -> usize {
        self.latent_h * self.latent_w * 2 * self.channels
    }

    pub fn token_out_dim(&self) -> usize {
        self.latent_h * self.latent_w * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::ConfigInvalid("model_dim must be even".into()));
        }
        Ok(())
    }
}

enum Init {
    /// Normal(0, 1/sqrt(fan_in)).
    Scaled(usize),
    Zero,
}

fn tensor_specs(arch: &ArchConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = arch.model_dim;
    let mut specs = vec![
        (
            "embed.w".to_string(),
            (arch.token_in_dim(), d),
            Init::Scaled(arch.token_in_dim()),
        ),
        ("embed.b".to_string(), (1, d), Init::Zero),
        ("ctx_type".to_string(), (1, d), Init::Scaled(d)),
        (
            "audio.w".to_string(),
            (arch.audio_dim, d),
            Init::Scaled(arch.audio_dim),
        ),
        ("audio.b".to_string(), (1, d), Init::Zero),
    ];
    for b in 0..arch.n_blocks {
        for name in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("blk{b}.{name}"), (d, d), Init::Scaled(d)));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("blk{b}.{name}"), (1, d), Init::Zero));
        }
        specs.push((format!("blk{b}.ff.w1"), (d, arch.ff_dim), Init::Scaled(d)));
        specs.push((format!("blk{b}.ff.b1"), (1, arch.ff_dim), Init::Zero));
        specs.push((
            format!("blk{b}.ff.w2"),
            (arch.ff_dim, d),
            Init::Scaled(arch.ff_dim),
        ));
        specs.push((format!("blk{b}.ff.b2"), (1, d), Init::Zero));
    }
    // Zero-initialized output head: the untrained model is the identity flow.
    specs.push(("head.w".to_string(), (d, arch.token_out_dim()), Init::Zero));
    specs.push(("head.b".to_string(), (1, arch.token_out_dim()), Init::Zero));
    // Zero-initialized t-gated skip from the noisy input channels to the
    // output. The token embedding compresses each position to model_dim, so
    // without a full-rank input path the optimal velocity
    // (x1 - x_t)/(1 - t) is unrepresentable and the flow-matching loss has
    // an architecture floor far above the trained-teacher target.
    specs.push(("skip.gate".to_string(), (1, d), Init::Zero));
    specs.push(("skip.bias".to_string(), (1, 1), Init::Zero));
    specs
}

/// The parameter set of one velocity network.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: ArchConfig,
    role: Role,
    frozen: bool,
    tensors: Vec<(String, Mat)>,
}

impl ModelParams {
    pub fn init(arch: ArchConfig, role: Role, seed: u64) -> ModelParams {
        let mut rng = util::seeded_rng(seed, &[0x1417]);
        let tensors = tensor_specs(&arch)
            .into_iter()
            .map(|(name, (r, c), init)| {
                let m = match init {
                    Init::Scaled(fan) => {
                        let std = 1.0 / (fan as f64).sqrt();
                        Array2::from_shape_fn((r, c), |_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * std
                        })
                    }
                    Init::Zero => Array2::zeros((r, c)),
                };
                (name, m.into_shared())
            })
            .collect();
        ModelParams {
            arch,
            role,
            frozen: false,
            tensors,
        }
    }

    pub fn from_tensors(
        arch: ArchConfig,
        role: Role,
        frozen: bool,
        tensors: Vec<(String, Array2<f64>)>,
    ) -> Result<ModelParams> {
        let specs = tensor_specs(&arch);
        if specs.len() != tensors.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, got)) in specs.iter().zip(&tensors) {
            if name != got_name || *shape != got.dim() {
                return Err(Error::CheckpointCorrupt(format!(
                    "tensor {got_name} {:?} does not match expected {name} {:?}",
                    got.dim(),
                    shape
                )));
            }
        }
        Ok(ModelParams {
            arch,
            role,
            frozen,
            tensors: tensors
                .into_iter()
                .map(|(n, m)| (n, m.into_shared()))
                .collect(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Permanently mark the parameters read-only.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn tensors(&self) -> &[(String, Mat)] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> &Mat {
        &self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
            .1
    }

    /// Mutable access to the tensor list; refused for frozen parameters.
    pub fn tensors_mut(&mut self) -> Result<&mut Vec<(String, Mat)>> {
        if self.frozen {
            return Err(Error::FrozenParams(format!(
                "write attempt on frozen {} parameters",
                self.role
            )));
        }
        Ok(&mut self.tensors)
    }

    /// Fresh unfrozen copy carrying a new role tag.
    pub fn cloned_as(&self, role: Role) -> ModelParams {
        ModelParams {
            arch: self.arch,
            role,
            frozen: false,
            tensors: self.tensors.clone(),
        }
    }

    /// Exact elementwise equality, used by freeze auditing.
    pub fn bitwise_eq(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((an, am), (bn, bm))| {
                    an == bn
                        && am.dim() == bm.dim()
                        && am
                            .iter()
                            .zip(bm.iter())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

/// Time-sampling rule for flow paths. The clamp keeps score conversion away
/// from the t -> 1 singularity; the optional discretization rounds t onto a
/// 1000-point grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TimeSampling {
    pub t_min: f64,
    pub t_max: f64,
    pub discrete_1000: bool,
}

impl Default for TimeSampling {
    fn default() -> Self {
        TimeSampling {
            t_min: 0.02,
            t_max: 0.98,
            discrete_1000: false,
        }
    }
}

impl TimeSampling {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let mut t = rng.gen_range(self.t_min..self.t_max);
        if self.discrete_1000 {
            t = (t * 1000.0).round() / 1000.0;
            t = t.clamp(self.t_min, self.t_max);
        }
        t
    }
}

/// One point on a linear noise-to-data path.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub t: f64,
    pub x0: Array4<f64>,
    pub x1: Array4<f64>,
    pub xt: Array4<f64>,
    pub target: Array4<f64>,
}

impl FlowSample {
    /// Build the path point from endpoints: `xt = (1-t) x0 + t x1`,
    /// `target = x1 - x0`.
    pub fn from_parts(t: f64, x0: Array4<f64>, x1: Array4<f64>) -> FlowSample {
        let xt = (1.0 - t) * &x0 + t * &x1;
        let target = &x1 - &x0;
        FlowSample {
            t,
            x0,
            x1,
            xt,
            target,
        }
    }
}

/// Draw `t ~ U(t_min, t_max)` and `x0 ~ N(0, I)`.
pub fn sample_path<R: Rng>(x1: &Array4<f64>, ts: &TimeSampling, rng: &mut R) -> FlowSample {
    let t = ts.sample(rng);
    let x0 = Array4::from_shape_fn(x1.dim(), |_| StandardNormal.sample(rng));
    FlowSample::from_parts(t, x0, x1.clone())
}

/// Marginal score implied by the linear Gaussian path:
/// `S(v, x_t, t) = (t v - x_t) / (1 - t)`.
pub fn score_from_velocity(v: &Array4<f64>, xt: &Array4<f64>, t: f64) -> Result<Array4<f64>> {
    check_t_regular(t)?;
    Ok((t * v - xt) / (1.0 - t))
}

/// Scalar form of [`score_from_velocity`] for 1-D oracles.
pub fn score_from_velocity_scalar(v: f64, xt: f64, t: f64) -> Result<f64> {
    check_t_regular(t)?;
    Ok((t * v - xt) / (1.0 - t))
}

fn check_t_regular(t: f64) -> Result<()> {
    if t >= 1.0 - 1e-6 {
        return Err(Error::TSingularity(t));
    }
    Ok(())
}

/// Sinusoidal embedding of a scalar time in [0, 1], scaled onto a
/// 1000-step range before the standard frequency fan-out.
fn time_embedding(t: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut e = Array2::zeros((1, dim));
    let ts = t * 1000.0;
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        e[[0, 2 * i]] = (ts * freq).sin();
        e[[0, 2 * i + 1]] = (ts * freq).cos();
    }
    e
}

/// Parameter handles inside one tape, aligned with `ModelParams::tensors`.
pub struct TapeModel {
    arch: ArchConfig,
    vars: Vec<Var>,
    names: Vec<String>,
}

impl TapeModel {
    pub fn insert(tape: &mut Tape, params: &ModelParams) -> TapeModel {
        let mut vars = Vec::with_capacity(params.tensors.len());
        let mut names = Vec::with_capacity(params.tensors.len());
        for (name, m) in &params.tensors {
            vars.push(tape.param(m.clone()));
            names.push(name.clone());
        }
        TapeModel {
            arch: params.arch,
            vars,
            names,
        }
    }

    /// Insert as constants: forward passes run but no gradients accumulate.
    pub fn insert_frozen(tape: &mut Tape, params: &ModelParams) -> TapeModel {
        let mut vars = Vec::with_capacity(params.tensors.len());
        let mut names = Vec::with_capacity(params.tensors.len());
        for (name, m) in &params.tensors {
            vars.push(tape.constant_shared(m.clone()));
            names.push(name.clone());
        }
        TapeModel {
            arch: params.arch,
            vars,
            names,
        }
    }

    fn var(&self, name: &str) -> Var {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        self.vars[idx]
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Gradients in tensor order; zero matrices for untouched tensors.
    pub fn collect_grads(&self, params: &ModelParams, grads: &mut Gradients) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .zip(&params.tensors)
            .map(|(v, (_, m))| grads.take(*v).unwrap_or_else(|| Array2::zeros(m.dim())))
            .collect()
    }

    /// Context tokens for a continuity reference: the shared embedding of
    /// zero-padded inputs plus the context-type vector. Constant inputs.
    fn context_tokens(&self, tape: &mut Tape, kappa: &ContinuityRef, t_emb: Var) -> Var {
        let arch = &self.arch;
        let flat = array4_to_mat(kappa.latents());
        let (lk, cols) = flat.dim();
        // Zero-pad to 2C per spatial position: kappa occupies the content half.
        let mut padded = Array2::zeros((lk, 2 * cols));
        let block = arch.channels;
        for r in 0..lk {
            for g in 0..cols / block {
                for k in 0..block {
                    padded[[r, g * 2 * block + k]] = flat[[r, g * block + k]];
                }
            }
        }
        let input = tape.constant(padded);
        let embedded = tape.matmul(input, self.var("embed.w"));
        let biased = tape.add_row_broadcast(embedded, self.var("embed.b"));
        let typed = tape.add_row_broadcast(biased, self.var("ctx_type"));
        tape.add_row_broadcast(typed, t_emb)
    }

    /// Velocity prediction over the noisy channels.
    ///
    /// `x_tokens` are the assembled target-token inputs `[L, h*w*2C]` (noisy
    /// channels interleaved with identity channels per spatial position);
    /// `noisy_mat` is the noisy half alone, feeding the t-gated skip.
    fn forward_inner(
        &self,
        tape: &mut Tape,
        t: f64,
        x_tokens: Var,
        noisy_mat: Var,
        audio: &AudioCondition,
        kappa: &ContinuityRef,
    ) -> Var {
        let arch = &self.arch;
        let t_emb = tape.constant(time_embedding(t, arch.model_dim));

        let ctx = self.context_tokens(tape, kappa, t_emb);
        let n_ctx = kappa.latents().dim().0;

        let embedded = tape.matmul(x_tokens, self.var("embed.w"));
        let biased = tape.add_row_broadcast(embedded, self.var("embed.b"));
        let timed = tape.add_row_broadcast(biased, t_emb);
        let audio_in = tape.constant(audio.per_latent.clone());
        let audio_proj = tape.matmul(audio_in, self.var("audio.w"));
        let audio_proj = tape.add_row_broadcast(audio_proj, self.var("audio.b"));
        let tgt = tape.add(timed, audio_proj);

        let mut x = tape.concat_rows(ctx, tgt);
        let n_total = n_ctx + audio.per_latent.dim().0;

        for b in 0..arch.n_blocks {
            x = self.attention_block(tape, x, b);
            x = self.ff_block(tape, x, b);
        }

        let out_tokens = tape.slice_rows(x, n_ctx, n_total);
        let head = tape.matmul(out_tokens, self.var("head.w"));
        let head = tape.add_row_broadcast(head, self.var("head.b"));

        // t-gated skip over the noisy channels: without a full-rank input
        // path the optimal velocity (x1 - x_t)/(1 - t) is unrepresentable
        // through the model_dim token bottleneck.
        let gate = tape.matmul_nt(self.var("skip.gate"), t_emb);
        let gate = tape.add(gate, self.var("skip.bias"));
        let skip = tape.mul_scalar_var(noisy_mat, gate);
        tape.add(head, skip)
    }

    /// Velocity prediction on pre-assembled token inputs `[L, h*w*2C]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        t: f64,
        x_tokens: Var,
        audio: &AudioCondition,
        kappa: &ContinuityRef,
    ) -> Var {
        let noisy = tape.slice_interleaved(x_tokens, self.arch.channels, 0);
        self.forward_inner(tape, t, x_tokens, noisy, audio, kappa)
    }

    fn attention_block(&self, tape: &mut Tape, x: Var, b: usize) -> Var {
        let arch = &self.arch;
        let dh = arch.head_dim();
        let q = tape.matmul(x, self.var(&format!("blk{b}.wq")));
        let q = tape.add_row_broadcast(q, self.var(&format!("blk{b}.bq")));
        let k = tape.matmul(x, self.var(&format!("blk{b}.wk")));
        let k = tape.add_row_broadcast(k, self.var(&format!("blk{b}.bk")));
        let v = tape.matmul(x, self.var(&format!("blk{b}.wv")));
        let v = tape.add_row_broadcast(v, self.var(&format!("blk{b}.bv")));

        let mut heads: Option<Var> = None;
        for h in 0..arch.n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.softmax_rows(scaled);
            let oh = tape.matmul(probs, vh);
            heads = Some(match heads {
                None => oh,
                Some(acc) => tape.concat_cols(acc, oh),
            });
        }
        let o = heads.unwrap();
        let proj = tape.matmul(o, self.var(&format!("blk{b}.wo")));
        let proj = tape.add_row_broadcast(proj, self.var(&format!("blk{b}.bo")));
        tape.add(x, proj)
    }

    fn ff_block(&self, tape: &mut Tape, x: Var, b: usize) -> Var {
        let h1 = tape.matmul(x, self.var(&format!("blk{b}.ff.w1")));
        let h1 = tape.add_row_broadcast(h1, self.var(&format!("blk{b}.ff.b1")));
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, self.var(&format!("blk{b}.ff.w2")));
        let h2 = tape.add_row_broadcast(h2, self.var(&format!("blk{b}.ff.b2")));
        tape.add(x, h2)
    }

    /// Assemble target-token inputs from a noisy latent variable and the
    /// (constant) identity condition, then predict velocity.
    pub fn forward_noisy(
        &self,
        tape: &mut Tape,
        t: f64,
        noisy_mat: Var,
        conds: &ConditioningBundle,
    ) -> Var {
        let ident = tape.constant(array4_to_mat(&conds.identity.latents));
        let x_tokens = tape.interleave_blocks(noisy_mat, ident, self.arch.channels);
        self.forward_inner(tape, t, x_tokens, noisy_mat, &conds.audio, &conds.continuity)
    }

    /// N-step Euler integration from noise, gradients flowing through every
    /// step: `x <- x + (1/N) v(t_i, x)` at `t_i = i/N`.
    pub fn euler_sample(
        &self,
        tape: &mut Tape,
        z: Var,
        conds: &ConditioningBundle,
        n_steps: usize,
    ) -> Var {
        assert!(n_steps >= 1);
        let mut x = z;
        for i in 0..n_steps {
            let t = i as f64 / n_steps as f64;
            let v = self.forward_noisy(tape, t, x, conds);
            let step = tape.scale(v, 1.0 / n_steps as f64);
            x = tape.add(x, step);
        }
        x
    }

    /// Flow-matching loss `mean((v - target)^2)` for one path sample.
    pub fn fm_loss(&self, tape: &mut Tape, sample: &FlowSample, conds: &ConditioningBundle) -> Var {
        let xt = tape.constant(array4_to_mat(&sample.xt));
        let v = self.forward_noisy(tape, sample.t, xt, conds);
        let target = tape.constant(array4_to_mat(&sample.target));
        let d = tape.sub(v, target);
        let sq = tape.mul(d, d);
        tape.mean_all(sq)
    }
}

fn check_finite_inputs(
    t: f64,
    x: &Array4<f64>,
    audio: &AudioCondition,
    kappa: &ContinuityRef,
) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NanInput("t is not finite".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NanInput(
            "model input contains non-finite values".into(),
        ));
    }
    if audio.per_latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::NanInput(
            "audio condition contains non-finite values".into(),
        ));
    }
    if kappa.latents().iter().any(|v| !v.is_finite()) {
        return Err(Error::NanInput(
            "continuity reference contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// Velocity prediction on an assembled input `[L, h, w, 2C]`.
pub fn forward(
    params: &ModelParams,
    t: f64,
    x_in: &Array4<f64>,
    audio: &AudioCondition,
    kappa: &ContinuityRef,
) -> Result<Array4<f64>> {
    let arch = params.arch();
    check_finite_inputs(t, x_in, audio, kappa)?;
    let (l, h, w, c2) = x_in.dim();
    if h != arch.latent_h || w != arch.latent_w || c2 != 2 * arch.channels {
        return Err(Error::CodecShape(format!(
            "model input {l}x{h}x{w}x{c2} does not match arch"
        )));
    }
    let mut tape = Tape::new();
    let tm = TapeModel::insert_frozen(&mut tape, params);
    let x_tokens = tape.constant(array4_to_mat(x_in));
    let out = tm.forward(&mut tape, t, x_tokens, audio, kappa);
    let mat = tape.value(out).to_owned();
    Ok(mat_to_latent(&mat, arch.latent_h, arch.latent_w, arch.channels).data)
}

/// Mean flow-matching loss of a batch (no gradients).
pub fn fm_loss(
    params: &ModelParams,
    samples: &[FlowSample],
    conds: &[ConditioningBundle],
) -> Result<f64> {
    assert_eq!(samples.len(), conds.len());
    let mut total = 0.0;
    for (s, c) in samples.iter().zip(conds) {
        check_finite_inputs(s.t, &s.xt, &c.audio, &c.continuity)?;
        let mut tape = Tape::new();
        let tm = TapeModel::insert_frozen(&mut tape, params);
        let loss = tm.fm_loss(&mut tape, s, c);
        total += tape.scalar(loss);
    }
    Ok(total / samples.len() as f64)
}

/// N-step Euler sampling from a noise latent (no gradients retained).
pub fn euler_sample(
    params: &ModelParams,
    z: &Array4<f64>,
    conds: &ConditioningBundle,
    n_steps: usize,
) -> Result<LatentChunk> {
    check_finite_inputs(0.0, z, &conds.audio, &conds.continuity)?;
    let arch = params.arch();
    let mut tape = Tape::new();
    let tm = TapeModel::insert_frozen(&mut tape, params);
    let zv = tape.constant(array4_to_mat(z));
    let out = tm.euler_sample(&mut tape, zv, conds, n_steps);
    let mat = tape.value(out).to_owned();
    Ok(mat_to_latent(&mat, arch.latent_h, arch.latent_w, arch.channels))
}

/// Standard-normal noise latent of the model's chunk shape.
pub fn sample_noise<R: Rng>(arch: &ArchConfig, latent_len: usize, rng: &mut R) -> Array4<f64> {
    Array4::from_shape_fn(
        (latent_len, arch.latent_h, arch.latent_w, arch.channels),
        |_| StandardNormal.sample(rng),
    )
}
