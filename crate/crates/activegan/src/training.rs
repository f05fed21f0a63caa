//! The adversarial losses, the combined generator objective with the
//! reward-weighted policy term, the training loop with its FIFO sample
//! buffer, and the margin-filter baseline.
//!
//! Two methods share one loop skeleton: plain conditional-GAN training
//! (`train_acgan`) and the uncertainty-steered variant (`train_activegan`).
//! Both consume randomness identically and log identical diagnostics, so a
//! zero uncertainty weight reduces the latter to the former exactly.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierHp, GridSearchSpec, ProbClassifier};
use crate::data::{FeatureNorm, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{Discriminator, GaussianPolicy, Generator, HeadedVars};
use crate::numerics::{AdamState, Gradients, SeededRng, Stream, Tape, Tensor, Var};
use crate::store::TensorStore;
use crate::uncertainty::{
    combined_reward, entropy_reward, margin_reward, sample_reward, uncertainty_loss,
    GeneratedSample, RewardConfig,
};

/// Probability floor applied before every log.
const PROB_FLOOR: f64 = 1e-12;

/// Which generator objective the loop ascends after warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "acgan")]
    AcGan,
    #[serde(rename = "activegan")]
    ActiveGan,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::AcGan => write!(f, "acgan"),
            Method::ActiveGan => write!(f, "activegan"),
        }
    }
}

/// Full configuration of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total iterations, warmup included.
    pub iterations: usize,
    pub batch_size: usize,
    /// Iterations of pure adversarial training before the uncertainty
    /// objective switches on.
    pub warmup: usize,
    /// FIFO sample buffer capacity.
    pub buffer_size: usize,
    /// The discriminator is updated once every this many generator steps.
    pub disc_update_ratio: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub policy_lr: f64,
    pub latent_dim: usize,
    /// Hidden layer widths shared by all three networks.
    pub hidden: Vec<usize>,
    pub reward: RewardConfig,
    pub seed: u64,
    /// Periodic checkpoint interval in iterations (0 disables).
    pub checkpoint_every: usize,
    /// When true, the uncertainty term averages over the fresh batch plus a
    /// same-size uniform draw from the buffer; when false, fresh only.
    pub fresh_plus_buffer: bool,
    /// Size of the generated set attached to the run artifacts.
    pub final_sample_count: usize,
    /// Hyperparameter grid for the frozen classifier trained before the loop.
    pub grid: GridSearchSpec,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            iterations: 2500,
            batch_size: 64,
            warmup: 500,
            buffer_size: 4096,
            disc_update_ratio: 1,
            gen_lr: 1e-3,
            disc_lr: 1e-3,
            policy_lr: 1e-3,
            latent_dim: 4,
            hidden: vec![64, 64],
            reward: RewardConfig::default(),
            seed: 7,
            checkpoint_every: 500,
            fresh_plus_buffer: true,
            final_sample_count: 1000,
            grid: GridSearchSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Collects every violated constraint rather than stopping at the first.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.iterations == 0 {
            problems.push("train.iterations must be positive".to_string());
        }
        if self.warmup >= self.iterations {
            problems.push(format!(
                "train.warmup ({}) must be smaller than train.iterations ({})",
                self.warmup, self.iterations
            ));
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be positive".to_string());
        }
        if self.buffer_size < self.batch_size {
            problems.push(format!(
                "train.buffer_size ({}) must be at least train.batch_size ({})",
                self.buffer_size, self.batch_size
            ));
        }
        if self.disc_update_ratio == 0 {
            problems.push("train.disc_update_ratio must be at least 1".to_string());
        }
        for (name, lr) in [
            ("train.gen_lr", self.gen_lr),
            ("train.disc_lr", self.disc_lr),
            ("train.policy_lr", self.policy_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                problems.push(format!("{} must be positive, got {}", name, lr));
            }
        }
        if self.latent_dim == 0 {
            problems.push("train.latent_dim must be positive".to_string());
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            problems.push("train.hidden must list positive layer widths".to_string());
        }
        if let Err(mut more) = self.reward.validate() {
            problems.append(&mut more);
        }
        if let Err(mut more) = self.grid.validate() {
            problems.append(&mut more);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Fixed-capacity FIFO of generated samples; eviction is strictly
/// oldest-first.
#[derive(Clone, Debug)]
pub struct SampleBuffer {
    queue: VecDeque<GeneratedSample>,
    capacity: usize,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> Result<SampleBuffer> {
        if capacity == 0 {
            return Err(Error::contract("sample buffer capacity must be positive"));
        }
        Ok(SampleBuffer {
            queue: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn push(&mut self, sample: GeneratedSample) {
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&GeneratedSample> {
        self.queue.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &GeneratedSample> {
        self.queue.iter()
    }

    /// Uniform draw of `count` indices with replacement.
    pub fn draw_indices(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
        if self.is_empty() && count > 0 {
            return Err(Error::contract("cannot draw from an empty sample buffer"));
        }
        Ok((0..count).map(|_| rng.index(self.queue.len())).collect())
    }
}

/// One row of the per-iteration trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Discriminator objective (ascended); evaluated every iteration even
    /// when the discriminator is not updated.
    pub loss_d: f64,
    /// Adversarial part of the generator objective.
    pub loss_g_acgan: f64,
    /// Reward-weighted policy log-likelihood term.
    pub loss_unc: f64,
    /// Mean reward of the fresh batch.
    pub mean_reward: f64,
    /// Mean smallest-margin of the fresh batch.
    pub mean_margin: f64,
    /// Mean label entropy of the fresh batch.
    pub mean_entropy: f64,
    /// Buffer occupancy at the end of the iteration.
    pub buffer_len: usize,
}

/// Header of the trace CSV emitted by [`write_trace_csv`].
pub const TRACE_HEADER: &str =
    "iteration,L_D,L_G_acgan,L_unc,mean_reward,mean_u_m,mean_u_le,buffer_len";

pub fn write_trace_csv(mut w: impl Write, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "{}", TRACE_HEADER)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.loss_d,
            r.loss_g_acgan,
            r.loss_unc,
            r.mean_reward,
            r.mean_margin,
            r.mean_entropy,
            r.buffer_len
        )?;
    }
    Ok(())
}

/// Everything a finished (or aborted) run leaves behind.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub policy: GaussianPolicy,
    pub classifier: ProbClassifier,
    pub trace: Vec<TraceRow>,
    /// Samples generated after training from a dedicated random stream.
    pub final_samples: Vec<GeneratedSample>,
    pub method: Method,
    pub config: TrainConfig,
    /// Feature normalization carried by the training data, if any.
    pub norm: Option<FeatureNorm>,
    pub gen_updates: usize,
    pub disc_updates: usize,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// `mean(log(clamp(p)))` over all entries of `p`.
fn log_mean(tape: &mut Tape, p: Var) -> Result<Var> {
    let clamped = tape.clamp_min(p, PROB_FLOOR)?;
    let logged = tape.log(clamped)?;
    tape.mean_all(logged)
}

/// `mean(log P(label_i | row_i))` from class logits.
fn class_log_mean(tape: &mut Tape, class_logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = *tape
        .shape(class_logits)
        .last()
        .ok_or_else(|| Error::contract("class logits must be a matrix"))?;
    let probs = tape.softmax(class_logits)?;
    let probs = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(probs)?;
    let onehot = tape.constant(Tensor::one_hot(labels, classes)?)?;
    let picked = tape.mul(logp, onehot)?;
    let per_row = tape.sum_axis(picked, 1)?;
    tape.mean_all(per_row)
}

fn batch_rows(tape: &Tape, x: Var, labels: &[usize], what: &'static str) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(Error::Contract(format!("{}: batch must be a matrix", what)));
    }
    let rows = shape[0];
    if rows == 0 {
        return Err(Error::Contract(format!("{}: empty batch", what)));
    }
    if labels.len() != rows {
        return Err(Error::Length(format!(
            "{}: {} rows but {} labels",
            what,
            rows,
            labels.len()
        )));
    }
    Ok(rows)
}

/// Discriminator objective (to be ascended): mean log-probability of
/// calling real data real, fake data fake, and both batches' class labels.
pub fn discriminator_loss(
    tape: &mut Tape,
    disc: &Discriminator,
    disc_vars: &HeadedVars,
    real_x: Var,
    real_labels: &[usize],
    fake_x: Var,
    fake_labels: &[usize],
) -> Result<Var> {
    batch_rows(tape, real_x, real_labels, "discriminator_loss(real)")?;
    batch_rows(tape, fake_x, fake_labels, "discriminator_loss(fake)")?;

    let (src_real, cls_real) = disc.forward(tape, disc_vars, real_x)?;
    let (src_fake, cls_fake) = disc.forward(tape, disc_vars, fake_x)?;

    let p_real = tape.sigmoid(src_real)?;
    let real_term = log_mean(tape, p_real)?;
    let neg_fake = tape.neg(src_fake)?;
    let p_fake = tape.sigmoid(neg_fake)?;
    let fake_term = log_mean(tape, p_fake)?;
    let cls_real_term = class_log_mean(tape, cls_real, real_labels)?;
    let cls_fake_term = class_log_mean(tape, cls_fake, fake_labels)?;

    let s1 = tape.add(real_term, fake_term)?;
    let s2 = tape.add(cls_real_term, cls_fake_term)?;
    tape.add(s1, s2)
}

/// Adversarial generator objective (to be ascended): mean log-probability
/// of fake samples being called real and carrying their conditioning label.
pub fn generator_acgan_loss(
    tape: &mut Tape,
    disc: &Discriminator,
    disc_vars: &HeadedVars,
    fake_x: Var,
    fake_labels: &[usize],
) -> Result<Var> {
    batch_rows(tape, fake_x, fake_labels, "generator_acgan_loss")?;
    let (src, cls) = disc.forward(tape, disc_vars, fake_x)?;
    let p_real = tape.sigmoid(src)?;
    let real_term = log_mean(tape, p_real)?;
    let cls_term = class_log_mean(tape, cls, fake_labels)?;
    tape.add(real_term, cls_term)
}

/// Replayed buffer samples entering the uncertainty term: their features
/// (constants on the tape — the old generator no longer exists), the
/// latents that produced them, and their stored rewards.
#[derive(Clone, Copy, Debug)]
pub struct ReplayBatch<'a> {
    pub samples: &'a Tensor,
    pub latents: &'a Tensor,
    pub rewards: &'a [f64],
}

/// A generated batch entering the combined generator objective. `fake`
/// must already be on the tape (typically generator output, so gradients
/// flow back into the generator). Rewards are supplied as fixed constants:
/// the gradient of the uncertainty term is the score-function estimator,
/// which deliberately does not differentiate through the reward.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyBatch<'a> {
    pub fake: Var,
    pub latents: &'a Tensor,
    pub labels: &'a [usize],
    pub rewards: &'a [f64],
    pub replay: Option<ReplayBatch<'a>>,
}

/// Tape nodes of the combined generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLossVars {
    /// `acgan + lambda * uncertainty` (ascended).
    pub total: Var,
    pub acgan: Var,
    pub uncertainty: Var,
    /// Per-row policy log-likelihoods, fresh rows first, then replay rows.
    pub log_liks: Var,
}

/// Combined generator objective: the adversarial term plus `lambda` times
/// the reward-weighted mean policy log-likelihood over the fresh batch and
/// any replayed samples. With `lambda = 0` the total equals the adversarial
/// term exactly.
pub fn activegan_generator_loss(
    tape: &mut Tape,
    disc: &Discriminator,
    disc_vars: &HeadedVars,
    policy: &GaussianPolicy,
    policy_vars: &HeadedVars,
    batch: &UncertaintyBatch,
    lambda: f64,
) -> Result<GeneratorLossVars> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::domain(format!(
            "uncertainty weight must be finite and >= 0, got {}",
            lambda
        )));
    }
    let rows = batch_rows(tape, batch.fake, batch.labels, "activegan_generator_loss")?;
    if batch.latents.rows()? != rows || batch.rewards.len() != rows {
        return Err(Error::Length(format!(
            "activegan_generator_loss: {} fake rows vs {} latents vs {} rewards",
            rows,
            batch.latents.rows()?,
            batch.rewards.len()
        )));
    }

    let acgan = generator_acgan_loss(tape, disc, disc_vars, batch.fake, batch.labels)?;

    let replay = match batch.replay {
        Some(r) if r.samples.rows()? > 0 => Some(r),
        _ => None,
    };
    let (x_all, z_all, rewards_all) = match replay {
        Some(r) => {
            if r.latents.rows()? != r.samples.rows()? || r.rewards.len() != r.samples.rows()? {
                return Err(Error::Length(format!(
                    "activegan_generator_loss: replay of {} samples vs {} latents vs {} rewards",
                    r.samples.rows()?,
                    r.latents.rows()?,
                    r.rewards.len()
                )));
            }
            let replay_const = tape.constant(r.samples.clone())?;
            let x_all = tape.concat_rows(batch.fake, replay_const)?;
            let z_all = batch.latents.concat_rows(r.latents)?;
            let mut rewards_all = batch.rewards.to_vec();
            rewards_all.extend_from_slice(r.rewards);
            (x_all, z_all, rewards_all)
        }
        None => (batch.fake, batch.latents.clone(), batch.rewards.to_vec()),
    };

    let z_var = tape.constant(z_all)?;
    let log_liks = policy.log_likelihood(tape, policy_vars, x_all, z_var)?;
    let uncertainty = uncertainty_loss(tape, log_liks, &rewards_all)?;
    let scaled = tape.scale(uncertainty, lambda)?;
    let total = tape.add(acgan, scaled)?;

    Ok(GeneratorLossVars {
        total,
        acgan,
        uncertainty,
        log_liks,
    })
}

/// Keep exactly the samples whose stored smallest-margin is at or below
/// `threshold`, preserving order (the post-filtering baseline).
pub fn margin_filter(samples: &[GeneratedSample], threshold: f64) -> Result<Vec<GeneratedSample>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!(
            "margin threshold must lie in [0, 1], got {}",
            threshold
        )));
    }
    Ok(samples
        .iter()
        .filter(|s| s.margin <= threshold)
        .cloned()
        .collect())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Callback receiving periodic parameter snapshots `(iteration, store)`.
pub type CheckpointSink<'a> = dyn FnMut(usize, &TensorStore) -> Result<()> + 'a;

/// Train with the combined objective (uncertainty term active after warmup).
pub fn train_activegan(data: &LabeledDataset, cfg: &TrainConfig) -> Result<RunArtifacts> {
    run(Method::ActiveGan, data, cfg, None)
}

/// Train the plain conditional GAN under the identical schedule and
/// randomness; the uncertainty term is computed for the trace but never
/// ascended.
pub fn train_acgan(data: &LabeledDataset, cfg: &TrainConfig) -> Result<RunArtifacts> {
    run(Method::AcGan, data, cfg, None)
}

/// [`train_activegan`]/[`train_acgan`] with periodic checkpoint delivery.
pub fn train_with_checkpoints(
    method: Method,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    sink: &mut CheckpointSink,
) -> Result<RunArtifacts> {
    run(method, data, cfg, Some(sink))
}

struct LoopState {
    generator: Generator,
    discriminator: Discriminator,
    policy: GaussianPolicy,
    classifier: ProbClassifier,
    gen_opt: AdamState,
    disc_opt: AdamState,
    policy_opt: AdamState,
    buffer: SampleBuffer,
    last_d: f64,
    gen_updates: usize,
    disc_updates: usize,
}

fn run(
    method: Method,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut sink: Option<&mut CheckpointSink>,
) -> Result<RunArtifacts> {
    cfg.validate().map_err(Error::Validation)?;

    let base = SeededRng::new(cfg.seed);
    let mut init_rng = base.stream(Stream::Init);
    let mut clf_rng = base.stream(Stream::Classifier);
    let mut loop_rng = base.stream(Stream::Loop);
    let mut buffer_rng = base.stream(Stream::Buffer);
    let mut generate_rng = base.stream(Stream::Generate);

    // The score-supplying classifier is tuned and trained once, then frozen.
    let hp = classifier::grid_search(data, &cfg.grid, &mut clf_rng)?;
    let classifier = classifier::train(data, &hp, &mut clf_rng)?;

    let (dx, k) = (data.dim(), data.classes());
    let mut state = LoopState {
        generator: Generator::init(cfg.latent_dim, k, dx, &cfg.hidden, &mut init_rng)?,
        discriminator: Discriminator::init(dx, k, &cfg.hidden, &mut init_rng)?,
        policy: GaussianPolicy::init(dx, cfg.latent_dim, &cfg.hidden, &mut init_rng)?,
        classifier,
        gen_opt: AdamState::new(cfg.gen_lr)?,
        disc_opt: AdamState::new(cfg.disc_lr)?,
        policy_opt: AdamState::new(cfg.policy_lr)?,
        buffer: SampleBuffer::new(cfg.buffer_size)?,
        last_d: 0.0,
        gen_updates: 0,
        disc_updates: 0,
    };
    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        match iteration(method, data, cfg, t, &mut state, &mut loop_rng, &mut buffer_rng) {
            Ok(row) => trace.push(row),
            Err(Error::Numeric(detail)) => {
                // Non-finite value mid-iteration: surface the iteration and
                // the artifacts as of the last completed update.
                let partial = RunArtifacts {
                    generator: state.generator,
                    discriminator: state.discriminator,
                    policy: state.policy,
                    classifier: state.classifier,
                    trace,
                    final_samples: Vec::new(),
                    method,
                    config: cfg.clone(),
                    norm: data.norm().cloned(),
                    gen_updates: state.gen_updates,
                    disc_updates: state.disc_updates,
                };
                return Err(Error::Divergence {
                    iteration: t,
                    detail,
                    partial: Box::new(partial),
                });
            }
            Err(other) => return Err(other),
        }

        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            if let Some(sink) = sink.as_deref_mut() {
                let snapshot = snapshot_store(
                    &state.generator,
                    &state.discriminator,
                    &state.policy,
                    &state.classifier,
                    &cfg.reward,
                    method,
                    cfg.seed,
                    data.norm(),
                )?;
                sink(t + 1, &snapshot)?;
            }
        }
    }

    let final_samples = generate_samples(
        &state.generator,
        &state.policy,
        &state.classifier,
        &cfg.reward,
        cfg.final_sample_count,
        None,
        &mut generate_rng,
    )?;

    Ok(RunArtifacts {
        generator: state.generator,
        discriminator: state.discriminator,
        policy: state.policy,
        classifier: state.classifier,
        trace,
        final_samples,
        method,
        config: cfg.clone(),
        norm: data.norm().cloned(),
        gen_updates: state.gen_updates,
        disc_updates: state.disc_updates,
    })
}

/// One loop iteration. Randomness consumption is identical for both
/// methods; only which objective is ascended differs.
#[allow(clippy::too_many_arguments)]
fn iteration(
    method: Method,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    t: usize,
    state: &mut LoopState,
    loop_rng: &mut SeededRng,
    buffer_rng: &mut SeededRng,
) -> Result<TraceRow> {
    let batch = cfg.batch_size;
    let k = data.classes();

    // Fixed draw order: latents, conditioning labels, real-batch indices,
    // buffer replay indices.
    let z = loop_rng.normal_tensor(vec![batch, cfg.latent_dim]);
    let labels: Vec<usize> = (0..batch).map(|_| loop_rng.index(k)).collect();
    let real_idx: Vec<usize> = (0..batch).map(|_| loop_rng.index(data.len())).collect();
    let replay_idx = if cfg.fresh_plus_buffer && !state.buffer.is_empty() {
        state.buffer.draw_indices(batch, buffer_rng)?
    } else {
        Vec::new()
    };

    // Generator-side tape: generator and policy trainable, discriminator
    // frozen.
    let mut tape = Tape::new();
    let gen_vars = state.generator.bind(&mut tape, true)?;
    let policy_vars = state.policy.bind(&mut tape, true)?;
    let disc_vars = state.discriminator.bind(&mut tape, false)?;
    let input = tape.constant(state.generator.input_from(&z, &labels)?)?;
    let fake = state.generator.forward(&mut tape, &gen_vars, input)?;
    let fake_values = tape.value(fake).clone();

    // Rewards from the frozen classifier's posteriors (constants).
    let posteriors = state.classifier.predict_proba_batch(&fake_values)?;
    let mut stats = Vec::with_capacity(batch);
    for i in 0..batch {
        stats.push(sample_reward(posteriors.row(i)?, &cfg.reward)?);
    }
    let rewards: Vec<f64> = stats.iter().map(|s| s.2).collect();

    // Replay slice gathered from the buffer.
    let replay_data = if replay_idx.is_empty() {
        None
    } else {
        let mut xs = Vec::with_capacity(replay_idx.len());
        let mut zs = Vec::with_capacity(replay_idx.len());
        let mut rs = Vec::with_capacity(replay_idx.len());
        for &i in &replay_idx {
            let s = state.buffer.get(i).expect("index drawn in range");
            xs.push(s.sample.clone());
            zs.push(s.latent.clone());
            rs.push(s.reward);
        }
        Some((Tensor::from_rows(&xs)?, Tensor::from_rows(&zs)?, rs))
    };
    let replay = replay_data.as_ref().map(|(x, zl, r)| ReplayBatch {
        samples: x,
        latents: zl,
        rewards: r,
    });

    let parts = activegan_generator_loss(
        &mut tape,
        &state.discriminator,
        &disc_vars,
        &state.policy,
        &policy_vars,
        &UncertaintyBatch {
            fake,
            latents: &z,
            labels: &labels,
            rewards: &rewards,
            replay,
        },
        cfg.reward.lambda,
    )?;
    let loss_g_acgan = tape.value(parts.acgan).item()?;
    let loss_unc = tape.value(parts.uncertainty).item()?;
    let fresh_lls: Vec<f64> = tape.value(parts.log_liks).data()[..batch].to_vec();

    // Generator (and, after warmup, policy) ascent.
    let in_warmup = t < cfg.warmup;
    let steer = method == Method::ActiveGan && !in_warmup;
    let root = if steer { parts.total } else { parts.acgan };
    let grads = tape.backward(root)?;
    apply_ascent(
        &mut state.gen_opt,
        state.generator.net_mut().params_mut(),
        &gen_vars,
        &grads,
    )?;
    state.gen_updates += 1;
    if steer {
        apply_ascent(
            &mut state.policy_opt,
            state.policy.net_mut().params_mut(),
            &policy_vars,
            &grads,
        )?;
    }
    drop(tape);

    // Discriminator phase: loss evaluated every iteration for the trace,
    // parameters updated once per `disc_update_ratio` iterations, on the
    // detached fake batch.
    let mut disc_tape = Tape::new();
    let disc_vars = state.discriminator.bind(&mut disc_tape, true)?;
    let (real_x, real_labels) = data.rows(&real_idx)?;
    let real_var = disc_tape.constant(real_x)?;
    let fake_var = disc_tape.constant(fake_values.clone())?;
    let loss_d_var = discriminator_loss(
        &mut disc_tape,
        &state.discriminator,
        &disc_vars,
        real_var,
        &real_labels,
        fake_var,
        &labels,
    )?;
    state.last_d = disc_tape.value(loss_d_var).item()?;
    if (t + 1) % cfg.disc_update_ratio == 0 {
        let disc_grads = disc_tape.backward(loss_d_var)?;
        apply_ascent(
            &mut state.disc_opt,
            state.discriminator.net_mut().params_mut(),
            &disc_vars,
            &disc_grads,
        )?;
        state.disc_updates += 1;
    }
    drop(disc_tape);

    // Record the fresh batch in the buffer. Stored log-likelihoods are the
    // values under the policy as of the start of this iteration.
    for i in 0..batch {
        state.buffer.push(GeneratedSample {
            latent: z.row(i)?.to_vec(),
            label: labels[i],
            sample: fake_values.row(i)?.to_vec(),
            margin: stats[i].0,
            entropy: stats[i].1,
            reward: stats[i].2,
            log_lik: fresh_lls[i],
        });
    }

    let n = batch as f64;
    Ok(TraceRow {
        iteration: t,
        loss_d: state.last_d,
        loss_g_acgan,
        loss_unc,
        mean_reward: rewards.iter().sum::<f64>() / n,
        mean_margin: stats.iter().map(|s| s.0).sum::<f64>() / n,
        mean_entropy: stats.iter().map(|s| s.1).sum::<f64>() / n,
        buffer_len: state.buffer.len(),
    })
}

/// Adam-ascend `params` by the gradients recorded for `vars`.
fn apply_ascent(
    opt: &mut AdamState,
    mut params: Vec<&mut Tensor>,
    vars: &HeadedVars,
    grads: &Gradients,
) -> Result<()> {
    let var_list = vars.all_vars();
    if var_list.len() != params.len() {
        return Err(Error::contract("parameter/gradient count mismatch"));
    }
    let mut grad_refs = Vec::with_capacity(var_list.len());
    for v in var_list {
        grad_refs.push(
            grads
                .get(v)
                .ok_or_else(|| Error::contract("missing gradient for trainable parameter"))?,
        );
    }
    opt.step_ascending(&mut params, &grad_refs)
}

/// Generate `count` labeled samples with full per-sample diagnostics
/// (margin, entropy, reward, policy log-likelihood). Labels are uniform
/// over the classes unless `class` pins them.
pub fn generate_samples(
    generator: &Generator,
    policy: &GaussianPolicy,
    classifier: &ProbClassifier,
    reward: &RewardConfig,
    count: usize,
    class: Option<usize>,
    rng: &mut SeededRng,
) -> Result<Vec<GeneratedSample>> {
    if let Some(c) = class {
        if c >= generator.classes {
            return Err(Error::Contract(format!(
                "requested class {} outside {} classes",
                c, generator.classes
            )));
        }
    }
    let z = rng.normal_tensor(vec![count, generator.latent_dim]);
    let labels: Vec<usize> = match class {
        Some(c) => vec![c; count],
        None => (0..count).map(|_| rng.index(generator.classes)).collect(),
    };
    if count == 0 {
        return Ok(Vec::new());
    }
    let x = generator.generate_batch(&z, &labels)?;
    let posteriors = classifier.predict_proba_batch(&x)?;
    let lls = policy.log_likelihood_values(&x, &z)?;

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (margin, entropy, r) = sample_reward(posteriors.row(i)?, reward)?;
        out.push(GeneratedSample {
            latent: z.row(i)?.to_vec(),
            label: labels[i],
            sample: x.row(i)?.to_vec(),
            margin,
            entropy,
            reward: r,
            log_lik: lls[i],
        });
    }
    Ok(out)
}

/// Recompute each sample's reward from its stored margin and entropy; used
/// to assert the plumbing invariant `r = alpha*r_m + (1-alpha)*r_le`.
pub fn recomputed_reward(sample: &GeneratedSample, cfg: &RewardConfig) -> Result<f64> {
    let r_m = margin_reward(sample.margin, cfg)?;
    let r_le = entropy_reward(sample.entropy)?;
    combined_reward(r_m, r_le, cfg)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// The trained networks plus the metadata needed to generate and evaluate
/// from a checkpoint.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub policy: GaussianPolicy,
    pub classifier: ProbClassifier,
    pub reward: RewardConfig,
    pub method: Method,
    pub seed: u64,
    pub norm: Option<FeatureNorm>,
}

#[allow(clippy::too_many_arguments)]
fn snapshot_store(
    generator: &Generator,
    discriminator: &Discriminator,
    policy: &GaussianPolicy,
    classifier: &ProbClassifier,
    reward: &RewardConfig,
    method: Method,
    seed: u64,
    norm: Option<&FeatureNorm>,
) -> Result<TensorStore> {
    let mut store = TensorStore::new();
    generator.save_into(&mut store, "g")?;
    discriminator.save_into(&mut store, "d")?;
    policy.save_into(&mut store, "p")?;

    store.insert("classifier/w".to_string(), classifier.weights().clone())?;
    store.insert("classifier/b".to_string(), classifier.bias().clone())?;
    let hp = classifier.hp();
    let mode_flag = match hp.mode {
        classifier::ClassifierMode::Multinomial => 0.0,
        classifier::ClassifierMode::SvmPlatt => 1.0,
    };
    store.insert(
        "classifier/hp".to_string(),
        Tensor::new(vec![4], vec![hp.reg, hp.lr, hp.epochs as f64, mode_flag])?,
    )?;
    if let Some(platt) = classifier.platt() {
        let flat: Vec<f64> = platt.iter().flat_map(|&(a, b)| [a, b]).collect();
        store.insert(
            "classifier/platt".to_string(),
            Tensor::new(vec![platt.len(), 2], flat)?,
        )?;
    }

    store.insert(
        "meta/dims".to_string(),
        Tensor::new(
            vec![3],
            vec![
                generator.latent_dim as f64,
                generator.classes as f64,
                generator.sample_dim as f64,
            ],
        )?,
    )?;
    let hidden = &generator.net().spec().hidden;
    store.insert(
        "meta/hidden".to_string(),
        Tensor::new(vec![hidden.len()], hidden.iter().map(|&h| h as f64).collect())?,
    )?;
    store.insert(
        "meta/reward".to_string(),
        Tensor::new(
            vec![4],
            vec![
                reward.epsilon,
                reward.alpha,
                reward.trunc_constant,
                reward.lambda,
            ],
        )?,
    )?;
    store.insert(
        "meta/method".to_string(),
        Tensor::new(vec![1], vec![if method == Method::ActiveGan { 1.0 } else { 0.0 }])?,
    )?;
    store.insert(
        "meta/seed".to_string(),
        Tensor::new(
            vec![2],
            vec![(seed >> 32) as f64, (seed & 0xFFFF_FFFF) as f64],
        )?,
    )?;
    if let Some(norm) = norm {
        store.insert(
            "meta/norm_mean".to_string(),
            Tensor::new(vec![norm.mean.len()], norm.mean.clone())?,
        )?;
        store.insert(
            "meta/norm_scale".to_string(),
            Tensor::new(vec![norm.scale.len()], norm.scale.clone())?,
        )?;
    }
    Ok(store)
}

impl RunArtifacts {
    /// Serialize the trained networks and run metadata (not the trace).
    pub fn to_store(&self) -> Result<TensorStore> {
        snapshot_store(
            &self.generator,
            &self.discriminator,
            &self.policy,
            &self.classifier,
            &self.config.reward,
            self.method,
            self.config.seed,
            self.norm.as_ref(),
        )
    }
}

fn usize_entry(value: f64, what: &str) -> Result<usize> {
    if !(value.is_finite() && value >= 0.0 && value.fract() == 0.0 && value <= 2f64.powi(53)) {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{} is not a valid count: {}", what, value),
        });
    }
    Ok(value as usize)
}

impl ModelBundle {
    pub fn from_artifacts(artifacts: &RunArtifacts) -> ModelBundle {
        ModelBundle {
            generator: artifacts.generator.clone(),
            discriminator: artifacts.discriminator.clone(),
            policy: artifacts.policy.clone(),
            classifier: artifacts.classifier.clone(),
            reward: artifacts.config.reward,
            method: artifacts.method,
            seed: artifacts.config.seed,
            norm: artifacts.norm.clone(),
        }
    }

    pub fn from_store(store: &TensorStore) -> Result<ModelBundle> {
        let dims = store.require("meta/dims")?;
        if dims.numel() != 3 {
            return Err(Error::Format {
                offset: 0,
                detail: "meta/dims must hold [latent, classes, sample] sizes".to_string(),
            });
        }
        let latent_dim = usize_entry(dims.data()[0], "latent dimension")?;
        let classes = usize_entry(dims.data()[1], "class count")?;
        let sample_dim = usize_entry(dims.data()[2], "sample dimension")?;
        let hidden_t = store.require("meta/hidden")?;
        let mut hidden = Vec::with_capacity(hidden_t.numel());
        for &h in hidden_t.data() {
            hidden.push(usize_entry(h, "hidden width")?);
        }

        let generator =
            Generator::load_from(store, "g", latent_dim, classes, sample_dim, &hidden)?;
        let discriminator = Discriminator::load_from(store, "d", sample_dim, classes, &hidden)?;
        let policy = GaussianPolicy::load_from(store, "p", sample_dim, latent_dim, &hidden)?;

        let hp_t = store.require("classifier/hp")?;
        if hp_t.numel() != 4 {
            return Err(Error::Format {
                offset: 0,
                detail: "classifier/hp must hold [reg, lr, epochs, mode]".to_string(),
            });
        }
        let mode = match hp_t.data()[3] {
            v if v == 0.0 => classifier::ClassifierMode::Multinomial,
            v if v == 1.0 => classifier::ClassifierMode::SvmPlatt,
            v => {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("unknown classifier mode flag {}", v),
                })
            }
        };
        let hp = ClassifierHp {
            reg: hp_t.data()[0],
            lr: hp_t.data()[1],
            epochs: usize_entry(hp_t.data()[2], "classifier epochs")?,
            mode,
        };
        let platt = match store.get("classifier/platt") {
            Some(t) => {
                let rows = t.rows()?;
                let mut pairs = Vec::with_capacity(rows);
                for i in 0..rows {
                    let row = t.row(i)?;
                    pairs.push((row[0], row[1]));
                }
                Some(pairs)
            }
            None => None,
        };
        let classifier = ProbClassifier::from_parts(
            store.require("classifier/w")?.clone(),
            store.require("classifier/b")?.clone(),
            platt,
            hp,
        )?;

        let reward_t = store.require("meta/reward")?;
        if reward_t.numel() != 4 {
            return Err(Error::Format {
                offset: 0,
                detail: "meta/reward must hold [epsilon, alpha, constant, lambda]".to_string(),
            });
        }
        let reward = RewardConfig {
            epsilon: reward_t.data()[0],
            alpha: reward_t.data()[1],
            trunc_constant: reward_t.data()[2],
            lambda: reward_t.data()[3],
        };
        reward.validate().map_err(Error::Validation)?;

        let method = match store.require("meta/method")?.data()[0] {
            v if v == 0.0 => Method::AcGan,
            v if v == 1.0 => Method::ActiveGan,
            v => {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("unknown method flag {}", v),
                })
            }
        };
        let seed_t = store.require("meta/seed")?;
        if seed_t.numel() != 2 {
            return Err(Error::Format {
                offset: 0,
                detail: "meta/seed must hold two halves".to_string(),
            });
        }
        let seed = ((usize_entry(seed_t.data()[0], "seed high half")? as u64) << 32)
            | usize_entry(seed_t.data()[1], "seed low half")? as u64;

        let norm = match (store.get("meta/norm_mean"), store.get("meta/norm_scale")) {
            (Some(mean), Some(scale)) => {
                if mean.numel() != sample_dim || scale.numel() != sample_dim {
                    return Err(Error::Format {
                        offset: 0,
                        detail: "normalization vectors disagree with the sample dimension"
                            .to_string(),
                    });
                }
                Some(FeatureNorm {
                    mean: mean.data().to_vec(),
                    scale: scale.data().to_vec(),
                })
            }
            (None, None) => None,
            _ => {
                return Err(Error::Format {
                    offset: 0,
                    detail: "normalization mean/scale must both be present or absent".to_string(),
                })
            }
        };

        Ok(ModelBundle {
            generator,
            discriminator,
            policy,
            classifier,
            reward,
            method,
            seed,
            norm,
        })
    }
}
