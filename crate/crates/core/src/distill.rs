//! On-policy flow-map distillation.
//!
//! Each generator step samples an inference budget `s`, rolls the student
//! out along the `s`-step Euler grid using only three flow-map jumps
//! (`1 → t`, `t → r`, `r → 0` with `r = t − 1/s`), re-noises the result and
//! pushes it along the score difference between the teacher and an online
//! fake score model. The Stage-1 objective on fresh data is added on top.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GaussianFlow, ToyDistribution};
use crate::error::{Error, Result};
use crate::flowmap::{at_step, stage1_loss, AdaptiveWeightState, Stage1Batch, Stage1Config};
use crate::nets::{Class, FlowMapNet};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::{normal_tensor, RngStreams, StreamRng};
use crate::samplers::{FlowMapModel, VelocityField};
use crate::teacher::{fm_loss, velocity_to_score, BatchStreams, FmBatch, GuidedTeacher, TimeSampler};
use crate::tensor::{Tape, Tensor};

/// A model that can take one batched jump `t → r` on a tape.
pub trait RolloutModel {
    fn jump(&self, tape: &mut Tape, z: &Tensor, t: f64, r: f64, classes: &[Class]) -> Result<Tensor>;
}

impl RolloutModel for FlowMapNet {
    fn jump(&self, tape: &mut Tape, z: &Tensor, t: f64, r: f64, classes: &[Class]) -> Result<Tensor> {
        let n = z.rows();
        self.flow_map(tape, z, &vec![t; n], &vec![r; n], classes)
    }
}

impl RolloutModel for GaussianFlow {
    fn jump(&self, _: &mut Tape, z: &Tensor, t: f64, r: f64, classes: &[Class]) -> Result<Tensor> {
        let n = z.rows();
        FlowMapModel::flow_map(self, z, &vec![t; n], &vec![r; n], classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub from: f64,
    pub to: f64,
    /// State at `to`.
    pub state: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub s: usize,
    pub k: usize,
    pub t: f64,
    pub r: f64,
    pub z_start: Tensor,
    /// Non-degenerate segments in order; the last state is `z_0`.
    pub segments: Vec<Segment>,
}

impl RolloutTrace {
    pub fn z0(&self) -> &Tensor {
        self.segments.last().map(|s| &s.state).unwrap_or(&self.z_start)
    }

    /// One network call per evaluated segment.
    pub fn calls(&self) -> usize {
        self.segments.len()
    }

    /// The state at time `time`, if the trace passes through it.
    pub fn state_at(&self, time: f64) -> Option<&Tensor> {
        if time == 1.0 {
            return Some(&self.z_start);
        }
        self.segments.iter().find(|s| s.to == time).map(|s| &s.state)
    }
}

/// Grid point `k/s` computed so that `k = s` gives exactly 1.
pub fn grid_time(k: usize, s: usize) -> f64 {
    k as f64 / s as f64
}

/// `s ~ U{1..s_max}`, then `k ~ U{1..s}`.
pub fn sample_budget<R: Rng + ?Sized>(rng: &mut R, s_max: usize) -> Result<(usize, usize)> {
    if s_max == 0 {
        return Err(Error::Invalid("s_max must be positive".into()));
    }
    let s = rng.random_range(1..=s_max);
    let k = rng.random_range(1..=s);
    Ok((s, k))
}

/// Three-segment rollout for budget `s` at grid index `k`; zero-length
/// segments are skipped.
pub fn backward_simulate_at<M: RolloutModel + ?Sized>(
    tape: &mut Tape,
    model: &M,
    z_start: &Tensor,
    classes: &[Class],
    s: usize,
    k: usize,
) -> Result<RolloutTrace> {
    if s == 0 || k == 0 || k > s {
        return Err(Error::Invalid(format!("grid index {k} outside 1..={s}")));
    }
    let t = grid_time(k, s);
    let r = grid_time(k - 1, s);
    let mut segments: Vec<Segment> = Vec::with_capacity(3);
    for (from, to) in [(1.0, t), (t, r), (r, 0.0)] {
        if from == to {
            continue;
        }
        let z = segments.last().map(|s| &s.state).unwrap_or(z_start);
        let state = model.jump(tape, z, from, to, classes)?;
        segments.push(Segment { from, to, state });
    }
    Ok(RolloutTrace {
        s,
        k,
        t,
        r,
        z_start: z_start.clone(),
        segments,
    })
}

/// [`backward_simulate_at`] with `k ~ U{1..s}`.
pub fn backward_simulate<M: RolloutModel + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &M,
    z_start: &Tensor,
    classes: &[Class],
    s: usize,
    rng: &mut R,
) -> Result<RolloutTrace> {
    if s == 0 {
        return Err(Error::Invalid("budget s must be positive".into()));
    }
    let k = rng.random_range(1..=s);
    backward_simulate_at(tape, model, z_start, classes, s, k)
}

/// A score model `s(z, t, c)` evaluated without gradients.
pub trait ScoreFn {
    fn score(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor>;
}

impl<F> ScoreFn for F
where
    F: Fn(&Tensor, &[f64], &[Class]) -> Result<Tensor>,
{
    fn score(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor> {
        self(z, t, classes)
    }
}

/// Score of any velocity field through `velocity_to_score`.
pub struct FieldScore<V>(pub V);

impl<V: VelocityField> ScoreFn for FieldScore<V> {
    fn score(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor> {
        let u = self.0.velocity(z, t, classes)?;
        velocity_to_score(&u, z, t)
    }
}

pub fn teacher_score(teacher: &FlowMapNet, scale: f64) -> FieldScore<GuidedTeacher<'_>> {
    FieldScore(GuidedTeacher { net: teacher, scale })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorePair {
    pub s_real: Tensor,
    pub s_fake: Tensor,
    pub t_d: Vec<f64>,
    pub z_td: Tensor,
}

#[derive(Clone, Debug)]
pub struct DmdOutput {
    pub loss: Tensor,
    pub scores: ScorePair,
    /// Per-element push `p`.
    pub push: Tensor,
}

/// How the score difference becomes a per-sample push on `z_td`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DmdForm {
    /// `p = d / η` with `d = s_real − s_fake` and one batch normalizer
    /// `η = mean|d| + 1e-8`.
    Score,
    /// `p = (x̂_real − x̂_fake) / η` with denoised means
    /// `x̂ = (z + t²·s) / (1 − t)` and `η = mean |z0 − x̂_real| + 1e-8` over
    /// the batch.
    #[default]
    Denoised,
}

/// Re-noises `z0` at `t_d ~ U(renoise)` and returns the surrogate
/// `0.5·mean_i ‖z_td,i − sg(z_td,i + p_i)‖²`, whose gradient with respect to
/// row `i` of `z_td` is `−p_i / n`.
#[allow(clippy::too_many_arguments)]
pub fn dmd_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    z0: &Tensor,
    classes: &[Class],
    real: &dyn ScoreFn,
    fake: &dyn ScoreFn,
    rng: &mut R,
    renoise: (f64, f64),
    form: DmdForm,
) -> Result<DmdOutput> {
    let (lo, hi) = renoise;
    if !(0.0 < lo && lo < hi && hi <= 1.0) {
        return Err(Error::Invalid(format!("renoise range ({lo}, {hi}) must satisfy 0 < lo < hi ≤ 1")));
    }
    let n = z0.rows();
    let cols = z0.cols();
    let t_d: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let eps = normal_tensor(rng, z0.shape());
    let keep = Tensor::vector(t_d.iter().map(|t| 1.0 - t).collect());
    let signal = tape.scale_rows(z0, &keep)?;
    let noise = Tensor::new(
        eps.shape().to_vec(),
        eps.data().iter().enumerate().map(|(j, e)| t_d[j / cols] * e).collect(),
    )?;
    let z_td = tape.add(&signal, &noise)?;
    let frozen = z_td.detach();
    let s_real = real.score(&frozen, &t_d, classes)?;
    let s_fake = fake.score(&frozen, &t_d, classes)?;
    let d: Vec<f64> = s_real.data().iter().zip(s_fake.data()).map(|(a, b)| a - b).collect();
    if let Some(bad) = d.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            stage: "distill",
            step: 0,
            detail: format!("non-finite score difference at row {}", bad / cols),
        });
    }
    let push: Vec<f64> = match form {
        DmdForm::Score => {
            let eta = d.iter().map(|v| v.abs()).sum::<f64>() / d.len().max(1) as f64 + 1e-8;
            d.iter().map(|v| v / eta).collect()
        }
        DmdForm::Denoised => {
            let mut gap = 0.0;
            let mut push = Vec::with_capacity(d.len());
            for (j, (z, s)) in frozen.data().iter().zip(s_real.data()).enumerate() {
                let t = t_d[j / cols];
                gap += ((z + t * t * s) / (1.0 - t) - z0.data()[j]).abs();
                push.push(t * t / (1.0 - t) * d[j]);
            }
            let eta = gap / d.len().max(1) as f64 + 1e-8;
            push.iter().map(|p| p / eta).collect()
        }
    };
    let target = Tensor::new(
        frozen.shape().to_vec(),
        frozen.data().iter().zip(&push).map(|(z, p)| z + p).collect(),
    )?;
    let diff = tape.sub(&z_td, &target)?;
    let sq = tape.square(&diff)?;
    let rows = tape.row_sum(&sq)?;
    let mean = tape.mean(&rows)?;
    let loss = tape.scale(&mean, 0.5)?;
    Ok(DmdOutput {
        loss,
        scores: ScorePair {
            s_real,
            s_fake,
            t_d,
            z_td: frozen,
        },
        push: Tensor::new(z0.shape().to_vec(), push)?,
    })
}

/// One flow-matching step of the fake model on detached student samples.
pub fn fake_score_update<R: Rng + ?Sized>(
    fake: &mut FlowMapNet,
    opt: &mut AdamW,
    z0: &Tensor,
    classes: &[Class],
    sampler: &TimeSampler,
    rng: &mut R,
) -> Result<f64> {
    let n = z0.rows();
    let t: Vec<f64> = (0..n).map(|_| sampler.sample(rng)).collect();
    let eps = normal_tensor(rng, z0.shape());
    let batch = FmBatch {
        x: z0.detach(),
        eps,
        t,
        classes: classes.to_vec(),
    };
    let mut tape = Tape::new();
    let bound = fake.bind(&mut tape);
    let loss = fm_loss(&mut tape, &bound, &batch)?;
    let grads = tape.backward(&loss)?;
    let grads = bound.gradients(&grads);
    opt.step(fake.parameters_mut(), &grads);
    Ok(loss.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub steps: usize,
    /// Rows per rollout.
    pub rollout_batch: usize,
    pub s_max: usize,
    pub lambda_fm: f64,
    pub lambda_dmd: f64,
    pub renoise: (f64, f64),
    pub dmd_form: DmdForm,
    /// Fake-model updates per generator update.
    pub fake_updates: usize,
    /// Fake-model updates on student rollouts before the first generator
    /// update.
    pub fake_warmup: usize,
    /// Guidance scale of the real score.
    pub real_guidance: f64,
    pub optim: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub fake_optim: AdamWConfig,
    pub fake_time_sampler: TimeSampler,
    /// Exponential moving average of student weights; the average is the
    /// returned student.
    pub ema_decay: Option<f64>,
    pub log_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 1000,
            rollout_batch: 256,
            s_max: 32,
            lambda_fm: 1.0,
            lambda_dmd: 0.5,
            renoise: (0.02, 0.98),
            dmd_form: DmdForm::Denoised,
            fake_updates: 1,
            fake_warmup: 500,
            real_guidance: 2.0,
            optim: AdamWConfig::default().with_lr(8e-6),
            lr_schedule: LrSchedule::Constant,
            fake_optim: AdamWConfig::default().with_lr(2e-4),
            fake_time_sampler: TimeSampler::default(),
            ema_decay: None,
            log_every: 50,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_batch == 0 || self.s_max == 0 {
            return Err(Error::Invalid("rollout batch and s_max must be positive".into()));
        }
        if self.lambda_fm < 0.0 || self.lambda_dmd < 0.0 {
            return Err(Error::Invalid("loss weights must be nonnegative".into()));
        }
        let (lo, hi) = self.renoise;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(Error::Invalid(format!("renoise range ({lo}, {hi}) must satisfy 0 < lo < hi ≤ 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogRow {
    pub step: usize,
    pub loss_fm: f64,
    pub loss_dmd: f64,
    pub loss_fake: f64,
    pub s_sampled: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage2Stats {
    pub loss_fm: f64,
    pub loss_dmd: f64,
    pub loss_fake: f64,
    pub s: usize,
    pub k: usize,
    /// Student calls spent on the rollout.
    pub rollout_calls: usize,
}

/// Random streams consumed by Stage 2.
pub struct Stage2Streams {
    pub fm: BatchStreams,
    pub budget: StreamRng,
    pub rollout: StreamRng,
    pub renoise: StreamRng,
    pub fake: StreamRng,
}

impl Stage2Streams {
    pub fn new(streams: &RngStreams, prefix: &str) -> Self {
        Self {
            fm: BatchStreams::new(streams, &format!("{prefix}.fm")),
            budget: streams.stream(&format!("{prefix}.budget")),
            rollout: streams.stream(&format!("{prefix}.rollout")),
            renoise: streams.stream(&format!("{prefix}.renoise")),
            fake: streams.stream(&format!("{prefix}.fake")),
        }
    }
}

/// Mutable Stage-2 training state.
pub struct Stage2State {
    pub student: FlowMapNet,
    pub fake: FlowMapNet,
    pub opt: AdamW,
    pub fake_opt: AdamW,
    pub adaptive: AdaptiveWeightState,
}

impl Stage2State {
    /// Fake model starts as a copy of the teacher.
    pub fn new(student: FlowMapNet, teacher: &FlowMapNet, stage1: &Stage1Config, config: &Stage2Config) -> Self {
        Self {
            student,
            fake: teacher.clone(),
            opt: AdamW::new(config.optim),
            fake_opt: AdamW::new(config.fake_optim),
            adaptive: AdaptiveWeightState::new(&stage1.adaptive),
        }
    }
}

/// Fits the fake model to detached student rollouts at random budgets.
pub fn warm_up_fake(
    state: &mut Stage2State,
    dist: &ToyDistribution,
    config: &Stage2Config,
    rngs: &mut Stage2Streams,
    updates: usize,
) -> Result<f64> {
    let frozen = state.student.detached();
    let mut last = f64::NAN;
    for _ in 0..updates {
        let (s, k) = sample_budget(&mut rngs.budget, config.s_max)?;
        let z = normal_tensor(&mut rngs.rollout, &[config.rollout_batch, dist.dim()]);
        let classes: Vec<Class> = dist
            .sample_labels(config.rollout_batch, &mut rngs.rollout)
            .into_iter()
            .map(Class::Label)
            .collect();
        let trace = backward_simulate_at(&mut Tape::new(), &frozen, &z, &classes, s, k)?;
        last = fake_score_update(
            &mut state.fake,
            &mut state.fake_opt,
            trace.z0(),
            &classes,
            &config.fake_time_sampler,
            &mut rngs.fake,
        )?;
    }
    Ok(last)
}

/// One generator update followed by `fake_updates` fake-model updates.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    state: &mut Stage2State,
    real: &dyn ScoreFn,
    dist: &ToyDistribution,
    stage1: &Stage1Config,
    config: &Stage2Config,
    rngs: &mut Stage2Streams,
) -> Result<Stage2Stats> {
    let mut stats = Stage2Stats::default();
    let mut tape = Tape::new();
    let bound = state.student.bind(&mut tape);
    let mut total: Option<Tensor> = None;
    if config.lambda_fm > 0.0 {
        let batch = Stage1Batch::draw(dist, stage1, &mut rngs.fm)?;
        let (loss, s1) = stage1_loss(&mut tape, &bound, &batch, &mut state.adaptive, stage1)?;
        stats.loss_fm = s1.loss;
        total = Some(tape.scale(&loss, config.lambda_fm)?);
    }
    let mut rollout_z0 = None;
    if config.lambda_dmd > 0.0 {
        let (s, k) = sample_budget(&mut rngs.budget, config.s_max)?;
        let z = normal_tensor(&mut rngs.rollout, &[config.rollout_batch, dist.dim()]);
        let classes: Vec<Class> = dist
            .sample_labels(config.rollout_batch, &mut rngs.rollout)
            .into_iter()
            .map(Class::Label)
            .collect();
        let before = state.student.calls();
        let trace = backward_simulate_at(&mut tape, &bound, &z, &classes, s, k)?;
        stats.rollout_calls = state.student.calls() - before;
        stats.s = s;
        stats.k = k;
        let fake = FieldScore(&state.fake);
        let out = dmd_loss(&mut tape, trace.z0(), &classes, real, &fake, &mut rngs.renoise, config.renoise, config.dmd_form)?;
        stats.loss_dmd = out.loss.item();
        let scaled = tape.scale(&out.loss, config.lambda_dmd)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &scaled)?,
            None => scaled,
        });
        rollout_z0 = Some((trace.z0().detach(), classes));
    }
    if let Some(total) = total {
        if !total.item().is_finite() {
            return Err(Error::Numeric {
                stage: "distill",
                step: 0,
                detail: format!("generator loss = {}", total.item()),
            });
        }
        let grads = tape.backward(&total)?;
        let grads = bound.gradients(&grads);
        state.opt.step(state.student.parameters_mut(), &grads);
    }
    if let Some((z0, classes)) = rollout_z0 {
        let mut sum = 0.0;
        for _ in 0..config.fake_updates {
            sum += fake_score_update(
                &mut state.fake,
                &mut state.fake_opt,
                &z0,
                &classes,
                &config.fake_time_sampler,
                &mut rngs.fake,
            )?;
        }
        stats.loss_fake = sum / config.fake_updates.max(1) as f64;
        if !stats.loss_fake.is_finite() {
            return Err(Error::Numeric {
                stage: "distill",
                step: 0,
                detail: format!("fake loss = {}", stats.loss_fake),
            });
        }
    }
    Ok(stats)
}

/// Stage 2 from a Stage-1 student with the guided teacher as real score;
/// returns the student, the fake model and the log.
pub fn train_stage2(
    student: &FlowMapNet,
    teacher: &FlowMapNet,
    dist: &ToyDistribution,
    stage1: &Stage1Config,
    config: &Stage2Config,
    streams: &RngStreams,
) -> Result<(FlowMapNet, FlowMapNet, Vec<Stage2LogRow>)> {
    let real = teacher_score(teacher, config.real_guidance);
    train_stage2_with_score(student, teacher, &real, dist, stage1, config, streams)
}

/// [`train_stage2`] against an arbitrary real score; the fake model still
/// starts from `teacher`.
pub fn train_stage2_with_score(
    student: &FlowMapNet,
    teacher: &FlowMapNet,
    real: &dyn ScoreFn,
    dist: &ToyDistribution,
    stage1: &Stage1Config,
    config: &Stage2Config,
    streams: &RngStreams,
) -> Result<(FlowMapNet, FlowMapNet, Vec<Stage2LogRow>)> {
    config.validate()?;
    stage1.validate()?;
    let mut state = Stage2State::new(student.clone(), teacher, stage1, config);
    let mut rngs = Stage2Streams::new(streams, "stage2");
    if config.lambda_dmd > 0.0 {
        warm_up_fake(&mut state, dist, config, &mut rngs, config.fake_warmup)?;
    }
    let mut ema = config.ema_decay.map(|d| (d, state.student.clone()));
    let mut log = Vec::new();
    for step in 1..=config.steps {
        state.opt.config.lr = config.optim.lr * config.lr_schedule.factor(step, config.steps);
        let stats = stage2_step(&mut state, real, dist, stage1, config, &mut rngs).map_err(|e| at_step(e, step))?;
        if let Some((decay, avg)) = &mut ema {
            for (a, p) in avg.parameters_mut().into_iter().zip(state.student.parameters()) {
                for (a, p) in a.data_mut().iter_mut().zip(p.1.data()) {
                    *a = *decay * *a + (1.0 - *decay) * p;
                }
            }
        }
        if step % config.log_every.max(1) == 0 || step == config.steps {
            log.push(Stage2LogRow {
                step,
                loss_fm: stats.loss_fm,
                loss_dmd: stats.loss_dmd,
                loss_fake: stats.loss_fake,
                s_sampled: stats.s,
            });
        }
    }
    let student = ema.map(|(_, avg)| avg).unwrap_or(state.student);
    Ok((student, state.fake, log))
}

/// SGD on the mean `m` of a 1D student `N(m, 1)` against the target
/// `N(0, 1)` using only DMD gradients with analytic real and fake scores.
/// With `matched` the fake score is the real one. Returns `m` after each
/// step, starting with `m0`.
pub fn gaussian_mean_probe(
    m0: f64,
    steps: usize,
    lr: f64,
    batch: usize,
    form: DmdForm,
    matched: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let spread = |t: f64| (1.0 - t).powi(2) + t * t;
    let real = |z: &Tensor, t: &[f64], _: &[Class]| -> Result<Tensor> {
        let data = z.data().iter().zip(t).map(|(z, &t)| -z / spread(t)).collect();
        Ok(Tensor::new(z.shape().to_vec(), data)?)
    };
    let streams = RngStreams::new(seed);
    let mut noise = streams.stream("probe.noise");
    let mut renoise = streams.stream("probe.renoise");
    let classes = vec![Class::Label(0); batch];
    let mut m = m0;
    let mut path = vec![m];
    for _ in 0..steps {
        let mean = m;
        let fake = move |z: &Tensor, t: &[f64], _: &[Class]| -> Result<Tensor> {
            let data = z
                .data()
                .iter()
                .zip(t)
                .map(|(z, &t)| -(z - (1.0 - t) * mean) / spread(t))
                .collect();
            Ok(Tensor::new(z.shape().to_vec(), data)?)
        };
        let xi = normal_tensor(&mut noise, &[batch, 1]);
        let mut tape = Tape::new();
        let z0 = tape.watch(&xi.map(|x| x + m));
        let out = if matched {
            dmd_loss(&mut tape, &z0, &classes, &real, &real, &mut renoise, (0.02, 0.98), form)?
        } else {
            dmd_loss(&mut tape, &z0, &classes, &real, &fake, &mut renoise, (0.02, 0.98), form)?
        };
        let grads = tape.backward(&out.loss)?;
        let g: f64 = grads.get_or_zeros(&z0).data().iter().sum();
        m -= lr * g;
        path.push(m);
    }
    Ok(path)
}
