//! Consistency-style comparator.
//!
//! The baseline regresses `f(z_t, t, 0)` onto endpoints of the guided
//! teacher ODE, then trains with consistency backward simulation: predict
//! `ẑ_0`, re-noise to the next time with fresh noise, repeat. Only the last
//! `grad_window` predictions carry gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ToyDistribution;
use crate::distill::{dmd_loss, DmdForm, fake_score_update, teacher_score, FieldScore, ScoreFn, Stage2LogRow};
use crate::error::{Error, Result};
use crate::flowmap::at_step;
use crate::metrics::Generator;
use crate::nets::{Class, FlowMapNet, TimeConditioning};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::{normal_tensor, RngStreams, StreamRng};
use crate::samplers::{flowmap_trajectory, make_uniform_schedule, rk4_trajectory, Schedule, VelocityField};
use crate::teacher::{row_sq_error, GuidedTeacher, TimeSampler};
use crate::tensor::{Tape, Tensor};

/// Teacher PF-ODE trajectories on a fixed fine Euler grid.
#[derive(Clone, Debug)]
pub struct OdePool {
    pub schedule: Schedule,
    /// `states[j]` holds every trajectory at `schedule.times()[j]`.
    pub states: Vec<Tensor>,
    pub classes: Vec<Class>,
}

impl OdePool {
    pub fn build<V: VelocityField + ?Sized>(
        field: &V,
        dist: &ToyDistribution,
        size: usize,
        grid_steps: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let schedule = make_uniform_schedule(grid_steps)?;
        let z = normal_tensor(rng, &[size, dist.dim()]);
        let classes: Vec<Class> = dist.sample_labels(size, rng).into_iter().map(Class::Label).collect();
        let mut states = vec![z];
        for (t, r) in schedule.pairs() {
            let cur = states.last().expect("nonempty");
            let v = field.velocity(cur, &vec![t; size], &classes)?;
            let next = cur.data().iter().zip(v.data()).map(|(z, v)| z + (r - t) * v).collect();
            states.push(Tensor::new(cur.shape().to_vec(), next)?);
        }
        Ok(Self {
            schedule,
            states,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn endpoints(&self) -> &Tensor {
        self.states.last().expect("nonempty")
    }

    /// Random (trajectory, grid time) pairs with their endpoints.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ConsistencyBatch {
        let d = self.endpoints().cols();
        let grid = self.schedule.times();
        let mut z = Vec::with_capacity(n * d);
        let mut target = Vec::with_capacity(n * d);
        let mut t = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..self.len());
            let j = rng.random_range(0..grid.len());
            z.extend_from_slice(self.states[j].row(i));
            target.extend_from_slice(self.endpoints().row(i));
            t.push(grid[j]);
            classes.push(self.classes[i]);
        }
        ConsistencyBatch {
            z_t: Tensor::new(vec![n, d], z).expect("sizes agree"),
            t,
            target: Tensor::new(vec![n, d], target).expect("sizes agree"),
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyBatch {
    pub z_t: Tensor,
    pub t: Vec<f64>,
    pub target: Tensor,
    pub classes: Vec<Class>,
}

/// `mean_i ‖f(z_t, t, 0) − z_0^ODE‖²`.
pub fn consistency_init_loss(tape: &mut Tape, net: &FlowMapNet, batch: &ConsistencyBatch) -> Result<Tensor> {
    let zero = vec![0.0; batch.t.len()];
    let pred = net.flow_map(tape, &batch.z_t, &batch.t, &zero, &batch.classes)?;
    let err = row_sq_error(tape, &pred, &batch.target.detach())?;
    Ok(tape.mean(&err)?)
}

pub fn consistency_init_step(net: &mut FlowMapNet, opt: &mut AdamW, batch: &ConsistencyBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let loss = consistency_init_loss(&mut tape, &bound, batch)?;
    let grads = tape.backward(&loss)?;
    let grads = bound.gradients(&grads);
    opt.step(net.parameters_mut(), &grads);
    Ok(loss.item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTrace {
    pub schedule: Schedule,
    /// State entering each step, starting with `z_T`.
    pub inputs: Vec<Tensor>,
    /// `ẑ_0` predicted at each step.
    pub predictions: Vec<Tensor>,
    pub calls: usize,
}

impl ConsistencyTrace {
    pub fn z0(&self) -> &Tensor {
        self.predictions.last().expect("at least one step")
    }
}

/// Predict / re-noise chain along `schedule`; steps before the last
/// `grad_window` run on a detached copy of the net.
pub fn consistency_backward_simulate<R: Rng + ?Sized>(
    tape: &mut Tape,
    net: &FlowMapNet,
    z_start: &Tensor,
    classes: &[Class],
    schedule: &Schedule,
    rng: &mut R,
    grad_window: usize,
) -> Result<ConsistencyTrace> {
    let n = z_start.rows();
    let steps = schedule.steps();
    let times = schedule.times();
    let frozen = net.detached();
    let mut inputs = vec![z_start.clone()];
    let mut predictions = Vec::with_capacity(steps);
    for i in 0..steps {
        let model = if i + grad_window >= steps { net } else { &frozen };
        let z = inputs.last().expect("nonempty");
        let pred = model.flow_map(tape, z, &vec![times[i]; n], &vec![0.0; n], classes)?;
        if i + 1 < steps {
            let t = times[i + 1];
            let eps = normal_tensor(rng, z.shape());
            let signal = tape.scale(&pred, 1.0 - t)?;
            let noise = eps.map(|e| t * e);
            inputs.push(tape.add(&signal, &noise)?);
        }
        predictions.push(pred);
    }
    Ok(ConsistencyTrace {
        schedule: schedule.clone(),
        inputs,
        predictions,
        calls: steps,
    })
}

/// Multi-step consistency sampling with `n` uniform steps.
pub fn consistency_sampler<R: Rng + ?Sized>(
    net: &FlowMapNet,
    z: &Tensor,
    classes: &[Class],
    n: usize,
    rng: &mut R,
) -> Result<(Tensor, usize)> {
    let schedule = make_uniform_schedule(n)?;
    let trace = consistency_backward_simulate(&mut Tape::new(), &net.detached(), z, classes, &schedule, rng, 0)?;
    Ok((trace.z0().clone(), trace.calls))
}

/// [`consistency_sampler`] as an evaluation generator.
pub struct ConsistencyGenerator<'a>(pub &'a FlowMapNet);

impl Generator for ConsistencyGenerator<'_> {
    fn generate(&self, z: &Tensor, classes: &[Class], steps: usize, rng: &mut StreamRng) -> Result<(Tensor, usize)> {
        consistency_sampler(self.0, z, classes, steps, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub pool_size: usize,
    pub pool_steps: usize,
    pub guidance: f64,
    pub init_steps: usize,
    pub init_batch: usize,
    pub init_optim: AdamWConfig,
    pub init_lr_schedule: LrSchedule,
    /// Steps of consistency backward simulation after the init phase.
    pub sim_steps: usize,
    /// Sampling steps of each simulated rollout.
    pub sim_schedule: usize,
    pub grad_window: usize,
    pub rollout_batch: usize,
    /// Weight of the ODE regression during simulation.
    pub lambda_init: f64,
    pub lambda_dmd: f64,
    pub renoise: (f64, f64),
    pub dmd_form: DmdForm,
    pub fake_updates: usize,
    pub fake_warmup: usize,
    pub optim: AdamWConfig,
    pub fake_optim: AdamWConfig,
    pub fake_time_sampler: TimeSampler,
    pub log_every: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            pool_size: 8192,
            pool_steps: 64,
            guidance: 2.0,
            init_steps: 3000,
            init_batch: 256,
            init_optim: AdamWConfig::default().with_lr(2e-4),
            init_lr_schedule: LrSchedule::Cosine { final_frac: 0.05 },
            sim_steps: 1000,
            sim_schedule: 4,
            grad_window: 1,
            rollout_batch: 256,
            lambda_init: 1.0,
            lambda_dmd: 0.5,
            renoise: (0.02, 0.98),
            dmd_form: DmdForm::Denoised,
            fake_updates: 1,
            fake_warmup: 500,
            optim: AdamWConfig::default().with_lr(8e-6),
            fake_optim: AdamWConfig::default().with_lr(2e-4),
            fake_time_sampler: TimeSampler::default(),
            log_every: 50,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.pool_steps == 0 || self.init_batch == 0 || self.rollout_batch == 0 {
            return Err(Error::Invalid("consistency sizes must be positive".into()));
        }
        if self.sim_schedule == 0 {
            return Err(Error::Invalid("simulation schedule needs at least one step".into()));
        }
        Ok(())
    }
}

/// ODE-init followed by consistency backward simulation with the same DMD
/// machinery as Stage 2. Log rows reuse the Stage-2 schema with the ODE
/// regression loss in `loss_fm` and the schedule length in `s_sampled`.
pub fn train_consistency(
    teacher: &FlowMapNet,
    dist: &ToyDistribution,
    config: &ConsistencyConfig,
    streams: &RngStreams,
) -> Result<(FlowMapNet, Vec<Stage2LogRow>)> {
    config.validate()?;
    let field = GuidedTeacher {
        net: teacher,
        scale: config.guidance,
    };
    let pool = OdePool::build(&field, dist, config.pool_size, config.pool_steps, &mut streams.stream("consistency.pool"))?;
    let mut net = FlowMapNet::from_teacher(teacher, TimeConditioning::Interpolated { g: 0.25 })?;
    let mut opt = AdamW::new(config.init_optim);
    let mut draw = streams.stream("consistency.batch");
    let mut log = Vec::new();
    for step in 1..=config.init_steps {
        opt.config.lr = config.init_optim.lr * config.init_lr_schedule.factor(step, config.init_steps);
        let batch = pool.draw(config.init_batch, &mut draw);
        let loss = consistency_init_step(&mut net, &mut opt, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                stage: "consistency-init",
                step,
                detail: format!("loss = {loss}"),
            });
        }
        if step % config.log_every.max(1) == 0 || step == config.init_steps {
            log.push(Stage2LogRow {
                step,
                loss_fm: loss,
                ..Stage2LogRow::default()
            });
        }
    }

    let real = teacher_score(teacher, config.guidance);
    let mut fake = teacher.clone();
    let mut fake_opt = AdamW::new(config.fake_optim);
    let mut opt = AdamW::new(config.optim);
    let mut rollout = streams.stream("consistency.rollout");
    let mut renoise = streams.stream("consistency.renoise");
    let mut fake_rng = streams.stream("consistency.fake");
    let schedule = make_uniform_schedule(config.sim_schedule)?;
    if config.sim_steps > 0 && config.lambda_dmd > 0.0 {
        let frozen = net.detached();
        for _ in 0..config.fake_warmup {
            let z = normal_tensor(&mut rollout, &[config.rollout_batch, dist.dim()]);
            let classes: Vec<Class> = dist
                .sample_labels(config.rollout_batch, &mut rollout)
                .into_iter()
                .map(Class::Label)
                .collect();
            let trace = consistency_backward_simulate(&mut Tape::new(), &frozen, &z, &classes, &schedule, &mut rollout, 0)?;
            fake_score_update(&mut fake, &mut fake_opt, trace.z0(), &classes, &config.fake_time_sampler, &mut fake_rng)?;
        }
    }
    for step in 1..=config.sim_steps {
        let row = consistency_sim_step(
            &mut net,
            &mut opt,
            &mut fake,
            &mut fake_opt,
            &real,
            &pool,
            &schedule,
            config,
            (&mut draw, &mut rollout, &mut renoise, &mut fake_rng),
            dist,
        )
        .map_err(|e| at_step(e, step))?;
        if step % config.log_every.max(1) == 0 || step == config.sim_steps {
            log.push(Stage2LogRow {
                step: config.init_steps + step,
                ..row
            });
        }
    }
    Ok((net, log))
}

#[allow(clippy::too_many_arguments)]
fn consistency_sim_step(
    net: &mut FlowMapNet,
    opt: &mut AdamW,
    fake: &mut FlowMapNet,
    fake_opt: &mut AdamW,
    real: &dyn ScoreFn,
    pool: &OdePool,
    schedule: &Schedule,
    config: &ConsistencyConfig,
    rngs: (&mut StreamRng, &mut StreamRng, &mut StreamRng, &mut StreamRng),
    dist: &ToyDistribution,
) -> Result<Stage2LogRow> {
    let (draw, rollout, renoise, fake_rng) = rngs;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let batch = pool.draw(config.init_batch, draw);
    let init = consistency_init_loss(&mut tape, &bound, &batch)?;
    let z = normal_tensor(rollout, &[config.rollout_batch, dist.dim()]);
    let classes: Vec<Class> = dist
        .sample_labels(config.rollout_batch, rollout)
        .into_iter()
        .map(Class::Label)
        .collect();
    let trace = consistency_backward_simulate(&mut tape, &bound, &z, &classes, schedule, rollout, config.grad_window)?;
    let fake_score = FieldScore(&*fake);
    let out = dmd_loss(&mut tape, trace.z0(), &classes, real, &fake_score, renoise, config.renoise, config.dmd_form)?;
    let a = tape.scale(&init, config.lambda_init)?;
    let b = tape.scale(&out.loss, config.lambda_dmd)?;
    let total = tape.add(&a, &b)?;
    if !total.item().is_finite() {
        return Err(Error::Numeric {
            stage: "consistency",
            step: 0,
            detail: format!("generator loss = {}", total.item()),
        });
    }
    let grads = tape.backward(&total)?;
    let grads = bound.gradients(&grads);
    opt.step(net.parameters_mut(), &grads);
    let z0 = trace.z0().detach();
    let mut sum = 0.0;
    for _ in 0..config.fake_updates {
        sum += fake_score_update(fake, fake_opt, &z0, &classes, &config.fake_time_sampler, fake_rng)?;
    }
    Ok(Stage2LogRow {
        step: 0,
        loss_fm: init.item(),
        loss_dmd: out.loss.item(),
        loss_fake: sum / config.fake_updates.max(1) as f64,
        s_sampled: schedule.steps(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub sampler: String,
    pub n_steps: usize,
    pub step: usize,
    pub t: f64,
    pub deviation: f64,
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// Mean distance of each sampler's intermediate states from the RK4 solution
/// of the guided teacher ODE started at the same `z_T`, for an `n`-step
/// uniform schedule. The flow-map sampler is compared at its Euler states,
/// the consistency sampler at its re-noised inputs and final output.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_drift(
    teacher: &FlowMapNet,
    guidance: f64,
    flowmap: &FlowMapNet,
    consistency: &FlowMapNet,
    z: &Tensor,
    classes: &[Class],
    n: usize,
    substeps: usize,
    rng: &mut StreamRng,
) -> Result<Vec<DriftRow>> {
    let schedule = make_uniform_schedule(n)?;
    let field = GuidedTeacher { net: teacher, scale: guidance };
    let reference = rk4_trajectory(&field, z, classes, &schedule, substeps)?;
    let fm = flowmap_trajectory(flowmap, z, classes, &schedule)?;
    let trace = consistency_backward_simulate(&mut Tape::new(), &consistency.detached(), z, classes, &schedule, rng, 0)?;
    let mut cm = trace.inputs.clone();
    cm.push(trace.z0().clone());
    let mut rows = Vec::new();
    for (name, states) in [("flowmap", &fm), ("consistency", &cm)] {
        for (step, (state, reference)) in states.iter().zip(&reference).enumerate() {
            rows.push(DriftRow {
                sampler: name.to_string(),
                n_steps: n,
                step,
                t: schedule.times()[step],
                deviation: mean_row_distance(state, reference),
            });
        }
    }
    Ok(rows)
}
