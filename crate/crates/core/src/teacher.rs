//! Flow-matching pretraining of the teacher velocity field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ToyDistribution;
use crate::error::{Error, Result};
use crate::nets::{Class, FlowMapNet, NetConfig};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::{normal_tensor, standard_normal, RngStreams, StreamRng};
use crate::samplers::VelocityField;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeSampler {
    Uniform,
    /// `t = sigmoid(N(mean, std²))`.
    LogitNormal { mean: f64, std: f64 },
}

impl Default for TimeSampler {
    fn default() -> Self {
        TimeSampler::LogitNormal {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl TimeSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeSampler::Uniform => rng.random(),
            TimeSampler::LogitNormal { mean, std } => {
                1.0 / (1.0 + (-(mean + std * standard_normal(rng))).exp())
            }
        }
    }
}

/// One stream per consumer so that, e.g., changing the label-drop rate does
/// not reshuffle the data.
#[derive(Clone, Debug)]
pub struct BatchStreams {
    pub data: StreamRng,
    pub noise: StreamRng,
    pub time: StreamRng,
    pub drop: StreamRng,
}

impl BatchStreams {
    pub fn new(streams: &RngStreams, prefix: &str) -> Self {
        Self {
            data: streams.stream(&format!("{prefix}.data")),
            noise: streams.stream(&format!("{prefix}.noise")),
            time: streams.stream(&format!("{prefix}.time")),
            drop: streams.stream(&format!("{prefix}.drop")),
        }
    }
}

/// Data, noise, times and (possibly dropped) labels for one regression batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FmBatch {
    pub x: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    pub classes: Vec<Class>,
}

impl FmBatch {
    pub fn draw(
        dist: &ToyDistribution,
        n: usize,
        sampler: &TimeSampler,
        label_drop: f64,
        rngs: &mut BatchStreams,
    ) -> Result<Self> {
        let (x, labels) = dist.sample_with(n, &mut rngs.data)?;
        let eps = normal_tensor(&mut rngs.noise, x.shape());
        let t = (0..n).map(|_| sampler.sample(&mut rngs.time)).collect();
        let classes = labels
            .into_iter()
            .map(|l| {
                if rngs.drop.random::<f64>() < label_drop {
                    Class::Null
                } else {
                    Class::Label(l)
                }
            })
            .collect();
        Ok(Self { x, eps, t, classes })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `z_t = (1 − t)·x + t·ε`.
    pub fn z_t(&self) -> Tensor {
        interpolate(&self.x, &self.eps, &self.t)
    }

    /// Sample velocity `ε − x`.
    pub fn velocity(&self) -> Tensor {
        sample_velocity(&self.x, &self.eps)
    }
}

pub fn interpolate(x: &Tensor, eps: &Tensor, t: &[f64]) -> Tensor {
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (x, e))| {
            let t = t[i / d];
            (1.0 - t) * x + t * e
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn sample_velocity(x: &Tensor, eps: &Tensor) -> Tensor {
    let data = x.data().iter().zip(eps.data()).map(|(x, e)| e - x).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Per-row squared error `‖a − b‖²`, shape `[n]`.
pub(crate) fn row_sq_error(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(&diff)?;
    Ok(tape.row_sum(&sq)?)
}

/// `mean_i ‖u(z_t, t, t, c) − (ε − x)‖²` for a (possibly tape-bound) net.
pub fn fm_loss(tape: &mut Tape, net: &FlowMapNet, batch: &FmBatch) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty flow-matching batch".into()));
    }
    let z = batch.z_t();
    let u = net.predict_u(tape, &z, &batch.t, &batch.t, &batch.classes)?;
    let err = row_sq_error(tape, &u, &batch.velocity())?;
    Ok(tape.mean(&err)?)
}

/// `score = −(z + (1 − t)·u) / t` under `z_t = (1 − t)x + tε`.
pub fn velocity_to_score(u: &Tensor, z: &Tensor, t: &[f64]) -> Result<Tensor> {
    let d = z.cols();
    if u.shape() != z.shape() || t.len() != z.rows() {
        return Err(Error::Batch {
            what: "velocity",
            got: u.rows(),
            expected: z.rows(),
        });
    }
    if let Some(row) = t.iter().position(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::TimeRange { row, value: t[row] });
    }
    let data = z
        .data()
        .iter()
        .zip(u.data())
        .enumerate()
        .map(|(i, (z, u))| {
            let t = t[i / d];
            -(z + (1.0 - t) * u) / t
        })
        .collect();
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

/// Inverse of [`velocity_to_score`], `v = −(t·s + z) / (1 − t)`, for `t < 1`.
pub fn score_to_velocity(s: &Tensor, z: &Tensor, t: &[f64]) -> Result<Tensor> {
    let d = z.cols();
    if let Some(row) = t.iter().position(|&t| !(0.0..1.0).contains(&t)) {
        return Err(Error::TimeRange { row, value: t[row] });
    }
    let data = z
        .data()
        .iter()
        .zip(s.data())
        .enumerate()
        .map(|(i, (z, s))| {
            let t = t[i / d];
            -(t * s + z) / (1.0 - t)
        })
        .collect();
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

/// The teacher's classifier-free-guided velocity
/// `v = u_∅ + g·(u_c − u_∅)`; two calls per evaluation unless `g = 1`.
#[derive(Clone, Debug)]
pub struct GuidedTeacher<'a> {
    pub net: &'a FlowMapNet,
    pub scale: f64,
}

impl VelocityField for GuidedTeacher<'_> {
    fn velocity(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let cond = self.net.predict_u(&mut tape, z, t, t, classes)?;
        if self.scale == 1.0 || classes.iter().all(|c| *c == Class::Null) {
            return Ok(cond);
        }
        let null = vec![Class::Null; classes.len()];
        let uncond = self.net.predict_u(&mut tape, z, t, t, &null)?;
        let g = self.scale;
        let data = cond
            .data()
            .iter()
            .zip(uncond.data())
            .map(|(c, n)| n + g * (c - n))
            .collect();
        Ok(Tensor::new(z.shape().to_vec(), data)?)
    }

    fn calls_per_eval(&self) -> usize {
        if self.scale == 1.0 {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub time_sampler: TimeSampler,
    pub label_drop: f64,
    pub log_every: usize,
    pub val_batch: usize,
    /// Training fails if the final validation loss exceeds this.
    pub max_val_loss: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            optim: AdamWConfig::default(),
            lr_schedule: LrSchedule::Cosine { final_frac: 0.05 },
            time_sampler: TimeSampler::default(),
            label_drop: 0.1,
            log_every: 100,
            val_batch: 2048,
            max_val_loss: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLogRow {
    pub step: usize,
    pub loss: f64,
    pub val_metric: f64,
}

pub fn check_finite(stage: &'static str, step: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage,
            step,
            detail: format!("{what} = {value}"),
        })
    }
}

/// Trains a fresh net by flow matching; returns it with the logged curve.
pub fn train_teacher(
    dist: &ToyDistribution,
    net_config: &NetConfig,
    config: &TeacherConfig,
    streams: &RngStreams,
) -> Result<(FlowMapNet, Vec<TeacherLogRow>)> {
    let mut net = FlowMapNet::new(net_config.clone(), &mut streams.stream("teacher.init"))?;
    let log = fit_flow_matching(&mut net, dist, config, streams, "teacher")?;
    Ok((net, log))
}

/// Flow-matching updates on an existing net (also used for the fake score).
pub fn fit_flow_matching(
    net: &mut FlowMapNet,
    dist: &ToyDistribution,
    config: &TeacherConfig,
    streams: &RngStreams,
    prefix: &str,
) -> Result<Vec<TeacherLogRow>> {
    if config.batch == 0 || config.val_batch == 0 {
        return Err(Error::Invalid("batch sizes must be positive".into()));
    }
    let sampler = config.time_sampler;
    let val = FmBatch::draw(
        dist,
        config.val_batch,
        &sampler,
        0.0,
        &mut BatchStreams::new(streams, &format!("{prefix}.val")),
    )?;
    let mut rngs = BatchStreams::new(streams, prefix);
    let mut opt = AdamW::new(config.optim);
    let mut tape = Tape::new();
    let mut log = Vec::new();
    for step in 1..=config.steps {
        let batch = FmBatch::draw(dist, config.batch, &sampler, config.label_drop, &mut rngs)?;
        tape.reset();
        let bound = net.bind(&mut tape);
        let loss = fm_loss(&mut tape, &bound, &batch)?;
        opt.config.lr = config.optim.lr * config.lr_schedule.factor(step, config.steps);
        check_finite("pretrain", step, "loss", loss.item())?;
        let grads = tape.backward(&loss)?;
        let grads = bound.gradients(&grads);
        opt.step(net.parameters_mut(), &grads);
        if step % config.log_every.max(1) == 0 || step == config.steps {
            let v = fm_loss(&mut Tape::new(), net, &val)?.item();
            check_finite("pretrain", step, "validation loss", v)?;
            log.push(TeacherLogRow {
                step,
                loss: loss.item(),
                val_metric: v,
            });
        }
    }
    if let (Some(limit), Some(last)) = (config.max_val_loss, log.last()) {
        if last.val_metric > limit {
            return Err(Error::Numeric {
                stage: "pretrain",
                step: last.step,
                detail: format!("validation loss {} above {limit}", last.val_metric),
            });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(class_count: usize, data_dim: usize) -> NetConfig {
        NetConfig {
            data_dim,
            hidden: vec![32, 32],
            time_features: 16,
            freq_min: 1.0,
            freq_max: 30.0,
            time_hidden: 32,
            time_embed_dim: 16,
            class_count,
            class_embed_dim: 4,
            ..NetConfig::default()
        }
    }

    #[test]
    fn zero_net_zero_data_gives_noise_energy() {
        let mut net = FlowMapNet::new(small_net(1, 2), &mut RngStreams::new(0).stream("i")).unwrap();
        for p in net.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        let eps = normal_tensor(&mut RngStreams::new(1).stream("e"), &[64, 2]);
        let batch = FmBatch {
            x: Tensor::zeros(&[64, 2]),
            eps: eps.clone(),
            t: vec![0.5; 64],
            classes: vec![Class::Label(0); 64],
        };
        let loss = fm_loss(&mut Tape::new(), &net, &batch).unwrap().item();
        let expect = eps.data().iter().map(|e| e * e).sum::<f64>() / 64.0;
        assert!((loss - expect).abs() < 1e-12);
        let empty = FmBatch {
            x: Tensor::zeros(&[0, 2]),
            eps: Tensor::zeros(&[0, 2]),
            t: vec![],
            classes: vec![],
        };
        assert!(fm_loss(&mut Tape::new(), &net, &empty).is_err());
    }

    #[test]
    fn score_conversion() {
        let z = Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap();
        let s = velocity_to_score(&Tensor::zeros(&[2, 2]), &z, &[0.5, 0.5]).unwrap();
        assert_eq!(s, z.map(|v| -2.0 * v));
        let u = Tensor::from_rows(&[[3.0, 1.0], [7.0, -1.0]]).unwrap();
        let s1 = velocity_to_score(&u, &z, &[1.0, 1.0]).unwrap();
        assert_eq!(s1, z.map(|v| -v));
        assert!(velocity_to_score(&u, &z, &[0.0, 0.5]).is_err());

        let d = ToyDistribution::gaussian(vec![0.7, -1.1], 0.6);
        for t in [0.05, 0.3, 0.8, 1.0] {
            let v = d.analytic_velocity(&z, &[t, t], None).unwrap();
            let s = velocity_to_score(&v, &z, &[t, t]).unwrap();
            let exact = d.analytic_score(&z, &[t, t], None).unwrap();
            for (a, b) in s.data().iter().zip(exact.data()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} {b}");
            }
            if t < 1.0 {
                let back = score_to_velocity(&s, &z, &[t, t]).unwrap();
                assert!(back.max_abs_diff(&v) < 1e-10);
            }
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let dist = ToyDistribution::default_ring();
        let cfg = small_net(2, 2);
        let net0 = FlowMapNet::new(cfg.clone(), &mut RngStreams::new(3).stream("teacher.init")).unwrap();
        let tc = TeacherConfig {
            steps: 5,
            batch: 16,
            optim: AdamWConfig::default().with_lr(0.0),
            val_batch: 16,
            ..TeacherConfig::default()
        };
        let (net, log) = train_teacher(&dist, &cfg, &tc, &RngStreams::new(3)).unwrap();
        assert_eq!(net.to_bytes(), net0.to_bytes());
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let dist = ToyDistribution::default_ring();
        let cfg = small_net(2, 2);
        let tc = TeacherConfig {
            steps: 20,
            batch: 32,
            val_batch: 32,
            log_every: 5,
            ..TeacherConfig::default()
        };
        let (a, la) = train_teacher(&dist, &cfg, &tc, &RngStreams::new(9)).unwrap();
        let (b, lb) = train_teacher(&dist, &cfg, &tc, &RngStreams::new(9)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(la, lb);
        assert_eq!(la.len(), 4);
    }

    #[test]
    fn divergence_aborts_with_stage() {
        let dist = ToyDistribution::default_ring();
        let cfg = small_net(2, 2);
        let tc = TeacherConfig {
            steps: 50,
            batch: 16,
            val_batch: 16,
            optim: AdamWConfig::default().with_lr(f64::NAN),
            ..TeacherConfig::default()
        };
        let err = train_teacher(&dist, &cfg, &tc, &RngStreams::new(1)).unwrap_err();
        assert!(matches!(err, Error::Numeric { stage: "pretrain", .. }), "{err}");
    }

    #[test]
    fn guided_teacher_call_count() {
        let net = FlowMapNet::new(small_net(2, 2), &mut RngStreams::new(0).stream("i")).unwrap();
        let z = Tensor::zeros(&[3, 2]);
        let c = vec![Class::Label(1); 3];
        let g = GuidedTeacher { net: &net, scale: 2.0 };
        g.velocity(&z, &[0.5; 3], &c).unwrap();
        assert_eq!(net.calls(), 2);
        let g1 = GuidedTeacher { net: &net, scale: 1.0 };
        let v1 = g1.velocity(&z, &[0.5; 3], &c).unwrap();
        assert_eq!(net.calls(), 3);
        let vc = net.predict_u(&mut Tape::new(), &z, &[0.5; 3], &[0.5; 3], &c).unwrap();
        assert_eq!(v1, vc);
    }
}
