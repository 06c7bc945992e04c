//! Forward flow-map training (Stage 1).
//!
//! The student regresses its guidance-fused average velocity onto the
//! mean-flow target `u_tgt = v − (t − r)·du/dt`, with `du/dt` from a central
//! finite difference along the sample velocity. Half of every batch sits on
//! the boundary `t = r`, where the target is plain flow matching; the other
//! half is reweighted adaptively so its loss scale tracks the boundary loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, Normal};

use crate::data::ToyDistribution;
use crate::error::{Error, Result};
use crate::nets::{Class, FlowMapNet, TimeConditioning};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::{normal_tensor, RngStreams};
use crate::teacher::{interpolate, sample_velocity, BatchStreams};
use crate::tensor::{Tape, Tensor};

/// Loss weight `w(t)` over the larger time of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossWeight {
    Uniform,
    Normal { mean: f64, std: f64 },
    Beta { a: f64, b: f64 },
}

impl Default for LossWeight {
    fn default() -> Self {
        LossWeight::Beta { a: 2.0, b: 1.5 }
    }
}

impl LossWeight {
    /// Density value at `t`, clamped into `[1e-6, 1 − 1e-6]`.
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(1e-6, 1.0 - 1e-6);
        match *self {
            LossWeight::Uniform => 1.0,
            LossWeight::Normal { mean, std } => Normal::new(mean, std).map(|d| d.pdf(t)).unwrap_or(f64::NAN),
            LossWeight::Beta { a, b } => Beta::new(a, b).map(|d| d.pdf(t)).unwrap_or(f64::NAN),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LossWeight::Uniform => true,
            LossWeight::Normal { std, .. } => std > 0.0,
            LossWeight::Beta { a, b } => a > 0.0 && b > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad loss weight {self:?}")))
        }
    }
}

/// `Beta(2, 1.5)` density, `t·√(1 − t)·15/4`.
pub fn beta_weight(t: f64) -> f64 {
    LossWeight::default().eval(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePair {
    pub t: f64,
    pub r: f64,
    pub is_boundary: bool,
    pub weight: f64,
    pub slot: usize,
}

/// With probability `boundary_frac` a boundary pair `t = r ~ U(0, 1)`,
/// otherwise the ordered max and min of two uniforms.
pub fn sample_time_pair<R: Rng + ?Sized>(rng: &mut R, boundary_frac: f64, weight: &LossWeight) -> TimePair {
    let boundary = rng.random::<f64>() < boundary_frac;
    draw_pair(rng, boundary, weight, 0)
}

fn draw_pair<R: Rng + ?Sized>(rng: &mut R, boundary: bool, weight: &LossWeight, slot: usize) -> TimePair {
    let (t, r) = if boundary {
        let t = rng.random::<f64>();
        (t, t)
    } else {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        (a.max(b), a.min(b))
    };
    TimePair {
        t,
        r,
        is_boundary: boundary,
        weight: weight.eval(t),
        slot,
    }
}

/// A batch of pairs whose first `round(boundary_frac·n)` slots are boundary
/// pairs.
pub fn sample_time_batch<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    boundary_frac: f64,
    weight: &LossWeight,
) -> Result<Vec<TimePair>> {
    if !(0.0..=1.0).contains(&boundary_frac) {
        return Err(Error::Invalid(format!("boundary fraction {boundary_frac} outside [0, 1]")));
    }
    let boundary = (boundary_frac * n as f64).round() as usize;
    Ok((0..n).map(|slot| draw_pair(rng, slot < boundary, weight, slot)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 2.0,
            enabled: true,
        }
    }
}

impl GuidanceConfig {
    fn active(&self) -> bool {
        self.enabled && self.scale != 1.0
    }

    /// Effective scale for one row; null rows are never guided.
    fn row_scale(&self, class: Class) -> f64 {
        if self.active() && class != Class::Null {
            self.scale
        } else {
            1.0
        }
    }
}

/// `u = (1/g)·(u_c − (1 − g)·sg(u_∅))`. Requires labeled rows when guidance
/// is active.
pub fn guided_u(
    tape: &mut Tape,
    net: &FlowMapNet,
    z: &Tensor,
    t: &[f64],
    r: &[f64],
    classes: &[Class],
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    if guidance.active() {
        if let Some(row) = classes.iter().position(|c| *c == Class::Null) {
            return Err(Error::NullClassWithGuidance(row));
        }
    }
    fused_u(tape, net, z, t, r, classes, guidance)
}

/// Like [`guided_u`] but null rows pass through unguided.
fn fused_u(
    tape: &mut Tape,
    net: &FlowMapNet,
    z: &Tensor,
    t: &[f64],
    r: &[f64],
    classes: &[Class],
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    let uc = net.predict_u(tape, z, t, r, classes)?;
    let guided: Vec<usize> = (0..classes.len())
        .filter(|&i| guidance.row_scale(classes[i]) != 1.0)
        .collect();
    if guided.is_empty() {
        return Ok(uc);
    }
    let g = guidance.scale;
    let null = net.detached().predict_u(
        &mut Tape::new(),
        &select_rows(z, &guided),
        &pick(t, &guided),
        &pick(r, &guided),
        &vec![Class::Null; guided.len()],
    )?;
    let d = z.cols();
    let mut a = vec![1.0; classes.len()];
    let mut offset = vec![0.0; z.len()];
    for (k, &i) in guided.iter().enumerate() {
        a[i] = 1.0 / g;
        for j in 0..d {
            offset[i * d + j] = (1.0 - g) / g * null.data()[k * d + j];
        }
    }
    let scaled = tape.scale_rows(&uc, &Tensor::vector(a))?;
    Ok(tape.sub(&scaled, &Tensor::new(z.shape().to_vec(), offset)?)?)
}

fn pick(v: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| v[i]).collect()
}

pub(crate) fn select_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let d = x.cols();
    let data = rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("row selection")
}

/// `u_tgt = v − (t − r)·du/dt` with
/// `du/dt ≈ (u_c(z + εv, t + ε, r) − u_c(z − εv, t − ε, r)) / (2εg)`.
///
/// `u_c` receives only the rows whose shrunk step `min(eps, 1 − t, t − r)` is
/// positive; every other row gets `u_tgt = v`. The result is a constant.
pub fn meanflow_target<F>(
    u_c: F,
    z: &Tensor,
    v: &Tensor,
    t: &[f64],
    r: &[f64],
    eps_fd: f64,
    g: &[f64],
) -> Result<Tensor>
where
    F: Fn(&[usize], &Tensor, &[f64], &[f64]) -> Result<Tensor>,
{
    if eps_fd.is_nan() || eps_fd <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step {eps_fd} must be positive")));
    }
    let n = z.rows();
    let d = z.cols();
    let steps: Vec<f64> = (0..n).map(|i| eps_fd.min(1.0 - t[i]).min(t[i] - r[i])).collect();
    let rows: Vec<usize> = (0..n).filter(|&i| steps[i] > 0.0).collect();
    let mut target = v.data().to_vec();
    if rows.is_empty() {
        return Ok(Tensor::new(z.shape().to_vec(), target)?);
    }
    let shifted = |sign: f64| -> Result<(Tensor, Vec<f64>)> {
        let mut zs = Vec::with_capacity(rows.len() * d);
        let mut ts = Vec::with_capacity(rows.len());
        for &i in &rows {
            let e = sign * steps[i];
            zs.extend(z.row(i).iter().zip(v.row(i)).map(|(z, v)| z + e * v));
            ts.push(t[i] + e);
        }
        Ok((Tensor::new(vec![rows.len(), d], zs)?, ts))
    };
    let rs = pick(r, &rows);
    let (zp, tp) = shifted(1.0)?;
    let (zm, tm) = shifted(-1.0)?;
    let up = u_c(&rows, &zp, &tp, &rs)?;
    let um = u_c(&rows, &zm, &tm, &rs)?;
    for (k, &i) in rows.iter().enumerate() {
        for j in 0..d {
            let dudt = (up.data()[k * d + j] - um.data()[k * d + j]) / (2.0 * steps[i] * g[i]);
            target[i * d + j] -= (t[i] - r[i]) * dudt;
        }
    }
    Ok(Tensor::new(z.shape().to_vec(), target)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub enabled: bool,
    pub c: f64,
    pub ema_decay: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            c: 1e-3,
            ema_decay: 0.99,
        }
    }
}

/// Running boundary loss `μ_{t=r}` for `w_{t,r} = μ / (‖Δ‖² + c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeightState {
    pub mu_boundary: Option<f64>,
    pub c: f64,
    pub ema_decay: f64,
}

impl AdaptiveWeightState {
    pub fn new(config: &AdaptiveConfig) -> Self {
        Self {
            mu_boundary: None,
            c: config.c,
            ema_decay: config.ema_decay,
        }
    }

    /// Folds in one batch's mean boundary loss; the first batch initializes.
    pub fn update(&mut self, boundary_mean: f64) {
        self.mu_boundary = Some(match self.mu_boundary {
            None => boundary_mean,
            Some(mu) => self.ema_decay * mu + (1.0 - self.ema_decay) * boundary_mean,
        });
    }

    pub fn weight(&self, delta_sq: f64, is_boundary: bool) -> f64 {
        adaptive_weight(self.mu_boundary.unwrap_or(1.0), self.c, delta_sq, is_boundary)
    }
}

pub fn adaptive_weight(mu: f64, c: f64, delta_sq: f64, is_boundary: bool) -> f64 {
    if is_boundary {
        1.0
    } else {
        mu / (delta_sq + c)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RegressionMetric {
    #[default]
    SquaredL2,
    /// `√(‖Δ‖² + c²) − c`.
    PseudoHuber { c: f64 },
}

/// What displaces `z±` in the finite difference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdDirection {
    /// The conditional sample velocity `ε − x`.
    #[default]
    SampleVelocity,
    /// The student's own fused instantaneous velocity at `(z_t, t)`.
    ModelVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch: usize,
    pub boundary_frac: f64,
    pub eps_fd: f64,
    pub fd_direction: FdDirection,
    pub guidance: GuidanceConfig,
    pub conditioning: TimeConditioning,
    pub loss_weight: LossWeight,
    pub adaptive: AdaptiveConfig,
    pub metric: RegressionMetric,
    pub label_drop: f64,
    pub optim: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            boundary_frac: 0.5,
            eps_fd: 5e-3,
            fd_direction: FdDirection::SampleVelocity,
            guidance: GuidanceConfig::default(),
            conditioning: TimeConditioning::Interpolated { g: 0.25 },
            loss_weight: LossWeight::default(),
            adaptive: AdaptiveConfig::default(),
            metric: RegressionMetric::SquaredL2,
            label_drop: 0.1,
            optim: AdamWConfig::default(),
            lr_schedule: LrSchedule::Cosine { final_frac: 0.05 },
            log_every: 100,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Invalid("stage-1 batch must be positive".into()));
        }
        if self.eps_fd.is_nan() || self.eps_fd <= 0.0 {
            return Err(Error::Invalid("eps_fd must be positive".into()));
        }
        if self.guidance.scale.is_nan() || self.guidance.scale <= 0.0 {
            return Err(Error::Invalid("guidance scale must be positive".into()));
        }
        self.loss_weight.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Batch {
    pub x: Tensor,
    pub eps: Tensor,
    pub pairs: Vec<TimePair>,
    pub classes: Vec<Class>,
}

impl Stage1Batch {
    pub fn draw(dist: &ToyDistribution, config: &Stage1Config, rngs: &mut BatchStreams) -> Result<Self> {
        let (x, labels) = dist.sample_with(config.batch, &mut rngs.data)?;
        let eps = normal_tensor(&mut rngs.noise, x.shape());
        let pairs = sample_time_batch(&mut rngs.time, config.batch, config.boundary_frac, &config.loss_weight)?;
        let classes = labels
            .into_iter()
            .map(|l| {
                if rngs.drop.random::<f64>() < config.label_drop {
                    Class::Null
                } else {
                    Class::Label(l)
                }
            })
            .collect();
        Ok(Self { x, eps, pairs, classes })
    }

    pub fn t(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.t).collect()
    }

    pub fn r(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.r).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Stats {
    pub loss: f64,
    /// Mean unweighted `‖Δ‖²` over boundary slots.
    pub loss_boundary: f64,
    /// Mean unweighted `‖Δ‖²` over `t ≠ r` slots.
    pub loss_flowmap: f64,
    pub mu: f64,
}

/// The weighted Stage-1 objective on a (tape-bound) student; updates the
/// adaptive state.
pub fn stage1_loss(
    tape: &mut Tape,
    net: &FlowMapNet,
    batch: &Stage1Batch,
    state: &mut AdaptiveWeightState,
    config: &Stage1Config,
) -> Result<(Tensor, Stage1Stats)> {
    let n = batch.pairs.len();
    if n == 0 {
        return Err(Error::Invalid("empty stage-1 batch".into()));
    }
    let (t, r) = (batch.t(), batch.r());
    let z = interpolate(&batch.x, &batch.eps, &t);
    let g: Vec<f64> = batch.classes.iter().map(|&c| config.guidance.row_scale(c)).collect();
    let frozen = net.detached();
    let direction = match config.fd_direction {
        FdDirection::SampleVelocity => sample_velocity(&batch.x, &batch.eps),
        FdDirection::ModelVelocity => fused_u(&mut Tape::new(), &frozen, &z, &t, &t, &batch.classes, &config.guidance)?,
    };
    let v = sample_velocity(&batch.x, &batch.eps);
    let u_c = |rows: &[usize], z: &Tensor, t: &[f64], r: &[f64]| {
        let classes: Vec<Class> = rows.iter().map(|&i| batch.classes[i]).collect();
        frozen.predict_u(&mut Tape::new(), z, t, r, &classes)
    };
    let target = if config.fd_direction == FdDirection::SampleVelocity {
        meanflow_target(u_c, &z, &v, &t, &r, config.eps_fd, &g)?
    } else {
        // Transport along the model velocity, keep v as the velocity term.
        let moved = meanflow_target(u_c, &z, &direction, &t, &r, config.eps_fd, &g)?;
        let data = (0..z.len())
            .map(|k| v.data()[k] + moved.data()[k] - direction.data()[k])
            .collect();
        Tensor::new(z.shape().to_vec(), data)?
    };
    let u = fused_u(tape, net, &z, &t, &r, &batch.classes, &config.guidance)?;
    let diff = tape.sub(&u, &target)?;
    let sq = tape.square(&diff)?;
    let delta_sq = tape.row_sum(&sq)?;

    let mut stats = Stage1Stats::default();
    let (mut nb, mut nf) = (0usize, 0usize);
    for (i, &dsq) in delta_sq.data().iter().enumerate() {
        if !dsq.is_finite() {
            let p = batch.pairs[i];
            return Err(Error::Numeric {
                stage: "stage1",
                step: 0,
                detail: format!("slot {i}: ‖Δ‖² = {dsq} at t = {}, r = {}", p.t, p.r),
            });
        }
        if batch.pairs[i].is_boundary {
            stats.loss_boundary += dsq;
            nb += 1;
        } else {
            stats.loss_flowmap += dsq;
            nf += 1;
        }
    }
    if nb > 0 {
        stats.loss_boundary /= nb as f64;
        state.update(stats.loss_boundary);
    }
    if nf > 0 {
        stats.loss_flowmap /= nf as f64;
    }
    stats.mu = state.mu_boundary.unwrap_or(f64::NAN);

    let per_slot = match config.metric {
        RegressionMetric::SquaredL2 => delta_sq.clone(),
        RegressionMetric::PseudoHuber { c } => {
            let shifted = tape.add(&delta_sq, &Tensor::scalar(c * c))?;
            let root = tape.sqrt(&shifted)?;
            tape.sub(&root, &Tensor::scalar(c))?
        }
    };
    let weights: Vec<f64> = batch
        .pairs
        .iter()
        .zip(delta_sq.data())
        .map(|(p, &dsq)| {
            let adaptive = if config.adaptive.enabled {
                state.weight(dsq, p.is_boundary)
            } else {
                1.0
            };
            p.weight * adaptive
        })
        .collect();
    let weighted = tape.mul(&per_slot, &Tensor::vector(weights))?;
    let loss = tape.mean(&weighted)?;
    stats.loss = loss.item();
    Ok((loss, stats))
}

/// One optimizer step of Stage 1.
pub fn stage1_step(
    net: &mut FlowMapNet,
    opt: &mut AdamW,
    batch: &Stage1Batch,
    state: &mut AdaptiveWeightState,
    config: &Stage1Config,
) -> Result<Stage1Stats> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let (loss, stats) = stage1_loss(&mut tape, &bound, batch, state, config)?;
    let grads = tape.backward(&loss)?;
    let grads = bound.gradients(&grads);
    opt.step(net.parameters_mut(), &grads);
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1LogRow {
    pub step: usize,
    pub loss_boundary: f64,
    pub loss_flowmap: f64,
    pub mu: f64,
    pub emb_norm_ratio: f64,
}

/// Mean over probe pairs of `‖conditioning(t, r)‖ / ‖emb_pre(t)‖`, where
/// `emb_pre` is the pretrained embedding.
pub fn emb_norm_ratio(student: &FlowMapNet, pretrained: &FlowMapNet, t: &[f64], r: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let cond = student.conditioning(&mut tape, t, r)?;
    let base = pretrained.time_embedding(&mut tape, t)?;
    let norm = |x: &Tensor, i: usize| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let total: f64 = (0..t.len()).map(|i| norm(&cond, i) / norm(&base, i).max(1e-12)).sum();
    Ok(total / t.len() as f64)
}

/// Fixed `t > r` pairs for embedding-norm tracking.
pub fn probe_pairs(streams: &RngStreams, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = streams.stream("probe.pairs");
    let pairs: Vec<TimePair> = (0..n).map(|i| draw_pair(&mut rng, false, &LossWeight::Uniform, i)).collect();
    (pairs.iter().map(|p| p.t).collect(), pairs.iter().map(|p| p.r).collect())
}

/// Mean `‖f(z, t, q) − f(f(z, t, r), r, q)‖` over random triples `t ≥ r ≥ q`
/// with `z` drawn from the time-`t` marginal.
pub fn composition_defect(net: &FlowMapNet, dist: &ToyDistribution, n: usize, streams: &RngStreams) -> Result<f64> {
    let mut rng = streams.stream("composition.times");
    let mut t = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        v.sort_by(|a, b| b.total_cmp(a));
        t.push(v[0]);
        r.push(v[1]);
        q.push(v[2]);
    }
    let (x, labels) = dist.sample_with(n, &mut streams.stream("composition.data"))?;
    let eps = normal_tensor(&mut streams.stream("composition.noise"), x.shape());
    let z = interpolate(&x, &eps, &t);
    let classes: Vec<Class> = labels.into_iter().map(Class::Label).collect();
    let mut tape = Tape::new();
    let direct = net.flow_map(&mut tape, &z, &t, &q, &classes)?;
    let mid = net.flow_map(&mut tape, &z, &t, &r, &classes)?;
    let two = net.flow_map(&mut tape, &mid, &r, &q, &classes)?;
    let total: f64 = (0..n)
        .map(|i| {
            direct
                .row(i)
                .iter()
                .zip(two.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Stage 1 from a teacher checkpoint; returns the student and its log.
pub fn train_stage1(
    teacher: &FlowMapNet,
    dist: &ToyDistribution,
    config: &Stage1Config,
    streams: &RngStreams,
) -> Result<(FlowMapNet, Vec<Stage1LogRow>)> {
    config.validate()?;
    let mut net = FlowMapNet::from_teacher(teacher, config.conditioning)?;
    let mut opt = AdamW::new(config.optim);
    let mut state = AdaptiveWeightState::new(&config.adaptive);
    let mut rngs = BatchStreams::new(streams, "stage1");
    let (pt, pr) = probe_pairs(streams, 256);
    let mut log = Vec::new();
    for step in 1..=config.steps {
        let batch = Stage1Batch::draw(dist, config, &mut rngs)?;
        opt.config.lr = config.optim.lr * config.lr_schedule.factor(step, config.steps);
        let stats = stage1_step(&mut net, &mut opt, &batch, &mut state, config).map_err(|e| at_step(e, step))?;
        if step % config.log_every.max(1) == 0 || step == config.steps {
            log.push(Stage1LogRow {
                step,
                loss_boundary: stats.loss_boundary,
                loss_flowmap: stats.loss_flowmap,
                mu: stats.mu,
                emb_norm_ratio: emb_norm_ratio(&net, teacher, &pt, &pr)?,
            });
        }
        if !stats.loss.is_finite() {
            return Err(Error::Numeric {
                stage: "stage1",
                step,
                detail: format!("loss = {}", stats.loss),
            });
        }
    }
    Ok((net, log))
}

/// Fills in the step of a numeric error raised below the training loop.
pub(crate) fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { stage, detail, .. } => Error::Numeric { stage, step, detail },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::teacher::FmBatch;

    fn tiny(classes: usize) -> NetConfig {
        NetConfig {
            hidden: vec![16, 16],
            time_features: 8,
            freq_max: 10.0,
            time_hidden: 8,
            time_embed_dim: 8,
            class_count: classes,
            class_embed_dim: 4,
            ..NetConfig::default()
        }
    }

    #[test]
    fn beta_weight_values() {
        assert!((beta_weight(0.5) - 0.5 * 0.5f64.sqrt() * 3.75).abs() < 1e-12);
        assert!((beta_weight(0.5) - 1.3258).abs() < 1e-4);
        let n = 10_000;
        let h = 1.0 / n as f64;
        let integral: f64 = (0..n)
            .map(|i| 0.5 * h * (beta_weight(i as f64 * h) + beta_weight((i + 1) as f64 * h)))
            .sum();
        assert!((integral - 1.0).abs() < 1e-5, "{integral}");
        assert!(beta_weight(-3.0).is_finite() && beta_weight(2.0).is_finite());
        assert_eq!(LossWeight::Uniform.eval(0.3), 1.0);
    }

    #[test]
    fn boundary_slot_count() {
        let mut rng = RngStreams::new(0).stream("t");
        let pairs = sample_time_batch(&mut rng, 256, 0.5, &LossWeight::default()).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.is_boundary).count(), 128);
        assert!(pairs.iter().all(|p| p.r <= p.t && (p.is_boundary == (p.t == p.r))));
        let all = sample_time_batch(&mut rng, 10, 1.0, &LossWeight::default()).unwrap();
        assert!(all.iter().all(|p| p.t == p.r));
        assert!(sample_time_batch(&mut rng, 10, 1.5, &LossWeight::default()).is_err());
        assert!(sample_time_pair(&mut rng, 1.0, &LossWeight::Uniform).is_boundary);
    }

    #[test]
    fn guidance_formula() {
        let net = FlowMapNet::new(tiny(2), &mut RngStreams::new(1).stream("i")).unwrap();
        let z = Tensor::from_rows(&[[0.3, -0.2], [1.0, 0.5]]).unwrap();
        let c = [Class::Label(0), Class::Label(1)];
        let (t, r) = ([0.8, 0.6], [0.2, 0.6]);
        let mut tape = Tape::new();
        let off = GuidanceConfig { scale: 1.0, enabled: true };
        let plain = net.predict_u(&mut tape, &z, &t, &r, &c).unwrap();
        assert_eq!(guided_u(&mut tape, &net, &z, &t, &r, &c, &off).unwrap(), plain);
        let on = GuidanceConfig::default();
        let fused = guided_u(&mut tape, &net, &z, &t, &r, &c, &on).unwrap();
        let null = net.predict_u(&mut tape, &z, &t, &r, &[Class::Null; 2]).unwrap();
        for k in 0..4 {
            let expect = 0.5 * (plain.data()[k] + null.data()[k]);
            assert!((fused.data()[k] - expect).abs() < 1e-12);
        }
        assert!(matches!(
            guided_u(&mut tape, &net, &z, &t, &r, &[Class::Null, Class::Label(0)], &on),
            Err(Error::NullClassWithGuidance(0))
        ));
    }

    #[test]
    fn adaptive_weight_values() {
        assert_eq!(adaptive_weight(0.5, 1e-3, 7.0, true), 1.0);
        assert!((adaptive_weight(0.5, 1e-3, 0.25, false) - 0.5 / 0.251).abs() < 1e-12);
        assert!(adaptive_weight(0.5, 1e-3, 1e12, false) < 1e-12);
        let mut s = AdaptiveWeightState::new(&AdaptiveConfig::default());
        s.update(2.0);
        assert_eq!(s.mu_boundary, Some(2.0));
        s.update(4.0);
        assert!((s.mu_boundary.unwrap() - 2.02).abs() < 1e-12);
    }

    fn polynomial_field(rows: &[usize], z: &Tensor, t: &[f64], r: &[f64]) -> Result<Tensor> {
        let d = z.cols();
        let data = (0..z.len())
            .map(|k| {
                let (i, j) = (k / d, k % d);
                let _ = rows[i];
                let (t, r) = (t[i], r[i]);
                (0.5 + j as f64) * z.data()[k] - 1.5 * t * t + 0.7 * t + 0.3 * r * t
            })
            .collect();
        Ok(Tensor::new(z.shape().to_vec(), data)?)
    }

    #[test]
    fn meanflow_target_is_exact_on_polynomial_fields() {
        let z = Tensor::from_rows(&[[0.3, -1.0], [1.2, 0.4], [0.0, 2.0], [-0.5, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[[1.0, 0.5], [-0.2, 0.3], [0.7, -0.7], [0.1, 0.1]]).unwrap();
        let t = [0.8, 0.999, 0.5, 0.3];
        let r = [0.2, 0.1, 0.5, 0.298];
        let g = [2.0, 1.0, 2.0, 1.0];
        let target = meanflow_target(polynomial_field, &z, &v, &t, &r, 5e-3, &g).unwrap();
        assert!(!target.is_tracked());
        for i in 0..4 {
            for j in 0..2 {
                let a = 0.5 + j as f64;
                let dudt = a * v.row(i)[j] - 3.0 * t[i] + 0.7 + 0.3 * r[i];
                let expect = v.row(i)[j] - (t[i] - r[i]) * dudt / g[i];
                let got = target.row(i)[j];
                assert!((got - expect).abs() < 1e-10, "row {i}: {got} vs {expect}");
            }
        }
        assert_eq!(target.row(2), v.row(2));
        assert!(meanflow_target(polynomial_field, &z, &v, &t, &r, 0.0, &g).is_err());
    }

    #[test]
    fn meanflow_target_skips_boundary_rows() {
        let z = Tensor::from_rows(&[[0.3, -1.0], [1.2, 0.4]]).unwrap();
        let v = Tensor::from_rows(&[[1.0, 0.5], [-0.2, 0.3]]).unwrap();
        let calls = std::cell::Cell::new(0);
        let field = |rows: &[usize], z: &Tensor, t: &[f64], r: &[f64]| {
            calls.set(calls.get() + 1);
            polynomial_field(rows, z, t, r)
        };
        let target = meanflow_target(field, &z, &v, &[0.4, 1.0], &[0.4, 0.2], 5e-3, &[1.0, 1.0]).unwrap();
        assert_eq!(target, v);
        assert_eq!(calls.get(), 0);
    }

    fn unguided(boundary_frac: f64) -> Stage1Config {
        Stage1Config {
            batch: 24,
            boundary_frac,
            guidance: GuidanceConfig {
                scale: 1.0,
                enabled: false,
            },
            loss_weight: LossWeight::Uniform,
            adaptive: AdaptiveConfig {
                enabled: false,
                ..AdaptiveConfig::default()
            },
            label_drop: 0.0,
            ..Stage1Config::default()
        }
    }

    #[test]
    fn all_boundary_loss_is_flow_matching() {
        let net = FlowMapNet::new(tiny(2), &mut RngStreams::new(3).stream("i")).unwrap();
        let dist = ToyDistribution::ring(4, 2.0, 0.1, 2);
        let config = unguided(1.0);
        let batch = Stage1Batch::draw(&dist, &config, &mut BatchStreams::new(&RngStreams::new(4), "b")).unwrap();
        let mut state = AdaptiveWeightState::new(&config.adaptive);
        let (loss, stats) = stage1_loss(&mut Tape::new(), &net, &batch, &mut state, &config).unwrap();
        let fm = FmBatch {
            x: batch.x.clone(),
            eps: batch.eps.clone(),
            t: batch.t(),
            classes: batch.classes.clone(),
        };
        let reference = crate::teacher::fm_loss(&mut Tape::new(), &net, &fm).unwrap();
        assert!((loss.item() - reference.item()).abs() < 1e-12);
        assert_eq!(stats.loss_flowmap, 0.0);
    }

    #[test]
    fn target_branch_carries_no_gradient() {
        let net = FlowMapNet::new(tiny(2), &mut RngStreams::new(5).stream("i")).unwrap();
        let dist = ToyDistribution::ring(4, 2.0, 0.1, 2);
        let config = unguided(0.0);
        let batch = Stage1Batch::draw(&dist, &config, &mut BatchStreams::new(&RngStreams::new(6), "b")).unwrap();
        let loss_of = |net: &FlowMapNet| {
            let mut state = AdaptiveWeightState::new(&config.adaptive);
            stage1_loss(&mut Tape::new(), net, &batch, &mut state, &config).unwrap().0.item()
        };
        let (t, r) = (batch.t(), batch.r());
        let z = interpolate(&batch.x, &batch.eps, &t);
        let target = {
            let frozen = net.detached();
            let u_c = |rows: &[usize], z: &Tensor, t: &[f64], r: &[f64]| {
                let c: Vec<Class> = rows.iter().map(|&i| batch.classes[i]).collect();
                frozen.predict_u(&mut Tape::new(), z, t, r, &c)
            };
            let v = sample_velocity(&batch.x, &batch.eps);
            meanflow_target(u_c, &z, &v, &t, &r, config.eps_fd, &vec![1.0; t.len()]).unwrap()
        };
        let frozen_loss = |net: &FlowMapNet| {
            let u = net.predict_u(&mut Tape::new(), &z, &t, &r, &batch.classes).unwrap();
            let sum: f64 = u.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum();
            sum / t.len() as f64
        };
        assert!((loss_of(&net) - frozen_loss(&net)).abs() < 1e-12);

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let mut state = AdaptiveWeightState::new(&config.adaptive);
        let (loss, _) = stage1_loss(&mut tape, &bound, &batch, &mut state, &config).unwrap();
        let grads = bound.gradients(&tape.backward(&loss).unwrap());
        let h = 1e-6;
        let mut differs = false;
        for (p, grad) in grads.iter().enumerate() {
            let mut up = net.clone();
            up.parameters_mut()[p].data_mut()[0] += h;
            let mut down = net.clone();
            down.parameters_mut()[p].data_mut()[0] -= h;
            let fd_frozen = (frozen_loss(&up) - frozen_loss(&down)) / (2.0 * h);
            let fd_full = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
            let g = grad.data()[0];
            assert!((g - fd_frozen).abs() < 1e-5 * (1.0 + g.abs()), "param {p}: {g} vs {fd_frozen}");
            differs |= (fd_full - fd_frozen).abs() > 1e-4 * (1.0 + g.abs());
        }
        assert!(differs, "the target should depend on the parameters");
    }

    #[test]
    fn composition_defect_is_deterministic() {
        let teacher = FlowMapNet::new(tiny(2), &mut RngStreams::new(7).stream("i")).unwrap();
        let dist = ToyDistribution::ring(4, 2.0, 0.1, 2);
        let streams = RngStreams::new(8);
        let a = composition_defect(&teacher, &dist, 50, &streams).unwrap();
        let b = composition_defect(&teacher, &dist, 50, &streams).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }
}
