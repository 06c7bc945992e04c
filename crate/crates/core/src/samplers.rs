//! Any-step samplers and ODE solvers.

use serde::{Deserialize, Serialize};

use crate::data::{GaussianFlow, ToyDistribution};
use crate::error::{Error, Result};
use crate::nets::{Class, FlowMapNet};
use crate::tensor::{Tape, Tensor};

/// A time-dependent velocity field `v(z, t, c)`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor>;

    /// Network calls consumed by one evaluation.
    fn calls_per_eval(&self) -> usize {
        1
    }
}

impl<V: VelocityField + ?Sized> VelocityField for &V {
    fn velocity(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor> {
        (**self).velocity(z, t, classes)
    }

    fn calls_per_eval(&self) -> usize {
        (**self).calls_per_eval()
    }
}

/// A transition `z_t ↦ z_r`.
pub trait FlowMapModel {
    fn flow_map(&self, z: &Tensor, t: &[f64], r: &[f64], classes: &[Class]) -> Result<Tensor>;

    fn calls_per_eval(&self) -> usize {
        1
    }
}

impl FlowMapModel for FlowMapNet {
    fn flow_map(&self, z: &Tensor, t: &[f64], r: &[f64], classes: &[Class]) -> Result<Tensor> {
        FlowMapNet::flow_map(self, &mut Tape::new(), z, t, r, classes)
    }
}

/// The net used at `t = r` as an instantaneous velocity.
impl VelocityField for FlowMapNet {
    fn velocity(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor> {
        self.predict_u(&mut Tape::new(), z, t, t, classes)
    }
}

impl FlowMapModel for GaussianFlow {
    fn flow_map(&self, z: &Tensor, t: &[f64], r: &[f64], _: &[Class]) -> Result<Tensor> {
        Ok(GaussianFlow::flow_map(self, z, t, r))
    }
}

impl VelocityField for GaussianFlow {
    fn velocity(&self, z: &Tensor, t: &[f64], _: &[Class]) -> Result<Tensor> {
        Ok(GaussianFlow::velocity(self, z, t))
    }
}

/// Closed-form marginal PF-ODE velocity of a mixture; null rows use the
/// unconditional marginal.
impl VelocityField for ToyDistribution {
    fn velocity(&self, z: &Tensor, t: &[f64], classes: &[Class]) -> Result<Tensor> {
        if classes.iter().all(|c| *c == Class::Null) {
            return self.analytic_velocity(z, t, None);
        }
        let mut out = Vec::with_capacity(z.len());
        for (i, c) in classes.iter().enumerate() {
            let row = Tensor::new(vec![1, z.cols()], z.row(i).to_vec())?;
            let label = match c {
                Class::Null => None,
                Class::Label(l) => Some(vec![*l]),
            };
            out.extend(self.analytic_velocity(&row, &t[i..=i], label.as_deref())?.into_vec());
        }
        Ok(Tensor::new(z.shape().to_vec(), out)?)
    }
}

/// Classifier-free guidance applied to a flow-map net at inference time.
#[derive(Clone, Debug)]
pub struct GuidedFlowMap<'a> {
    pub net: &'a FlowMapNet,
    pub scale: f64,
}

impl FlowMapModel for GuidedFlowMap<'_> {
    fn flow_map(&self, z: &Tensor, t: &[f64], r: &[f64], classes: &[Class]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let uc = self.net.predict_u(&mut tape, z, t, r, classes)?;
        let null = vec![Class::Null; classes.len()];
        let un = self.net.predict_u(&mut tape, z, t, r, &null)?;
        let g = self.scale;
        let u = Tensor::new(
            z.shape().to_vec(),
            uc.data().iter().zip(un.data()).map(|(c, n)| n + g * (c - n)).collect(),
        )?;
        Ok(crate::nets::apply_average_velocity(&mut tape, z, &u, t, r)?)
    }

    fn calls_per_eval(&self) -> usize {
        2
    }
}

/// Strictly decreasing times from exactly 1 to exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule(Vec<f64>);

impl Schedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        let ok = times.len() >= 2
            && times[0] == 1.0
            && times[times.len() - 1] == 0.0
            && times.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::Invalid(format!(
                "schedule must decrease strictly from 1 to 0, got {times:?}"
            )));
        }
        Ok(Self(times))
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }

    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }
}

/// `t_i = 1 − i/n`, built as `(n − i)/n` so grid points coincide exactly with
/// the `k/s` grid used in training.
pub fn make_uniform_schedule(n: usize) -> Result<Schedule> {
    if n == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    Schedule::new((0..=n).map(|i| (n - i) as f64 / n as f64).collect())
}

/// Steps shrinking geometrically toward `t = 0`: `t = (ρ^u − 1)/(ρ − 1)` on a
/// uniform `u` grid.
pub fn make_geometric_schedule(n: usize, rho: f64) -> Result<Schedule> {
    if n == 0 || rho <= 1.0 {
        return Err(Error::Invalid("geometric schedule needs n ≥ 1 and ρ > 1".into()));
    }
    let mut times: Vec<f64> = (0..=n)
        .map(|i| {
            let u = (n - i) as f64 / n as f64;
            (rho.powf(u) - 1.0) / (rho - 1.0)
        })
        .collect();
    times[0] = 1.0;
    times[n] = 0.0;
    Schedule::new(times)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleKind {
    Uniform,
    Geometric { rho: f64 },
}

impl ScheduleKind {
    pub fn build(&self, n: usize) -> Result<Schedule> {
        match *self {
            ScheduleKind::Uniform => make_uniform_schedule(n),
            ScheduleKind::Geometric { rho } => make_geometric_schedule(n, rho),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub schedule: ScheduleKind,
    /// Guidance scale applied at inference; `None` uses the fused prediction.
    pub cfg_at_inference: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 4,
            schedule: ScheduleKind::Uniform,
            cfg_at_inference: None,
            seed: 0,
        }
    }
}

/// `z_{i+1} = f(z_i, t_i, t_{i+1})`; returns samples and NFE.
pub fn euler_flowmap_sample<M: FlowMapModel + ?Sized>(
    model: &M,
    z: &Tensor,
    classes: &[Class],
    schedule: &Schedule,
) -> Result<(Tensor, usize)> {
    let n = z.rows();
    let mut z = z.clone();
    for (t, r) in schedule.pairs() {
        z = model.flow_map(&z, &vec![t; n], &vec![r; n], classes)?;
    }
    Ok((z, schedule.steps() * model.calls_per_eval()))
}

/// Every intermediate state of [`euler_flowmap_sample`], starting with `z`.
pub fn flowmap_trajectory<M: FlowMapModel + ?Sized>(
    model: &M,
    z: &Tensor,
    classes: &[Class],
    schedule: &Schedule,
) -> Result<Vec<Tensor>> {
    let n = z.rows();
    let mut states = vec![z.clone()];
    for (t, r) in schedule.pairs() {
        let next = model.flow_map(states.last().expect("nonempty"), &vec![t; n], &vec![r; n], classes)?;
        states.push(next);
    }
    Ok(states)
}

/// Euler integration of the PF-ODE from 1 to 0; returns samples and NFE.
pub fn euler_ode_sample<V: VelocityField + ?Sized>(
    field: &V,
    z: &Tensor,
    classes: &[Class],
    schedule: &Schedule,
) -> Result<(Tensor, usize)> {
    let n = z.rows();
    let mut z = z.clone();
    for (t, r) in schedule.pairs() {
        let v = field.velocity(&z, &vec![t; n], classes)?;
        z = axpy(&z, r - t, &v);
    }
    Ok((z, schedule.steps() * field.calls_per_eval()))
}

fn axpy(z: &Tensor, h: f64, v: &Tensor) -> Tensor {
    Tensor::new(
        z.shape().to_vec(),
        z.data().iter().zip(v.data()).map(|(z, v)| z + h * v).collect(),
    )
    .expect("same shape")
}

/// Classical RK4 from `t0` to `t1` (either direction) in `steps` steps.
pub fn rk4_solve<V: VelocityField + ?Sized>(
    field: &V,
    z: &Tensor,
    classes: &[Class],
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Invalid("rk4 needs at least one step".into()));
    }
    let n = z.rows();
    let h = (t1 - t0) / steps as f64;
    let mut z = z.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let at = |s: f64| vec![s; n];
        let k1 = field.velocity(&z, &at(t), classes)?;
        let k2 = field.velocity(&axpy(&z, h / 2.0, &k1), &at(t + h / 2.0), classes)?;
        let k3 = field.velocity(&axpy(&z, h / 2.0, &k2), &at(t + h / 2.0), classes)?;
        let end = if i + 1 == steps { t1 } else { t + h };
        let k4 = field.velocity(&axpy(&z, h, &k3), &at(end), classes)?;
        let data = (0..z.len())
            .map(|j| {
                z.data()[j]
                    + h / 6.0 * (k1.data()[j] + 2.0 * k2.data()[j] + 2.0 * k3.data()[j] + k4.data()[j])
            })
            .collect();
        z = Tensor::new(z.shape().to_vec(), data)?;
    }
    Ok(z)
}

/// RK4 states at every schedule time, `substeps` RK4 steps per interval.
pub fn rk4_trajectory<V: VelocityField + ?Sized>(
    field: &V,
    z: &Tensor,
    classes: &[Class],
    schedule: &Schedule,
    substeps: usize,
) -> Result<Vec<Tensor>> {
    let mut states = vec![z.clone()];
    for (t, r) in schedule.pairs() {
        let next = rk4_solve(field, states.last().expect("nonempty"), classes, t, r, substeps)?;
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::rng::{normal_tensor, RngStreams};

    #[test]
    fn uniform_schedule_grid() {
        assert_eq!(make_uniform_schedule(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(make_uniform_schedule(1).unwrap().times(), &[1.0, 0.0]);
        assert!(make_uniform_schedule(0).is_err());
        let s = make_uniform_schedule(7).unwrap();
        for (t, r) in s.pairs() {
            assert!((t - r - 1.0 / 7.0).abs() < 1e-15);
        }
        let g = make_geometric_schedule(6, 20.0).unwrap();
        assert_eq!(g.steps(), 6);
        assert!(Schedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(Schedule::new(vec![0.9, 0.0]).is_err());
    }

    #[test]
    fn exact_flow_map_is_step_count_invariant() {
        let g = GaussianFlow {
            mean: vec![2.0, -1.0],
            std: 0.5,
        };
        let z = normal_tensor(&mut RngStreams::new(0).stream("z"), &[50, 2]);
        let c = vec![Class::Null; 50];
        let (one, nfe1) = euler_flowmap_sample(&g, &z, &c, &make_uniform_schedule(1).unwrap()).unwrap();
        let (many, nfe32) = euler_flowmap_sample(&g, &z, &c, &make_uniform_schedule(32).unwrap()).unwrap();
        assert_eq!((nfe1, nfe32), (1, 32));
        assert!(one.max_abs_diff(&many) < 1e-12);
        // RK4 on the same ODE reproduces the closed form.
        let ode = rk4_solve(&g, &z, &c, 1.0, 0.0, 200).unwrap();
        assert!(ode.max_abs_diff(&one) < 1e-8);
    }

    #[test]
    fn net_nfe_matches_call_counter() {
        let net = FlowMapNet::new(
            NetConfig {
                hidden: vec![8],
                ..NetConfig::default()
            },
            &mut RngStreams::new(0).stream("i"),
        )
        .unwrap();
        let z = Tensor::zeros(&[4, 2]);
        let c = vec![Class::Label(0); 4];
        for n in [1, 2, 5] {
            net.reset_calls();
            let (_, nfe) = euler_flowmap_sample(&net, &z, &c, &make_uniform_schedule(n).unwrap()).unwrap();
            assert_eq!(nfe, n);
            assert_eq!(net.calls(), n);
        }
        net.reset_calls();
        let (a, nfe) =
            euler_flowmap_sample(&GuidedFlowMap { net: &net, scale: 2.0 }, &z, &c, &make_uniform_schedule(3).unwrap())
                .unwrap();
        assert_eq!((nfe, net.calls()), (6, 6));
        let (b, _) =
            euler_flowmap_sample(&GuidedFlowMap { net: &net, scale: 2.0 }, &z, &c, &make_uniform_schedule(3).unwrap())
                .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn euler_converges_on_linear_ode() {
        // Standard normal data: v(z, t) = z·(2t − 1)/s_t² with σ = 1.
        let g = GaussianFlow {
            mean: vec![0.0],
            std: 1.0,
        };
        let z = Tensor::from_rows(&[[1.3]]).unwrap();
        let c = [Class::Null];
        let exact = g.flow_map(&z, &[1.0], &[0.0]);
        let err = |n| {
            let (e, _) = euler_ode_sample(&g, &z, &c, &make_uniform_schedule(n).unwrap()).unwrap();
            e.max_abs_diff(&exact)
        };
        assert!(err(64) < err(8));
    }
}
