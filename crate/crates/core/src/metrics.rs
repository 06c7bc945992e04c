//! Sample-based distances to ground truth and the per-NFE scaling report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ToyDistribution;
use crate::error::{io_err, Error, Result};
use crate::nets::{Class, FlowMapNet};
use crate::rng::{normal_tensor, standard_normal, RngStreams, StreamRng};
use crate::samplers::{euler_flowmap_sample, euler_ode_sample, make_uniform_schedule};
use crate::teacher::GuidedTeacher;
use crate::tensor::Tensor;

fn nonempty(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Invalid("metric needs nonempty point sets".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Invalid("point sets differ in dimension".into()));
    }
    Ok(())
}

/// 1D Wasserstein-1 between two empirical distributions (`∫|F_a − F_b|`).
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        prev = next;
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
    }
    total
}

/// Mean 1D W₁ over `n_proj` random unit directions.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, rng: &mut StreamRng) -> Result<f64> {
    nonempty(a, b)?;
    if n_proj < 16 {
        return Err(Error::Invalid("sliced Wasserstein needs at least 16 projections".into()));
    }
    let d = a.cols();
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |x: &Tensor| -> Vec<f64> {
            (0..x.rows())
                .map(|i| x.row(i).iter().zip(&dir).map(|(p, q)| p * q).sum())
                .collect()
        };
        total += wasserstein_1d(&mut project(a), &mut project(b));
    }
    Ok(total / n_proj as f64)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Mean of `k(x_i, y_j)` over pairs; `skip_diag` drops `i = j`.
fn kernel_mean(x: &Tensor, y: &Tensor, k: &impl Fn(f64) -> f64, skip_diag: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            if skip_diag && i == j {
                continue;
            }
            total += k(sq_dist(x.row(i), y.row(j)));
            count += 1;
        }
    }
    total / count as f64
}

fn rbf(bandwidths: &[f64]) -> impl Fn(f64) -> f64 + '_ {
    move |d2| bandwidths.iter().map(|h| (-d2 / (2.0 * h * h)).exp()).sum()
}

/// Unbiased MMD² with a sum of RBF kernels.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    nonempty(a, b)?;
    if bandwidths.is_empty() || a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Invalid("MMD needs bandwidths and at least two points per set".into()));
    }
    let k = rbf(bandwidths);
    Ok(kernel_mean(a, a, &k, true) + kernel_mean(b, b, &k, true) - 2.0 * kernel_mean(a, b, &k, false))
}

/// Biased (V-statistic) MMD²: nonnegative and zero on identical sets.
pub fn mmd_rbf_biased(a: &Tensor, b: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    nonempty(a, b)?;
    if bandwidths.is_empty() {
        return Err(Error::Invalid("MMD needs at least one bandwidth".into()));
    }
    let k = rbf(bandwidths);
    let v = kernel_mean(a, a, &k, false) + kernel_mean(b, b, &k, false) - 2.0 * kernel_mean(a, b, &k, false);
    Ok(v.max(0.0))
}

/// Energy distance `2E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖` (V-statistic).
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    nonempty(a, b)?;
    let k = |d2: f64| d2.sqrt();
    let v = 2.0 * kernel_mean(a, b, &k, false) - kernel_mean(a, a, &k, false) - kernel_mean(b, b, &k, false);
    Ok(v.max(0.0))
}

/// Modes holding at least 1% of samples within `radius_sigmas·σ_k` of their
/// center.
pub fn mode_coverage(samples: &Tensor, dist: &ToyDistribution, radius_sigmas: f64) -> Result<usize> {
    let (means, stds) = dist.modes()?;
    let n = samples.rows();
    if n == 0 {
        return Err(Error::Invalid("mode coverage needs samples".into()));
    }
    let mut counts = vec![0usize; means.len()];
    for i in 0..n {
        for (k, (m, s)) in means.iter().zip(&stds).enumerate() {
            if sq_dist(samples.row(i), m) <= (radius_sigmas * s).powi(2) {
                counts[k] += 1;
            }
        }
    }
    Ok(counts.iter().filter(|&&c| c as f64 >= 0.01 * n as f64).count())
}

/// Something that turns noise into samples given a step budget.
pub trait Generator {
    /// Returns samples and the network calls spent.
    fn generate(&self, z: &Tensor, classes: &[Class], steps: usize, rng: &mut StreamRng) -> Result<(Tensor, usize)>;
}

/// Flow-map Euler sampling without guidance at inference.
pub struct FlowMapEuler<'a>(pub &'a FlowMapNet);

impl Generator for FlowMapEuler<'_> {
    fn generate(&self, z: &Tensor, classes: &[Class], steps: usize, _: &mut StreamRng) -> Result<(Tensor, usize)> {
        euler_flowmap_sample(self.0, z, classes, &make_uniform_schedule(steps)?)
    }
}

/// The teacher's PF-ODE integrated with Euler and classifier-free guidance.
pub struct TeacherEuler<'a>(pub GuidedTeacher<'a>);

impl Generator for TeacherEuler<'_> {
    fn generate(&self, z: &Tensor, classes: &[Class], steps: usize, _: &mut StreamRng) -> Result<(Tensor, usize)> {
        euler_ode_sample(&self.0, z, classes, &make_uniform_schedule(steps)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_proj: usize,
    pub seeds: usize,
    /// Points used by the quadratic-cost metrics (MMD, energy).
    pub kernel_subsample: usize,
    pub bandwidths: Vec<f64>,
    pub coverage_sigmas: f64,
    pub nfes: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_proj: 128,
            seeds: 5,
            kernel_subsample: 2000,
            bandwidths: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            coverage_sigmas: 3.0,
            nfes: vec![1, 2, 4, 8, 16, 32],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub dataset: String,
    pub nfe: usize,
    pub seed: usize,
    pub sw: f64,
    pub mmd: f64,
    pub energy: f64,
    pub modes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub nfe: usize,
    pub seeds: usize,
    pub sw: Summary,
    pub mmd: Summary,
    pub energy: Summary,
    pub modes: Summary,
    /// Network calls per sample actually spent at this budget.
    pub calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub model: String,
    pub dataset: String,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
}

impl ScalingReport {
    pub fn at(&self, nfe: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.nfe == nfe)
    }

    /// Mean sliced Wasserstein at a budget.
    pub fn sw(&self, nfe: usize) -> Option<f64> {
        self.at(nfe).map(|r| r.sw.mean)
    }

    /// Whether mean SW never rises by more than `tol` (relative) as the budget
    /// grows.
    pub fn non_increasing(&self, tol: f64) -> bool {
        self.summary
            .windows(2)
            .all(|w| w[1].sw.mean <= w[0].sw.mean * (1.0 + tol))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(io_err(path))
    }

    /// `nfe,seeds,calls,sw_mean,sw_se,...` one line per budget.
    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record([
            "model", "dataset", "nfe", "seeds", "calls", "sw_mean", "sw_se", "mmd_mean", "mmd_se", "energy_mean",
            "energy_se", "modes_mean", "modes_se",
        ])?;
        for r in &self.summary {
            w.write_record([
                self.model.clone(),
                self.dataset.clone(),
                r.nfe.to_string(),
                r.seeds.to_string(),
                r.calls.to_string(),
                r.sw.mean.to_string(),
                r.sw.se.to_string(),
                r.mmd.mean.to_string(),
                r.mmd.se.to_string(),
                r.energy.mean.to_string(),
                r.energy.se.to_string(),
                r.modes.mean.to_string(),
                r.modes.se.to_string(),
            ])?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Noise, classes and ground truth for one evaluation seed. Every model sees
/// the same draws for the same seed.
pub struct EvalDraw {
    pub noise: Tensor,
    pub classes: Vec<Class>,
    pub truth: Tensor,
}

pub fn eval_draw(dist: &ToyDistribution, config: &EvalConfig, seed_index: usize) -> Result<EvalDraw> {
    let streams = RngStreams::new(config.seed);
    let (truth, labels) = dist.sample_with(config.n_samples, &mut streams.indexed("eval.truth", seed_index as u64))?;
    let noise = normal_tensor(&mut streams.indexed("eval.noise", seed_index as u64), truth.shape());
    let classes = labels.into_iter().map(Class::Label).collect();
    Ok(EvalDraw { noise, classes, truth })
}

fn head(x: &Tensor, n: usize) -> Tensor {
    let n = n.min(x.rows());
    Tensor::new(vec![n, x.cols()], x.data()[..n * x.cols()].to_vec()).expect("prefix")
}

/// All metrics for one sample set against ground truth.
pub fn score_samples(
    samples: &Tensor,
    truth: &Tensor,
    dist: &ToyDistribution,
    config: &EvalConfig,
    proj_rng: &mut StreamRng,
) -> Result<(f64, f64, f64, usize)> {
    if samples.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            stage: "eval",
            step: 0,
            detail: "non-finite samples".into(),
        });
    }
    let sw = sliced_wasserstein(samples, truth, config.n_proj, proj_rng)?;
    let (sa, sb) = (head(samples, config.kernel_subsample), head(truth, config.kernel_subsample));
    let mmd = mmd_rbf_biased(&sa, &sb, &config.bandwidths)?;
    let energy = energy_distance(&sa, &sb)?;
    let modes = match dist.modes() {
        Ok(_) => mode_coverage(samples, dist, config.coverage_sigmas)?,
        Err(_) => 0,
    };
    Ok((sw, mmd, energy, modes))
}

/// Evaluates a generator at each budget in `config.nfes` over `config.seeds`
/// paired seeds.
pub fn build_scaling_report<G: Generator + ?Sized>(
    model: &str,
    generator: &G,
    dist: &ToyDistribution,
    config: &EvalConfig,
) -> Result<ScalingReport> {
    if config.seeds == 0 || config.nfes.is_empty() {
        return Err(Error::Invalid("evaluation needs seeds and budgets".into()));
    }
    let streams = RngStreams::new(config.seed);
    let draws = (0..config.seeds)
        .map(|s| eval_draw(dist, config, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &nfe in &config.nfes {
        let mut calls = 0;
        let mut per_seed = Vec::new();
        for (s, draw) in draws.iter().enumerate() {
            let mut rng = streams.indexed(&format!("eval.sampler.{nfe}"), s as u64);
            let (samples, c) = generator.generate(&draw.noise, &draw.classes, nfe, &mut rng)?;
            calls = c;
            let mut proj = streams.indexed("eval.proj", s as u64);
            let (sw, mmd, energy, modes) = score_samples(&samples, &draw.truth, dist, config, &mut proj)?;
            per_seed.push((sw, mmd, energy, modes as f64));
            rows.push(MetricRow {
                model: model.to_string(),
                dataset: dist.name().to_string(),
                nfe,
                seed: s,
                sw,
                mmd,
                energy,
                modes,
            });
        }
        let col = |f: fn(&(f64, f64, f64, f64)) -> f64| Summary::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        summary.push(SummaryRow {
            nfe,
            seeds: config.seeds,
            sw: col(|r| r.0),
            mmd: col(|r| r.1),
            energy: col(|r| r.2),
            modes: col(|r| r.3),
            calls,
        });
    }
    Ok(ScalingReport {
        model: model.to_string(),
        dataset: dist.name().to_string(),
        rows,
        summary,
    })
}
