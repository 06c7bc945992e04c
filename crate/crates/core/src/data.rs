//! Toy ground-truth distributions.
//!
//! Interpolation convention: `z_t = (1 − t)·x + t·ε`, `t = 1` is pure noise.
//! For Gaussian mixtures the marginal of `z_t` is again a mixture with means
//! `(1 − t)·μ_k` and variances `(1 − t)²σ_k² + t²`, which gives closed-form
//! densities, scores and PF-ODE velocities.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::{standard_normal, RngStreams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionKind {
    /// Isotropic components `N(μ_k, σ_k² I)` with mixing weights.
    GaussianMixture {
        means: Vec<Vec<f64>>,
        stds: Vec<f64>,
        weights: Vec<f64>,
    },
    TwoMoons {
        noise: f64,
    },
    Spiral {
        arms: usize,
        noise: f64,
    },
    Checkerboard {
        cells: usize,
        size: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDistribution {
    pub kind: DistributionKind,
    /// Component index (mode, moon, arm, cell parity) to class label.
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl ToyDistribution {
    /// `modes` Gaussians evenly spaced on a circle; mode `i` gets label
    /// `i % class_count`.
    pub fn ring(modes: usize, radius: f64, std: f64, class_count: usize) -> Self {
        let means = (0..modes)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / modes as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self {
            kind: DistributionKind::GaussianMixture {
                means,
                stds: vec![std; modes],
                weights: vec![1.0 / modes as f64; modes],
            },
            labels: (0..modes).map(|i| i % class_count).collect(),
            class_count,
        }
    }

    /// The default benchmark: 8 modes, radius 4, σ = 0.3, two classes.
    pub fn default_ring() -> Self {
        Self::ring(8, 4.0, 0.3, 2)
    }

    pub fn gaussian(mean: Vec<f64>, std: f64) -> Self {
        Self {
            kind: DistributionKind::GaussianMixture {
                means: vec![mean],
                stds: vec![std],
                weights: vec![1.0],
            },
            labels: vec![0],
            class_count: 1,
        }
    }

    pub fn two_moons(noise: f64) -> Self {
        Self {
            kind: DistributionKind::TwoMoons { noise },
            labels: vec![0, 1],
            class_count: 2,
        }
    }

    pub fn spiral(arms: usize, noise: f64) -> Self {
        Self {
            kind: DistributionKind::Spiral { arms, noise },
            labels: (0..arms).collect(),
            class_count: arms,
        }
    }

    pub fn checkerboard(cells: usize, size: f64) -> Self {
        Self {
            kind: DistributionKind::Checkerboard { cells, size },
            labels: vec![0, 1],
            class_count: 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            DistributionKind::GaussianMixture { .. } => "gaussian-mixture",
            DistributionKind::TwoMoons { .. } => "two-moons",
            DistributionKind::Spiral { .. } => "spiral",
            DistributionKind::Checkerboard { .. } => "checkerboard",
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DistributionKind::GaussianMixture { means, .. } => means[0].len(),
            _ => 2,
        }
    }

    fn component_count(&self) -> usize {
        match &self.kind {
            DistributionKind::GaussianMixture { means, .. } => means.len(),
            DistributionKind::TwoMoons { .. } => 2,
            DistributionKind::Spiral { arms, .. } => *arms,
            DistributionKind::Checkerboard { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("distribution: {m}")));
        let k = self.component_count();
        if k == 0 {
            return bad("no components".into());
        }
        if self.labels.len() != k {
            return bad(format!("{} labels for {k} components", self.labels.len()));
        }
        if self.labels.iter().any(|&l| l >= self.class_count) {
            return bad("label outside class range".into());
        }
        if let DistributionKind::GaussianMixture {
            means,
            stds,
            weights,
        } = &self.kind
        {
            let d = means[0].len();
            if d == 0 || means.iter().any(|m| m.len() != d) {
                return bad("means must share a positive dimension".into());
            }
            if stds.len() != k || weights.len() != k {
                return bad("stds and weights must have one entry per mean".into());
            }
            if stds.iter().any(|&s| s <= 0.0) || weights.iter().any(|&w| w < 0.0) {
                return bad("stds must be positive and weights nonnegative".into());
            }
            if weights.iter().sum::<f64>() <= 0.0 {
                return bad("weights sum to zero".into());
            }
        }
        Ok(())
    }

    fn component_weights(&self) -> Vec<f64> {
        match &self.kind {
            DistributionKind::GaussianMixture { weights, .. } => {
                let total: f64 = weights.iter().sum();
                weights.iter().map(|w| w / total).collect()
            }
            _ => vec![1.0 / self.component_count() as f64; self.component_count()],
        }
    }

    /// Probability of each class label under the data distribution.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.class_count];
        for (w, &l) in self.component_weights().iter().zip(&self.labels) {
            p[l] += w;
        }
        p
    }

    fn pick<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// One point from component `k`.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<f64> {
        match &self.kind {
            DistributionKind::GaussianMixture { means, stds, .. } => means[k]
                .iter()
                .map(|m| m + stds[k] * standard_normal(rng))
                .collect(),
            DistributionKind::TwoMoons { noise } => {
                let a: f64 = rng.random_range(0.0..PI);
                let (x, y) = if k == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                vec![
                    2.0 * (x - 0.5) + noise * standard_normal(rng),
                    2.0 * (y - 0.25) + noise * standard_normal(rng),
                ]
            }
            DistributionKind::Spiral { arms, noise } => {
                let s: f64 = rng.random::<f64>().sqrt();
                let theta = 3.0 * PI * s + 2.0 * PI * k as f64 / *arms as f64;
                let radius = 4.0 * s;
                vec![
                    radius * theta.cos() + noise * standard_normal(rng),
                    radius * theta.sin() + noise * standard_normal(rng),
                ]
            }
            DistributionKind::Checkerboard { cells, size } => loop {
                let i = rng.random_range(0..*cells);
                let j = rng.random_range(0..*cells);
                if (i + j) % 2 != k {
                    continue;
                }
                let cell = size / *cells as f64;
                let x0 = -size / 2.0 + i as f64 * cell;
                let y0 = -size / 2.0 + j as f64 * cell;
                break vec![
                    x0 + cell * rng.random::<f64>(),
                    y0 + cell * rng.random::<f64>(),
                ];
            },
        }
    }

    /// `n` points and their class labels.
    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        if n == 0 {
            return Err(Error::Invalid("sample size must be positive".into()));
        }
        self.validate()?;
        let probs = self.component_weights();
        let mut data = Vec::with_capacity(n * self.dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = Self::pick(rng, &probs);
            data.extend(self.draw(rng, k));
            labels.push(self.labels[k]);
        }
        Ok((Tensor::new(vec![n, self.dim()], data)?, labels))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
        self.sample_with(n, &mut RngStreams::new(seed).stream("data"))
    }

    /// `n` points restricted to the components carrying `label`.
    pub fn sample_class<R: Rng + ?Sized>(&self, label: usize, n: usize, rng: &mut R) -> Result<Tensor> {
        let probs = self.class_component_weights(Some(label))?;
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            let k = Self::pick(rng, &probs);
            data.extend(self.draw(rng, k));
        }
        Ok(Tensor::new(vec![n, self.dim()], data)?)
    }

    /// Points from a single component.
    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, n: usize, rng: &mut R) -> Result<Tensor> {
        if k >= self.component_count() {
            return Err(Error::Invalid(format!("component {k} out of range")));
        }
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            data.extend(self.draw(rng, k));
        }
        Ok(Tensor::new(vec![n, self.dim()], data)?)
    }

    /// Labels drawn from the class marginal, for conditional generation.
    pub fn sample_labels<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let probs = self.class_probabilities();
        (0..n).map(|_| Self::pick(rng, &probs)).collect()
    }

    fn class_component_weights(&self, label: Option<usize>) -> Result<Vec<f64>> {
        let mut w = self.component_weights();
        if let Some(l) = label {
            if l >= self.class_count {
                return Err(Error::Invalid(format!("class {l} out of range")));
            }
            for (wi, &li) in w.iter_mut().zip(&self.labels) {
                if li != l {
                    *wi = 0.0;
                }
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Invalid(format!("class {l} has no mass")));
            }
            w.iter_mut().for_each(|wi| *wi /= total);
        }
        Ok(w)
    }

    fn mixture(&self) -> Result<(&[Vec<f64>], &[f64])> {
        match &self.kind {
            DistributionKind::GaussianMixture { means, stds, .. } => Ok((means, stds)),
            _ => Err(Error::Unsupported {
                kind: self.name().into(),
                what: "closed-form density",
            }),
        }
    }

    /// Per-component log-densities (including mixing weight) of `z` under the
    /// time-`t` marginal.
    fn log_terms(&self, z: &[f64], t: f64, label: Option<usize>) -> Result<Vec<(f64, f64, usize)>> {
        let (means, stds) = self.mixture()?;
        let weights = self.class_component_weights(label)?;
        let d = z.len() as f64;
        Ok(means
            .iter()
            .zip(stds)
            .zip(&weights)
            .enumerate()
            .filter(|(_, (_, &w))| w > 0.0)
            .map(|(k, ((mu, &s), &w))| {
                let var = (1.0 - t).powi(2) * s * s + t * t;
                let sq: f64 = z
                    .iter()
                    .zip(mu)
                    .map(|(zi, mi)| (zi - (1.0 - t) * mi).powi(2))
                    .sum();
                let log = w.ln() - sq / (2.0 * var) - 0.5 * d * (2.0 * PI * var).ln();
                (log, var, k)
            })
            .collect())
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeRange { row: 0, value: t });
        }
        Ok(())
    }

    /// `log p_t(z)` for a Gaussian mixture, optionally conditioned on a class.
    pub fn log_density(&self, z: &[f64], t: f64, label: Option<usize>) -> Result<f64> {
        Self::check_time(t)?;
        let terms = self.log_terms(z, t, label)?;
        let max = terms.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|x| (x.0 - max).exp()).sum::<f64>().ln())
    }

    fn score_row(&self, z: &[f64], t: f64, label: Option<usize>) -> Result<Vec<f64>> {
        let (means, _) = self.mixture()?;
        let terms = self.log_terms(z, t, label)?;
        let max = terms.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = terms.iter().map(|x| (x.0 - max).exp()).sum();
        let mut score = vec![0.0; z.len()];
        for &(log, var, k) in &terms {
            let resp = (log - max).exp() / total;
            for (i, s) in score.iter_mut().enumerate() {
                *s -= resp * (z[i] - (1.0 - t) * means[k][i]) / var;
            }
        }
        Ok(score)
    }

    /// `∇_z log p_t(z)` for each row of `z`; per-row times and optional classes.
    pub fn analytic_score(&self, z: &Tensor, t: &[f64], labels: Option<&[usize]>) -> Result<Tensor> {
        self.map_rows(z, t, labels, |this, row, ti, li| {
            Self::check_time(ti)?;
            this.score_row(row, ti, li)
        })
    }

    /// Marginal PF-ODE velocity `E[ε − x | z_t]`.
    pub fn analytic_velocity(&self, z: &Tensor, t: &[f64], labels: Option<&[usize]>) -> Result<Tensor> {
        self.map_rows(z, t, labels, |this, row, ti, li| {
            Self::check_time(ti)?;
            if ti >= 1.0 {
                // z_1 = ε is independent of x.
                let mean = this.mean(li)?;
                return Ok(row.iter().zip(&mean).map(|(z, m)| z - m).collect());
            }
            let s = this.score_row(row, ti, li)?;
            Ok(row
                .iter()
                .zip(&s)
                .map(|(z, s)| -(ti * s + z) / (1.0 - ti))
                .collect())
        })
    }

    /// Mixture mean, optionally within one class.
    pub fn mean(&self, label: Option<usize>) -> Result<Vec<f64>> {
        let (means, _) = self.mixture()?;
        let w = self.class_component_weights(label)?;
        let mut m = vec![0.0; self.dim()];
        for (mu, wk) in means.iter().zip(&w) {
            for (mi, v) in m.iter_mut().zip(mu) {
                *mi += wk * v;
            }
        }
        Ok(m)
    }

    fn map_rows(
        &self,
        z: &Tensor,
        t: &[f64],
        labels: Option<&[usize]>,
        f: impl Fn(&Self, &[f64], f64, Option<usize>) -> Result<Vec<f64>>,
    ) -> Result<Tensor> {
        let n = z.rows();
        if t.len() != n {
            return Err(Error::Batch {
                what: "t",
                got: t.len(),
                expected: n,
            });
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::Batch {
                    what: "labels",
                    got: l.len(),
                    expected: n,
                });
            }
        }
        let mut out = Vec::with_capacity(z.len());
        for i in 0..n {
            out.extend(f(self, z.row(i), t[i], labels.map(|l| l[i]))?);
        }
        Ok(Tensor::new(z.shape().to_vec(), out)?)
    }

    /// Mode centers and the radius used for coverage, for mixtures only.
    pub fn modes(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let (means, stds) = self.mixture()?;
        Ok((means.to_vec(), stds.to_vec()))
    }
}

/// Closed-form PF-ODE of a single isotropic Gaussian `N(μ, σ² I)`:
/// `Φ_{r←t}(z) = μ_r + (s_r / s_t)(z − μ_t)` with `μ_t = (1 − t)μ`,
/// `s_t² = (1 − t)²σ² + t²`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFlow {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianFlow {
    fn spread(&self, t: f64) -> f64 {
        ((1.0 - t).powi(2) * self.std * self.std + t * t).sqrt()
    }

    pub fn flow_map(&self, z: &Tensor, t: &[f64], r: &[f64]) -> Tensor {
        let d = self.mean.len();
        let mut out = z.data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            let ratio = self.spread(r[i]) / self.spread(t[i]);
            for (j, v) in row.iter_mut().enumerate() {
                let mu_t = (1.0 - t[i]) * self.mean[j];
                let mu_r = (1.0 - r[i]) * self.mean[j];
                *v = mu_r + ratio * (*v - mu_t);
            }
        }
        Tensor::new(z.shape().to_vec(), out).expect("same shape")
    }

    /// `dz/dt = dμ_t/dt + (ds_t/dt / s_t)(z − μ_t)`.
    pub fn velocity(&self, z: &Tensor, t: &[f64]) -> Tensor {
        let d = self.mean.len();
        let mut out = z.data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            let ti = t[i];
            let s = self.spread(ti);
            let ds = ((ti - 1.0) * self.std * self.std + ti) / s;
            for (j, v) in row.iter_mut().enumerate() {
                let mu_t = (1.0 - ti) * self.mean[j];
                *v = -self.mean[j] + ds / s * (*v - mu_t);
            }
        }
        Tensor::new(z.shape().to_vec(), out).expect("same shape")
    }
}

/// Writes `x,y,label` rows (two-dimensional data only).
pub fn write_csv(path: impl AsRef<Path>, points: &Tensor, labels: &[usize]) -> Result<()> {
    if points.cols() != 2 || labels.len() != points.rows() {
        return Err(Error::Invalid("csv dump needs [n, 2] points and n labels".into()));
    }
    let file = std::fs::File::create(path.as_ref()).map_err(io_err(path.as_ref()))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["x", "y", "label"])?;
    for (i, l) in labels.iter().enumerate() {
        let row = points.row(i);
        w.write_record([row[0].to_string(), row[1].to_string(), l.to_string()])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads points written by [`write_csv`] (labels ignored when absent).
pub fn read_points_csv(path: impl AsRef<Path>) -> Result<(Tensor, Vec<usize>)> {
    let mut rd = csv::Reader::from_path(path.as_ref())?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Invalid(format!("bad csv field {i}")))
        };
        data.push(parse(0)?);
        data.push(parse(1)?);
        labels.push(rec.get(2).and_then(|s| s.trim().parse().ok()).unwrap_or(0));
    }
    let n = labels.len();
    Ok((Tensor::new(vec![n, 2], data)?, labels))
}
