//! The two-time flow-map network `u(z, r, t, c)` and its flow map
//! `f(z, t, r) = z − (t − r)·u(z, r, t)`.
//!
//! Time enters through sinusoidal features followed by a small MLP. A
//! teacher uses a single embedding of `t`. A student adds a second
//! embedding for `r`, either interpolated with the first
//! (`g·emb(t) + (1−g)·emb'(r)`, `emb'` copied from `emb`) or added on top
//! with a zero-initialized output layer (`emb(t) + emb'(t − r)`).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::{Gradients, Tape, Tensor};

/// Class condition; `Null` selects the reserved unconditional row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Null,
    Label(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeConditioning {
    /// `emb(t)` only; used by teachers trained at `t = r`.
    Single,
    Interpolated {
        g: f64,
    },
    ZeroInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of sinusoidal features (sin and cos pairs), even.
    pub time_features: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    pub time_hidden: usize,
    pub time_embed_dim: usize,
    pub class_count: usize,
    pub class_embed_dim: usize,
    pub conditioning: TimeConditioning,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![256; 4],
            time_features: 64,
            freq_min: 1.0,
            freq_max: 1000.0,
            time_hidden: 64,
            time_embed_dim: 64,
            class_count: 2,
            class_embed_dim: 16,
            conditioning: TimeConditioning::Single,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("net config: {msg}")));
        if self.data_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("data_dim and hidden widths must be positive");
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return bad("time_features must be a positive even number");
        }
        if !(self.freq_min > 0.0 && self.freq_max >= self.freq_min) {
            return bad("frequencies must satisfy 0 < freq_min <= freq_max");
        }
        if let TimeConditioning::Interpolated { g } = self.conditioning {
            if !(0.0..=1.0).contains(&g) {
                return bad("interpolation weight g must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let scale = (1.0 / inputs as f64).sqrt();
        Self {
            weight: normal_tensor(rng, &[inputs, outputs]).map(|v| v * scale),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.matmul(x, &self.weight)?;
        Ok(tape.add(&h, &self.bias)?)
    }

    fn bind(&self, tape: &mut Tape) -> Self {
        Self {
            weight: tape.watch(&self.weight),
            bias: tape.watch(&self.bias),
        }
    }

    fn zero_out(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.data_mut().fill(0.0);
    }
}

/// Sinusoidal features of a scalar time followed by a two-layer projection.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
    pub hidden: Linear,
    pub out: Linear,
}

impl TimeEmbedding {
    fn new<R: Rng + ?Sized>(rng: &mut R, config: &NetConfig) -> Self {
        let half = config.time_features / 2;
        let ratio = config.freq_max / config.freq_min;
        let freqs = (0..half)
            .map(|i| {
                let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
                config.freq_min * ratio.powf(frac)
            })
            .collect();
        Self {
            freqs,
            hidden: Linear::new(rng, config.time_features, config.time_hidden),
            out: Linear::new(rng, config.time_hidden, config.time_embed_dim),
        }
    }

    /// `[sin(f·t), cos(f·t)]` for each frequency; bounded in [−1, 1].
    pub fn features(&self, times: &[f64]) -> Tensor {
        let width = 2 * self.freqs.len();
        let mut data = Vec::with_capacity(times.len() * width);
        for (i, &t) in times.iter().enumerate() {
            if i > 0 && times[i - 1] == t {
                data.extend_from_within(data.len() - width..);
                continue;
            }
            data.extend(self.freqs.iter().map(|f| (f * t).sin()));
            data.extend(self.freqs.iter().map(|f| (f * t).cos()));
        }
        Tensor::new(vec![times.len(), width], data).expect("feature shape")
    }

    pub fn forward(&self, tape: &mut Tape, times: &[f64]) -> Result<Tensor> {
        let feats = self.features(times);
        let h = self.hidden.forward(tape, &feats)?;
        let h = tape.silu(&h)?;
        self.out.forward(tape, &h)
    }

    fn bind(&self, tape: &mut Tape) -> Self {
        Self {
            freqs: self.freqs.clone(),
            hidden: self.hidden.bind(tape),
            out: self.out.bind(tape),
        }
    }
}

pub struct FlowMapNet {
    config: NetConfig,
    emb: TimeEmbedding,
    emb_prime: Option<TimeEmbedding>,
    classes: Tensor,
    trunk: Vec<Linear>,
    calls: Arc<AtomicUsize>,
}

/// Clones carry their own call counter.
impl Clone for FlowMapNet {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            emb: self.emb.clone(),
            emb_prime: self.emb_prime.clone(),
            classes: self.classes.clone(),
            trunk: self.trunk.clone(),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }
}

impl std::fmt::Debug for FlowMapNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowMapNet")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

pub(crate) fn check_times(t: &[f64], r: &[f64], rows: usize) -> Result<()> {
    for (what, v) in [("t", t), ("r", r)] {
        if v.len() != rows {
            return Err(Error::Batch {
                what,
                got: v.len(),
                expected: rows,
            });
        }
    }
    for (row, (&tv, &rv)) in t.iter().zip(r).enumerate() {
        for value in [tv, rv] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::TimeRange { row, value });
            }
        }
        if rv > tv {
            return Err(Error::TimeOrder { row, t: tv, r: rv });
        }
    }
    Ok(())
}

impl FlowMapNet {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let emb = TimeEmbedding::new(rng, &config);
        let emb_prime = match config.conditioning {
            TimeConditioning::Single => None,
            TimeConditioning::Interpolated { .. } => Some(emb.clone()),
            TimeConditioning::ZeroInit => {
                let mut e = TimeEmbedding::new(rng, &config);
                e.out.zero_out();
                Some(e)
            }
        };
        let classes = normal_tensor(rng, &[config.class_count + 1, config.class_embed_dim]);
        let mut widths = vec![config.data_dim + config.time_embed_dim + config.class_embed_dim];
        widths.extend(&config.hidden);
        widths.push(config.data_dim);
        let trunk = widths
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1]))
            .collect();
        Ok(Self {
            config,
            emb,
            emb_prime,
            classes,
            trunk,
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Converts a pretrained network into a two-time student. For the
    /// interpolated scheme `emb'` is an exact copy of `emb`; for the
    /// zero-init scheme it copies `emb` and zeroes the output layer.
    pub fn from_teacher(teacher: &FlowMapNet, conditioning: TimeConditioning) -> Result<Self> {
        let config = NetConfig {
            conditioning,
            ..teacher.config.clone()
        };
        config.validate()?;
        let emb_prime = match conditioning {
            TimeConditioning::Single => None,
            TimeConditioning::Interpolated { .. } => Some(teacher.emb.clone()),
            TimeConditioning::ZeroInit => {
                let mut e = teacher.emb.clone();
                e.out.zero_out();
                Some(e)
            }
        };
        Ok(Self {
            config,
            emb: teacher.emb.clone(),
            emb_prime,
            classes: teacher.classes.clone(),
            trunk: teacher.trunk.clone(),
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn null_class(&self) -> usize {
        self.config.class_count
    }

    /// Network forward passes issued through this net or its bound copies.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("emb.hidden.weight".to_string(), &self.emb.hidden.weight),
            ("emb.hidden.bias".to_string(), &self.emb.hidden.bias),
            ("emb.out.weight".to_string(), &self.emb.out.weight),
            ("emb.out.bias".to_string(), &self.emb.out.bias),
        ];
        if let Some(e) = &self.emb_prime {
            out.push(("emb_prime.hidden.weight".to_string(), &e.hidden.weight));
            out.push(("emb_prime.hidden.bias".to_string(), &e.hidden.bias));
            out.push(("emb_prime.out.weight".to_string(), &e.out.weight));
            out.push(("emb_prime.out.bias".to_string(), &e.out.bias));
        }
        out.push(("classes".to_string(), &self.classes));
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), &l.weight));
            out.push((format!("trunk.{i}.bias"), &l.bias));
        }
        out
    }

    /// Same order as [`parameters`](Self::parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.emb.hidden.weight,
            &mut self.emb.hidden.bias,
            &mut self.emb.out.weight,
            &mut self.emb.out.bias,
        ];
        if let Some(e) = &mut self.emb_prime {
            out.extend([
                &mut e.hidden.weight,
                &mut e.hidden.bias,
                &mut e.out.weight,
                &mut e.out.bias,
            ]);
        }
        out.push(&mut self.classes);
        for l in &mut self.trunk {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }

    /// A copy whose parameters are leaves on `tape`; shares the call counter.
    pub fn bind(&self, tape: &mut Tape) -> Self {
        Self {
            config: self.config.clone(),
            emb: self.emb.bind(tape),
            emb_prime: self.emb_prime.as_ref().map(|e| e.bind(tape)),
            classes: tape.watch(&self.classes),
            trunk: self.trunk.iter().map(|l| l.bind(tape)).collect(),
            calls: Arc::clone(&self.calls),
        }
    }

    /// A constant view of (possibly bound) parameters for no-grad calls;
    /// shares the call counter.
    pub fn detached(&self) -> Self {
        let mut out = self.clone();
        for p in out.parameters_mut() {
            *p = p.detach();
        }
        out.calls = Arc::clone(&self.calls);
        out
    }

    /// Gradients of a bound copy, in parameter order (zeros where unreached).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.parameters()
            .into_iter()
            .map(|(_, p)| grads.get_or_zeros(p))
            .collect()
    }

    /// `emb(t)`: the pretrained-style embedding of `t` alone.
    pub fn time_embedding(&self, tape: &mut Tape, t: &[f64]) -> Result<Tensor> {
        self.emb.forward(tape, t)
    }

    /// The time conditioning vector fed to the trunk.
    pub fn conditioning(&self, tape: &mut Tape, t: &[f64], r: &[f64]) -> Result<Tensor> {
        let et = self.emb.forward(tape, t)?;
        match (self.config.conditioning, &self.emb_prime) {
            (TimeConditioning::Interpolated { g }, Some(prime)) => {
                let er = prime.forward(tape, r)?;
                // er + g·(et − er) equals g·et + (1−g)·er and is exactly `et`
                // whenever both embeddings agree.
                let diff = tape.sub(&et, &er)?;
                let diff = tape.scale(&diff, g)?;
                Ok(tape.add(&er, &diff)?)
            }
            (TimeConditioning::ZeroInit, Some(prime)) => {
                let gap: Vec<f64> = t.iter().zip(r).map(|(t, r)| t - r).collect();
                let eg = prime.forward(tape, &gap)?;
                Ok(tape.add(&et, &eg)?)
            }
            _ => Ok(et),
        }
    }

    fn class_rows(&self, classes: &[Class]) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|c| match *c {
                Class::Null => Ok(self.config.class_count),
                Class::Label(k) if k < self.config.class_count => Ok(k),
                Class::Label(k) => Err(Error::Invalid(format!(
                    "class {k} outside 0..{}",
                    self.config.class_count
                ))),
            })
            .collect()
    }

    /// Average velocity `u(z, r, t, c)` for a batch; one network call.
    pub fn predict_u(
        &self,
        tape: &mut Tape,
        z: &Tensor,
        t: &[f64],
        r: &[f64],
        classes: &[Class],
    ) -> Result<Tensor> {
        let rows = z.rows();
        if z.shape().len() != 2 || z.cols() != self.config.data_dim {
            return Err(Error::Invalid(format!(
                "z has shape {:?}, expected [_, {}]",
                z.shape(),
                self.config.data_dim
            )));
        }
        check_times(t, r, rows)?;
        if classes.len() != rows {
            return Err(Error::Batch {
                what: "classes",
                got: classes.len(),
                expected: rows,
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let cond = self.conditioning(tape, t, r)?;
        let labels = tape.gather_rows(&self.classes, &self.class_rows(classes)?)?;
        let mut h = tape.concat_cols(&[z, &cond, &labels])?;
        let last = self.trunk.len() - 1;
        for (i, layer) in self.trunk.iter().enumerate() {
            h = layer.forward(tape, &h)?;
            if i < last {
                h = tape.silu(&h)?;
            }
        }
        Ok(h)
    }

    /// `f(z, t, r) = z − (t − r)·u(z, r, t)`; the identity when `t = r`.
    pub fn flow_map(
        &self,
        tape: &mut Tape,
        z: &Tensor,
        t: &[f64],
        r: &[f64],
        classes: &[Class],
    ) -> Result<Tensor> {
        let u = self.predict_u(tape, z, t, r, classes)?;
        Ok(apply_average_velocity(tape, z, &u, t, r)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

/// `z − (t − r)·u`, row by row.
pub fn apply_average_velocity(
    tape: &mut Tape,
    z: &Tensor,
    u: &Tensor,
    t: &[f64],
    r: &[f64],
) -> crate::tensor::Result<Tensor> {
    let gap = Tensor::vector(t.iter().zip(r).map(|(t, r)| t - r).collect());
    let step = tape.scale_rows(u, &gap)?;
    tape.sub(z, &step)
}

/// Checkpoint container.
///
/// Layout (little-endian): magic `FMAPCKPT`, `u32` format version, `u64`
/// header length, JSON header with the net configuration, `u32` parameter
/// count, then per parameter: `u32` name length, UTF-8 name, `u32` rank,
/// `u64` dims, `f64` values.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"FMAPCKPT";
    pub const FORMAT_VERSION: u32 = 1;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Header {
        format_version: u32,
        net: NetConfig,
    }

    pub(super) fn encode(net: &FlowMapNet) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            net: net.config.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let params = net.parameters();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, p) in params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
            let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub(super) fn decode(bytes: &[u8]) -> Result<FlowMapNet> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = rd.u64()? as usize;
        let header: Header = serde_json::from_slice(rd.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        // Build a skeleton with the right shapes, then overwrite every tensor.
        let mut rng = crate::rng::RngStreams::new(0).stream("checkpoint");
        let mut net = FlowMapNet::new(header.net, &mut rng)?;
        let names: Vec<(String, Vec<usize>)> = net
            .parameters()
            .into_iter()
            .map(|(n, p)| (n, p.shape().to_vec()))
            .collect();
        let count = rd.u32()? as usize;
        if count != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {count}",
                names.len()
            )));
        }
        for ((expected_name, expected_shape), slot) in names.into_iter().zip(net.parameters_mut()) {
            let name_len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            if name != expected_name {
                return Err(Error::Checkpoint(format!(
                    "expected parameter {expected_name}, found {name}"
                )));
            }
            let rank = rd.u32()? as usize;
            let shape = (0..rank)
                .map(|_| rd.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != expected_shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {shape:?}, expected {expected_shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = rd.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *slot = Tensor::new(shape, data)?;
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(net)
    }
}
