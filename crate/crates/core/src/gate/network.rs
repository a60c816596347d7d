//! Gate architectures, parameters, and forward/backward passes.
//!
//! Architectures (hidden layers followed by ReLU):
//!
//! | tag         | pipeline                                                                 |
//! |-------------|--------------------------------------------------------------------------|
//! | `fc1`       | pool, FC(n), softmax                                                     |
//! | `fc2`       | pool, FC(hidden), FC(n), softmax                                         |
//! | `conv_fc2`  | conv 1x1, pool, FC(hidden), FC(n), softmax                               |
//! | `conv2_fc2` | conv 1x1, BN, conv 3x3 (pad 1), BN, pool, FC(hidden), FC(n), softmax     |
//!
//! Spatial gates skip the pool and run the head on every feature cell.
//! Class-wise gates run `C + 1` heads on the shared trunk: the first head
//! weights box and objectness channels, head `1 + k` weights class `k`.
//!
//! All trainable values live in one flat vector (`GateParams::values`) so the
//! gradient and the optimizer state share its layout.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax, FeatureMap, GateOutput, WeightGrid};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_CONV_CHANNELS: usize = 64;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Fc1,
    Fc2,
    ConvFc2,
    Conv2Fc2,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Self::Fc1, Self::Fc2, Self::ConvFc2, Self::Conv2Fc2];

    fn convs(self) -> usize {
        match self {
            Self::Fc1 | Self::Fc2 => 0,
            Self::ConvFc2 => 1,
            Self::Conv2Fc2 => 2,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Fc1 => "fc1",
            Self::Fc2 => "fc2",
            Self::ConvFc2 => "conv_fc2",
            Self::Conv2Fc2 => "conv2_fc2",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown gate architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Single,
    Spatial,
    Classwise,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Single => "single",
            Self::Spatial => "spatial",
            Self::Classwise => "classwise",
        })
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "spatial" => Ok(Self::Spatial),
            "classwise" => Ok(Self::Classwise),
            _ => Err(Error::config(format!("unknown gate mode {s:?}"))),
        }
    }
}

/// Shape-determining hyper-parameters of a gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub architecture: Architecture,
    pub mode: GateMode,
    pub expert_ids: Vec<String>,
    pub input_channels: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub class_count: Option<usize>,
}

impl GateSpec {
    pub fn new(architecture: Architecture, mode: GateMode, expert_ids: Vec<String>, input_channels: usize) -> Self {
        Self {
            architecture,
            mode,
            expert_ids,
            input_channels,
            hidden: DEFAULT_HIDDEN,
            conv_channels: DEFAULT_CONV_CHANNELS,
            class_count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.expert_ids.len();
        if n < 2 {
            return Err(Error::config("a gate needs at least two experts"));
        }
        if self.input_channels == 0 || !self.input_channels.is_multiple_of(n) {
            return Err(Error::config(format!(
                "input channels {} not divisible by {n} experts",
                self.input_channels
            )));
        }
        if self.architecture != Architecture::Fc1 && self.hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        if self.architecture.convs() > 0 && self.conv_channels == 0 {
            return Err(Error::config("conv channels must be positive"));
        }
        if self.mode == GateMode::Classwise && !matches!(self.class_count, Some(c) if c > 0) {
            return Err(Error::config("class-wise gate requires a class count"));
        }
        Ok(())
    }

    pub fn expert_count(&self) -> usize {
        self.expert_ids.len()
    }

    pub fn head_count(&self) -> usize {
        match self.mode {
            GateMode::Classwise => 1 + self.class_count.unwrap_or(0),
            _ => 1,
        }
    }

    fn trunk_channels(&self) -> usize {
        if self.architecture.convs() > 0 {
            self.conv_channels
        } else {
            self.input_channels
        }
    }

    fn head_name(&self, h: usize) -> String {
        match self.mode {
            GateMode::Classwise if h == 0 => "shared".to_string(),
            GateMode::Classwise => format!("class{}", h - 1),
            _ => "head".to_string(),
        }
    }
}

/// A named slice of the flat parameter (or buffer) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct HeadLayout {
    w1: Range<usize>,
    b1: Range<usize>,
    fc2: Option<(Range<usize>, Range<usize>)>,
}

#[derive(Debug, Clone, Default)]
struct BnLayout {
    gamma: Range<usize>,
    beta: Range<usize>,
    mean: Range<usize>,
    var: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    conv1: Option<(Range<usize>, Range<usize>)>,
    bn1: Option<BnLayout>,
    conv2: Option<(Range<usize>, Range<usize>)>,
    bn2: Option<BnLayout>,
    heads: Vec<HeadLayout>,
    tensors: Vec<ParamTensor>,
    buffers: Vec<ParamTensor>,
    total: usize,
    buffer_total: usize,
}

struct LayoutBuilder {
    tensors: Vec<ParamTensor>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let t = ParamTensor {
            name,
            shape,
            offset: self.total,
        };
        let r = t.range();
        self.total = r.end;
        self.tensors.push(t);
        r
    }
}

impl Layout {
    fn new(spec: &GateSpec) -> Self {
        let mut p = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let (ci, cc) = (spec.input_channels, spec.conv_channels);
        let mut conv1 = None;
        let mut bn1 = None;
        let mut conv2 = None;
        let mut bn2 = None;
        if spec.architecture.convs() >= 1 {
            conv1 = Some((
                p.push("conv1.weight".into(), vec![cc, ci, 1, 1]),
                p.push("conv1.bias".into(), vec![cc]),
            ));
        }
        if spec.architecture == Architecture::Conv2Fc2 {
            let bn = |name: &str, p: &mut LayoutBuilder, b: &mut LayoutBuilder| BnLayout {
                gamma: p.push(format!("{name}.weight"), vec![cc]),
                beta: p.push(format!("{name}.bias"), vec![cc]),
                mean: b.push(format!("{name}.running_mean"), vec![cc]),
                var: b.push(format!("{name}.running_var"), vec![cc]),
            };
            bn1 = Some(bn("bn1", &mut p, &mut b));
            conv2 = Some((
                p.push("conv2.weight".into(), vec![cc, cc, 3, 3]),
                p.push("conv2.bias".into(), vec![cc]),
            ));
            bn2 = Some(bn("bn2", &mut p, &mut b));
        }
        let ct = spec.trunk_channels();
        let n = spec.expert_count();
        let heads = (0..spec.head_count())
            .map(|h| {
                let name = spec.head_name(h);
                if spec.architecture == Architecture::Fc1 {
                    HeadLayout {
                        w1: p.push(format!("{name}.fc1.weight"), vec![n, ct]),
                        b1: p.push(format!("{name}.fc1.bias"), vec![n]),
                        fc2: None,
                    }
                } else {
                    HeadLayout {
                        w1: p.push(format!("{name}.fc1.weight"), vec![spec.hidden, ct]),
                        b1: p.push(format!("{name}.fc1.bias"), vec![spec.hidden]),
                        fc2: Some((
                            p.push(format!("{name}.fc2.weight"), vec![n, spec.hidden]),
                            p.push(format!("{name}.fc2.bias"), vec![n]),
                        )),
                    }
                }
            })
            .collect();
        Layout {
            conv1,
            bn1,
            conv2,
            bn2,
            heads,
            tensors: p.tensors,
            buffers: b.tensors,
            total: p.total,
            buffer_total: b.total,
        }
    }
}

/// Gate parameters: a [`GateSpec`] plus flat trainable values and
/// non-trainable batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub spec: GateSpec,
    pub values: Vec<f64>,
    pub buffers: Vec<f64>,
}

impl GateParams {
    /// All trainable values zero; running variance one.
    pub fn zeros(spec: GateSpec) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut buffers = vec![0.0; layout.buffer_total];
        for bn in [&layout.bn1, &layout.bn2].into_iter().flatten() {
            buffers[bn.var.clone()].fill(1.0);
        }
        Ok(Self {
            values: vec![0.0; layout.total],
            buffers,
            spec,
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases, batch-norm
    /// scale one and shift zero.
    pub fn init(spec: GateSpec, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        let layout = Layout::new(&params.spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn_gammas: Vec<Range<usize>> = [&layout.bn1, &layout.bn2]
            .into_iter()
            .flatten()
            .map(|b| b.gamma.clone())
            .collect();
        let bn_betas: Vec<Range<usize>> = [&layout.bn1, &layout.bn2]
            .into_iter()
            .flatten()
            .map(|b| b.beta.clone())
            .collect();
        for t in &layout.tensors {
            let r = t.range();
            if bn_gammas.contains(&r) {
                params.values[r].fill(1.0);
                continue;
            }
            if bn_betas.contains(&r) {
                continue;
            }
            // weight shape is [out, in, ...]; a bias shares its weight's fan-in
            let fan_in = if t.shape.len() > 1 {
                t.shape[1..].iter().product::<usize>()
            } else {
                fan_in_for_bias(&layout, &r)
            };
            let k = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in &mut params.values[r] {
                *v = rng.random_range(-k..k);
            }
        }
        Ok(params)
    }

    pub fn expert_count(&self) -> usize {
        self.spec.expert_count()
    }

    /// Named trainable tensors in storage order.
    pub fn tensors(&self) -> Vec<ParamTensor> {
        Layout::new(&self.spec).tensors
    }

    /// Named running-statistics buffers in storage order.
    pub fn buffer_tensors(&self) -> Vec<ParamTensor> {
        Layout::new(&self.spec).buffers
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        self.spec.validate()?;
        let layout = Layout::new(&self.spec);
        if self.values.len() != layout.total || self.buffers.len() != layout.buffer_total {
            return Err(Error::config(format!(
                "gate parameter count {} / buffer count {} do not match spec ({} / {})",
                self.values.len(),
                self.buffers.len(),
                layout.total,
                layout.buffer_total
            )));
        }
        Ok(())
    }

    /// Folds batch statistics from a training-mode forward pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        let layout = Layout::new(&self.spec);
        for (bn, stats) in [(&layout.bn1, &trace.bn1), (&layout.bn2, &trace.bn2)] {
            let (Some(bn), Some(stats)) = (bn, stats) else { continue };
            if !trace.training {
                continue;
            }
            let n = stats.count as f64;
            let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            for c in 0..stats.mean.len() {
                let m = &mut self.buffers[bn.mean.start + c];
                *m = (1.0 - BATCHNORM_MOMENTUM) * *m + BATCHNORM_MOMENTUM * stats.mean[c];
                let v = &mut self.buffers[bn.var.start + c];
                *v = (1.0 - BATCHNORM_MOMENTUM) * *v + BATCHNORM_MOMENTUM * stats.var[c] * unbias;
            }
        }
    }
}

fn fan_in_for_bias(layout: &Layout, bias: &Range<usize>) -> usize {
    layout
        .tensors
        .windows(2)
        .find(|w| &w[1].range() == bias)
        .map(|w| w[0].shape[1..].iter().product())
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    count: usize,
}

#[derive(Debug, Clone, Default)]
struct SampleTrace {
    height: usize,
    width: usize,
    input: Vec<f64>,
    xhat1: Vec<f64>,
    a1: Vec<f64>,
    xhat2: Vec<f64>,
    a2: Vec<f64>,
    /// Head input rows: one pooled vector, or one per cell in spatial mode.
    head_in: Vec<Vec<f64>>,
    /// `[head][row]` post-ReLU hidden activations (empty for `fc1`).
    hidden: Vec<Vec<Vec<f64>>>,
    /// `[head][row]` softmax outputs.
    probs: Vec<Vec<Vec<f64>>>,
}

impl SampleTrace {
    fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Intermediate activations of a batch forward pass, needed by
/// [`GateParams::backward`] and [`GateParams::update_running_stats`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    training: bool,
    samples: Vec<SampleTrace>,
    bn1: Option<BnStats>,
    bn2: Option<BnStats>,
}

/// Loss gradient with respect to every weight vector of one sample, in the
/// order of [`GateOutput::rows`].
pub type RowGrads = Vec<Vec<f64>>;

fn conv1x1(w: &[f64], b: &[f64], x: &[f64], cin: usize, cout: usize, cells: usize) -> Vec<f64> {
    let mut z = vec![0.0; cout * cells];
    for o in 0..cout {
        let zo = &mut z[o * cells..(o + 1) * cells];
        zo.fill(b[o]);
        for i in 0..cin {
            let wi = w[o * cin + i];
            let xi = &x[i * cells..(i + 1) * cells];
            for (zp, xp) in zo.iter_mut().zip(xi) {
                *zp += wi * xp;
            }
        }
    }
    z
}

fn conv3x3(w: &[f64], b: &[f64], x: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let cells = h * wd;
    let mut z = vec![0.0; c * cells];
    for o in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o];
                for i in 0..c {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += w[((o * c + i) * 3 + ky) * 3 + kx] * x[i * cells + sy as usize * wd + sx as usize];
                        }
                    }
                }
                z[o * cells + y * wd + xx] = acc;
            }
        }
    }
    z
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn batch_stats(zs: &[Vec<f64>], samples: &[SampleTrace], channels: usize) -> BnStats {
    let mut mean = vec![0.0; channels];
    let mut count = 0;
    for (z, s) in zs.iter().zip(samples) {
        let p = s.cells();
        count += p;
        for c in 0..channels {
            mean[c] += z[c * p..(c + 1) * p].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; channels];
    for (z, s) in zs.iter().zip(samples) {
        let p = s.cells();
        for c in 0..channels {
            var[c] += z[c * p..(c + 1) * p].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
    BnStats {
        mean,
        var,
        inv_std,
        count,
    }
}

fn running_stats(buffers: &[f64], bn: &BnLayout) -> BnStats {
    let mean = buffers[bn.mean.clone()].to_vec();
    let var = buffers[bn.var.clone()].to_vec();
    let inv_std = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
    BnStats {
        mean,
        var,
        inv_std,
        count: 0,
    }
}

/// Normalizes `z` in place into `xhat` and returns `relu(gamma * xhat + beta)`.
fn bn_relu(z: &[f64], stats: &BnStats, gamma: &[f64], beta: &[f64], cells: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; z.len()];
    let mut a = vec![0.0; z.len()];
    for c in 0..gamma.len() {
        for p in 0..cells {
            let i = c * cells + p;
            xhat[i] = (z[i] - stats.mean[c]) * stats.inv_std[c];
            a[i] = (gamma[c] * xhat[i] + beta[c]).max(0.0);
        }
    }
    (xhat, a)
}

impl GateParams {
    fn check_features(&self, f: &FeatureMap) -> Result<()> {
        f.validate()?;
        if f.channels != self.spec.input_channels {
            return Err(Error::input(format!(
                "feature map {} has {} channels, gate expects {}",
                f.image_id, f.channels, self.spec.input_channels
            )));
        }
        if f.expert_ids != self.spec.expert_ids {
            return Err(Error::input(format!(
                "feature map {} expert order {:?} does not match gate {:?}",
                f.image_id, f.expert_ids, self.spec.expert_ids
            )));
        }
        Ok(())
    }

    /// Batch forward pass. In training mode batch-norm layers use statistics
    /// of this batch; otherwise the running statistics.
    pub fn forward(&self, feats: &[&FeatureMap], training: bool) -> Result<(Vec<GateOutput>, ForwardTrace)> {
        self.check_shapes()?;
        if feats.is_empty() {
            return Err(Error::input("empty feature batch"));
        }
        for f in feats {
            self.check_features(f)?;
        }
        let spec = &self.spec;
        let layout = Layout::new(spec);
        let v = &self.values;
        let (ci, cc) = (spec.input_channels, spec.conv_channels);
        let mut samples: Vec<SampleTrace> = feats
            .iter()
            .map(|f| SampleTrace {
                height: f.height,
                width: f.width,
                input: f.data.iter().map(|&x| x as f64).collect(),
                ..Default::default()
            })
            .collect();

        let mut bn1_stats = None;
        let mut bn2_stats = None;
        match spec.architecture {
            Architecture::Fc1 | Architecture::Fc2 => {}
            Architecture::ConvFc2 => {
                let (w, b) = layout.conv1.as_ref().expect("conv1");
                for s in &mut samples {
                    let z = conv1x1(&v[w.clone()], &v[b.clone()], &s.input, ci, cc, s.cells());
                    s.a1 = relu(&z);
                }
            }
            Architecture::Conv2Fc2 => {
                let (w1, b1) = layout.conv1.as_ref().expect("conv1");
                let (w2, b2) = layout.conv2.as_ref().expect("conv2");
                let bn1 = layout.bn1.as_ref().expect("bn1");
                let bn2 = layout.bn2.as_ref().expect("bn2");
                let z1: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|s| conv1x1(&v[w1.clone()], &v[b1.clone()], &s.input, ci, cc, s.cells()))
                    .collect();
                let st1 = if training {
                    batch_stats(&z1, &samples, cc)
                } else {
                    running_stats(&self.buffers, bn1)
                };
                for (s, z) in samples.iter_mut().zip(&z1) {
                    let (xhat, a) = bn_relu(z, &st1, &v[bn1.gamma.clone()], &v[bn1.beta.clone()], s.cells());
                    s.xhat1 = xhat;
                    s.a1 = a;
                }
                let z2: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|s| conv3x3(&v[w2.clone()], &v[b2.clone()], &s.a1, cc, s.height, s.width))
                    .collect();
                let st2 = if training {
                    batch_stats(&z2, &samples, cc)
                } else {
                    running_stats(&self.buffers, bn2)
                };
                for (s, z) in samples.iter_mut().zip(&z2) {
                    let (xhat, a) = bn_relu(z, &st2, &v[bn2.gamma.clone()], &v[bn2.beta.clone()], s.cells());
                    s.xhat2 = xhat;
                    s.a2 = a;
                }
                bn1_stats = Some(st1);
                bn2_stats = Some(st2);
            }
        }

        let ct = spec.trunk_channels();
        let n = spec.expert_count();
        let mut outputs = Vec::with_capacity(samples.len());
        for s in &mut samples {
            let cells = s.cells();
            let trunk: &[f64] = match spec.architecture {
                Architecture::Fc1 | Architecture::Fc2 => &s.input,
                Architecture::ConvFc2 => &s.a1,
                Architecture::Conv2Fc2 => &s.a2,
            };
            s.head_in = match spec.mode {
                GateMode::Spatial => (0..cells).map(|p| (0..ct).map(|c| trunk[c * cells + p]).collect()).collect(),
                _ => vec![(0..ct)
                    .map(|c| trunk[c * cells..(c + 1) * cells].iter().sum::<f64>() / cells as f64)
                    .collect()],
            };
            s.hidden = Vec::with_capacity(layout.heads.len());
            s.probs = Vec::with_capacity(layout.heads.len());
            for head in &layout.heads {
                let mut hid_rows = Vec::new();
                let mut prob_rows = Vec::with_capacity(s.head_in.len());
                for row in &s.head_in {
                    let logits = match &head.fc2 {
                        None => dense(&v[head.w1.clone()], &v[head.b1.clone()], row, n),
                        Some((w2, b2)) => {
                            let hid = relu(&dense(&v[head.w1.clone()], &v[head.b1.clone()], row, spec.hidden));
                            let l = dense(&v[w2.clone()], &v[b2.clone()], &hid, n);
                            hid_rows.push(hid);
                            l
                        }
                    };
                    prob_rows.push(softmax(&logits));
                }
                s.hidden.push(hid_rows);
                s.probs.push(prob_rows);
            }
            outputs.push(match spec.mode {
                GateMode::Single => GateOutput::Single {
                    weights: s.probs[0][0].clone(),
                },
                GateMode::Spatial => GateOutput::Spatial {
                    grid: WeightGrid {
                        height: s.height,
                        width: s.width,
                        experts: n,
                        data: s.probs[0].concat(),
                    },
                },
                GateMode::Classwise => GateOutput::Classwise {
                    shared: s.probs[0][0].clone(),
                    per_class: s.probs[1..].iter().map(|h| h[0].clone()).collect(),
                },
            });
        }
        Ok((
            outputs,
            ForwardTrace {
                training,
                samples,
                bn1: bn1_stats,
                bn2: bn2_stats,
            },
        ))
    }

    /// Back-propagates per-sample weight-vector gradients to every trainable
    /// value. Returns a gradient laid out like `values`.
    pub fn backward(&self, trace: &ForwardTrace, grads: &[RowGrads]) -> Result<Vec<f64>> {
        if grads.len() != trace.samples.len() {
            return Err(Error::Internal(format!(
                "{} gradient entries for {} samples",
                grads.len(),
                trace.samples.len()
            )));
        }
        let spec = &self.spec;
        let layout = Layout::new(spec);
        let v = &self.values;
        let mut g = vec![0.0; v.len()];
        let (ci, cc, ct) = (spec.input_channels, spec.conv_channels, spec.trunk_channels());

        // heads -> d trunk output, per sample
        let mut d_trunk: Vec<Vec<f64>> = Vec::with_capacity(trace.samples.len());
        for (s, rows) in trace.samples.iter().zip(grads) {
            let cells = s.cells();
            let mut d_in = vec![vec![0.0; ct]; s.head_in.len()];
            for (h, head) in layout.heads.iter().enumerate() {
                for (r, input) in s.head_in.iter().enumerate() {
                    let row_grad = match spec.mode {
                        GateMode::Spatial => &rows[r],
                        _ => &rows[h],
                    };
                    let p = &s.probs[h][r];
                    let dot: f64 = p.iter().zip(row_grad).map(|(a, b)| a * b).sum();
                    let dlogits: Vec<f64> = p.iter().zip(row_grad).map(|(pi, gi)| pi * (gi - dot)).collect();
                    match &head.fc2 {
                        None => {
                            dense_backward(v, &mut g, &head.w1, &head.b1, input, &dlogits, &mut d_in[r]);
                        }
                        Some((w2, b2)) => {
                            let hid = &s.hidden[h][r];
                            let mut dhid = vec![0.0; spec.hidden];
                            dense_backward(v, &mut g, w2, b2, hid, &dlogits, &mut dhid);
                            for (d, a) in dhid.iter_mut().zip(hid) {
                                if *a <= 0.0 {
                                    *d = 0.0;
                                }
                            }
                            dense_backward(v, &mut g, &head.w1, &head.b1, input, &dhid, &mut d_in[r]);
                        }
                    }
                }
            }
            let mut dt = vec![0.0; ct * cells];
            match spec.mode {
                GateMode::Spatial => {
                    for (p, row) in d_in.iter().enumerate() {
                        for c in 0..ct {
                            dt[c * cells + p] = row[c];
                        }
                    }
                }
                _ => {
                    for c in 0..ct {
                        let share = d_in[0][c] / cells as f64;
                        dt[c * cells..(c + 1) * cells].fill(share);
                    }
                }
            }
            d_trunk.push(dt);
        }

        match spec.architecture {
            Architecture::Fc1 | Architecture::Fc2 => {}
            Architecture::ConvFc2 => {
                let (w, b) = layout.conv1.as_ref().expect("conv1");
                for (s, dt) in trace.samples.iter().zip(&mut d_trunk) {
                    for (d, a) in dt.iter_mut().zip(&s.a1) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    conv1x1_backward(&mut g, w, b, &s.input, dt, ci, cc, s.cells());
                }
            }
            Architecture::Conv2Fc2 => {
                let (w1, b1) = layout.conv1.as_ref().expect("conv1");
                let (w2, b2) = layout.conv2.as_ref().expect("conv2");
                let bn1 = layout.bn1.as_ref().expect("bn1");
                let bn2 = layout.bn2.as_ref().expect("bn2");
                let st1 = trace.bn1.as_ref().expect("bn1 stats");
                let st2 = trace.bn2.as_ref().expect("bn2 stats");
                let xhat2: Vec<&[f64]> = trace.samples.iter().map(|s| s.xhat2.as_slice()).collect();
                let a2: Vec<&[f64]> = trace.samples.iter().map(|s| s.a2.as_slice()).collect();
                let dz2 = bn_relu_backward(v, &mut g, bn2, st2, &trace.samples, &xhat2, &a2, d_trunk, trace.training);
                let mut da1 = Vec::with_capacity(trace.samples.len());
                for (s, dz) in trace.samples.iter().zip(&dz2) {
                    da1.push(conv3x3_backward(v, &mut g, w2, b2, &s.a1, dz, cc, s.height, s.width));
                }
                let xhat1: Vec<&[f64]> = trace.samples.iter().map(|s| s.xhat1.as_slice()).collect();
                let a1: Vec<&[f64]> = trace.samples.iter().map(|s| s.a1.as_slice()).collect();
                let dz1 = bn_relu_backward(v, &mut g, bn1, st1, &trace.samples, &xhat1, &a1, da1, trace.training);
                for (s, dz) in trace.samples.iter().zip(&dz1) {
                    conv1x1_backward(&mut g, w1, b1, &s.input, dz, ci, cc, s.cells());
                }
            }
        }
        Ok(g)
    }
}

/// `W x + b` with `W` stored `[out, in]`.
fn dense(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let cin = x.len();
    (0..out)
        .map(|o| b[o] + w[o * cin..(o + 1) * cin].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn dense_backward(
    v: &[f64],
    g: &mut [f64],
    w: &Range<usize>,
    b: &Range<usize>,
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
) {
    let cin = x.len();
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g[b.start + o] += d;
        let row = w.start + o * cin;
        for i in 0..cin {
            g[row + i] += d * x[i];
            dx[i] += d * v[row + i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1x1_backward(
    g: &mut [f64],
    w: &Range<usize>,
    b: &Range<usize>,
    x: &[f64],
    dz: &[f64],
    cin: usize,
    cout: usize,
    cells: usize,
) {
    for o in 0..cout {
        let dzo = &dz[o * cells..(o + 1) * cells];
        g[b.start + o] += dzo.iter().sum::<f64>();
        for i in 0..cin {
            let xi = &x[i * cells..(i + 1) * cells];
            g[w.start + o * cin + i] += dzo.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    v: &[f64],
    g: &mut [f64],
    w: &Range<usize>,
    b: &Range<usize>,
    x: &[f64],
    dz: &[f64],
    c: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let cells = h * wd;
    let mut dx = vec![0.0; c * cells];
    for o in 0..c {
        g[b.start + o] += dz[o * cells..(o + 1) * cells].iter().sum::<f64>();
        for y in 0..h {
            for xx in 0..wd {
                let d = dz[o * cells + y * wd + xx];
                if d == 0.0 {
                    continue;
                }
                for i in 0..c {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let wi = w.start + ((o * c + i) * 3 + ky) * 3 + kx;
                            let xi = i * cells + sy as usize * wd + sx as usize;
                            g[wi] += d * x[xi];
                            dx[xi] += d * v[wi];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Backward through `relu(gamma * xhat + beta)` and the normalization.
#[allow(clippy::too_many_arguments)]
fn bn_relu_backward(
    v: &[f64],
    g: &mut [f64],
    bn: &BnLayout,
    stats: &BnStats,
    samples: &[SampleTrace],
    xhat: &[&[f64]],
    act: &[&[f64]],
    mut d_out: Vec<Vec<f64>>,
    training: bool,
) -> Vec<Vec<f64>> {
    let channels = stats.mean.len();
    // d_out becomes d xhat after this loop
    let mut sum_dx = vec![0.0; channels];
    let mut sum_dx_xhat = vec![0.0; channels];
    for (b, s) in samples.iter().enumerate() {
        let p = s.cells();
        for c in 0..channels {
            let gamma = v[bn.gamma.start + c];
            for q in 0..p {
                let i = c * p + q;
                let dn = if act[b][i] > 0.0 { d_out[b][i] } else { 0.0 };
                g[bn.gamma.start + c] += dn * xhat[b][i];
                g[bn.beta.start + c] += dn;
                let dxh = dn * gamma;
                d_out[b][i] = dxh;
                sum_dx[c] += dxh;
                sum_dx_xhat[c] += dxh * xhat[b][i];
            }
        }
    }
    let count = stats.count as f64;
    for (b, s) in samples.iter().enumerate() {
        let p = s.cells();
        for c in 0..channels {
            let inv = stats.inv_std[c];
            for q in 0..p {
                let i = c * p + q;
                d_out[b][i] = if training {
                    inv / count * (count * d_out[b][i] - sum_dx[c] - xhat[b][i] * sum_dx_xhat[c])
                } else {
                    d_out[b][i] * inv
                };
            }
        }
    }
    d_out
}

/// Forward pass for one image.
pub fn gate_forward(params: &GateParams, features: &FeatureMap, training: bool) -> Result<GateOutput> {
    let (mut out, _) = params.forward(&[features], training)?;
    Ok(out.remove(0))
}

/// Inference-mode forward over many images, one at a time; results follow input order.
pub fn gate_forward_batch(params: &GateParams, features: &[FeatureMap]) -> Result<Vec<GateOutput>> {
    features.iter().map(|f| gate_forward(params, f, false)).collect()
}
