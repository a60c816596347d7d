//! The gating network and the weighting of raw expert outputs.
//!
//! A gate maps the concatenated expert feature maps of one image to expert
//! weights. Those weights scale the *raw* (pre-activation) expert tensors
//! before decoding: `y~_i = w_i * y_i`.
//!
//! Three gate layouts are supported:
//!
//! * single: one weight vector per image;
//! * spatial: one weight vector per feature cell, bilinearly resampled onto
//!   every output level;
//! * classwise: one weight vector per class (scaling that class's logit) plus
//!   a shared vector for box and objectness channels.

mod network;

pub use network::{
    gate_forward, gate_forward_batch, Architecture, ForwardTrace, GateMode, GateParams, GateSpec,
    ParamTensor, RowGrads, DEFAULT_CONV_CHANNELS, DEFAULT_HIDDEN, BATCHNORM_EPS, BATCHNORM_MOMENTUM,
};

use serde::{Deserialize, Serialize};

use crate::decode::{AnchorConfig, RawPredictionTensor, BOX_CHANNELS};
use crate::error::{Error, Result};

/// Concatenated expert features for one image, `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Which layer the features were taken from, e.g. `backbone-last`.
    pub provenance: String,
    /// Experts whose channel blocks make up `channels`, in order.
    pub expert_ids: Vec<String>,
}

impl FeatureMap {
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.channels * self.height * self.width {
            return Err(Error::input(format!(
                "feature map {}: data length {} != {}x{}x{}",
                self.image_id,
                self.data.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if self.expert_ids.is_empty() || !self.channels.is_multiple_of(self.expert_ids.len()) {
            return Err(Error::input(format!(
                "feature map {}: {} channels cannot be split evenly over {} experts",
                self.image_id,
                self.channels,
                self.expert_ids.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("feature map {} has non-finite entries", self.image_id)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Per-cell expert weights, `[height, width, experts]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub height: usize,
    pub width: usize,
    pub experts: usize,
    pub data: Vec<f64>,
}

impl WeightGrid {
    pub fn constant(height: usize, width: usize, weights: &[f64]) -> Self {
        let mut data = Vec::with_capacity(height * width * weights.len());
        for _ in 0..height * width {
            data.extend_from_slice(weights);
        }
        Self {
            height,
            width,
            experts: weights.len(),
            data,
        }
    }

    pub fn row(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.experts;
        &self.data[o..o + self.experts]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.experts)
    }
}

/// Expert weights predicted (or fixed) for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GateOutput {
    Single { weights: Vec<f64> },
    Spatial { grid: WeightGrid },
    Classwise { shared: Vec<f64>, per_class: Vec<Vec<f64>> },
}

impl GateOutput {
    pub fn expert_count(&self) -> usize {
        match self {
            GateOutput::Single { weights } => weights.len(),
            GateOutput::Spatial { grid } => grid.experts,
            GateOutput::Classwise { shared, .. } => shared.len(),
        }
    }

    /// Every weight vector carried by this output.
    pub fn rows(&self) -> Vec<&[f64]> {
        match self {
            GateOutput::Single { weights } => vec![weights.as_slice()],
            GateOutput::Spatial { grid } => grid.rows().collect(),
            GateOutput::Classwise { shared, per_class } => std::iter::once(shared.as_slice())
                .chain(per_class.iter().map(Vec::as_slice))
                .collect(),
        }
    }

    /// Mean of all weight vectors; equals the weights in single mode.
    pub fn mean_weights(&self) -> Vec<f64> {
        let rows = self.rows();
        let mut m = vec![0.0; self.expert_count()];
        for r in &rows {
            for (a, v) in m.iter_mut().zip(r.iter()) {
                *a += v;
            }
        }
        let k = rows.len() as f64;
        m.iter_mut().for_each(|v| *v /= k);
        m
    }

    /// True when expert `i` receives weight exactly zero everywhere.
    pub fn is_silent(&self, expert: usize) -> bool {
        self.rows().iter().all(|r| r[expert] == 0.0)
    }

    /// Checks that every weight vector lies on the probability simplex.
    pub fn on_simplex(&self, tol: f64) -> bool {
        self.rows()
            .iter()
            .all(|r| r.iter().all(|&v| v >= -tol) && (r.iter().sum::<f64>() - 1.0).abs() <= tol)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Source taps along one axis: `(i0, i1, frac)` per output index, using
/// half-pixel centers and clamping at the edges.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear resampling of a weight grid to `(height, width)`.
///
/// Uses the half-pixel (align-corners = false) convention with edge clamping.
/// Each output row is a convex combination of input rows, so simplex rows stay
/// on the simplex and a constant grid stays exactly constant.
pub fn bilinear_resample(grid: &WeightGrid, height: usize, width: usize) -> WeightGrid {
    assert!(grid.height >= 1 && grid.width >= 1, "empty weight grid");
    if grid.height == height && grid.width == width {
        return grid.clone();
    }
    let ty = axis_taps(grid.height, height);
    let tx = axis_taps(grid.width, width);
    let n = grid.experts;
    let mut data = Vec::with_capacity(height * width * n);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for e in 0..n {
                let top = lerp(grid.row(y0, x0)[e], grid.row(y0, x1)[e], fx);
                let bottom = lerp(grid.row(y1, x0)[e], grid.row(y1, x1)[e], fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    WeightGrid {
        height,
        width,
        experts: n,
        data,
    }
}

/// Linear taps of [`bilinear_resample`]: for each output cell, the input cells
/// and coefficients it mixes. Used to back-propagate through the resampling.
pub(crate) fn bilinear_taps(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<Vec<(usize, f64)>> {
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let mut taps = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let mut cell: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        cell.push((yy * in_w + xx, w));
                    }
                }
            }
            taps.push(cell);
        }
    }
    taps
}

/// Scales every expert's raw tensor by its gate weights.
///
/// Weights are not required to lie on the simplex, which lets callers run
/// identity and fixed-weight ablations through the same path.
pub fn apply_expert_weights(
    raws: &[RawPredictionTensor],
    out: &GateOutput,
    cfg: &AnchorConfig,
) -> Result<Vec<RawPredictionTensor>> {
    if raws.len() != out.expert_count() {
        return Err(Error::config(format!(
            "{} expert tensors but gate output has {} experts",
            raws.len(),
            out.expert_count()
        )));
    }
    if let GateOutput::Classwise { per_class, .. } = out {
        if per_class.len() != cfg.class_count {
            return Err(Error::config(format!(
                "class-wise gate has {} class heads, anchor config has {} classes",
                per_class.len(),
                cfg.class_count
            )));
        }
    }
    raws.iter()
        .enumerate()
        .map(|(i, raw)| {
            raw.validate(cfg)?;
            let mut weighted = raw.clone();
            for t in weighted.levels.iter_mut() {
                match out {
                    GateOutput::Single { weights } => {
                        let w = weights[i];
                        t.data.iter_mut().for_each(|v| *v = (*v as f64 * w) as f32);
                    }
                    GateOutput::Spatial { grid } => {
                        let g = bilinear_resample(grid, t.height, t.width);
                        for a in 0..t.anchors {
                            for cy in 0..t.height {
                                for cx in 0..t.width {
                                    let w = g.row(cy, cx)[i];
                                    t.cell_mut(a, cy, cx).iter_mut().for_each(|v| *v = (*v as f64 * w) as f32);
                                }
                            }
                        }
                    }
                    GateOutput::Classwise { shared, per_class } => {
                        let ch = t.channels;
                        for cell in t.data.chunks_mut(ch) {
                            for (c, v) in cell.iter_mut().enumerate() {
                                let w = if c < BOX_CHANNELS {
                                    shared[i]
                                } else {
                                    per_class[c - BOX_CHANNELS][i]
                                };
                                *v = (*v as f64 * w) as f32;
                            }
                        }
                    }
                }
            }
            Ok(weighted)
        })
        .collect()
}

/// A constant single-mode output that ignores the input image.
pub fn fixed_weight_output(weights: &[f64], expert_count: usize) -> Result<GateOutput> {
    if weights.len() != expert_count {
        return Err(Error::config(format!(
            "{} fixed weights given for {expert_count} experts",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::config("fixed weights must be finite"));
    }
    Ok(GateOutput::Single {
        weights: weights.to_vec(),
    })
}
