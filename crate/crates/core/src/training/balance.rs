//! Load-balancing losses over gate outputs and their gradients.
//!
//! Every loss is zero at the balanced configuration and non-negative
//! elsewhere. Spatial and class-wise outputs enter through the mean of their
//! weight rows (importance-based losses) or through the mean over rows
//! (per-sample losses).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateOutput;

/// Guard inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    None,
    Importance,
    Kl,
    BatchEntropy,
    #[default]
    SampleEntropy,
}

impl Balancing {
    pub const ALL: [Balancing; 5] = [
        Self::None,
        Self::Importance,
        Self::Kl,
        Self::BatchEntropy,
        Self::SampleEntropy,
    ];
}

impl fmt::Display for Balancing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::None => "none",
            Self::Importance => "importance",
            Self::Kl => "kl",
            Self::BatchEntropy => "batch_entropy",
            Self::SampleEntropy => "sample_entropy",
        })
    }
}

impl FromStr for Balancing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown balancing loss {s:?}")))
    }
}

/// Per-expert sum of (row-averaged) gate weights over a batch.
pub fn importance(outputs: &[GateOutput]) -> Result<Vec<f64>> {
    let first = outputs.first().ok_or_else(|| Error::input("importance of an empty batch"))?;
    let mut total = vec![0.0; first.expert_count()];
    for o in outputs {
        if o.expert_count() != total.len() {
            return Err(Error::input("gate outputs disagree on expert count"));
        }
        for (t, w) in total.iter_mut().zip(o.mean_weights()) {
            *t += w;
        }
    }
    Ok(total)
}

fn check_importance(imp: &[f64]) -> Result<f64> {
    let sum: f64 = imp.iter().sum();
    if imp.is_empty() || sum <= 0.0 || !sum.is_finite() {
        return Err(Error::input("importance vector must have a positive sum"));
    }
    Ok(sum)
}

/// Squared coefficient of variation `Var(I) / Mean(I)^2` (population variance).
pub fn importance_loss(imp: &[f64]) -> Result<f64> {
    let sum = check_importance(imp)?;
    let n = imp.len() as f64;
    let mean = sum / n;
    let var = imp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var / (mean * mean))
}

/// `KL(p || uniform) = sum p ln(p n)` with `p = I / sum I`.
pub fn kl_uniform_loss(imp: &[f64]) -> Result<f64> {
    let sum = check_importance(imp)?;
    let n = imp.len() as f64;
    Ok(imp
        .iter()
        .map(|v| {
            let p = v / sum;
            p * ((p + LOG_EPS) * n).ln()
        })
        .sum())
}

/// `ln n - H(p)` for the normalized importance.
pub fn batch_entropy_loss(imp: &[f64]) -> Result<f64> {
    let sum = check_importance(imp)?;
    let n = imp.len() as f64;
    Ok(n.ln() - entropy(imp.iter().map(|v| v / sum)))
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.map(|p| p * (p + LOG_EPS).ln()).sum::<f64>()
}

/// Mean over samples (and over each sample's weight rows) of `ln n - H(w)`.
pub fn samplewise_entropy_loss(outputs: &[GateOutput]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::input("sample-wise entropy of an empty batch"));
    }
    let total: f64 = outputs
        .iter()
        .map(|o| {
            let rows = o.rows();
            let ln_n = (o.expert_count() as f64).ln();
            rows.iter().map(|r| ln_n - entropy(r.iter().copied())).sum::<f64>() / rows.len() as f64
        })
        .sum();
    Ok(total / outputs.len() as f64)
}

/// Mean of `-ln(w_label + eps)` over the batch (and over weight rows).
pub fn domain_ce_loss(outputs: &[GateOutput], labels: &[usize]) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(Error::input(format!(
            "{} gate outputs for {} domain labels",
            outputs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (o, &label) in outputs.iter().zip(labels) {
        if label >= o.expert_count() {
            return Err(Error::input(format!(
                "domain label {label} out of range for {} experts",
                o.expert_count()
            )));
        }
        let rows = o.rows();
        total += rows.iter().map(|r| -(r[label] + LOG_EPS).ln()).sum::<f64>() / rows.len() as f64;
    }
    Ok(total / outputs.len() as f64)
}

pub fn total_loss(task: f64, balancing: f64, lambda: f64) -> f64 {
    task + lambda * balancing
}

/// Value of the selected balancing loss; `None` gives 0.
pub fn balancing_loss(kind: Balancing, outputs: &[GateOutput]) -> Result<f64> {
    match kind {
        Balancing::None => Ok(0.0),
        Balancing::Importance => importance_loss(&importance(outputs)?),
        Balancing::Kl => kl_uniform_loss(&importance(outputs)?),
        Balancing::BatchEntropy => batch_entropy_loss(&importance(outputs)?),
        Balancing::SampleEntropy => samplewise_entropy_loss(outputs),
    }
}

/// Gradient of the selected balancing loss with respect to every weight row,
/// scaled by `scale` and added into `grads` (one entry per sample, rows in
/// [`GateOutput::rows`] order).
pub(crate) fn add_balancing_grad(kind: Balancing, outputs: &[GateOutput], scale: f64, grads: &mut [Vec<Vec<f64>>]) -> Result<()> {
    if kind == Balancing::None || scale == 0.0 {
        return Ok(());
    }
    if kind == Balancing::SampleEntropy {
        let b = outputs.len() as f64;
        for (o, g) in outputs.iter().zip(grads.iter_mut()) {
            let rows = o.rows();
            let r = rows.len() as f64;
            for (row, gr) in rows.iter().zip(g.iter_mut()) {
                for (w, gw) in row.iter().zip(gr.iter_mut()) {
                    *gw += scale * ((w + LOG_EPS).ln() + w / (w + LOG_EPS)) / (r * b);
                }
            }
        }
        return Ok(());
    }
    let imp = importance(outputs)?;
    let sum = check_importance(&imp)?;
    let n = imp.len() as f64;
    let d_imp: Vec<f64> = match kind {
        Balancing::Importance => {
            let mean = sum / n;
            let var = imp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            imp.iter()
                .map(|v| 2.0 * (v - mean) / n / (mean * mean) - 2.0 * var / (mean * mean * mean) / n)
                .collect()
        }
        Balancing::Kl | Balancing::BatchEntropy => {
            // both reduce to sum p ln(p + eps) + const on the simplex
            let p: Vec<f64> = imp.iter().map(|v| v / sum).collect();
            let dp: Vec<f64> = p
                .iter()
                .map(|&p| {
                    let base = (p + LOG_EPS).ln() + p / (p + LOG_EPS);
                    if kind == Balancing::Kl {
                        base + n.ln()
                    } else {
                        base
                    }
                })
                .collect();
            let dot: f64 = dp.iter().zip(&p).map(|(a, b)| a * b).sum();
            dp.iter().map(|d| (d - dot) / sum).collect()
        }
        Balancing::None | Balancing::SampleEntropy => unreachable!(),
    };
    for (o, g) in outputs.iter().zip(grads.iter_mut()) {
        let r = o.rows().len() as f64;
        for gr in g.iter_mut() {
            for (gw, d) in gr.iter_mut().zip(&d_imp) {
                *gw += scale * d / r;
            }
        }
    }
    Ok(())
}

/// Gradient of [`domain_ce_loss`] with respect to every weight row.
pub(crate) fn add_domain_ce_grad(outputs: &[GateOutput], labels: &[usize], scale: f64, grads: &mut [Vec<Vec<f64>>]) {
    let b = outputs.len() as f64;
    for ((o, &label), g) in outputs.iter().zip(labels).zip(grads.iter_mut()) {
        let rows = o.rows();
        let r = rows.len() as f64;
        for (row, gr) in rows.iter().zip(g.iter_mut()) {
            gr[label] -= scale / ((row[label] + LOG_EPS) * r * b);
        }
    }
}
