//! Training objectives: mel reconstruction, hinge and least-squares
//! adversarial losses, feature matching and the weighted generator total.
//!
//! Each loss exists twice: a plain function over values, and a graph
//! version for training. Tests tie the two together.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::signal::{MelConfig, MelPlan, Waveform};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_mel: f64,
    pub lambda_vq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 2.0,
            lambda_mel: 45.0,
            lambda_vq: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_fm", self.lambda_fm), ("lambda_mel", self.lambda_mel), ("lambda_vq", self.lambda_vq)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanFlavor {
    Hinge,
    LeastSquares,
}

/// Scalar loss terms of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv: f64,
    pub fm: f64,
    pub mel: f64,
    pub vq: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean absolute difference of log-mel matrices.
pub fn mel_loss(x: &Waveform, x_hat: &Waveform, cfg: &MelConfig) -> Result<f64> {
    if x.len() != x_hat.len() || x.sample_rate() != x_hat.sample_rate() {
        return Err(Error::Shape(format!(
            "mel loss needs equal lengths and rates: {} @ {} vs {} @ {}",
            x.len(),
            x.sample_rate(),
            x_hat.len(),
            x_hat.sample_rate()
        )));
    }
    let a = crate::signal::mel_spectrogram(x, cfg)?;
    let b = crate::signal::mel_spectrogram(x_hat, cfg)?;
    Ok(mean(a.iter().flatten().zip(b.iter().flatten()).map(|(p, q)| (p - q).abs())))
}

pub fn hinge_d_loss(real: &[f64], fake: &[f64]) -> f64 {
    mean(real.iter().map(|d| (1.0 - d).max(0.0))) + mean(fake.iter().map(|d| (1.0 + d).max(0.0)))
}

pub fn hinge_g_loss(fake: &[f64]) -> f64 {
    mean(fake.iter().map(|d| (1.0 - d).max(0.0)))
}

pub fn lsgan_d_loss(real: &[f64], fake: &[f64]) -> f64 {
    mean(real.iter().map(|d| (1.0 - d) * (1.0 - d))) + mean(fake.iter().map(|d| d * d))
}

pub fn lsgan_g_loss(fake: &[f64]) -> f64 {
    mean(fake.iter().map(|d| (1.0 - d) * (1.0 - d)))
}

pub fn d_loss(flavor: GanFlavor, real: &[f64], fake: &[f64]) -> f64 {
    match flavor {
        GanFlavor::Hinge => hinge_d_loss(real, fake),
        GanFlavor::LeastSquares => lsgan_d_loss(real, fake),
    }
}

pub fn g_loss(flavor: GanFlavor, fake: &[f64]) -> f64 {
    match flavor {
        GanFlavor::Hinge => hinge_g_loss(fake),
        GanFlavor::LeastSquares => lsgan_g_loss(fake),
    }
}

/// Mean over maps of the mean absolute difference per map.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real maps vs {} fake maps", real.len(), fake.len())));
    }
    let mut per_map = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        if r.shape() != f.shape() {
            return Err(Error::Shape(format!("feature map {:?} vs {:?}", r.shape(), f.shape())));
        }
        per_map.push(mean(r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs())));
    }
    Ok(mean(per_map.into_iter()))
}

pub fn generator_total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.adv + w.lambda_fm * parts.fm + w.lambda_mel * parts.mel + w.lambda_vq * parts.vq
}

/// Log-mel L1 between the graph output `x_hat` and a fixed target.
pub fn mel_loss_graph(g: &mut Graph, x_hat: Var, target: &Tensor, plan: &Arc<MelPlan>) -> Result<Var> {
    if g.value(x_hat).shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mel loss: output {:?} vs target {:?}",
            g.value(x_hat).shape(),
            target.shape()
        )));
    }
    let m_hat = g.log_mel(x_hat, plan.clone());
    let t = g.constant(target.clone());
    let m = g.log_mel(t, plan.clone());
    let d = g.sub(m_hat, m);
    let a = g.unary(d, Unary::Abs);
    Ok(g.mean(a))
}

fn one_minus(g: &mut Graph, x: Var) -> Var {
    let n = g.scale(x, -1.0);
    g.offset(n, 1.0)
}

/// Discriminator loss summed over sub-discriminators.
pub fn d_loss_graph(g: &mut Graph, flavor: GanFlavor, real: &[Var], fake: &[Var]) -> Var {
    let mut terms = Vec::with_capacity(2 * real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let (a, b) = match flavor {
            GanFlavor::Hinge => {
                let a = one_minus(g, r);
                let b = g.offset(f, 1.0);
                (g.unary(a, Unary::Relu), g.unary(b, Unary::Relu))
            }
            GanFlavor::LeastSquares => {
                let a = one_minus(g, r);
                (g.unary(a, Unary::Square), g.unary(f, Unary::Square))
            }
        };
        terms.push(g.mean(a));
        terms.push(g.mean(b));
    }
    g.sum_all(&terms)
}

/// Adversarial generator loss summed over sub-discriminators.
pub fn g_adv_graph(g: &mut Graph, flavor: GanFlavor, fake: &[Var]) -> Var {
    let terms: Vec<Var> = fake
        .iter()
        .map(|&f| {
            let a = one_minus(g, f);
            let a = match flavor {
                GanFlavor::Hinge => g.unary(a, Unary::Relu),
                GanFlavor::LeastSquares => g.unary(a, Unary::Square),
            };
            g.mean(a)
        })
        .collect();
    g.sum_all(&terms)
}

/// Feature matching against fixed real maps.
pub fn feature_matching_graph(g: &mut Graph, real: &[Tensor], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real maps vs {} fake maps", real.len(), fake.len())));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (r, &f) in real.iter().zip(fake) {
        if r.shape() != g.value(f).shape() {
            return Err(Error::Shape("feature maps differ in shape".into()));
        }
        let rv = g.constant(r.clone());
        let d = g.sub(f, rv);
        let a = g.unary(d, Unary::Abs);
        terms.push(g.mean(a));
    }
    let s = g.sum_all(&terms);
    Ok(g.scale(s, 1.0 / real.len() as f64))
}

/// Graph nodes of the generator loss terms; absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub adv: Option<Var>,
    pub fm: Option<Var>,
    pub mel: Option<Var>,
    pub vq: Option<Var>,
}

pub fn total_graph(g: &mut Graph, parts: &LossVars, w: &LossWeights) -> Var {
    let mut terms = Vec::new();
    for (v, weight) in [(parts.adv, 1.0), (parts.fm, w.lambda_fm), (parts.mel, w.lambda_mel), (parts.vq, w.lambda_vq)] {
        if let Some(v) = v {
            terms.push(g.scale(v, weight));
        }
    }
    if terms.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    g.sum_all(&terms)
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossParts {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossParts {
            adv: val(self.adv),
            fm: val(self.fm),
            mel: val(self.mel),
            vq: val(self.vq),
        }
    }
}
