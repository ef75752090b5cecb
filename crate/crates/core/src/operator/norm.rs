//! Group normalization with trapezoid-rule spatial averages, and the
//! pointwise activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFunction;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub channels: usize,
    /// Channels per group; the last group may be smaller.
    pub group_size: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Saved quantities for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: GridFunction,
    /// Per group `(std, eps + std)`.
    pub stats: Vec<(f64, f64)>,
}

/// Groups of `preferred` channels, or a single group when fewer channels exist.
pub fn group_size_for(channels: usize, preferred: usize) -> usize {
    if channels < preferred {
        channels
    } else {
        preferred
    }
}

impl GroupNorm {
    pub fn new(channels: usize, group_size: usize, eps: f64) -> Self {
        Self { channels, group_size: group_size.max(1), gamma: vec![1.0; channels], beta: vec![0.0; channels], eps }
    }

    pub fn groups(&self) -> usize {
        self.channels.div_ceil(self.group_size)
    }

    fn range(&self, g: usize) -> std::ops::Range<usize> {
        g * self.group_size..((g + 1) * self.group_size).min(self.channels)
    }

    pub fn forward(&self, x: &GridFunction) -> Result<(GridFunction, NormCache)> {
        if x.channels != self.channels {
            return Err(Error::ShapeMismatch(format!("norm expects {} channels, got {}", self.channels, x.channels)));
        }
        let q = x.spec.quad_weights();
        let area: f64 = q.iter().sum();
        let c = self.channels;
        let mut xhat = GridFunction::zeros(x.spec, c);
        let mut out = GridFunction::zeros(x.spec, c);
        let mut stats = Vec::with_capacity(self.groups());
        for g in 0..self.groups() {
            let r = self.range(g);
            let n = area * r.len() as f64;
            let mut mean = 0.0;
            for (p, w) in q.iter().enumerate() {
                for l in r.clone() {
                    mean += w * x.data[p * c + l];
                }
            }
            mean /= n;
            let mut var = 0.0;
            for (p, w) in q.iter().enumerate() {
                for l in r.clone() {
                    var += w * (x.data[p * c + l] - mean).powi(2);
                }
            }
            let s = (var / n).sqrt();
            let den = self.eps + s;
            for p in 0..q.len() {
                for l in r.clone() {
                    let h = (x.data[p * c + l] - mean) / den;
                    xhat.data[p * c + l] = h;
                    out.data[p * c + l] = h * self.gamma[l] + self.beta[l];
                }
            }
            stats.push((s, den));
        }
        Ok((out, NormCache { xhat, stats }))
    }

    /// Accumulates `dgamma`, `dbeta` into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &NormCache, dy: &GridFunction, grad: &mut GroupNorm) -> GridFunction {
        let c = self.channels;
        let spec = dy.spec;
        let q = spec.quad_weights();
        let area: f64 = q.iter().sum();
        let xh = &cache.xhat;
        let mut dx = GridFunction::zeros(spec, c);
        for g in 0..self.groups() {
            let r = self.range(g);
            let n = area * r.len() as f64;
            let (s, den) = cache.stats[g];
            // With c = x - m and xhat = c / den:
            // dx = dxh/den - q/(n den) sum(dxh) - q c/(n s den^2) sum(dxh c).
            let mut sum_d = 0.0;
            let mut sum_dc = 0.0;
            for p in 0..q.len() {
                for l in r.clone() {
                    let k = p * c + l;
                    let d = dy.data[k] * self.gamma[l];
                    grad.gamma[l] += dy.data[k] * xh.data[k];
                    grad.beta[l] += dy.data[k];
                    sum_d += d;
                    sum_dc += d * xh.data[k] * den;
                }
            }
            let var_term = if s > 0.0 { sum_dc / (n * s * den * den) } else { 0.0 };
            for (p, w) in q.iter().enumerate() {
                for l in r.clone() {
                    let k = p * c + l;
                    let d = dy.data[k] * self.gamma[l];
                    let cval = xh.data[k] * den;
                    dx.data[k] = d / den - w * sum_d / (n * den) - w * cval * var_term;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh approximation of the Gaussian error linear unit.
    #[default]
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Tanh),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    pub fn map(self, f: &GridFunction) -> GridFunction {
        GridFunction { spec: f.spec, channels: f.channels, data: f.data.iter().map(|&v| self.apply(v)).collect() }
    }
}
