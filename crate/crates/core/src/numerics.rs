//! Dense vector primitives, softmax and the divergences used by every loss.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Norms below this are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// A probability distribution over a contiguous class set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that every entry lies in `[0, 1]` and the entries sum to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if let Some(bad) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::Numeric(format!(
                "probability entry {bad} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Numeric(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what}[{i}] = {}", values[i]))),
        None => Ok(()),
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Numeric(format!(
            "temperature {temperature} must be positive"
        )));
    }
    ensure_finite(logits, "logits")?;
    Ok(ProbVector(softmax_unchecked(logits, temperature)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)`, with `q` clamped at [`LOG_CLAMP`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(p.len(), q.len()));
    }
    Ok(kl_unchecked(p.as_slice(), q.as_slice()))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(LOG_CLAMP).ln() - qi.max(LOG_CLAMP).ln()))
        .sum();
    // rounding can leave a tiny negative residue when p == q
    kl.max(0.0)
}

/// `-ln(max(p[label], LOG_CLAMP))`.
pub fn cross_entropy(p: &ProbVector, label: usize) -> Result<f64> {
    let prob = p.as_slice().get(label).ok_or(Error::Index {
        index: label,
        len: p.len(),
    })?;
    Ok(-prob.max(LOG_CLAMP).ln())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector is degenerate.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
