//! Nadaraya-Watson estimation over a key-value cache and the matching
//! attention-side estimate.
//!
//! With unit-norm keys and query, `||k - q||^2 = 2 (1 - k.q)`, so every
//! distance-based kernel can be rewritten in terms of attention scores.
//! The `verify_*` functions compute both sides independently and report the
//! largest discrepancy.

use serde::Serialize;
use thiserror::Error;

use crate::kernels::{dot_to_sqdist, kernel_weight, KernelError, KernelKind, KernelSpec};
use crate::transforms::{entmax, topk_indices, Transform, TransformError, TransformSpec};

/// Allowed deviation from unit norm after construction.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("cache must hold at least one key")]
    EmptyCache,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("zero-norm key or query cannot be normalized")]
    ZeroVector,
    #[error("all kernel weights are zero")]
    DegenerateSupport,
    #[error("threshold {tau} gives a negative squared bandwidth {radicand}")]
    InvalidThreshold { tau: f64, radicand: f64 },
    #[error("alpha {0} is not of the form 1 + 1/r for a positive integer r")]
    NotPolynomialAlpha(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Stored pairs `(k_i, v_i)` for `i < n` plus the query `q = k_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValueCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    query: Vec<f64>,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>, RegressionError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RegressionError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl KeyValueCache {
    /// Builds a cache, re-normalizing the keys and the query to unit length.
    pub fn new(
        keys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        query: Vec<f64>,
    ) -> Result<Self, RegressionError> {
        if keys.is_empty() {
            return Err(RegressionError::EmptyCache);
        }
        if keys.len() != values.len() {
            return Err(RegressionError::Shape(format!(
                "{} keys but {} values",
                keys.len(),
                values.len()
            )));
        }
        let d = query.len();
        if let Some(k) = keys.iter().find(|k| k.len() != d) {
            return Err(RegressionError::Shape(format!(
                "key of length {} for query of length {d}",
                k.len()
            )));
        }
        let dv = values[0].len();
        if values.iter().any(|v| v.len() != dv) {
            return Err(RegressionError::Shape("ragged values".into()));
        }
        let keys = keys.iter().map(|k| normalized(k)).collect::<Result<_, _>>()?;
        let query = normalized(&query)?;
        Ok(Self { keys, values, query })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    /// Attention scores `K q`.
    pub fn scores(&self) -> Vec<f64> {
        self.keys
            .iter()
            .map(|k| k.iter().zip(&self.query).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Squared distances `||k_i - q||^2` via the unit-norm identity.
    pub fn sq_dists(&self) -> Result<Vec<f64>, RegressionError> {
        self.scores()
            .into_iter()
            .map(|s| dot_to_sqdist(s).map_err(Into::into))
            .collect()
    }

    /// `sum_i w_i v_i` for weights `w`.
    pub fn combine(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.values[0].len()];
        for (w, v) in weights.iter().zip(&self.values) {
            if *w != 0.0 {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += w * x;
                }
            }
        }
        out
    }
}

/// Normalized Nadaraya-Watson weights for `spec` over the cache.
pub fn nw_weights(cache: &KeyValueCache, spec: &KernelSpec) -> Result<Vec<f64>, RegressionError> {
    let d2 = cache.sq_dists()?;
    let h2 = spec.bandwidth * spec.bandwidth;
    let raw: Vec<f64> = match spec.kind {
        KernelKind::TruncatedGaussian { k } => {
            if k == 0 || k > d2.len() {
                return Err(TransformError::InvalidK { k, n: d2.len() }.into());
            }
            let mut w = vec![0.0; d2.len()];
            // nearest = largest dot product = smallest distance
            let neg: Vec<f64> = d2.iter().map(|x| -x).collect();
            for i in topk_indices(&neg, k) {
                w[i] = kernel_weight(&KernelSpec::new(KernelKind::Gaussian, spec.bandwidth), d2[i])?;
            }
            w
        }
        KernelKind::RelumaxKernel { b } => {
            let s = cache.scores();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            s.iter().map(|&x| (b + (x - m) / h2).max(0.0)).collect()
        }
        _ => d2
            .iter()
            .map(|&x| kernel_weight(spec, x))
            .collect::<Result<_, _>>()?,
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(RegressionError::DegenerateSupport);
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Kernel-weighted average of the stored values.
pub fn nadaraya_watson(cache: &KeyValueCache, spec: &KernelSpec) -> Result<Vec<f64>, RegressionError> {
    Ok(cache.combine(&nw_weights(cache, spec)?))
}

/// `V^T pi(K q / gamma)`.
pub fn attention_estimate(
    cache: &KeyValueCache,
    spec: &TransformSpec,
) -> Result<Vec<f64>, RegressionError> {
    let p = spec.apply(&cache.scores())?;
    Ok(cache.combine(&p.weights))
}

/// Bandwidth `sqrt(2 - 2 r gamma tau)` at which the order-`r` rectified
/// polynomial kernel reproduces entmax with threshold `tau`.
pub fn recover_bandwidth(tau: f64, gamma: f64, r: u32) -> Result<f64, RegressionError> {
    let radicand = 2.0 - 2.0 * r as f64 * gamma * tau;
    if !(radicand >= 0.0) {
        return Err(RegressionError::InvalidThreshold { tau, radicand });
    }
    Ok(radicand.sqrt())
}

/// Kernel order `r` with `alpha = 1 + 1/r`, allowing a small rounding slack
/// so that `1.3333333333` maps to 3.
pub fn polynomial_order(alpha: f64) -> Result<u32, RegressionError> {
    if !(alpha > 1.0 && alpha <= 2.0 + 1e-9) {
        return Err(RegressionError::NotPolynomialAlpha(alpha));
    }
    let r = (1.0 / (alpha - 1.0)).round();
    if r < 1.0 || (1.0 + 1.0 / r - alpha).abs() > 1e-6 {
        return Err(RegressionError::NotPolynomialAlpha(alpha));
    }
    Ok(r as u32)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EquivalenceReport {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub recovered_bandwidth: f64,
    /// Infinity-norm gap between the attention and kernel estimates.
    pub max_abs_diff: f64,
    /// Infinity-norm gap between the two weight vectors.
    pub max_weight_diff: f64,
    pub degenerate: bool,
}

/// Compares entmax attention at temperature `gamma` with rectified-polynomial
/// Nadaraya-Watson regression at the recovered adaptive bandwidth.
pub fn verify_equivalence(
    cache: &KeyValueCache,
    alpha: f64,
    gamma: f64,
) -> Result<EquivalenceReport, RegressionError> {
    let r = polynomial_order(alpha)?;
    let alpha = 1.0 + 1.0 / r as f64;
    let p = entmax(&cache.scores(), alpha, gamma)?;
    let tau = p.threshold.expect("entmax reports its threshold");
    let h = recover_bandwidth(tau, gamma, r)?;
    let attn = cache.combine(&p.weights);
    let mut report = EquivalenceReport {
        alpha,
        gamma,
        tau,
        recovered_bandwidth: h,
        max_abs_diff: 0.0,
        max_weight_diff: 0.0,
        degenerate: false,
    };
    if h == 0.0 {
        report.degenerate = true;
        return Ok(report);
    }
    let w = match nw_weights(cache, &KernelSpec::new(KernelKind::RectPoly { order: r }, h)) {
        Ok(w) => w,
        Err(RegressionError::DegenerateSupport) => {
            report.degenerate = true;
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let kern = cache.combine(&w);
    report.max_abs_diff = inf_norm_diff(&attn, &kern);
    report.max_weight_diff = inf_norm_diff(&p.weights, &w);
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct DiffReport {
    pub max_abs_diff: f64,
    /// Both sides had empty support; the comparison is vacuous.
    pub degenerate: bool,
}

/// Normalized ReLU attention with `gamma = h^2/2`, `b = 1 - 2/h^2` against
/// Epanechnikov regression at bandwidth `h`.
pub fn verify_normrelu_epanechnikov(
    cache: &KeyValueCache,
    h: f64,
) -> Result<DiffReport, RegressionError> {
    let h2 = h * h;
    let spec = TransformSpec::new(Transform::NormRelu { b: 1.0 - 2.0 / h2 }, h2 / 2.0);
    let p = spec.apply(&cache.scores())?;
    match nadaraya_watson(cache, &KernelSpec::new(KernelKind::EPANECHNIKOV, h)) {
        Ok(kern) if !p.degenerate => Ok(DiffReport {
            max_abs_diff: inf_norm_diff(&cache.combine(&p.weights), &kern),
            degenerate: false,
        }),
        Err(RegressionError::DegenerateSupport) if p.degenerate => Ok(DiffReport {
            max_abs_diff: 0.0,
            degenerate: true,
        }),
        Err(RegressionError::DegenerateSupport) | Ok(_) => Ok(DiffReport {
            max_abs_diff: f64::INFINITY,
            degenerate: false,
        }),
        Err(e) => Err(e),
    }
}

/// Radius admitting exactly the `k` nearest keys (ties aside).
pub fn knn_radius(cache: &KeyValueCache, k: usize) -> Result<f64, RegressionError> {
    let mut d2 = cache.sq_dists()?;
    if k == 0 || k > d2.len() {
        return Err(TransformError::InvalidK { k, n: d2.len() }.into());
    }
    d2.sort_by(f64::total_cmp);
    let target = d2[k - 1];
    let mut r = target.sqrt();
    while r * r < target {
        r = r.next_up();
    }
    Ok(r)
}

pub fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
