//! Score-to-simplex transforms.
//!
//! Every transform maps a finite score vector onto the probability simplex.
//! A temperature `gamma` divides the scores before the map is applied. The
//! sparse transforms also report their threshold and support set, which the
//! regression module uses to recover the equivalent kernel bandwidth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stopping tolerance on the entmax normalization residual.
pub const ENTMAX_TOL: f64 = 1e-12;
/// Iteration cap for entmax bisection.
pub const ENTMAX_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("scores must be finite and non-empty")]
    InvalidScores,
    #[error("alpha must be > 1 (got {0}); request softmax explicitly")]
    InvalidAlpha(f64),
    #[error("k must satisfy 1 <= k <= n (k = {k}, n = {n})")]
    InvalidK { k: usize, n: usize },
    #[error("temperature must be positive and finite (got {0})")]
    InvalidGamma(f64),
    #[error("offset b must be positive for relumax (got {0})")]
    InvalidOffset(f64),
    #[error("direction vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// The transform family, with the parameters each member needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Softmax,
    Sparsemax,
    Entmax { alpha: f64 },
    NormRelu { b: f64 },
    Relumax { b: f64 },
    TopkUniform { k: usize },
    TopkSoftmax { k: usize },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::Softmax => "softmax",
            Transform::Sparsemax => "sparsemax",
            Transform::Entmax { .. } => "entmax",
            Transform::NormRelu { .. } => "norm_relu",
            Transform::Relumax { .. } => "relumax",
            Transform::TopkUniform { .. } => "topk_uniform",
            Transform::TopkSoftmax { .. } => "topk_softmax",
        }
    }

    /// Whether `transform(z + c) == transform(z)` for every constant `c`.
    pub fn is_shift_invariant(&self) -> bool {
        !matches!(self, Transform::NormRelu { .. })
    }

    /// Conventional temperature for a head of width `head_dim`: `1/sqrt(d)`
    /// for the Gaussian family, 1 for the compact kernels.
    pub fn default_gamma(&self, head_dim: usize) -> f64 {
        match self {
            Transform::Softmax | Transform::TopkSoftmax { .. } => 1.0 / (head_dim as f64).sqrt(),
            _ => 1.0,
        }
    }
}

/// A transform together with its temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub transform: Transform,
    pub gamma: f64,
}

impl TransformSpec {
    pub fn new(transform: Transform, gamma: f64) -> Self {
        Self { transform, gamma }
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        check_gamma(self.gamma)?;
        match self.transform {
            Transform::Entmax { alpha } if !(alpha > 1.0 && alpha.is_finite()) => {
                Err(TransformError::InvalidAlpha(alpha))
            }
            Transform::Relumax { b } if !(b > 0.0 && b.is_finite()) => {
                Err(TransformError::InvalidOffset(b))
            }
            Transform::NormRelu { b } if !b.is_finite() => Err(TransformError::InvalidOffset(b)),
            Transform::TopkUniform { k } | Transform::TopkSoftmax { k } if k == 0 => {
                Err(TransformError::InvalidK { k, n: 0 })
            }
            _ => Ok(()),
        }
    }

    /// Copy with top-k sizes capped at `n`, for contexts shorter than `k`.
    pub fn capped_to(&self, n: usize) -> TransformSpec {
        let transform = match self.transform {
            Transform::TopkUniform { k } => Transform::TopkUniform { k: k.min(n) },
            Transform::TopkSoftmax { k } => Transform::TopkSoftmax { k: k.min(n) },
            ref t => t.clone(),
        };
        TransformSpec::new(transform, self.gamma)
    }

    pub fn apply(&self, z: &[f64]) -> Result<AttentionWeights, TransformError> {
        let g = self.gamma;
        match self.transform {
            Transform::Softmax => softmax(z, g),
            Transform::Sparsemax => sparsemax(z, g),
            Transform::Entmax { alpha } => entmax(z, alpha, g),
            Transform::NormRelu { b } => norm_relu(z, g, b),
            Transform::Relumax { b } => relumax(z, g, b),
            Transform::TopkUniform { k } => topk_uniform(z, k),
            Transform::TopkSoftmax { k } => topk_softmax(z, k, g),
        }
    }

    /// `J(z) v`.
    pub fn jvp(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>, TransformError> {
        transform_jvp(self, z, v)
    }

    /// `J(z)^T u`.
    pub fn vjp(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>, TransformError> {
        transform_vjp(self, z, u)
    }
}

/// A point on the simplex produced by a transform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
    /// Threshold `tau` for sparsemax and entmax; absent otherwise.
    pub threshold: Option<f64>,
    /// Indices with strictly positive weight, ascending.
    pub support: Vec<usize>,
    /// Set when normalized ReLU had an empty support and fell back to uniform.
    pub degenerate: bool,
}

impl AttentionWeights {
    fn from_weights(weights: Vec<f64>, threshold: Option<f64>) -> Self {
        let support = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect();
        Self {
            weights,
            threshold,
            support,
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_scores(z: &[f64]) -> Result<(), TransformError> {
    if z.is_empty() || z.iter().any(|x| !x.is_finite()) {
        return Err(TransformError::InvalidScores);
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<(), TransformError> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(TransformError::InvalidGamma(gamma))
    }
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn softmax_raw(z: &[f64], gamma: f64) -> Vec<f64> {
    let m = max_of(z);
    let mut out: Vec<f64> = z.iter().map(|&x| ((x - m) / gamma).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

pub fn softmax(z: &[f64], gamma: f64) -> Result<AttentionWeights, TransformError> {
    check_scores(z)?;
    check_gamma(gamma)?;
    let weights = softmax_raw(z, gamma);
    Ok(AttentionWeights {
        support: (0..z.len()).filter(|&i| weights[i] > 0.0).collect(),
        weights,
        threshold: None,
        degenerate: false,
    })
}

/// Sort-based threshold of the Euclidean projection of `x` onto the simplex.
fn sparsemax_threshold(x: &[f64]) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = sorted[0] - 1.0;
    for (j, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (j + 1) as f64;
        if 1.0 + k * v > cumsum {
            tau = (cumsum - 1.0) / k;
        } else {
            break;
        }
    }
    tau
}

pub fn sparsemax(z: &[f64], gamma: f64) -> Result<AttentionWeights, TransformError> {
    check_scores(z)?;
    check_gamma(gamma)?;
    let x: Vec<f64> = z.iter().map(|&v| v / gamma).collect();
    let tau = sparsemax_threshold(&x);
    let weights = x.iter().map(|&v| (v - tau).max(0.0)).collect();
    Ok(AttentionWeights::from_weights(weights, Some(tau)))
}

pub fn entmax(z: &[f64], alpha: f64, gamma: f64) -> Result<AttentionWeights, TransformError> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(TransformError::InvalidAlpha(alpha));
    }
    if alpha == 2.0 {
        return sparsemax(z, gamma);
    }
    check_scores(z)?;
    check_gamma(gamma)?;
    let am1 = alpha - 1.0;
    let power = 1.0 / am1;
    let x: Vec<f64> = z.iter().map(|&v| am1 * v / gamma).collect();
    let mass = |tau: f64| -> f64 {
        x.iter()
            .map(|&v| {
                let d = v - tau;
                if d > 0.0 {
                    d.powf(power)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            - 1.0
    };
    let xmax = max_of(&x);
    // f(lo) >= 0 because the arg-max entry alone contributes 1; f(hi) = -1.
    let mut lo = xmax - 1.0;
    let mut hi = xmax;
    let mut tau = lo;
    for _ in 0..ENTMAX_MAX_ITER {
        tau = 0.5 * (lo + hi);
        let f = mass(tau);
        if f.abs() <= ENTMAX_TOL {
            break;
        }
        if f > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
    }
    // A lone survivor has the exact threshold max - 1.
    let second = x
        .iter()
        .copied()
        .filter(|&v| v < xmax)
        .fold(f64::NEG_INFINITY, f64::max);
    let ties = x.iter().filter(|&&v| v == xmax).count();
    if ties == 1 && second <= tau {
        tau = xmax - 1.0;
    }
    let weights = x
        .iter()
        .map(|&v| {
            let d = v - tau;
            if d > 0.0 {
                d.powf(power)
            } else {
                0.0
            }
        })
        .collect();
    Ok(AttentionWeights::from_weights(weights, Some(tau)))
}

/// Tsallis alpha-entropy `(1 - sum p^alpha) / (alpha (alpha - 1))`.
pub fn tsallis_entropy(p: &[f64], alpha: f64) -> f64 {
    let s: f64 = p.iter().map(|&x| if x > 0.0 { x.powf(alpha) } else { 0.0 }).sum();
    (1.0 - s) / (alpha * (alpha - 1.0))
}

/// Normalized ReLU. An all-negative pre-activation falls back to uniform
/// weights with `degenerate` set.
pub fn norm_relu(z: &[f64], gamma: f64, b: f64) -> Result<AttentionWeights, TransformError> {
    check_scores(z)?;
    check_gamma(gamma)?;
    let r: Vec<f64> = z.iter().map(|&v| (v / gamma + b).max(0.0)).collect();
    let s: f64 = r.iter().sum();
    if s > 0.0 {
        Ok(AttentionWeights::from_weights(
            r.iter().map(|&v| v / s).collect(),
            None,
        ))
    } else {
        let n = z.len();
        Ok(AttentionWeights {
            weights: vec![1.0 / n as f64; n],
            threshold: None,
            support: (0..n).collect(),
            degenerate: true,
        })
    }
}

/// Index of the maximum, lower index on ties.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn relumax(z: &[f64], gamma: f64, b: f64) -> Result<AttentionWeights, TransformError> {
    check_scores(z)?;
    check_gamma(gamma)?;
    if !(b > 0.0 && b.is_finite()) {
        return Err(TransformError::InvalidOffset(b));
    }
    let m = z[argmax(z)];
    let r: Vec<f64> = z.iter().map(|&v| (b + (v - m) / gamma).max(0.0)).collect();
    let s: f64 = r.iter().sum();
    Ok(AttentionWeights::from_weights(
        r.iter().map(|&v| v / s).collect(),
        None,
    ))
}

/// Indices of the `k` largest scores, stable lower-index-wins on ties,
/// returned in ascending index order.
pub fn topk_indices(z: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn check_k(k: usize, n: usize) -> Result<(), TransformError> {
    if k == 0 || k > n {
        Err(TransformError::InvalidK { k, n })
    } else {
        Ok(())
    }
}

pub fn topk_uniform(z: &[f64], k: usize) -> Result<AttentionWeights, TransformError> {
    check_scores(z)?;
    check_k(k, z.len())?;
    let mut weights = vec![0.0; z.len()];
    for i in topk_indices(z, k) {
        weights[i] = 1.0 / k as f64;
    }
    Ok(AttentionWeights::from_weights(weights, None))
}

pub fn topk_softmax(z: &[f64], k: usize, gamma: f64) -> Result<AttentionWeights, TransformError> {
    check_scores(z)?;
    check_gamma(gamma)?;
    check_k(k, z.len())?;
    let idx = topk_indices(z, k);
    let sub: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
    let p = softmax_raw(&sub, gamma);
    let mut weights = vec![0.0; z.len()];
    for (&i, &w) in idx.iter().zip(&p) {
        weights[i] = w;
    }
    Ok(AttentionWeights::from_weights(weights, None))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies the symmetric Jacobian `(diag(s) - s s^T / sum(s)) / gamma`.
fn symmetric_jacobian(s: &[f64], v: &[f64], gamma: f64) -> Vec<f64> {
    let total: f64 = s.iter().sum();
    let c = if total > 0.0 { dot(s, v) / total } else { 0.0 };
    s.iter().zip(v).map(|(&si, &vi)| si * (vi - c) / gamma).collect()
}

/// Jacobian-vector product `J(z) v` of the transform at `z`.
///
/// Selections (arg-max, top-k) are held fixed at their current choice and
/// points on a support boundary are treated as interior to the current
/// support.
pub fn transform_jvp(
    spec: &TransformSpec,
    z: &[f64],
    v: &[f64],
) -> Result<Vec<f64>, TransformError> {
    if v.len() != z.len() {
        return Err(TransformError::LengthMismatch {
            expected: z.len(),
            got: v.len(),
        });
    }
    let g = spec.gamma;
    let p = spec.apply(z)?;
    Ok(match spec.transform {
        Transform::Softmax | Transform::Sparsemax | Transform::TopkSoftmax { .. } => {
            let s: Vec<f64> = match spec.transform {
                Transform::Sparsemax => p.weights.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect(),
                _ => p.weights.clone(),
            };
            symmetric_jacobian(&s, v, g)
        }
        Transform::Entmax { alpha } => {
            let s = entmax_sensitivity(&p.weights, alpha);
            symmetric_jacobian(&s, v, g)
        }
        Transform::TopkUniform { .. } => vec![0.0; z.len()],
        Transform::NormRelu { b } => {
            if p.degenerate {
                return Ok(vec![0.0; z.len()]);
            }
            let total: f64 = z.iter().map(|&x| (x / g + b).max(0.0)).sum();
            let dr: Vec<f64> = z
                .iter()
                .zip(v)
                .map(|(&x, &vi)| if x / g + b > 0.0 { vi / g } else { 0.0 })
                .collect();
            let sdr: f64 = dr.iter().sum();
            dr.iter()
                .zip(&p.weights)
                .map(|(&d, &pi)| (d - pi * sdr) / total)
                .collect()
        }
        Transform::Relumax { b } => {
            let j = argmax(z);
            let m = z[j];
            let total: f64 = z.iter().map(|&x| (b + (x - m) / g).max(0.0)).sum();
            let dr: Vec<f64> = z
                .iter()
                .zip(v)
                .map(|(&x, &vi)| if b + (x - m) / g > 0.0 { (vi - v[j]) / g } else { 0.0 })
                .collect();
            let sdr: f64 = dr.iter().sum();
            dr.iter()
                .zip(&p.weights)
                .map(|(&d, &pi)| (d - pi * sdr) / total)
                .collect()
        }
    })
}

/// `s_i = p_i^(2 - alpha)` on the support, 0 elsewhere.
fn entmax_sensitivity(p: &[f64], alpha: f64) -> Vec<f64> {
    p.iter()
        .map(|&w| if w > 0.0 { w.powf(2.0 - alpha) } else { 0.0 })
        .collect()
}

/// Vector-Jacobian product `J(z)^T u`.
pub fn transform_vjp(
    spec: &TransformSpec,
    z: &[f64],
    u: &[f64],
) -> Result<Vec<f64>, TransformError> {
    if u.len() != z.len() {
        return Err(TransformError::LengthMismatch {
            expected: z.len(),
            got: u.len(),
        });
    }
    match spec.transform {
        Transform::NormRelu { .. } | Transform::Relumax { .. } => {
            let p = spec.apply(z)?;
            Ok(vjp_from_weights(spec, z, &p.weights, p.degenerate, u))
        }
        // symmetric Jacobians
        _ => transform_jvp(spec, z, u),
    }
}

/// `J^T u` given weights already computed by `spec.apply(z)`.
///
/// Used by the training stack, which keeps the forward weights around.
pub fn vjp_from_weights(
    spec: &TransformSpec,
    z: &[f64],
    p: &[f64],
    degenerate: bool,
    u: &[f64],
) -> Vec<f64> {
    let g = spec.gamma;
    match spec.transform {
        Transform::Softmax | Transform::TopkSoftmax { .. } => symmetric_jacobian(p, u, g),
        Transform::Sparsemax => {
            let s: Vec<f64> = p.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect();
            symmetric_jacobian(&s, u, g)
        }
        Transform::Entmax { alpha } => {
            let s = if alpha == 2.0 {
                p.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect()
            } else {
                entmax_sensitivity(p, alpha)
            };
            symmetric_jacobian(&s, u, g)
        }
        Transform::TopkUniform { .. } => vec![0.0; z.len()],
        Transform::NormRelu { b } => {
            if degenerate {
                return vec![0.0; z.len()];
            }
            let total: f64 = z.iter().map(|&x| (x / g + b).max(0.0)).sum();
            let pu = dot(p, u);
            z.iter()
                .zip(u)
                .map(|(&x, &ui)| {
                    if x / g + b > 0.0 {
                        (ui - pu) / (g * total)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Transform::Relumax { b } => {
            let j = argmax(z);
            let m = z[j];
            let total: f64 = z.iter().map(|&x| (b + (x - m) / g).max(0.0)).sum();
            let pu = dot(p, u);
            let mut out: Vec<f64> = z
                .iter()
                .zip(u)
                .map(|(&x, &ui)| {
                    if b + (x - m) / g > 0.0 {
                        (ui - pu) / (g * total)
                    } else {
                        0.0
                    }
                })
                .collect();
            let s: f64 = out.iter().sum();
            out[j] -= s;
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        close(&softmax(&[0.0, 0.0, 0.0], 1.0).unwrap().weights, &[1.0 / 3.0; 3], 1e-15);
        close(&softmax(&[2f64.ln(), 0.0], 1.0).unwrap().weights, &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.weights.iter().all(|w| w.is_finite()));
        assert_abs_diff_eq!(p.weights[0], 1.0);
        assert!(p.threshold.is_none());
        assert_eq!(softmax(&[f64::NAN], 1.0), Err(TransformError::InvalidScores));
        assert_eq!(softmax(&[], 1.0), Err(TransformError::InvalidScores));
    }

    #[test]
    fn sparsemax_examples() {
        let p = sparsemax(&[0.8, 0.4, -0.2], 1.0).unwrap();
        close(&p.weights, &[0.7, 0.3, 0.0], 1e-12);
        assert_abs_diff_eq!(p.threshold.unwrap(), 0.1, epsilon = 1e-12);
        assert_eq!(p.support, vec![0, 1]);
        close(&sparsemax(&[3.3; 3], 1.0).unwrap().weights, &[1.0 / 3.0; 3], 1e-15);
        let shifted = sparsemax(&[5.8, 5.4, 4.8], 1.0).unwrap();
        close(&shifted.weights, &p.weights, 1e-12);
    }

    #[test]
    fn entmax_examples() {
        let z = [0.3, -1.2, 0.9, 0.85];
        close(&entmax(&z, 2.0, 0.7).unwrap().weights, &sparsemax(&z, 0.7).unwrap().weights, 1e-12);
        close(&entmax(&[0.0, 0.0], 1.5, 1.0).unwrap().weights, &[0.5, 0.5], 1e-12);
        let p = entmax(&[1.0, 0.0], 1.5, 1.0).unwrap();
        // (0.5 - tau)^2 + (-tau)^2 = 1
        let tau = (1.0 - 7f64.sqrt()) / 4.0;
        assert_abs_diff_eq!(p.threshold.unwrap(), tau, epsilon = 1e-11);
        close(&p.weights, &[(0.5 - tau).powi(2), tau * tau], 1e-11);
        assert_abs_diff_eq!(p.weights[0], 0.8307, epsilon = 1e-4);
        assert!(matches!(entmax(&z, 1.0, 1.0), Err(TransformError::InvalidAlpha(_))));
    }

    #[test]
    fn tsallis_examples() {
        assert_eq!(tsallis_entropy(&[0.0, 1.0, 0.0], 1.5), 0.0);
        assert_abs_diff_eq!(tsallis_entropy(&[0.5, 0.5], 2.0), 0.25);
        assert_abs_diff_eq!(tsallis_entropy(&[0.25; 4], 2.0), 0.375);
    }

    #[test]
    fn norm_relu_examples() {
        close(&norm_relu(&[1.0, -0.5, -2.0], 1.0, 0.0).unwrap().weights, &[1.0, 0.0, 0.0], 0.0);
        let p = norm_relu(&[-3.0, -4.0], 1.0, 0.0).unwrap();
        assert!(p.degenerate);
        close(&p.weights, &[0.5, 0.5], 0.0);
        close(&norm_relu(&[0.5, 0.5, -1.5], 1.0, 0.5).unwrap().weights, &[0.5, 0.5, 0.0], 1e-15);
    }

    #[test]
    fn relumax_examples() {
        let p = relumax(&[1.0, 0.9, 0.2], 1.0, 1.0).unwrap();
        close(&p.weights, &[1.0 / 2.1, 0.9 / 2.1, 0.2 / 2.1], 1e-15);
        assert_abs_diff_eq!(p.weights[0], 0.4762, epsilon = 1e-4);
        close(&relumax(&[1.0, -0.5, -0.5], 1.0, 0.5).unwrap().weights, &[1.0, 0.0, 0.0], 0.0);
        close(&relumax(&[-7.0; 3], 1.0, 0.3).unwrap().weights, &[1.0 / 3.0; 3], 1e-15);
        assert!(relumax(&[1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn topk_examples() {
        close(&topk_uniform(&[3.0, 2.0, 1.0], 2).unwrap().weights, &[0.5, 0.5, 0.0], 0.0);
        close(&topk_uniform(&[1.0, 1.0, 0.0], 1).unwrap().weights, &[1.0, 0.0, 0.0], 0.0);
        close(&topk_uniform(&[0.1, 5.0, -2.0, 3.0], 4).unwrap().weights, &[0.25; 4], 0.0);
        assert_eq!(topk_uniform(&[1.0], 2), Err(TransformError::InvalidK { k: 2, n: 1 }));

        let z = [0.3, -0.1, 2.0];
        close(&topk_softmax(&z, 3, 0.5).unwrap().weights, &softmax(&z, 0.5).unwrap().weights, 0.0);
        close(
            &topk_softmax(&[2f64.ln(), 0.0, -100.0], 2, 1.0).unwrap().weights,
            &[2.0 / 3.0, 1.0 / 3.0, 0.0],
            1e-15,
        );
        close(&topk_softmax(&z, 1, 1.0).unwrap().weights, &[0.0, 0.0, 1.0], 0.0);
    }

    #[test]
    fn jvp_examples() {
        let sm = TransformSpec::new(Transform::Softmax, 1.0);
        close(&sm.jvp(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), &[0.25, -0.25], 1e-15);
        let sp = TransformSpec::new(Transform::Sparsemax, 1.0);
        close(&sp.jvp(&[0.8, 0.4, -0.2], &[1.0, 0.0, 0.0]).unwrap(), &[0.5, -0.5, 0.0], 1e-15);
        assert!(sp.jvp(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn vjp_is_transpose_of_jvp() {
        let z = [0.4, -0.3, 0.35, 0.1, -0.9];
        let specs = [
            TransformSpec::new(Transform::NormRelu { b: 0.2 }, 0.8),
            TransformSpec::new(Transform::Relumax { b: 0.6 }, 0.9),
            TransformSpec::new(Transform::Entmax { alpha: 1.5 }, 0.5),
        ];
        for spec in specs {
            for i in 0..z.len() {
                for j in 0..z.len() {
                    let mut ei = [0.0; 5];
                    ei[i] = 1.0;
                    let mut ej = [0.0; 5];
                    ej[j] = 1.0;
                    let jij = spec.jvp(&z, &ej).unwrap()[i];
                    let jtji = spec.vjp(&z, &ei).unwrap()[j];
                    assert_abs_diff_eq!(jij, jtji, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = TransformSpec::new(Transform::Entmax { alpha: 1.5 }, 0.25);
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(s, r#"{"kind":"entmax","alpha":1.5,"gamma":0.25}"#);
        assert_eq!(serde_json::from_str::<TransformSpec>(&s).unwrap(), spec);
    }
}
