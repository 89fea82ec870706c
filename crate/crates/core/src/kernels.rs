//! Smoothing kernels evaluated on squared distance.
//!
//! Kernels are unnormalized with peak value 1 at zero distance. Only ratios
//! enter the Nadaraya-Watson estimate, so density constants are dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed on a dot product of unit vectors before it is rejected.
pub const UNIT_DOT_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("squared distance must be non-negative (got {0})")]
    InvalidDistance(f64),
    #[error("dot product {0} is outside [-1, 1]; inputs are not unit-norm")]
    NotUnitNorm(f64),
    #[error("bandwidth must be positive and finite (got {0})")]
    InvalidBandwidth(f64),
    #[error("kernel {0} needs the full neighbor set and is evaluated by the regression module")]
    NeedsContext(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    /// `[1 - u^2/h^2]_+^r`: Epanechnikov (r = 1), biweight (2), triweight (3).
    RectPoly { order: u32 },
    /// Indicator of `u^2 <= h^2`.
    Uniform,
    /// Gaussian restricted to the `k` nearest keys.
    TruncatedGaussian { k: usize },
    /// `[b + (s - max s)/h^2]_+`, anchored at the best-matching key.
    RelumaxKernel { b: f64 },
}

impl KernelKind {
    pub const EPANECHNIKOV: KernelKind = KernelKind::RectPoly { order: 1 };
    pub const BIWEIGHT: KernelKind = KernelKind::RectPoly { order: 2 };
    pub const TRIWEIGHT: KernelKind = KernelKind::RectPoly { order: 3 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Self {
        Self { kind, bandwidth }
    }

    pub fn weight(&self, sq_dist: f64) -> Result<f64, KernelError> {
        kernel_weight(self, sq_dist)
    }
}

/// Unnormalized kernel value at squared distance `sq_dist`.
pub fn kernel_weight(spec: &KernelSpec, sq_dist: f64) -> Result<f64, KernelError> {
    if !(sq_dist >= 0.0) {
        return Err(KernelError::InvalidDistance(sq_dist));
    }
    let h = spec.bandwidth;
    if !(h > 0.0 && h.is_finite()) {
        return Err(KernelError::InvalidBandwidth(h));
    }
    let h2 = h * h;
    match spec.kind {
        KernelKind::Gaussian => Ok((-sq_dist / (2.0 * h2)).exp()),
        KernelKind::RectPoly { order } => Ok((1.0 - sq_dist / h2).max(0.0).powi(order as i32)),
        KernelKind::Uniform => Ok(if sq_dist <= h2 { 1.0 } else { 0.0 }),
        KernelKind::TruncatedGaussian { .. } => Err(KernelError::NeedsContext("truncated_gaussian")),
        KernelKind::RelumaxKernel { .. } => Err(KernelError::NeedsContext("relumax_kernel")),
    }
}

/// `||k - q||^2 = 2 (1 - k.q)` for unit vectors `k`, `q`.
pub fn dot_to_sqdist(dot: f64) -> Result<f64, KernelError> {
    if !dot.is_finite() || dot.abs() > 1.0 + UNIT_DOT_SLACK {
        return Err(KernelError::NotUnitNorm(dot));
    }
    Ok(2.0 * (1.0 - dot.clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::softmax;
    use proptest::prelude::*;

    #[test]
    fn peak_is_one() {
        for kind in [
            KernelKind::Gaussian,
            KernelKind::EPANECHNIKOV,
            KernelKind::BIWEIGHT,
            KernelKind::TRIWEIGHT,
            KernelKind::Uniform,
        ] {
            assert_eq!(kernel_weight(&KernelSpec::new(kind, 0.7), 0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn rect_poly_values() {
        let epa = KernelSpec::new(KernelKind::EPANECHNIKOV, 1.0);
        assert_eq!(epa.weight(0.5).unwrap(), 0.5);
        assert_eq!(epa.weight(1.5).unwrap(), 0.0);
        let tri = KernelSpec::new(KernelKind::TRIWEIGHT, 2.0);
        assert_eq!(tri.weight(2.0).unwrap(), 0.125);
        assert_eq!(epa.weight(-0.1), Err(KernelError::InvalidDistance(-0.1)));
        let trunc = KernelSpec::new(KernelKind::TruncatedGaussian { k: 2 }, 1.0);
        assert!(matches!(trunc.weight(0.1), Err(KernelError::NeedsContext(_))));
    }

    #[test]
    fn dot_conversion() {
        assert_eq!(dot_to_sqdist(1.0).unwrap(), 0.0);
        assert_eq!(dot_to_sqdist(-1.0).unwrap(), 4.0);
        assert_eq!(dot_to_sqdist(0.0).unwrap(), 2.0);
        assert_eq!(dot_to_sqdist(1.0 + 5e-7).unwrap(), 0.0);
        assert!(matches!(dot_to_sqdist(1.01), Err(KernelError::NotUnitNorm(_))));
    }

    #[test]
    fn gaussian_recovers_softmax() {
        let dots = [0.3, -0.8, 0.95, 0.1, 0.0];
        let h = 0.6f64;
        let spec = KernelSpec::new(KernelKind::Gaussian, h);
        let w: Vec<f64> = dots
            .iter()
            .map(|&d| spec.weight(dot_to_sqdist(d).unwrap()).unwrap())
            .collect();
        let s: f64 = w.iter().sum();
        let p = softmax(&dots, h * h).unwrap();
        for (a, b) in w.iter().zip(&p.weights) {
            assert!((a / s - b).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn non_increasing_in_distance(a in 0.0f64..5.0, b in 0.0f64..5.0, h in 0.1f64..3.0, r in 1u32..5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for kind in [KernelKind::Gaussian, KernelKind::RectPoly { order: r }, KernelKind::Uniform] {
                let spec = KernelSpec::new(kind, h);
                prop_assert!(spec.weight(lo).unwrap() >= spec.weight(hi).unwrap());
            }
        }

        #[test]
        fn rect_poly_compact_support(d in 0.0f64..5.0, h in 0.1f64..3.0, r in 1u32..5) {
            let w = KernelSpec::new(KernelKind::RectPoly { order: r }, h).weight(d).unwrap();
            prop_assert_eq!(w == 0.0, d >= h * h);
        }
    }
}
