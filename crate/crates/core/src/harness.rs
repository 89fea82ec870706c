//! Randomized equivalence suites shared by `skam verify` and the test suites.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::kernels::{KernelKind, KernelSpec};
use crate::regression::{
    attention_estimate, inf_norm_diff, knn_radius, nadaraya_watson, nw_weights, verify_equivalence,
    verify_normrelu_epanechnikov, KeyValueCache, RegressionError,
};
use crate::rng::seeded;
use crate::transforms::{Transform, TransformSpec};

/// Tolerance for bisection-based entmax (alpha != 2).
pub const PROP1_TOL_ENTMAX: f64 = 1e-8;
/// Tolerance for the exact sparsemax path.
pub const PROP1_TOL_SPARSEMAX: f64 = 1e-10;
pub const GAUSS_TOL: f64 = 1e-10;
pub const NORMRELU_TOL: f64 = 1e-10;
pub const TOPK_UNIFORM_TOL: f64 = 1e-12;
pub const TOPK_SOFTMAX_TOL: f64 = 1e-10;
pub const RELUMAX_TOL: f64 = 1e-12;

pub const DEFAULT_GAMMAS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Prop1,
    Gauss,
    Normrelu,
    Topk,
    Relumax,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Suite> {
        Some(match s {
            "prop1" => Suite::Prop1,
            "gauss" => Suite::Gauss,
            "normrelu" => Suite::Normrelu,
            "topk" => Suite::Topk,
            "relumax" => Suite::Relumax,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HarnessConfig {
    pub trials: usize,
    /// Maximum number of stored keys (`n - 1`).
    pub max_keys: usize,
    pub max_dim: usize,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            max_keys: 64,
            max_dim: 16,
            seed: 0,
        }
    }
}

/// One line of a suite report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub trials: usize,
    /// Trials skipped because both sides were degenerate.
    pub degenerate: usize,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: String, max_error: f64, tolerance: f64, trials: usize, degenerate: usize) -> Self {
        Self {
            name,
            max_error,
            tolerance,
            trials,
            degenerate,
            pass: max_error <= tolerance,
        }
    }
}

fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Keys and query uniform on the unit sphere, standard normal values.
pub fn random_cache<R: Rng>(rng: &mut R, n_keys: usize, d: usize) -> KeyValueCache {
    let keys = (0..n_keys).map(|_| unit_vector(rng, d)).collect();
    let values = (0..n_keys)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let query = unit_vector(rng, d);
    KeyValueCache::new(keys, values, query).expect("sampled cache is well formed")
}

/// Draws `cfg.trials` caches with random sizes in `1..=max_keys`, `2..=max_dim`.
///
/// One-dimensional keys are exactly `+-1`, so every distance ties; they are
/// left out.
pub fn random_caches(cfg: &HarnessConfig, stream: u64) -> Vec<KeyValueCache> {
    let mut rng = seeded(cfg.seed, stream);
    (0..cfg.trials)
        .map(|_| {
            let n = rng.gen_range(1..=cfg.max_keys.max(1));
            let d = rng.gen_range(2..=cfg.max_dim.max(2));
            random_cache(&mut rng, n, d)
        })
        .collect()
}

/// Entmax attention against rectified-polynomial regression at the recovered
/// bandwidth, for every `(alpha, gamma)` pair.
pub fn prop1_suite(
    cfg: &HarnessConfig,
    alphas: &[f64],
    gammas: &[f64],
) -> Result<Vec<CheckResult>, RegressionError> {
    let caches = random_caches(cfg, 1);
    let mut out = Vec::new();
    for &alpha in alphas {
        let mut worst = 0.0f64;
        let mut degenerate = 0;
        for &gamma in gammas {
            for c in &caches {
                let rep = verify_equivalence(c, alpha, gamma)?;
                degenerate += rep.degenerate as usize;
                worst = worst.max(rep.max_abs_diff).max(rep.max_weight_diff);
            }
        }
        let tol = if alpha == 2.0 {
            PROP1_TOL_SPARSEMAX
        } else {
            PROP1_TOL_ENTMAX
        };
        out.push(CheckResult::new(
            format!("prop1 alpha={alpha}"),
            worst,
            tol,
            caches.len() * gammas.len(),
            degenerate,
        ));
    }
    Ok(out)
}

/// Softmax at temperature gamma against Gaussian regression with `h^2 = gamma`.
pub fn gauss_suite(cfg: &HarnessConfig, gammas: &[f64]) -> Result<Vec<CheckResult>, RegressionError> {
    let caches = random_caches(cfg, 2);
    let mut worst = 0.0f64;
    for &gamma in gammas {
        for c in &caches {
            let at = attention_estimate(c, &TransformSpec::new(Transform::Softmax, gamma))?;
            let nw = nadaraya_watson(c, &KernelSpec::new(KernelKind::Gaussian, gamma.sqrt()))?;
            worst = worst.max(inf_norm_diff(&at, &nw));
        }
    }
    Ok(vec![CheckResult::new(
        "gauss softmax~gaussian".into(),
        worst,
        GAUSS_TOL,
        caches.len() * gammas.len(),
        0,
    )])
}

/// Normalized ReLU against Epanechnikov regression. Bandwidths include
/// `sqrt(2)` (b = 0) and `h >= 2` (full support) besides random values.
pub fn normrelu_suite(cfg: &HarnessConfig) -> Result<Vec<CheckResult>, RegressionError> {
    let caches = random_caches(cfg, 3);
    let mut rng = seeded(cfg.seed, 103);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    let mut trials = 0;
    for c in &caches {
        let hs = [2f64.sqrt(), 2.0, rng.gen_range(0.3..3.0)];
        for h in hs {
            let rep = verify_normrelu_epanechnikov(c, h)?;
            degenerate += rep.degenerate as usize;
            worst = worst.max(rep.max_abs_diff);
            trials += 1;
        }
    }
    Ok(vec![CheckResult::new(
        "normrelu normrelu~epanechnikov".into(),
        worst,
        NORMRELU_TOL,
        trials,
        degenerate,
    )])
}

/// Top-k uniform against the k-nearest-neighbor mean, and top-k softmax
/// against truncated-Gaussian regression.
pub fn topk_suite(cfg: &HarnessConfig, gammas: &[f64]) -> Result<Vec<CheckResult>, RegressionError> {
    let caches = random_caches(cfg, 4);
    let mut rng = seeded(cfg.seed, 104);
    let mut worst_uniform = 0.0f64;
    let mut worst_soft = 0.0f64;
    let mut trials_soft = 0;
    for c in &caches {
        let k = rng.gen_range(1..=c.len());
        let at = attention_estimate(c, &TransformSpec::new(Transform::TopkUniform { k }, 1.0))?;
        let nw = nadaraya_watson(c, &KernelSpec::new(KernelKind::Uniform, knn_radius(c, k)?))?;
        worst_uniform = worst_uniform.max(inf_norm_diff(&at, &nw));
        for &gamma in gammas {
            let at = attention_estimate(c, &TransformSpec::new(Transform::TopkSoftmax { k }, gamma))?;
            let nw = nadaraya_watson(
                c,
                &KernelSpec::new(KernelKind::TruncatedGaussian { k }, gamma.sqrt()),
            )?;
            worst_soft = worst_soft.max(inf_norm_diff(&at, &nw));
            trials_soft += 1;
        }
    }
    Ok(vec![
        CheckResult::new(
            "topk uniform~knn-mean".into(),
            worst_uniform,
            TOPK_UNIFORM_TOL,
            caches.len(),
            0,
        ),
        CheckResult::new(
            "topk softmax~truncated-gaussian".into(),
            worst_soft,
            TOPK_SOFTMAX_TOL,
            trials_soft,
            0,
        ),
    ])
}

/// ReLUmax transform weights against the normalized ReLUmax kernel, `h^2 = gamma`.
pub fn relumax_suite(cfg: &HarnessConfig, gammas: &[f64]) -> Result<Vec<CheckResult>, RegressionError> {
    let caches = random_caches(cfg, 5);
    let mut rng = seeded(cfg.seed, 105);
    let mut worst = 0.0f64;
    for c in &caches {
        let b = rng.gen_range(0.05..2.0);
        for &gamma in gammas {
            let p = TransformSpec::new(Transform::Relumax { b }, gamma).apply(&c.scores())?;
            let w = nw_weights(c, &KernelSpec::new(KernelKind::RelumaxKernel { b }, gamma.sqrt()))?;
            worst = worst.max(inf_norm_diff(&p.weights, &w));
        }
    }
    Ok(vec![CheckResult::new(
        "relumax transform~kernel".into(),
        worst,
        RELUMAX_TOL,
        caches.len() * gammas.len(),
        0,
    )])
}

pub fn run_suite(
    suite: Suite,
    cfg: &HarnessConfig,
    alphas: &[f64],
    gammas: &[f64],
) -> Result<Vec<CheckResult>, RegressionError> {
    match suite {
        Suite::Prop1 => prop1_suite(cfg, alphas, gammas),
        Suite::Gauss => gauss_suite(cfg, gammas),
        Suite::Normrelu => normrelu_suite(cfg),
        Suite::Topk => topk_suite(cfg, gammas),
        Suite::Relumax => relumax_suite(cfg, gammas),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caches_are_reproducible() {
        let cfg = HarnessConfig {
            trials: 5,
            ..Default::default()
        };
        assert_eq!(random_caches(&cfg, 1), random_caches(&cfg, 1));
        assert_ne!(random_caches(&cfg, 1), random_caches(&cfg, 2));
    }

    #[test]
    fn small_suites_pass() {
        let cfg = HarnessConfig {
            trials: 20,
            ..Default::default()
        };
        for suite in [Suite::Prop1, Suite::Gauss, Suite::Normrelu, Suite::Topk, Suite::Relumax] {
            for r in run_suite(suite, &cfg, &[2.0, 1.5, 4.0 / 3.0], &DEFAULT_GAMMAS).unwrap() {
                assert!(r.pass, "{r:?}");
            }
        }
    }
}
