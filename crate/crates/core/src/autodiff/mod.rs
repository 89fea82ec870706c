//! Minimal tape-based reverse-mode differentiation over dense tensors.
//!
//! Only the operations the Memory Mosaics model needs are provided. The tape
//! is generic over `f32` (training) and `f64` (gradient checks).

mod tape;
mod tensor;

use rand::Rng;
use thiserror::Error;

pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::{Scalar, Tensor};

use crate::rng::seeded;
use crate::transforms::TransformError;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    InvalidLoss(Vec<usize>),
    #[error("tape was recorded without gradients")]
    NoGrad,
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
}

/// Compares tape gradients with central differences on `coords` randomly
/// chosen parameter coordinates.
///
/// `build` records the loss for the given parameter leaves. Perturbations
/// that change the tape's kink signature are skipped, since the finite
/// difference then straddles a branch change.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    mut build: F,
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let base_signature = tape.kink_signature();
    let grads = tape.backward(loss)?;

    let total: usize = params.iter().map(|p| p.len()).sum();
    let mut rng = seeded(seed, 0x6772_6164);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for _ in 0..coords.min(total.max(1) * 4) {
        if total == 0 {
            break;
        }
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= params[which].len() {
            flat -= params[which].len();
            which += 1;
        }
        let orig = params[which].data()[flat];
        let mut side = |delta: f64, work: &mut Vec<Tensor<f64>>| {
            work[which].data_mut()[flat] = orig + delta;
            let r = eval_loss(work, &mut build);
            work[which].data_mut()[flat] = orig;
            r
        };
        let (lp, sp) = side(eps, &mut work)?;
        let (lm, sm) = side(-eps, &mut work)?;
        if sp != base_signature || sm != base_signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grads.get(vars[which]).map_or(0.0, |g| g.data()[flat]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
        if report.checked >= coords {
            break;
        }
    }
    Ok(report)
}

fn eval_loss<F>(params: &[Tensor<f64>], build: &mut F) -> Result<(f64, u64), AutodiffError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok((tape.value(loss).item(), tape.kink_signature()))
}
