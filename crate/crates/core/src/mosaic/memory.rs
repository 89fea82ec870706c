//! The two memory units on a single sequence, outside any model.
//!
//! Inputs are `(T, H*d)` matrices whose column blocks are heads; the
//! coefficients are already squashed into `[0, 1)`.

use super::MosaicError;
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::transforms::TransformSpec;

fn coefficients<T: Scalar>(lambda: &[f64]) -> Result<Tensor<T>, MosaicError> {
    Ok(Tensor::from_f64(&[lambda.len()], lambda)?)
}

/// `k_t = Norm(kbar_t)` with `kbar_t = x_t W + lambda * kbar_{t-1}`, per head.
pub fn compute_keys<T: Scalar>(x: &Tensor<T>, w_phi: &Tensor<T>, lambda_phi: &[f64]) -> Result<Tensor<T>, MosaicError> {
    let heads = lambda_phi.len();
    let mut tape = Tape::inference();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w_phi.clone()));
    let lam = tape.constant(coefficients(lambda_phi)?);
    let k = tape.matmul(xv, wv)?;
    let (rows, width) = tape.value(k).dims2()?;
    let kb = tape.leaky_scan(k, lam, rows, heads)?;
    let out = tape.row_l2_normalize(kb, width / heads.max(1))?;
    Ok(tape.value(out).clone())
}

/// `v_t = Norm(x_t W + lambda * x_{t+1} W)`, zero look-ahead at the end.
pub fn compute_values<T: Scalar>(x: &Tensor<T>, w_psi: &Tensor<T>, lambda_psi: &[f64]) -> Result<Tensor<T>, MosaicError> {
    let heads = lambda_psi.len();
    let mut tape = Tape::inference();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w_psi.clone()));
    let lam = tape.constant(coefficients(lambda_psi)?);
    let v = tape.matmul(xv, wv)?;
    let (rows, width) = tape.value(v).dims2()?;
    let la = tape.lookahead(v, lam, rows, heads)?;
    let out = tape.row_l2_normalize(la, width / heads.max(1))?;
    Ok(tape.value(out).clone())
}

/// Position `t` attends to `0..t` with scores `k_i . k_t`; position 0 is zero.
pub fn contextual_forward<T: Scalar>(
    keys: &Tensor<T>,
    values: &Tensor<T>,
    heads: usize,
    spec: &TransformSpec,
) -> Result<Tensor<T>, MosaicError> {
    let mut tape = Tape::inference();
    let (k, v) = (tape.constant(keys.clone()), tape.constant(values.clone()));
    let (rows, _) = keys.dims2()?;
    let out = tape.causal_attention(k, v, rows, heads, spec.clone())?;
    Ok(tape.value(out).clone())
}

/// Attention of every key over normalized slot keys, shared by all heads.
pub fn persistent_forward<T: Scalar>(
    keys: &Tensor<T>,
    slot_keys: &Tensor<T>,
    slot_values: &Tensor<T>,
    heads: usize,
    spec: &TransformSpec,
) -> Result<Tensor<T>, MosaicError> {
    let (rows, width) = keys.dims2()?;
    let (slots, d) = slot_keys.dims2()?;
    let mut tape = Tape::inference();
    let k = tape.constant(keys.clone());
    let flat = tape.reshape(k, &[rows * heads, d])?;
    let sk = tape.constant(slot_keys.clone());
    let sk = tape.row_l2_normalize(sk, d)?;
    let sv = tape.constant(slot_values.clone());
    let scores = tape.matmul_t(flat, sk)?;
    let w = tape.transform_rows(scores, spec.capped_to(slots))?;
    let o = tape.matmul(w, sv)?;
    let o = tape.reshape(o, &[rows, width])?;
    Ok(tape.value(o).clone())
}
