use std::collections::BTreeMap;

use rand::Rng;

use super::{MosaicConfig, MosaicError};
use crate::autodiff::{Gradients, Scalar, Tape, Tensor, Var};
use crate::rng::seeded;

const INIT_STREAM: u64 = 0x1417;

/// A batch of equal-length sequences stored row after row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub seq_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.tokens.len() / self.seq_len.max(1)
    }

    pub fn validate(&self) -> Result<(), MosaicError> {
        let n = self.tokens.len();
        if self.seq_len == 0 || n == 0 || n % self.seq_len != 0 {
            return Err(MosaicError::Batch(format!(
                "{n} tokens do not form sequences of length {}",
                self.seq_len
            )));
        }
        if self.targets.len() != n || self.mask.len() != n {
            return Err(MosaicError::Batch("tokens, targets and mask differ in length".into()));
        }
        Ok(())
    }
}

/// Intermediate activations of one block, for inspection.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    /// `(B*T, d_model)`, unit norm per head block.
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    /// Contextual memory output before its projection.
    pub contextual: Tensor<T>,
    /// Persistent memory output before its projection.
    pub persistent: Tensor<T>,
}

/// Model parameters keyed by canonical name.
#[derive(Debug, Clone)]
pub struct MosaicModel<T = f32> {
    pub config: MosaicConfig,
    pub params: BTreeMap<String, Tensor<T>>,
}

fn layer_name(l: usize, p: &str) -> String {
    format!("layers.{l}.{p}")
}

/// Names and shapes of every parameter.
pub(crate) fn param_shapes(cfg: &MosaicConfig) -> Vec<(String, Vec<usize>)> {
    let (dm, d, h) = (cfg.d_model, cfg.head_dim(), cfg.heads);
    let mut out = vec![
        ("embed".to_string(), vec![cfg.vocab, dm]),
        ("unembed".to_string(), vec![dm, cfg.vocab]),
    ];
    for l in 0..cfg.depth {
        for (p, s) in [
            ("w_phi", vec![dm, dm]),
            ("w_psi", vec![dm, dm]),
            ("lambda_phi", vec![h]),
            ("lambda_psi", vec![h]),
            ("slot_keys", vec![cfg.persistent_slots, d]),
            ("slot_values", vec![cfg.persistent_slots, d]),
            ("w_ctx", vec![dm, dm]),
            ("w_pers", vec![dm, dm]),
        ] {
            out.push((layer_name(l, p), s));
        }
    }
    out.sort();
    out
}

impl<T: Scalar> MosaicModel<T> {
    /// Fresh model. Matrices are uniform in `+-1/sqrt(fan_in)` with
    /// `fan_in = rows`; the unsquashed coefficients start at `lambda_init`.
    pub fn new(config: MosaicConfig) -> Result<Self, MosaicError> {
        config.validate()?;
        let mut rng = seeded(config.seed, INIT_STREAM);
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if shape.len() == 1 {
                vec![config.lambda_init; n]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::from_f64(&shape, &data)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: MosaicConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self, MosaicError> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(MosaicError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(MosaicError::Checkpoint(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(MosaicError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> MosaicModel<U> {
        MosaicModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Registers every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<(), MosaicError> {
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(MosaicError::Batch(format!(
                "{} tokens do not form sequences of length {seq_len}",
                tokens.len()
            )));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(MosaicError::InvalidToken {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Records the forward pass and returns the `(B*T, V)` logits node.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &BTreeMap<String, Var>,
        tokens: &[usize],
        seq_len: usize,
        mut trace: Option<&mut Vec<LayerTrace<T>>>,
    ) -> Result<Var, MosaicError> {
        self.check_tokens(tokens, seq_len)?;
        let cfg = &self.config;
        let (heads, d, dm) = (cfg.heads, cfg.head_dim(), cfg.d_model);
        let rows = tokens.len();
        let spec = cfg.transform_spec();
        let slot_spec = spec.capped_to(cfg.persistent_slots);
        let p = |name: &str| vars[name];

        let mut x = tape.embedding(p("embed"), tokens)?;
        for l in 0..cfg.depth {
            let lp = |s: &str| p(&layer_name(l, s));
            let lam_phi = tape.sigmoid(lp("lambda_phi"));
            let lam_psi = tape.sigmoid(lp("lambda_psi"));

            let k_raw = tape.matmul(x, lp("w_phi"))?;
            let k_bar = tape.leaky_scan(k_raw, lam_phi, seq_len, heads)?;
            let keys = tape.row_l2_normalize(k_bar, d)?;

            let v_raw = tape.matmul(x, lp("w_psi"))?;
            let v_la = tape.lookahead(v_raw, lam_psi, seq_len, heads)?;
            let values = tape.row_l2_normalize(v_la, d)?;

            let ctx = tape.causal_attention(keys, values, seq_len, heads, spec.clone())?;

            let flat = tape.reshape(keys, &[rows * heads, d])?;
            let slot_keys = tape.row_l2_normalize(lp("slot_keys"), d)?;
            let scores = tape.matmul_t(flat, slot_keys)?;
            let weights = tape.transform_rows(scores, slot_spec.clone())?;
            let pers = tape.matmul(weights, lp("slot_values"))?;
            let pers = tape.reshape(pers, &[rows, dm])?;

            if let Some(tr) = trace.as_deref_mut() {
                tr.push(LayerTrace {
                    keys: tape.value(keys).clone(),
                    values: tape.value(values).clone(),
                    contextual: tape.value(ctx).clone(),
                    persistent: tape.value(pers).clone(),
                });
            }

            let c = tape.matmul(ctx, lp("w_ctx"))?;
            let q = tape.matmul(pers, lp("w_pers"))?;
            let x1 = tape.add(x, c)?;
            x = tape.add(x1, q)?;
        }
        Ok(tape.matmul(x, p("unembed"))?)
    }

    /// Logits `(B*T, V)` for sequences of length `seq_len`.
    pub fn logits(&self, tokens: &[usize], seq_len: usize) -> Result<Tensor<T>, MosaicError> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &vars, tokens, seq_len, None)?;
        Ok(tape.value(out).clone())
    }

    /// Per-block keys, values and memory outputs.
    pub fn trace(&self, tokens: &[usize], seq_len: usize) -> Result<Vec<LayerTrace<T>>, MosaicError> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let mut tr = Vec::new();
        self.forward_on(&mut tape, &vars, tokens, seq_len, Some(&mut tr))?;
        Ok(tr)
    }

    /// Greedy next-token predictions, lowest id winning ties.
    pub fn predict(&self, tokens: &[usize], seq_len: usize) -> Result<Vec<usize>, MosaicError> {
        let logits = self.logits(tokens, seq_len)?;
        let (n, _) = logits.dims2()?;
        Ok((0..n)
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Masked cross-entropy and its gradients with respect to every parameter.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor<T>>), MosaicError> {
        batch.validate()?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let logits = self.forward_on(&mut tape, &vars, &batch.tokens, batch.seq_len, None)?;
        let loss = tape.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
        let value = tape.value(loss).item().as_f64();
        let mut grads: Gradients<T> = tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, v) in vars {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.params[&name].shape()));
            out.insert(name, g);
        }
        Ok((value, out))
    }

    /// Masked cross-entropy without gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64, MosaicError> {
        batch.validate()?;
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let logits = self.forward_on(&mut tape, &vars, &batch.tokens, batch.seq_len, None)?;
        let loss = tape.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
        Ok(tape.value(loss).item().as_f64())
    }
}
