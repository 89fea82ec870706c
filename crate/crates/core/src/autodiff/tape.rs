use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use super::tensor::{matmul_raw, Scalar, Tensor};
use super::AutodiffError;
use crate::transforms::{vjp_from_weights, TransformSpec};

/// Floor applied to row norms by [`Tape::row_l2_normalize`].
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    RowL2Normalize {
        a: Var,
        group: usize,
        norms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    TransformRows {
        a: Var,
        spec: TransformSpec,
        probs: Vec<f64>,
        degenerate: Vec<bool>,
    },
    CausalAttention {
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        spec: TransformSpec,
        probs: Vec<f64>,
        degenerate: Vec<bool>,
    },
    LeakyScan {
        x: Var,
        lambda: Var,
        seq_len: usize,
        heads: usize,
    },
    Lookahead {
        x: Var,
        lambda: Var,
        seq_len: usize,
        heads: usize,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        a: Var,
    },
    SumSquares {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the leaves that were registered with `requires_grad`.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

/// Dynamic record of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order; [`Tape::backward`] walks them in
/// strict reverse order. A tape built with [`Tape::inference`] saves no
/// activations and cannot be differentiated.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    kinks: DefaultHasher,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dot64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

fn axpy<T: Scalar>(alpha: f64, x: &[T], y: &mut [T]) {
    let a = T::from_f64(alpha);
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            kinks: DefaultHasher::new(),
        }
    }

    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise branch taken so far (supports, arg-max and
    /// top-k choices, ReLU masks). Two evaluations with equal signatures lie
    /// on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite activation");
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::Shape(format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m x k) * b^T` with `b` of shape `n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (inner, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ac != inner {
            return Err(AutodiffError::Shape(format!(
                "matmul of {ar}x{ac} with {}{br}x{bc}",
                if trans_b { "transposed " } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[ar, n]);
        matmul_raw(
            self.value(a).data(),
            (ar, ac),
            false,
            self.value(b).data(),
            (br, bc),
            trans_b,
            out.data_mut(),
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        let cf = T::from_f64(c);
        out.data_mut().iter_mut().for_each(|x| *x = *x * cf);
        let ng = self.needs(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (x, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x = *x * y;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Hadamard { a, b }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            let active = *x > T::zero();
            self.kinks.write_u8(active as u8);
            if !active {
                *x = T::zero();
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::Relu { a }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = T::from_f64(1.0 / (1.0 + (-x.as_f64()).exp()));
        }
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid { a }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, ng))
    }

    /// Normalizes every contiguous block of `group` columns of each row to
    /// unit length, `x / max(||x||, 1e-8)`. `group = cols` is plain row
    /// normalization.
    pub fn row_l2_normalize(&mut self, a: Var, group: usize) -> Result<Var, AutodiffError> {
        let (_, c) = self.value(a).dims2()?;
        if group == 0 || c % group != 0 {
            return Err(AutodiffError::Shape(format!(
                "group {group} does not divide {c} columns"
            )));
        }
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.len() / group);
        for chunk in out.data_mut().chunks_mut(group) {
            let n = dot64(chunk, chunk).sqrt();
            let inv = T::from_f64(1.0 / n.max(NORM_EPS));
            chunk.iter_mut().for_each(|x| *x = *x * inv);
            norms.push(n);
        }
        let ng = self.needs(a);
        if !self.grad_enabled {
            norms = Vec::new();
        }
        Ok(self.push(out, Op::RowL2Normalize { a, group, norms }, ng))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (v, d) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(AutodiffError::Index { index: i, len: v });
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    fn record_support(&mut self, p: &[f64], degenerate: bool) {
        self.kinks.write_u8(degenerate as u8);
        for (i, &w) in p.iter().enumerate() {
            if w > 0.0 {
                self.kinks.write_usize(i);
            }
        }
        self.kinks.write_usize(usize::MAX);
    }

    /// Applies `spec` to every row of a matrix.
    pub fn transform_rows(&mut self, a: Var, spec: TransformSpec) -> Result<Var, AutodiffError> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = Tensor::zeros(&[r, c]);
        let mut probs = Vec::new();
        let mut degenerate = Vec::new();
        let save = self.grad_enabled;
        for i in 0..r {
            let z: Vec<f64> = self.value(a).row(i).iter().map(|x| x.as_f64()).collect();
            let p = spec.apply(&z)?;
            self.record_support(&p.weights, p.degenerate);
            for (o, &w) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&p.weights) {
                *o = T::from_f64(w);
            }
            if save {
                probs.extend_from_slice(&p.weights);
                degenerate.push(p.degenerate);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            out,
            Op::TransformRows {
                a,
                spec,
                probs,
                degenerate,
            },
            ng,
        ))
    }

    /// Diagonal-excluded causal attention over sequences stacked along rows.
    ///
    /// `k` and `v` have shape `(batch * seq_len, heads * d)` with unit-norm
    /// head blocks in `k`. Position `t` of each sequence attends to positions
    /// `0..t` with scores `k_i . k_t`; position 0 has no context and outputs
    /// zeros.
    pub fn causal_attention(
        &mut self,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        spec: TransformSpec,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(k, v)?;
        let (rows, width) = self.value(k).dims2()?;
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || width % heads != 0 {
            return Err(AutodiffError::Shape(format!(
                "{rows}x{width} does not split into sequences of {seq_len} with {heads} heads"
            )));
        }
        let d = width / heads;
        let batch = rows / seq_len;
        let save = self.grad_enabled;
        let mut out = Tensor::<T>::zeros(&[rows, width]);
        let mut probs = Vec::new();
        let mut degenerate = Vec::new();
        let mut z = Vec::with_capacity(seq_len);
        for b in 0..batch {
            for h in 0..heads {
                let col = h * d;
                for t in 1..seq_len {
                    let kd = self.nodes[k.0].value.data();
                    let q = &kd[(b * seq_len + t) * width + col..][..d];
                    z.clear();
                    for i in 0..t {
                        z.push(dot64(&kd[(b * seq_len + i) * width + col..][..d], q));
                    }
                    let p = spec.capped_to(t).apply(&z)?;
                    self.record_support(&p.weights, p.degenerate);
                    let vd = self.nodes[v.0].value.data();
                    let orow = &mut out.data_mut()[(b * seq_len + t) * width + col..][..d];
                    for (i, &w) in p.weights.iter().enumerate() {
                        if w != 0.0 {
                            axpy(w, &vd[(b * seq_len + i) * width + col..][..d], orow);
                        }
                    }
                    if save {
                        probs.extend_from_slice(&p.weights);
                        degenerate.push(p.degenerate);
                    }
                }
            }
        }
        let ng = self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::CausalAttention {
                k,
                v,
                seq_len,
                heads,
                spec,
                probs,
                degenerate,
            },
            ng,
        ))
    }

    fn check_scan(&self, x: Var, lambda: Var, seq_len: usize, heads: usize) -> Result<(), AutodiffError> {
        let (rows, width) = self.value(x).dims2()?;
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || width % heads != 0 {
            return Err(AutodiffError::Shape(format!(
                "{rows}x{width} does not split into sequences of {seq_len} with {heads} heads"
            )));
        }
        if self.value(lambda).len() != heads {
            return Err(AutodiffError::Shape(format!(
                "need {heads} coefficients, got {}",
                self.value(lambda).len()
            )));
        }
        Ok(())
    }

    /// Per-head leaky accumulation `y_t = x_t + lambda_h * y_{t-1}`, `y_{-1} = 0`,
    /// restarted at every sequence boundary.
    pub fn leaky_scan(&mut self, x: Var, lambda: Var, seq_len: usize, heads: usize) -> Result<Var, AutodiffError> {
        self.check_scan(x, lambda, seq_len, heads)?;
        let (rows, width) = self.value(x).dims2()?;
        let d = width / heads;
        let lam: Vec<T> = self.value(lambda).data().to_vec();
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for b in 0..rows / seq_len {
            for t in 1..seq_len {
                let r = b * seq_len + t;
                let (prev, cur) = data.split_at_mut(r * width);
                let prev = &prev[(r - 1) * width..];
                for h in 0..heads {
                    let l = lam[h];
                    for j in h * d..(h + 1) * d {
                        cur[j] = cur[j] + l * prev[j];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(lambda);
        Ok(self.push(
            out,
            Op::LeakyScan {
                x,
                lambda,
                seq_len,
                heads,
            },
            ng,
        ))
    }

    /// Per-head one-step look-ahead `y_t = x_t + lambda_h * x_{t+1}`, with a
    /// zero look-ahead at the last position of each sequence.
    pub fn lookahead(&mut self, x: Var, lambda: Var, seq_len: usize, heads: usize) -> Result<Var, AutodiffError> {
        self.check_scan(x, lambda, seq_len, heads)?;
        let (rows, width) = self.value(x).dims2()?;
        let d = width / heads;
        let lam: Vec<T> = self.value(lambda).data().to_vec();
        let src = self.value(x).data();
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for b in 0..rows / seq_len {
            for t in 0..seq_len - 1 {
                let r = b * seq_len + t;
                for h in 0..heads {
                    let l = lam[h];
                    for j in h * d..(h + 1) * d {
                        data[r * width + j] = data[r * width + j] + l * src[(r + 1) * width + j];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(lambda);
        Ok(self.push(
            out,
            Op::Lookahead {
                x,
                lambda,
                seq_len,
                heads,
            },
            ng,
        ))
    }

    /// Mean token cross-entropy over rows with `mask` set. Returns a scalar;
    /// an empty mask gives zero loss.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, AutodiffError> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(AutodiffError::Shape(format!(
                "{n} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut probs = vec![0.0; if self.grad_enabled { n * v } else { 0 }];
        let mut total = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(AutodiffError::Index { index: t, len: v });
            }
            let row = self.value(logits).row(r);
            let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
            let lse = m + s.ln();
            total += lse - row[t].as_f64();
            if self.grad_enabled {
                for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x.as_f64() - lse).exp();
                }
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { a }, ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sq_norm();
        let ng = self.needs(a);
        self.push(Tensor::scalar(T::from_f64(s)), Op::SumSquares { a }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if !self.grad_enabled {
            return Err(AutodiffError::NoGrad);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::InvalidLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = self.value(loss).clone();
        seed.data_mut()[0] = T::one();
        grads[loss.0] = Some(seed);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                out.grads.insert(Var(idx), g);
                continue;
            }
            for (input, delta) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, AutodiffError> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ar, ac) = av.dims2()?;
                let (br, bc) = bv.dims2()?;
                let (gr, gc) = g.dims2()?;
                if self.needs(*a) {
                    // dA = G op(B)^T
                    let mut da = Tensor::zeros(&[ar, ac]);
                    matmul_raw(g.data(), (gr, gc), false, bv.data(), (br, bc), !trans_b, da.data_mut(), false);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[br, bc]);
                    if *trans_b {
                        // B is n x k: dB = G^T A
                        matmul_raw(g.data(), (gr, gc), true, av.data(), (ar, ac), false, db.data_mut(), false);
                    } else {
                        matmul_raw(av.data(), (ar, ac), true, g.data(), (gr, gc), false, db.data_mut(), false);
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale { a, c } => {
                let mut d = g.clone();
                let cf = T::from_f64(*c);
                d.data_mut().iter_mut().for_each(|x| *x = *x * cf);
                out.push((*a, d));
            }
            Op::Hadamard { a, b } => {
                let mut da = g.clone();
                for (x, &y) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *x = *x * y;
                }
                let mut db = g.clone();
                for (x, &y) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x = *x * y;
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Relu { a } => {
                let mut d = g.clone();
                for (x, &inp) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if inp <= T::zero() {
                        *x = T::zero();
                    }
                }
                out.push((*a, d));
            }
            Op::Sigmoid { a } => {
                let mut d = g.clone();
                for (x, &s) in d.data_mut().iter_mut().zip(y.data()) {
                    *x = *x * s * (T::one() - s);
                }
                out.push((*a, d));
            }
            Op::Reshape { a } => {
                let shape = self.value(*a).shape().to_vec();
                out.push((*a, g.clone().reshaped(&shape)?));
            }
            Op::RowL2Normalize { a, group, norms } => {
                let mut d = g.clone();
                for ((gc, yc), &n) in d
                    .data_mut()
                    .chunks_mut(*group)
                    .zip(y.data().chunks(*group))
                    .zip(norms)
                {
                    if n > NORM_EPS {
                        let yg = dot64(yc, gc);
                        let inv = 1.0 / n;
                        for (gi, &yi) in gc.iter_mut().zip(yc) {
                            *gi = T::from_f64((gi.as_f64() - yi.as_f64() * yg) * inv);
                        }
                    } else {
                        let inv = T::from_f64(1.0 / NORM_EPS);
                        gc.iter_mut().for_each(|x| *x = *x * inv);
                    }
                }
                out.push((*a, d));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let (_, dm) = tv.dims2()?;
                let mut d = Tensor::zeros(tv.shape());
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g.data()[r * dm..(r + 1) * dm];
                    let dst = &mut d.data_mut()[i * dm..(i + 1) * dm];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o = *o + s;
                    }
                }
                out.push((*table, d));
            }
            Op::TransformRows {
                a,
                spec,
                probs,
                degenerate,
            } => {
                let av = self.value(*a);
                let (r, c) = av.dims2()?;
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let z: Vec<f64> = av.row(i).iter().map(|x| x.as_f64()).collect();
                    let u: Vec<f64> = g.row(i).iter().map(|x| x.as_f64()).collect();
                    let dz = vjp_from_weights(spec, &z, &probs[i * c..(i + 1) * c], degenerate[i], &u);
                    for (o, x) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(dz) {
                        *o = T::from_f64(x);
                    }
                }
                out.push((*a, d));
            }
            Op::CausalAttention {
                k,
                v,
                seq_len,
                heads,
                spec,
                probs,
                degenerate,
            } => {
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (rows, width) = kv.dims2()?;
                let (t_len, d) = (*seq_len, width / heads);
                let mut dk = Tensor::<T>::zeros(&[rows, width]);
                let mut dv = Tensor::<T>::zeros(&[rows, width]);
                let (kd, vd, gd) = (kv.data(), vv.data(), g.data());
                let mut off = 0;
                let mut row_idx = 0;
                let mut z = Vec::with_capacity(t_len);
                let mut dp = Vec::with_capacity(t_len);
                for b in 0..rows / t_len {
                    for h in 0..*heads {
                        let col = h * d;
                        for t in 1..t_len {
                            let p = &probs[off..off + t];
                            off += t;
                            let deg = degenerate[row_idx];
                            row_idx += 1;
                            let qr = (b * t_len + t) * width + col;
                            let gt = &gd[qr..qr + d];
                            z.clear();
                            dp.clear();
                            for i in 0..t {
                                let ir = (b * t_len + i) * width + col;
                                z.push(dot64(&kd[ir..ir + d], &kd[qr..qr + d]));
                                dp.push(dot64(&vd[ir..ir + d], gt));
                                if p[i] != 0.0 {
                                    axpy(p[i], gt, &mut dv.data_mut()[ir..ir + d]);
                                }
                            }
                            let dz = vjp_from_weights(&spec.capped_to(t), &z, p, deg, &dp);
                            for (i, &dzi) in dz.iter().enumerate() {
                                if dzi == 0.0 {
                                    continue;
                                }
                                let ir = (b * t_len + i) * width + col;
                                axpy(dzi, &kd[qr..qr + d], &mut dk.data_mut()[ir..ir + d]);
                                let ki: Vec<T> = kd[ir..ir + d].to_vec();
                                axpy(dzi, &ki, &mut dk.data_mut()[qr..qr + d]);
                            }
                        }
                    }
                }
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::LeakyScan {
                x,
                lambda,
                seq_len,
                heads,
            } => {
                let (rows, width) = y.dims2()?;
                let d = width / heads;
                let lam = self.value(*lambda).data();
                let mut dx = g.clone();
                let mut dl = vec![0.0f64; *heads];
                let data = dx.data_mut();
                for b in 0..rows / seq_len {
                    for t in (0..*seq_len).rev() {
                        let r = b * seq_len + t;
                        if t + 1 < *seq_len {
                            for h in 0..*heads {
                                for j in h * d..(h + 1) * d {
                                    data[r * width + j] = data[r * width + j] + lam[h] * data[(r + 1) * width + j];
                                }
                            }
                        }
                        if t > 0 {
                            for (h, acc) in dl.iter_mut().enumerate() {
                                let s = h * d;
                                *acc += dot64(&data[r * width + s..r * width + s + d], &y.data()[(r - 1) * width + s..(r - 1) * width + s + d]);
                            }
                        }
                    }
                }
                out.push((*x, dx));
                let shape = self.value(*lambda).shape().to_vec();
                out.push((*lambda, Tensor::from_f64(&shape, &dl)?));
            }
            Op::Lookahead {
                x,
                lambda,
                seq_len,
                heads,
            } => {
                let (rows, width) = y.dims2()?;
                let d = width / heads;
                let lam = self.value(*lambda).data();
                let xd = self.value(*x).data();
                let gd = g.data();
                let mut dx = g.clone();
                let mut dl = vec![0.0f64; *heads];
                for b in 0..rows / seq_len {
                    for t in 0..*seq_len - 1 {
                        let r = b * seq_len + t;
                        for h in 0..*heads {
                            let s = h * d;
                            let gr = &gd[r * width + s..r * width + s + d];
                            dl[h] += dot64(gr, &xd[(r + 1) * width + s..(r + 1) * width + s + d]);
                            let dst = &mut dx.data_mut()[(r + 1) * width + s..(r + 1) * width + s + d];
                            for (o, &gi) in dst.iter_mut().zip(gr) {
                                *o = *o + lam[h] * gi;
                            }
                        }
                    }
                }
                out.push((*x, dx));
                let shape = self.value(*lambda).shape().to_vec();
                out.push((*lambda, Tensor::from_f64(&shape, &dl)?));
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let (n, v) = lv.dims2()?;
                let mut d = Tensor::zeros(&[n, v]);
                if *count > 0 {
                    let scale = g.item().as_f64() / *count as f64;
                    for r in 0..n {
                        if !mask[r] {
                            continue;
                        }
                        let dst = &mut d.data_mut()[r * v..(r + 1) * v];
                        for (j, o) in dst.iter_mut().enumerate() {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            *o = T::from_f64((probs[r * v + j] - onehot) * scale);
                        }
                    }
                }
                out.push((*logits, d));
            }
            Op::Sum { a } => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                let gv = g.item();
                d.data_mut().iter_mut().for_each(|x| *x = gv);
                out.push((*a, d));
            }
            Op::SumSquares { a } => {
                let mut d = self.value(*a).clone();
                let two_g = T::from_f64(2.0) * g.item();
                d.data_mut().iter_mut().for_each(|x| *x = *x * two_g);
                out.push((*a, d));
            }
        }
        Ok(out)
    }
}
