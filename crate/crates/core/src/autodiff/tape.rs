use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SliceRows {
        a: Var,
        start: usize,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be replayed
/// backwards.
///
/// Parameters enter through [`Tape::param`], which returns the same node
/// for every request of one [`ParamId`]. A weight used by several layers
/// is therefore one node with several consumers, and backward sums their
/// contributions into it.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    frozen: BTreeSet<ParamId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// A tape on which the listed parameters enter as constants.
    pub fn with_frozen(frozen: BTreeSet<ParamId>) -> Self {
        Self {
            frozen,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node standing for parameter `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.tensor(id).clone();
        let v = if self.frozen.contains(&id) {
            self.constant(value)
        } else {
            self.leaf(value)
        };
        self.params.insert(id, v);
        v
    }

    /// Routes later requests for `id` to an existing node.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `op(a)·op(b)` for 2-D operands; `trans_*` transposes the stored matrix.
    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {sa:?} and {sb:?}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            &mut out,
            m,
            k,
            n,
            false,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Batched product of `[batch, ·, ·]` operands.
    pub fn batch_matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("batch matmul of {sa:?} and {sb:?}")));
        }
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "batch matmul inner dimensions differ: {sa:?} and {sb:?}"
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &da[i * m * k..(i + 1) * m * k],
                    trans_a,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (biases,
    /// positional embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bias.len()) {
            for (o, &v) in chunk.iter_mut().zip(bias) {
                *o = *o + v;
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * v;
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Multiplies every slice along axis 0 by its own constant factor.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let rows = self.shape(a)[0];
        if factors.len() != rows {
            return Err(Error::dim(format!(
                "{} row factors for leading axis of size {rows}",
                factors.len()
            )));
        }
        let mut out = self.value(a).clone();
        let row = out.len() / rows;
        for (chunk, &f) in out.data_mut().chunks_mut(row).zip(&factors) {
            for v in chunk {
                *v = *v * f;
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::ScaleRows(a, factors), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: Vec<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} of {shape:?}")));
        }
        let out = permute_tensor(self.value(a), &axes);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Permute(a, axes), rg))
    }

    /// Rows `start..start + count` of axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if count == 0 || start + count > shape[0] {
            return Err(Error::dim(format!(
                "slice {start}..{} of axis of size {}",
                start + count,
                shape[0]
            )));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * row..(start + count) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = count;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceRows { a, start }, rg))
    }

    /// Prepends one shared `[d]` token to every sequence of `x: [B, P, d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = self.value(token).len();
        if sx.len() != 3 || sx[2] != d {
            return Err(Error::dim(format!(
                "prepend token of {:?} to {sx:?}",
                self.shape(token)
            )));
        }
        let (b, p) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(b * (p + 1) * d);
        {
            let (xd, td) = (self.value(x).data(), self.value(token).data());
            for i in 0..b {
                out.extend_from_slice(td);
                out.extend_from_slice(&xd[i * p * d..(i + 1) * p * d]);
            }
        }
        let rg = self.needs(&[x, token]);
        Ok(self.push(
            Tensor::new(vec![b, p + 1, d], out)?,
            Op::PrependToken { x, token },
            rg,
        ))
    }

    /// Token `index` of every sequence in `x: [B, N, d]`, giving `[B, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || index >= sx[1] {
            return Err(Error::dim(format!("token {index} of {sx:?}")));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let mut out = Vec::with_capacity(b * d);
        let xd = self.value(x).data();
        for i in 0..b {
            let start = (i * n + index) * d;
            out.extend_from_slice(&xd[start..start + d]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::SelectToken { x, index }, rg))
    }

    /// Standardizes each vector along the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer norm eps must be positive"));
        }
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(format!(
                "layer norm of {:?} with gamma {:?} and beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut normalized = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / dn;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                normalized[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.needs(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * std_normal_cdf(v));
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy of logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} with {classes} classes")));
        }
        let lv = self.value(logits);
        let probs = softmax_rows(lv).into_data();
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
            total = total + lse - (row[label] - max);
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Nodes are visited once each in reverse recording order, so the
    /// summation order of fan-in contributions is fixed by the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backprop_node(node, g, lower);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape().to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.slot(grads, a) {
                    if trans_a {
                        // stored k×m: op(b)·gᵀ
                        gemm(bv, trans_b, gd, true, da, k, n, m, true);
                    } else {
                        gemm(gd, false, bv, !trans_b, da, m, n, k, true);
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    if trans_b {
                        // stored n×k: gᵀ·op(a)
                        gemm(gd, true, av, trans_a, db, n, m, k, true);
                    } else {
                        gemm(av, !trans_a, gd, false, db, k, m, n, true);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..batch {
                        let (gs, bs) = (&gd[i * sc..(i + 1) * sc], &bv[i * sb..(i + 1) * sb]);
                        let out = &mut da[i * sa..(i + 1) * sa];
                        if trans_a {
                            gemm(bs, trans_b, gs, true, out, k, n, m, true);
                        } else {
                            gemm(gs, false, bs, !trans_b, out, m, n, k, true);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for i in 0..batch {
                        let (gs, as_) = (&gd[i * sc..(i + 1) * sc], &av[i * sa..(i + 1) * sa]);
                        let out = &mut db[i * sb..(i + 1) * sb];
                        if trans_b {
                            gemm(gs, true, as_, trans_a, out, n, m, k, true);
                        } else {
                            gemm(as_, !trans_a, gs, false, out, k, m, n, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(dv) = self.slot(grads, v) {
                        add_into(dv, gd);
                    }
                }
            }
            &Op::AddBroadcast(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.slot(grads, b) {
                    let n = db.len();
                    for chunk in gd.chunks(n) {
                        add_into(db, chunk);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(gd).zip(bv) {
                        *d = *d + gi * bi;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(gd).zip(av) {
                        *d = *d + gi * ai;
                    }
                }
            }
            &Op::Scale(a, factor) => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &gi) in da.iter_mut().zip(gd) {
                        *d = *d + gi * factor;
                    }
                }
            }
            Op::ScaleRows(a, factors) => {
                if let Some(da) = self.slot(grads, *a) {
                    let row = gd.len() / factors.len();
                    for ((dc, gc), &f) in da.chunks_mut(row).zip(gd.chunks(row)).zip(factors) {
                        for (d, &gi) in dc.iter_mut().zip(gc) {
                            *d = *d + gi * f;
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, gd);
                }
            }
            Op::Permute(a, axes) => {
                if let Some(da) = self.slot(grads, *a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let back = permute_tensor(g, &inverse);
                    add_into(da, back.data());
                }
            }
            &Op::SliceRows { a, start } => {
                if let Some(da) = self.slot(grads, a) {
                    let off = start * (gd.len() / node.value.shape()[0]);
                    add_into(&mut da[off..off + gd.len()], gd);
                }
            }
            &Op::PrependToken { x, token } => {
                let s = node.value.shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                if let Some(dx) = self.slot(grads, x) {
                    for i in 0..b {
                        add_into(
                            &mut dx[i * (n - 1) * d..(i + 1) * (n - 1) * d],
                            &gd[(i * n + 1) * d..(i + 1) * n * d],
                        );
                    }
                }
                if let Some(dt) = self.slot(grads, token) {
                    for i in 0..b {
                        add_into(dt, &gd[i * n * d..(i * n + 1) * d]);
                    }
                }
            }
            &Op::SelectToken { x, index } => {
                if let Some(dx) = self.slot(grads, x) {
                    let s = self.shape(x);
                    let (b, n, d) = (s[0], s[1], s[2]);
                    for i in 0..b {
                        let start = (i * n + index) * d;
                        add_into(&mut dx[start..start + d], &gd[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let d = node.value.last_dim();
                let rows = gd.len() / d;
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + gd[r * d + j] * normalized[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for chunk in gd.chunks(d) {
                        add_into(db, chunk);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let dn = T::from_f64(d as f64);
                    for r in 0..rows {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * normalized[r * d + j];
                        }
                        let (mean_dh, mean_dh_h) = (sum_dh / dn, sum_dh_h / dn);
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            let h = normalized[r * d + j];
                            dx[r * d + j] = dx[r * d + j] + rstd[r] * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    for ((dc, yc), gc) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let dot = yc.iter().zip(gc).fold(T::zero(), |a, (&yi, &gi)| a + yi * gi);
                        for ((d, &yi), &gi) in dc.iter_mut().zip(yc).zip(gc) {
                            *d = *d + yi * (gi - dot);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                if let Some(dx) = self.slot(grads, x) {
                    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
                    let half = T::from_f64(0.5);
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(gd) {
                        let pdf = inv_sqrt_2pi * (-half * xi * xi).exp();
                        *d = *d + gi * (std_normal_cdf(xi) + xi * pdf);
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(gd) {
                        if xi > T::zero() {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let classes = probs.len() / labels.len();
                    let scale = gd[0] / T::from_f64(labels.len() as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == label { T::one() } else { T::zero() };
                            let i = r * classes + c;
                            dl[i] = dl[i] + scale * (probs[i] - target);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for d in dx.iter_mut() {
                        *d = *d + gd[0];
                    }
                }
            }
        }
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if `v` does not require one or the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient of a parameter over all its uses.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Parameters that appeared on the tape, in id order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (-x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erfc()
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; nd];
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    loop {
        let base: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // advance all axes but the innermost
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out).expect("permutation preserves size");
            }
            ax -= 1;
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
}
