//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! metadata to replay its vector-Jacobian product. The tape is rebuilt per
//! forward pass, so strategy-dependent wiring costs nothing extra. Node ids
//! are topological by construction: a single reverse sweep propagates
//! gradients to every reachable leaf exactly once.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::data::{numel, row_major_strides, Mask, Param, Real, TensorData};

/// Handle to a node on a [`Tape`]. Values and gradients are read back
/// through the tape that produced the handle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

enum Op<T: Real> {
    Leaf,
    Add { a: usize, b: usize },
    /// `b`'s shape is a suffix of `a`'s; `b` broadcasts over the leading dims.
    AddSuffix { a: usize, b: usize },
    Scale { x: usize, c: T },
    Matmul { a: usize, b: usize },
    Permute { x: usize, axes: Vec<usize> },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    SumAxis { x: usize, axis: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    SoftmaxMasked { x: usize, keep: Option<Vec<bool>> },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: T },
    Lookup { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, keep: Vec<bool> },
    PairDistance { a: usize, b: usize, keep: Vec<bool> },
    CosineSquared { a: usize, b: usize },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    trainable: bool,
}

/// The recording tape. Single-threaded; create one per forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, trainable: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            trainable,
        });
        Tensor { id }
    }

    /// Record a constant (non-trainable) leaf.
    pub fn leaf(&mut self, value: TensorData<T>) -> Tensor {
        let shape = value.shape().to_vec();
        let data = value.data().to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Tensor {
        self.push(Vec::new(), vec![v], Op::Leaf, false)
    }

    /// Register a trainable parameter leaf. The value is snapshotted, so
    /// later mutation of the parameter cannot affect this pass. Registering
    /// the same name twice is allowed; [`Tape::param_grad`] sums over all
    /// registrations.
    pub fn param(&mut self, p: &Param<T>) -> Tensor {
        let t = self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            Op::Leaf,
            true,
        );
        self.params.push((p.name.clone(), t.id));
        t
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn data(&self, t: Tensor) -> &[T] {
        &self.nodes[t.id].data
    }

    pub fn to_data(&self, t: Tensor) -> TensorData<T> {
        TensorData::new(self.nodes[t.id].shape.clone(), self.nodes[t.id].data.clone())
            .expect("node invariant")
    }

    /// Value of a one-element tensor.
    pub fn item(&self, t: Tensor) -> T {
        debug_assert_eq!(self.nodes[t.id].data.len(), 1);
        self.nodes[t.id].data[0]
    }

    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.nodes[t.id].grad.as_deref()
    }

    /// Gradient of a named parameter after [`Tape::backward`], summed over
    /// every registration of that name. `None` if the name was never
    /// registered on this tape.
    pub fn param_grad(&self, name: &str) -> Option<Vec<T>> {
        let mut acc: Option<Vec<T>> = None;
        for (n, id) in &self.params {
            if n != name {
                continue;
            }
            let node = &self.nodes[*id];
            let g = node
                .grad
                .clone()
                .unwrap_or_else(|| vec![T::zero(); node.data.len()]);
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (ai, gi) in a.iter_mut().zip(g.iter()) {
                        *ai += *gi;
                    }
                }
            }
        }
        acc
    }

    /// All parameter gradients keyed by name, in name order.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (name, _) in &self.params {
            if !out.contains_key(name) {
                if let Some(g) = self.param_grad(name) {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(self.mismatch("add", a, b));
        }
        let data: Vec<T> = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, Op::Add { a: a.id, b: b.id }, false))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape (bias add,
    /// positional encodings).
    pub fn add_suffix(&mut self, x: Tensor, y: Tensor) -> Result<Tensor> {
        let xs = &self.nodes[x.id].shape;
        let ys = &self.nodes[y.id].shape;
        if ys.len() > xs.len() || &xs[xs.len() - ys.len()..] != ys.as_slice() {
            return Err(self.mismatch("add_suffix", x, y));
        }
        let ny = self.nodes[y.id].data.len().max(1);
        let data: Vec<T> = self.nodes[x.id]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| *v + self.nodes[y.id].data[i % ny])
            .collect();
        let shape = self.nodes[x.id].shape.clone();
        Ok(self.push(shape, data, Op::AddSuffix { a: x.id, b: y.id }, false))
    }

    pub fn scale(&mut self, x: Tensor, c: T) -> Tensor {
        let data: Vec<T> = self.nodes[x.id].data.iter().map(|v| *v * c).collect();
        let shape = self.nodes[x.id].shape.clone();
        self.push(shape, data, Op::Scale { x: x.id, c }, false)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// Batch dims must be equal, or one operand may be a plain matrix that
    /// broadcasts over the other's batch dims.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let geo = self.matmul_geometry(a, b)?;
        let (m, k, n) = (geo.m, geo.k, geo.n);
        let mut data = vec![T::zero(); geo.batch * m * n];
        for bi in 0..geo.batch {
            let a_off = if geo.a_batched { bi * m * k } else { 0 };
            let b_off = if geo.b_batched { bi * k * n } else { 0 };
            matmul_nn(
                &self.nodes[a.id].data[a_off..a_off + m * k],
                &self.nodes[b.id].data[b_off..b_off + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = geo.batch_shape.clone();
        shape.push(m);
        shape.push(n);
        Ok(self.push(shape, data, Op::Matmul { a: a.id, b: b.id }, false))
    }

    /// Reorder axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&mut self, x: Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        if !is_permutation(axes, shape.len()) {
            return Err(Error::Config(alloc::format!(
                "permute: axes {axes:?} is not a permutation of 0..{}",
                shape.len()
            )));
        }
        let (data, new_shape) = permute_raw(&self.nodes[x.id].data, &shape, axes);
        Ok(self.push(
            new_shape,
            data,
            Op::Permute {
                x: x.id,
                axes: axes.to_vec(),
            },
            false,
        ))
    }

    pub fn reshape(&mut self, x: Tensor, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.nodes[x.id].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.id].shape.clone(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.nodes[x.id].data.clone();
        Ok(self.push(new_shape.to_vec(), data, Op::Reshape { x: x.id }, false))
    }

    /// Concatenate along `axis`; inputs agree on every other extent.
    pub fn concat(&mut self, xs: &[Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Config("concat: empty input list".into()));
        }
        let first = self.nodes[xs[0].id].shape.clone();
        let rank = first.len();
        if axis >= rank {
            return Err(Error::Config(alloc::format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        let mut axis_total = 0usize;
        for x in xs {
            let s = &self.nodes[x.id].shape;
            if s.len() != rank || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for x in xs {
                let ext = self.nodes[x.id].shape[axis];
                let slab = ext * inner;
                data.extend_from_slice(&self.nodes[x.id].data[o * slab..(o + 1) * slab]);
            }
        }
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                xs: xs.iter().map(|t| t.id).collect(),
                axis,
            },
            false,
        ))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Config("concat_last: empty input list".into()));
        }
        let axis = self.nodes[xs[0].id].shape.len().saturating_sub(1);
        self.concat(xs, axis)
    }

    /// Sum out one axis (no kept dim).
    pub fn sum_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Config(alloc::format!(
                "sum_axis: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let ext = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                let base = (o * ext + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.nodes[x.id].data[base + i];
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        Ok(self.push(new_shape, data, Op::SumAxis { x: x.id, axis }, false))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let data: Vec<T> = self.nodes[x.id]
            .data
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let shape = self.nodes[x.id].shape.clone();
        self.push(shape, data, Op::Relu { x: x.id }, false)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let data: Vec<T> = self.nodes[x.id].data.iter().map(|v| sigmoid(*v)).collect();
        let shape = self.nodes[x.id].shape.clone();
        self.push(shape, data, Op::Sigmoid { x: x.id }, false)
    }

    /// Row-wise softmax over the last axis with an optional keep-mask
    /// (`true` = participates). Masked positions are exactly zero; rows are
    /// stabilized by max subtraction. A fully masked row is an error.
    pub fn softmax_masked(&mut self, x: Tensor, mask: Option<&Mask>) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        if shape.is_empty() {
            return Err(Error::Config("softmax_masked: scalar input".into()));
        }
        let keep = match mask {
            Some(m) => Some(m.expand_to("softmax_masked", &shape)?),
            None => None,
        };
        let n = *shape.last().expect("non-scalar");
        let rows = numel(&shape) / n;
        let xd = &self.nodes[x.id].data;
        let mut data = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let base = r * n;
            let row_keep = |i: usize| keep.as_ref().map_or(true, |k| k[base + i]);
            let mut max = T::neg_infinity();
            let mut any = false;
            for i in 0..n {
                if row_keep(i) {
                    any = true;
                    if xd[base + i] > max {
                        max = xd[base + i];
                    }
                }
            }
            if !any {
                return Err(Error::FullyMaskedRow {
                    op: "softmax_masked",
                    row: r,
                });
            }
            let mut denom = T::zero();
            for i in 0..n {
                if row_keep(i) {
                    let e = (xd[base + i] - max).exp();
                    data[base + i] = e;
                    denom += e;
                }
            }
            for i in 0..n {
                if row_keep(i) {
                    data[base + i] = data[base + i] / denom;
                }
            }
        }
        Ok(self.push(
            shape,
            data,
            Op::SoftmaxMasked { x: x.id, keep },
            false,
        ))
    }

    /// Per-position layer normalization over the last axis with trainable
    /// gain and bias of shape `[d]`.
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: T) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d == 0
            || self.nodes[gain.id].shape != [d]
            || self.nodes[bias.id].shape != [d]
        {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gain.id].shape.clone(),
            });
        }
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm: eps must be positive".into()));
        }
        let rows = numel(&shape) / d;
        let xd = &self.nodes[x.id].data;
        let g = &self.nodes[gain.id].data;
        let b = &self.nodes[bias.id].data;
        let mut data = vec![T::zero(); xd.len()];
        let dt = T::from_usize(d);
        for r in 0..rows {
            let base = r * d;
            let mean = xd[base..base + d].iter().copied().sum::<T>() / dt;
            let var = xd[base..base + d]
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<T>()
                / dt;
            let inv = (var + eps).sqrt().recip();
            for i in 0..d {
                let xhat = (xd[base + i] - mean) * inv;
                data[base + i] = xhat * g[i] + b[i];
            }
        }
        Ok(self.push(
            shape,
            data,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            false,
        ))
    }

    /// Row lookup: `table[ids[i], :]` for each id, shaped
    /// `batch_shape + [d]`.
    pub fn lookup(&mut self, table: Tensor, ids: &[usize], batch_shape: &[usize]) -> Result<Tensor> {
        let tshape = self.nodes[table.id].shape.clone();
        if tshape.len() != 2 {
            return Err(Error::Config("lookup: table must be rank 2".into()));
        }
        let (v, d) = (tshape[0], tshape[1]);
        if numel(batch_shape) != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "lookup",
                lhs: batch_shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    op: "lookup",
                    id,
                    vocab: v,
                });
            }
            data.extend_from_slice(&self.nodes[table.id].data[id * d..(id + 1) * d]);
        }
        let mut shape = batch_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            data,
            Op::Lookup {
                table: table.id,
                ids: ids.to_vec(),
            },
            false,
        ))
    }

    /// Mean negative log-likelihood over kept positions.
    ///
    /// `logits` is `[.., V]`; `targets` and `keep` are flattened over the
    /// leading dims. Errors if every position is masked or an id is out of
    /// range.
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[usize], keep: &[bool]) -> Result<Tensor> {
        let shape = self.nodes[logits.id].shape.clone();
        if shape.is_empty() {
            return Err(Error::Config("cross_entropy: scalar logits".into()));
        }
        let v = *shape.last().expect("non-scalar");
        let rows = numel(&shape) / v;
        if targets.len() != rows || keep.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows],
                rhs: vec![targets.len()],
            });
        }
        let n_kept = keep.iter().filter(|k| **k).count();
        if n_kept == 0 {
            return Err(Error::FullyMaskedRow {
                op: "cross_entropy",
                row: 0,
            });
        }
        let xd = &self.nodes[logits.id].data;
        let mut total = T::zero();
        for r in 0..rows {
            if !keep[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::TokenOutOfRange {
                    op: "cross_entropy",
                    id: targets[r],
                    vocab: v,
                });
            }
            let base = r * v;
            let row = &xd[base..base + v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|x| (*x - max).exp()).sum::<T>().ln();
            total += lse - row[targets[r]];
        }
        let value = total / T::from_usize(n_kept);
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
            },
            false,
        ))
    }

    /// Mean `1 - cos^2` between paired position vectors of two `[.., d]`
    /// tensors, averaged over kept positions. `keep` is flattened over the
    /// leading dims. Errors on a zero vector at a kept position.
    pub fn pair_distance(&mut self, a: Tensor, b: Tensor, keep: &[bool]) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(self.mismatch("pair_distance", a, b));
        }
        let shape = self.nodes[a.id].shape.clone();
        if shape.is_empty() {
            return Err(Error::Config("pair_distance: scalar input".into()));
        }
        let d = *shape.last().expect("non-scalar");
        let rows = numel(&shape) / d;
        if keep.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "pair_distance",
                lhs: vec![rows],
                rhs: vec![keep.len()],
            });
        }
        let n_kept = keep.iter().filter(|k| **k).count();
        if n_kept == 0 {
            return Err(Error::FullyMaskedRow {
                op: "pair_distance",
                row: 0,
            });
        }
        let ad = &self.nodes[a.id].data;
        let bd = &self.nodes[b.id].data;
        let mut total = T::zero();
        for r in 0..rows {
            if !keep[r] {
                continue;
            }
            let base = r * d;
            let c2 = cos2("pair_distance", &ad[base..base + d], &bd[base..base + d], r)?;
            total += T::one() - c2;
        }
        let value = total / T::from_usize(n_kept);
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::PairDistance {
                a: a.id,
                b: b.id,
                keep: keep.to_vec(),
            },
            false,
        ))
    }

    /// Squared cosine similarity of two vectors, in `[0, 1]`.
    pub fn cosine_squared(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let ashape = self.nodes[a.id].shape.clone();
        if ashape.len() != 1 || self.nodes[b.id].shape != ashape {
            return Err(self.mismatch("cosine_squared", a, b));
        }
        let value = cos2(
            "cosine_squared",
            &self.nodes[a.id].data,
            &self.nodes[b.id].data,
            0,
        )?;
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::CosineSquared { a: a.id, b: b.id },
            false,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` for every
    /// trainable leaf (zeros where the loss does not reach).
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.nodes[loss.id].data.len(),
            });
        }
        for node in &mut self.nodes {
            if node.trainable && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.data.len()]);
            }
        }
        self.acc(loss.id, &[T::one()]);
        for id in (0..=loss.id).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, inc: &[T]) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => {
                for (gi, ii) in g.iter_mut().zip(inc.iter()) {
                    *gi += *ii;
                }
            }
            None => node.grad = Some(inc.to_vec()),
        }
    }

    fn backward_node(&mut self, id: usize) {
        let g = self.nodes[id].grad.clone().expect("checked by caller");
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, &g);
                self.acc(b, &g);
            }
            Op::AddSuffix { a, b } => {
                let (a, b) = (*a, *b);
                let ny = self.nodes[b].data.len().max(1);
                let mut db = vec![T::zero(); self.nodes[b].data.len()];
                for (i, gi) in g.iter().enumerate() {
                    db[i % ny] += *gi;
                }
                self.acc(a, &g);
                self.acc(b, &db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<T> = g.iter().map(|v| *v * c).collect();
                self.acc(x, &dx);
            }
            Op::Matmul { a, b } => {
                let (a_t, b_t) = (Tensor { id: *a }, Tensor { id: *b });
                let (a, b) = (*a, *b);
                let geo = self.matmul_geometry(a_t, b_t).expect("validated at forward");
                let (m, k, n) = (geo.m, geo.k, geo.n);
                let mut da = vec![T::zero(); self.nodes[a].data.len()];
                let mut db = vec![T::zero(); self.nodes[b].data.len()];
                for bi in 0..geo.batch {
                    let a_off = if geo.a_batched { bi * m * k } else { 0 };
                    let b_off = if geo.b_batched { bi * k * n } else { 0 };
                    let go = &g[bi * m * n..(bi + 1) * m * n];
                    // dA += dOut @ B^T
                    matmul_nt(
                        go,
                        &self.nodes[b].data[b_off..b_off + k * n],
                        &mut da[a_off..a_off + m * k],
                        m,
                        n,
                        k,
                    );
                    // dB += A^T @ dOut
                    matmul_tn(
                        &self.nodes[a].data[a_off..a_off + m * k],
                        go,
                        &mut db[b_off..b_off + k * n],
                        m,
                        k,
                        n,
                    );
                }
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let inv = invert_permutation(axes);
                let out_shape = self.nodes[id].shape.clone();
                let (dx, _) = permute_raw(&g, &out_shape, &inv);
                self.acc(x, &dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.acc(x, &g);
            }
            Op::Concat { xs, axis } => {
                let xs = xs.clone();
                let axis = *axis;
                let out_shape = self.nodes[id].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_slab = out_shape[axis] * inner;
                let mut offset = 0usize;
                for x in xs {
                    let ext = self.nodes[x].shape[axis];
                    let slab = ext * inner;
                    let mut dx = vec![T::zero(); self.nodes[x].data.len()];
                    for o in 0..outer {
                        dx[o * slab..(o + 1) * slab]
                            .copy_from_slice(&g[o * total_slab + offset..o * total_slab + offset + slab]);
                    }
                    self.acc(x, &dx);
                    offset += slab;
                }
            }
            Op::SumAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let in_shape = self.nodes[x].shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let ext = in_shape[axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let mut dx = vec![T::zero(); self.nodes[x].data.len()];
                for o in 0..outer {
                    for j in 0..ext {
                        let base = (o * ext + j) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i];
                        }
                    }
                }
                self.acc(x, &dx);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.nodes[x].data.iter())
                    .map(|(gi, xi)| if *xi > T::zero() { *gi } else { T::zero() })
                    .collect();
                self.acc(x, &dx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.nodes[id].data.iter())
                    .map(|(gi, oi)| *gi * *oi * (T::one() - *oi))
                    .collect();
                self.acc(x, &dx);
            }
            Op::SoftmaxMasked { x, keep } => {
                let x = *x;
                let keep = keep.clone();
                let shape = self.nodes[id].shape.clone();
                let n = *shape.last().expect("non-scalar");
                let rows = numel(&shape) / n;
                let y = &self.nodes[id].data;
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let base = r * n;
                    let row_keep = |i: usize| keep.as_ref().map_or(true, |k| k[base + i]);
                    let mut dot = T::zero();
                    for i in 0..n {
                        if row_keep(i) {
                            dot += g[base + i] * y[base + i];
                        }
                    }
                    for i in 0..n {
                        if row_keep(i) {
                            dx[base + i] = y[base + i] * (g[base + i] - dot);
                        }
                    }
                }
                self.acc(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let shape = self.nodes[x].shape.clone();
                let d = *shape.last().expect("validated at forward");
                let rows = numel(&shape) / d;
                let dt = T::from_usize(d);
                let mut dx = vec![T::zero(); rows * d];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for r in 0..rows {
                    let base = r * d;
                    let xr = &self.nodes[x].data[base..base + d];
                    let mean = xr.iter().copied().sum::<T>() / dt;
                    let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dt;
                    let inv = (var + eps).sqrt().recip();
                    let gd = &self.nodes[gain].data;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * inv;
                        let gdy = g[base + i] * gd[i];
                        s1 += gdy;
                        s2 += gdy * xhat;
                        dg[i] += g[base + i] * xhat;
                        db[i] += g[base + i];
                    }
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * inv;
                        let gdy = g[base + i] * gd[i];
                        dx[base + i] = inv * (gdy - s1 / dt - xhat * s2 / dt);
                    }
                }
                self.acc(x, &dx);
                self.acc(gain, &dg);
                self.acc(bias, &db);
            }
            Op::Lookup { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table].shape[1];
                let mut dt = vec![T::zero(); self.nodes[table].data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        dt[id * d + i] += g[r * d + i];
                    }
                }
                self.acc(table, &dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let keep = keep.clone();
                let v = *self.nodes[logits].shape.last().expect("validated");
                let rows = targets.len();
                let n_kept = keep.iter().filter(|k| **k).count();
                let scale = g[0] / T::from_usize(n_kept);
                let xd = &self.nodes[logits].data;
                let mut dx = vec![T::zero(); xd.len()];
                for r in 0..rows {
                    if !keep[r] {
                        continue;
                    }
                    let base = r * v;
                    let row = &xd[base..base + v];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let denom: T = row.iter().map(|x| (*x - max).exp()).sum();
                    for i in 0..v {
                        let p = (row[i] - max).exp() / denom;
                        let delta = if i == targets[r] { T::one() } else { T::zero() };
                        dx[base + i] = scale * (p - delta);
                    }
                }
                self.acc(logits, &dx);
            }
            Op::PairDistance { a, b, keep } => {
                let (a, b) = (*a, *b);
                let keep = keep.clone();
                let d = *self.nodes[a].shape.last().expect("validated");
                let rows = keep.len();
                let n_kept = keep.iter().filter(|k| **k).count();
                // d/dx of mean(1 - cos^2) = -(1/N) * d cos^2 / dx
                let scale = -g[0] / T::from_usize(n_kept);
                let mut da = vec![T::zero(); self.nodes[a].data.len()];
                let mut db = vec![T::zero(); self.nodes[b].data.len()];
                for r in 0..rows {
                    if !keep[r] {
                        continue;
                    }
                    let base = r * d;
                    cos2_grad(
                        &self.nodes[a].data[base..base + d],
                        &self.nodes[b].data[base..base + d],
                        scale,
                        &mut da[base..base + d],
                        &mut db[base..base + d],
                    );
                }
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::CosineSquared { a, b } => {
                let (a, b) = (*a, *b);
                let d = self.nodes[a].data.len();
                let mut da = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                cos2_grad(
                    &self.nodes[a].data,
                    &self.nodes[b].data,
                    g[0],
                    &mut da,
                    &mut db,
                );
                self.acc(a, &da);
                self.acc(b, &db);
            }
        }
    }

    fn mismatch(&self, op: &'static str, a: Tensor, b: Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.id].shape.clone(),
            rhs: self.nodes[b.id].shape.clone(),
        }
    }

    fn matmul_geometry(&self, a: Tensor, b: Tensor) -> Result<MatmulGeometry> {
        let ash = &self.nodes[a.id].shape;
        let bsh = &self.nodes[b.id].shape;
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let abatch = &ash[..ash.len() - 2];
        let bbatch = &bsh[..bsh.len() - 2];
        let (batch_shape, a_batched, b_batched) = if abatch == bbatch {
            (abatch.to_vec(), !abatch.is_empty(), !bbatch.is_empty())
        } else if abatch.is_empty() {
            (bbatch.to_vec(), false, true)
        } else if bbatch.is_empty() {
            (abatch.to_vec(), true, false)
        } else {
            return Err(self.mismatch("matmul", a, b));
        };
        Ok(MatmulGeometry {
            m,
            k,
            n,
            batch: numel(&batch_shape),
            batch_shape,
            a_batched,
            b_batched,
        })
    }
}

struct MatmulGeometry {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    batch_shape: Vec<usize>,
    a_batched: bool,
    b_batched: bool,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// cos^2 of two d-vectors; errors on a zero vector.
fn cos2<T: Real>(op: &'static str, a: &[T], b: &[T], position: usize) -> Result<T> {
    let mut s = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        s += *x * *y;
        na += *x * *x;
        nb += *y * *y;
    }
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroVector { op, position });
    }
    Ok((s * s) / (na * nb))
}

/// Accumulate `coeff * d cos^2 / da` and `coeff * d cos^2 / db`.
///
/// With s = a.b, p = |a|^2, q = |b|^2: d cos^2/da = (2s/(pq)) b - (2s^2/(p^2 q)) a.
fn cos2_grad<T: Real>(a: &[T], b: &[T], coeff: T, da: &mut [T], db: &mut [T]) {
    let mut s = T::zero();
    let mut p = T::zero();
    let mut q = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        s += *x * *y;
        p += *x * *x;
        q += *y * *y;
    }
    let two = T::from_f64(2.0);
    let common = two * s / (p * q);
    for i in 0..a.len() {
        da[i] += coeff * (common * b[i] - common * s / p * a[i]);
        db[i] += coeff * (common * a[i] - common * s / q * b[i]);
    }
}

/// out = A @ B with A `[m, k]`, B `[k, n]`; out is overwritten.
fn matmul_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += A @ B^T with A `[m, n]`, B `[k, n]`; out is `[m, k]`.
fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for j in 0..k {
            let mut acc = T::zero();
            let arow = &a[i * n..(i + 1) * n];
            let brow = &b[j * n..(j + 1) * n];
            for t in 0..n {
                acc += arow[t] * brow[t];
            }
            out[i * k + j] += acc;
        }
    }
}

/// out += A^T @ B with A `[m, k]`, B `[m, n]`; out is `[k, n]`.
fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for t in 0..m {
        for i in 0..k {
            let av = a[t * k + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Reorder `src` (shaped `src_shape`) so that output axis `i` walks input
/// axis `axes[i]`.
fn permute_raw<T: Real>(src: &[T], src_shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = src_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let in_strides = row_major_strides(src_shape);
    let out_strides = row_major_strides(&out_shape);
    let mut out = vec![T::zero(); src.len()];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut in_flat = 0usize;
        for d in 0..rank {
            let coord = (flat / out_strides[d]) % out_shape[d];
            in_flat += coord * in_strides[axes[d]];
        }
        *o = src[in_flat];
    }
    (out, out_shape)
}
