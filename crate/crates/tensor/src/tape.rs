use std::collections::HashMap;

use rand::Rng;

use crate::kernels::{self, gemm};
use crate::{Grads, ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param(ParamId),
    /// `b` is broadcast over the leading axes of `a`.
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        count: usize,
        smoothing: T,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a single forward pass so that [`Tape::backward`] can replay it
/// in reverse.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// reverse topological order. A tape built with [`Tape::inference`] keeps
/// values only and cannot produce gradients.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Tape {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const, &[])
    }

    /// Places a parameter on the tape. Repeated calls with the same id
    /// return the same handle, so a parameter used twice (tied weights)
    /// accumulates both gradient contributions.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let node = Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        };
        self.nodes.push(node);
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.shape(a).len() >= self.shape(b).len() {
            (a, b)
        } else {
            (b, a)
        };
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !sa.ends_with(sb) {
            return Err(TensorError::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let bd = self.data(b);
        let blen = bd.len();
        let data: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % blen])
            .collect();
        let value = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Scale { a, s }, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Batched product `op(a) · op(b)` over the last two axes.
    ///
    /// `a` is `[..., m, k]` (or `[..., k, m]` when `ta`); `b` is either a
    /// matrix shared by every batch entry or has the same leading axes as `a`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let g = MatMulGeom::new(self.shape(a), self.shape(b), ta, tb)?;
        let mut out = vec![T::zero(); g.batch * g.m * g.n];
        let ad = self.data(a);
        let bd = self.data(b);
        if g.b_shared && !ta {
            gemm(g.batch * g.m, g.k, g.n, ad, false, bd, tb, &mut out, false);
        } else {
            for i in 0..g.batch {
                let a_off = i * g.m * g.k;
                let b_off = if g.b_shared { 0 } else { i * g.k * g.n };
                gemm(
                    g.m,
                    g.k,
                    g.n,
                    &ad[a_off..],
                    ta,
                    &bd[b_off..],
                    tb,
                    &mut out[i * g.m * g.n..(i + 1) * g.m * g.n],
                    false,
                );
            }
        }
        let value = Tensor::from_parts(g.out_shape.clone(), out);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(TensorError::shape(
                "transpose",
                format!("{:?}", self.shape(a)),
            ));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::shape(
                "permute",
                format!("{shape:?} by {perm:?}"),
            ));
        }
        let (out_shape, data) = kernels::permute(self.data(a), shape, perm);
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Gathers rows of `table` (`[V, d]`); the result has shape
    /// `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(TensorError::shape(
                "embedding",
                format!("table {ts:?}, {} ids into {prefix:?}", ids.len()),
            ));
        }
        let (v, d) = (ts[0], ts[1]);
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(TensorError::shape(
                "softmax",
                format!("axis {axis} of {shape:?}"),
            ));
        }
        let data = kernels::softmax_axis(self.data(a), shape, axis);
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(value, Op::Softmax { a, axis }, &[a]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "x {shape:?}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let rows = xd.len() / d;
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::from_parts(shape.to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Relu { a }, &[a])
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. `p == 0`
    /// returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::shape("dropout", format!("p = {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Dropout { a, mask }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape(
                "concat",
                format!("axis {axis} of {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Mean token cross entropy of `logits` (`[..., V]`) against `targets`,
    /// skipping positions whose target is `pad`. All-pad input yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, pad, 0.0)
    }

    /// Cross entropy against a target distribution that puts `1 - smoothing`
    /// on the gold token and spreads `smoothing` uniformly over the vocabulary.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad: usize,
        smoothing: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        let v = *shape.last().unwrap();
        let rows = self.value(logits).numel() / v;
        if rows != targets.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let ld = self.data(logits);
        let eps = T::from_f64(smoothing);
        let inv_v = T::from_f64(1.0 / v as f64);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
            let row = &ld[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            let mut nll = lse - row[t];
            if smoothing > 0.0 {
                let mean_logit = row.iter().copied().sum::<T>() * inv_v;
                nll = (T::one() - eps) * nll + eps * (lse - mean_logit);
            }
            total += nll;
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_f64(count as f64)
        };
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                count,
                smoothing: eps,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s = self.data(a).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Reverse pass from a scalar `loss`. Parameters of `store` that the
    /// loss does not reach receive zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Grads<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut out: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.pullback(node, g, &mut grads, &mut out)?;
        }
        Ok(Grads::from_tensors(out))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn pullback(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut [Tensor<T>],
    ) -> Result<()> {
        match &node.op {
            Op::Const => {}
            Op::Param(id) => {
                let dst = out[id.0].data_mut();
                for (d, x) in dst.iter_mut().zip(&g) {
                    *d += *x;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*b) {
                    let blen = self.value(*b).numel();
                    let mut gb = vec![T::zero(); blen];
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % blen] += x;
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let ga = g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale { a, s } => {
                let ga = g.iter().map(|&x| x * *s).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_pullback(*a, *b, *ta, *tb, &g, grads)?,
            Op::Reshape { a } => self.accumulate(grads, *a, g),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, ga) = kernels::permute(&g, node.value.shape(), &inv);
                self.accumulate(grads, *a, ga);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    for (x, &y) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_extents(node.value.shape(), *axis);
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let k = base + j * inner;
                            dot += g[k] * y[k];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            ga[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = xhat.len() / d;
                let gd = self.data(*gain);
                if self.needs(*gain) || self.needs(*bias) {
                    let mut gg = vec![T::zero(); d];
                    let mut gbias = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                            gbias[j] += g[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                    self.accumulate(grads, *bias, gbias);
                }
                if self.needs(*x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let mut gx = vec![T::zero(); xhat.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gd[j];
                            dxhat[j] = dh;
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] =
                                rstd[r] * (dxhat[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gelu { a } => {
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&x, &v)| x * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu { a } => {
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Dropout { a, mask } => {
                let ga = g.iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                count,
                smoothing,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let ld = self.data(*logits);
                let mut gl = vec![T::zero(); ld.len()];
                if *count > 0 {
                    let scale = g[0] / T::from_f64(*count as f64);
                    let uniform = *smoothing / T::from_f64(v as f64);
                    let gold = T::one() - *smoothing;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let row = &ld[r * v..(r + 1) * v];
                        let lse = kernels::log_sum_exp(row);
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            dst[j] = ((row[j] - lse).exp() - uniform) * scale;
                        }
                        dst[t] -= gold * scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let x = g[0] / T::from_f64(n as f64);
                self.accumulate(grads, *a, vec![x; n]);
            }
        }
        Ok(())
    }

    fn matmul_pullback(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let geo = MatMulGeom::new(self.shape(a), self.shape(b), ta, tb)?;
        let (m, k, n) = (geo.m, geo.k, geo.n);
        let ad = self.data(a);
        let bd = self.data(b);
        if self.needs(a) {
            let mut ga = vec![T::zero(); ad.len()];
            if geo.b_shared && !ta {
                // dA = dC · op(B)ᵀ as one tall product
                gemm(geo.batch * m, n, k, g, false, bd, !tb, &mut ga, false);
            } else {
                for i in 0..geo.batch {
                    let gc = &g[i * m * n..];
                    let b_off = if geo.b_shared { 0 } else { i * k * n };
                    let dst = &mut ga[i * m * k..(i + 1) * m * k];
                    if ta {
                        // stored a is k x m: da = op(B) · dCᵀ
                        gemm(k, n, m, &bd[b_off..], tb, gc, true, dst, false);
                    } else {
                        gemm(m, n, k, gc, false, &bd[b_off..], !tb, dst, false);
                    }
                }
            }
            self.accumulate(grads, a, ga);
        }
        if self.needs(b) {
            let mut gb = vec![T::zero(); bd.len()];
            if geo.b_shared && !ta {
                let rows = geo.batch * m;
                if tb {
                    // stored b is n x k: db = dCᵀ · A
                    gemm(n, rows, k, g, true, ad, false, &mut gb, false);
                } else {
                    gemm(k, rows, n, ad, true, g, false, &mut gb, false);
                }
            } else {
                for i in 0..geo.batch {
                    let gc = &g[i * m * n..];
                    let aa = &ad[i * m * k..];
                    let (dst, acc) = if geo.b_shared {
                        (&mut gb[..], true)
                    } else {
                        (&mut gb[i * k * n..(i + 1) * k * n], false)
                    };
                    if tb {
                        gemm(n, m, k, gc, true, aa, ta, dst, acc);
                    } else {
                        gemm(k, m, n, aa, !ta, gc, false, dst, acc);
                    }
                }
            }
            self.accumulate(grads, b, gb);
        }
        Ok(())
    }
}

struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
    out_shape: Vec<usize>,
}

impl MatMulGeom {
    fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let err = || TensorError::shape("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if !b_shared && &sb[..sb.len() - 2] != lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatMulGeom {
            batch: lead.iter().product(),
            m,
            k,
            n,
            b_shared,
            out_shape,
        })
    }
}
