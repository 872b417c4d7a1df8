//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward execution is eager: every op method computes its value
//! immediately and records the inputs plus whatever the backward rule needs
//! (argmax indices, softmax outputs, normalization statistics).
//! `backward` then walks the tape in reverse topological order — which is
//! simply reverse insertion order — and accumulates partials. A tensor
//! consumed by k ops receives the sum of k partial gradients.
//!
//! All reductions run sequentially in row-major index order, so results are
//! bitwise reproducible for identical inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type TensorId = usize;

/// Recorded operation. Saved fields are the values the backward rule needs.
enum Op<T> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: T,
    },
    Relu {
        x: TensorId,
    },
    Sin {
        x: TensorId,
    },
    Cos {
        x: TensorId,
    },
    /// Softmax over the last axis; the node value itself is the saved output.
    Softmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        rstd: Vec<T>,
        /// In eval mode the statistics are constants and the backward rule
        /// reduces to a per-column affine map.
        train: bool,
    },
    MaxReduce {
        x: TensorId,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Narrow {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: TensorId,
        index: Vec<usize>,
    },
    ScatterMean {
        x: TensorId,
        index: Vec<usize>,
        counts: Vec<usize>,
    },
    ScatterSum {
        x: TensorId,
        index: Vec<usize>,
    },
    SumAll {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of op nodes in topological (insertion) order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> TensorId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].value.requires_grad())
    }

    fn push_derived(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[TensorId]) -> TensorId {
        value.set_requires_grad(self.any_requires(inputs));
        self.push(value, op)
    }

    /// Insert a tensor as a leaf, keeping its requires_grad flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor<T>) -> TensorId {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    /// Insert a copy of a parameter tensor as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> TensorId {
        let copy = t.clone().with_requires_grad();
        self.push(copy, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Clone a node's value without gradient state.
    pub fn detach(&self, id: TensorId) -> Tensor<T> {
        let v = &self.nodes[id].value;
        Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("node shape is consistent")
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id].value.grad()
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        let mut out = vec![T::zero(); m * n];
        matmul_raw(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_derived(value, Op::Matmul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        if vx.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: vx.shape().to_vec(),
                reason: "rank-2 tensor required",
            });
        }
        let (m, n) = (vx.dim(0), vx.dim(1));
        let out = transpose_raw(vx.data(), m, n);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push_derived(value, Op::Transpose { x }, &[x]))
    }

    /// Elementwise addition. One operand may have a shape that is a trailing
    /// suffix of the other's; it is then tiled over the leading axes. No
    /// other implicit broadcasting exists.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (big, small) = if va.rank() >= vb.rank() {
            (va, vb)
        } else {
            (vb, va)
        };
        let offset = big.rank() - small.rank();
        if &big.shape()[offset..] != small.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let tile = small.numel().max(1);
        let mut out = big.data().to_vec();
        if small.numel() == big.numel() {
            for (o, s) in out.iter_mut().zip(small.data()) {
                *o += *s;
            }
        } else {
            for chunk in out.chunks_exact_mut(tile) {
                for (o, s) in chunk.iter_mut().zip(small.data()) {
                    *o += *s;
                }
            }
        }
        let shape = big.shape().to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push_derived(value, Op::Add { a, b }, &[a, b]))
    }

    /// `a - b`, same conformance rules as `add`.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, T::from_f64(-1.0));
        self.add(a, nb)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let out: Vec<T> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push_derived(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: TensorId, factor: T) -> TensorId {
        let vx = &self.nodes[x].value;
        let out: Vec<T> = vx.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        self.push_derived(value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let vx = &self.nodes[x].value;
        let out: Vec<T> = vx
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        self.push_derived(value, Op::Relu { x }, &[x])
    }

    pub fn sin(&mut self, x: TensorId) -> TensorId {
        let vx = &self.nodes[x].value;
        let out: Vec<T> = vx.data().iter().map(|&v| v.sin()).collect();
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        self.push_derived(value, Op::Sin { x }, &[x])
    }

    pub fn cos(&mut self, x: TensorId) -> TensorId {
        let vx = &self.nodes[x].value;
        let out: Vec<T> = vx.data().iter().map(|&v| v.cos()).collect();
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        self.push_derived(value, Op::Cos { x }, &[x])
    }

    /// Softmax over the last axis with max-subtraction for stability.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        let cols = last_axis(vx, "softmax")?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_row(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push_derived(value, Op::Softmax { x }, &[x]))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        let cols = last_axis(vx, "layer_norm")?;
        let vg = &self.nodes[gamma].value;
        let vb = &self.nodes[beta].value;
        if vg.shape() != [cols] || vb.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.numel() / cols;
        let mut out = vec![T::zero(); vx.numel()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        let inv_n = T::one() / T::from_usize(cols);
        for r in 0..rows {
            let xs = &vx.data()[r * cols..(r + 1) * cols];
            let mut mu = T::zero();
            for &v in xs {
                mu += v;
            }
            mu *= inv_n;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_n;
            let rs = T::one() / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            let os = &mut out[r * cols..(r + 1) * cols];
            for (c, (&v, o)) in xs.iter().zip(os.iter_mut()).enumerate() {
                *o = (v - mu) * rs * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push_derived(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization over the row axis of a rank-2 tensor in training
    /// mode. Uses biased batch variance for both normalization and the
    /// running-statistics update `r <- momentum*r + (1-momentum)*batch`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        momentum: T,
        eps: T,
    ) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        let cols = batch_norm_dims(vx, &self.nodes[gamma].value, &self.nodes[beta].value)?;
        let rows = vx.dim(0);
        let inv_n = T::one() / T::from_usize(rows);
        let mut mean = vec![T::zero(); cols];
        let mut var = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += vx.data()[r * cols + c];
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        for r in 0..rows {
            for c in 0..cols {
                let d = vx.data()[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v *= inv_n;
        }
        let keep = momentum;
        let blend = T::one() - momentum;
        for c in 0..cols {
            running_mean.data_mut()[c] = keep * running_mean.data()[c] + blend * mean[c];
            running_var.data_mut()[c] = keep * running_var.data()[c] + blend * var[c];
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean, rstd, true)
    }

    /// Batch normalization with frozen running statistics: a fixed affine
    /// map per feature column.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        batch_norm_dims(vx, &self.nodes[gamma].value, &self.nodes[beta].value)?;
        let mean = running_mean.data().to_vec();
        let rstd: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        self.batch_norm_apply(x, gamma, beta, mean, rstd, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    ) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        let cols = vx.dim(1);
        let vg = &self.nodes[gamma].value;
        let vb = &self.nodes[beta].value;
        let mut out = vec![T::zero(); vx.numel()];
        for (orow, xrow) in out
            .chunks_exact_mut(cols)
            .zip(vx.data().chunks_exact(cols))
        {
            for c in 0..cols {
                orow[c] = (xrow[c] - mean[c]) * rstd[c] * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push_derived(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Maximum over one axis; the argmax (first maximum under ties) is kept
    /// for the backward rule.
    pub fn max_reduce(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        if axis >= vx.rank() || vx.dim(axis) == 0 {
            return Err(Error::InvalidShape {
                op: "max_reduce",
                shape: vx.shape().to_vec(),
                reason: "axis out of range or empty",
            });
        }
        let (outer, mid, inner) = axis_split(vx.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = vx.data()[o * mid * inner + i];
                let mut best_m = 0;
                for m in 1..mid {
                    let v = vx.data()[o * mid * inner + m * inner + i];
                    if v > best {
                        best = v;
                        best_m = m;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = best_m;
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_derived(value, Op::MaxReduce { x, axis, argmax }, &[x]))
    }

    /// Concatenate along an axis. All parts must agree on every other axis.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat",
                message: alloc::string::String::from("no tensors given"),
            });
        }
        let first = self.nodes[parts[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                reason: "axis out of range",
            });
        }
        let mut total_mid = 0usize;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (&a, &b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_mid += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total_mid;
        let mut out = vec![T::zero(); outer * total_mid * inner];
        let mut offset = 0usize;
        for &p in parts {
            let v = &self.nodes[p].value;
            let mid = v.dim(axis);
            for o in 0..outer {
                let src = &v.data()[o * mid * inner..(o + 1) * mid * inner];
                let dst_start = o * total_mid * inner + offset * inner;
                out[dst_start..dst_start + mid * inner].copy_from_slice(src);
            }
            offset += mid;
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_derived(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Contiguous slice `[start, start+len)` along an axis.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        if axis >= vx.rank() || start + len > vx.dim(axis) || len == 0 {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape: vx.shape().to_vec(),
                reason: "axis or range out of bounds",
            });
        }
        let (outer, mid, inner) = axis_split(vx.shape(), axis);
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = o * mid * inner + start * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&vx.data()[src_start..src_start + len * inner]);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_derived(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Select rows of a rank-2 tensor by index; indices may repeat.
    pub fn gather_rows(&mut self, x: TensorId, index: &[usize]) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        if vx.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: vx.shape().to_vec(),
                reason: "rank-2 tensor required",
            });
        }
        let (rows, cols) = (vx.dim(0), vx.dim(1));
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                message: alloc::format!("index {bad} out of range for {rows} rows"),
            });
        }
        let mut out = vec![T::zero(); index.len() * cols];
        for (dst, &src) in out.chunks_exact_mut(cols).zip(index) {
            dst.copy_from_slice(&vx.data()[src * cols..(src + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], out)?;
        Ok(self.push_derived(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Average rows sharing an index into `slots` output rows. Slots that
    /// receive no rows stay zero. Accumulation runs in input row order.
    pub fn scatter_mean(&mut self, x: TensorId, index: &[usize], slots: usize) -> Result<TensorId> {
        let (sums, counts, cols) = self.scatter_accumulate(x, index, slots, "scatter_mean")?;
        let mut out = sums;
        for (slot, chunk) in out.chunks_exact_mut(cols).enumerate() {
            if counts[slot] > 0 {
                let inv = T::one() / T::from_usize(counts[slot]);
                for v in chunk {
                    *v *= inv;
                }
            }
        }
        let value = Tensor::new(vec![slots, cols], out)?;
        Ok(self.push_derived(
            value,
            Op::ScatterMean {
                x,
                index: index.to_vec(),
                counts,
            },
            &[x],
        ))
    }

    /// Sum rows sharing an index into `slots` output rows.
    pub fn scatter_sum(&mut self, x: TensorId, index: &[usize], slots: usize) -> Result<TensorId> {
        let (sums, _, cols) = self.scatter_accumulate(x, index, slots, "scatter_sum")?;
        let value = Tensor::new(vec![slots, cols], sums)?;
        Ok(self.push_derived(
            value,
            Op::ScatterSum {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    fn scatter_accumulate(
        &self,
        x: TensorId,
        index: &[usize],
        slots: usize,
        op: &'static str,
    ) -> Result<(Vec<T>, Vec<usize>, usize)> {
        let vx = &self.nodes[x].value;
        if vx.rank() != 2 || vx.dim(0) != index.len() {
            return Err(Error::InvalidShape {
                op,
                shape: vx.shape().to_vec(),
                reason: "rank-2 tensor with one row per index required",
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= slots) {
            return Err(Error::InvalidArgument {
                op,
                message: alloc::format!("index {bad} out of range for {slots} slots"),
            });
        }
        let cols = vx.dim(1);
        let mut sums = vec![T::zero(); slots * cols];
        let mut counts = vec![0usize; slots];
        for (row, &slot) in vx.data().chunks_exact(cols).zip(index) {
            counts[slot] += 1;
            let dst = &mut sums[slot * cols..(slot + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d += s;
            }
        }
        Ok((sums, counts, cols))
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let vx = &self.nodes[x].value;
        let mut s = T::zero();
        for &v in vx.data() {
            s += v;
        }
        self.push_derived(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x].value.numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_usize(n))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let vx = &self.nodes[x].value;
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: "element count differs from input",
            });
        }
        let value = Tensor::new(shape, vx.data().to_vec())?;
        Ok(self.push_derived(value, Op::Reshape { x }, &[x]))
    }

    /// Mean negative log-likelihood of the labels under softmax(logits).
    /// Logits are `[batch, classes]`; the saved softmax drives the exact
    /// backward rule `(softmax - onehot) / batch`.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let vx = &self.nodes[logits].value;
        if vx.rank() != 2 || vx.dim(0) != labels.len() || vx.dim(1) == 0 {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: vx.shape().to_vec(),
                reason: "rank-2 logits with one row per label required",
            });
        }
        let classes = vx.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: classes,
            });
        }
        let batch = labels.len();
        let mut probs = vx.data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            let logit = row[label];
            let lse = log_sum_exp(row);
            loss += lse - logit;
            softmax_row(row);
        }
        loss /= T::from_usize(batch);
        let value = Tensor::scalar(loss);
        Ok(self.push_derived(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `x @ weight + bias`.
    pub fn linear(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let mm = self.matmul(x, weight)?;
        self.add(mm, bias)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every requires_grad leaf with d(loss)/d(leaf).
    /// Interior gradients are freed as soon as their node is processed.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        {
            let lv = &self.nodes[loss].value;
            if !lv.is_scalar() {
                return Err(Error::NonScalarLoss {
                    shape: lv.shape().to_vec(),
                });
            }
        }
        for node in self.nodes.iter_mut() {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss].value.requires_grad() {
            grads[loss] = Some(vec![T::one()]);
        }
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.step_backward(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.set_grad(g);
            }
        }
        // Leaves that never receive a partial still hold a zero gradient.
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf)
                && node.value.requires_grad()
                && node.value.grad().is_none()
            {
                let zeros = vec![T::zero(); node.value.numel()];
                node.value.set_grad(zeros);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: TensorId, delta: Vec<T>) {
        if !self.nodes[id].value.requires_grad() {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += *di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, id: TensorId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let requires = |x: TensorId| self.nodes[x].value.requires_grad();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                if requires(*a) {
                    let bt = transpose_raw(vb.data(), k, n);
                    let mut da = vec![T::zero(); m * k];
                    matmul_raw(g, &bt, m, n, k, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if requires(*b) {
                    let at = transpose_raw(va.data(), m, k);
                    let mut db = vec![T::zero(); k * n];
                    matmul_raw(&at, g, k, m, n, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { x } => {
                let v = &self.nodes[id].value;
                let (m, n) = (v.dim(0), v.dim(1));
                self.accumulate(grads, *x, transpose_raw(g, m, n));
            }
            Op::Add { a, b } => {
                for &side in &[*a, *b] {
                    if !requires(side) {
                        continue;
                    }
                    let len = self.nodes[side].value.numel();
                    if len == g.len() {
                        self.accumulate(grads, side, g.to_vec());
                    } else {
                        let mut reduced = vec![T::zero(); len];
                        for chunk in g.chunks_exact(len) {
                            for (r, &c) in reduced.iter_mut().zip(chunk) {
                                *r += c;
                            }
                        }
                        self.accumulate(grads, side, reduced);
                    }
                }
            }
            Op::Mul { a, b } => {
                if requires(*a) {
                    let vb = &self.nodes[*b].value;
                    let da: Vec<T> = g.iter().zip(vb.data()).map(|(&gi, &bi)| gi * bi).collect();
                    self.accumulate(grads, *a, da);
                }
                if requires(*b) {
                    let va = &self.nodes[*a].value;
                    let db: Vec<T> = g.iter().zip(va.data()).map(|(&gi, &ai)| gi * ai).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<T> = g.iter().map(|&gi| gi * *factor).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                // Subgradient 0 at exactly 0.
                let vx = &self.nodes[*x].value;
                let dx: Vec<T> = g
                    .iter()
                    .zip(vx.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sin { x } => {
                let vx = &self.nodes[*x].value;
                let dx: Vec<T> = g
                    .iter()
                    .zip(vx.data())
                    .map(|(&gi, &xi)| gi * xi.cos())
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Cos { x } => {
                let vx = &self.nodes[*x].value;
                let dx: Vec<T> = g
                    .iter()
                    .zip(vx.data())
                    .map(|(&gi, &xi)| -gi * xi.sin())
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[id].value;
                let cols = y.shape()[y.rank() - 1];
                let mut dx = vec![T::zero(); y.numel()];
                for ((drow, yrow), grow) in dx
                    .chunks_exact_mut(cols)
                    .zip(y.data().chunks_exact(cols))
                    .zip(g.chunks_exact(cols))
                {
                    let mut dot = T::zero();
                    for (&gi, &yi) in grow.iter().zip(yrow) {
                        dot += gi * yi;
                    }
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gamma].value;
                let cols = vx.shape()[vx.rank() - 1];
                let rows = vx.numel() / cols;
                let inv_n = T::one() / T::from_usize(cols);
                let mut dx = vec![T::zero(); vx.numel()];
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                for r in 0..rows {
                    let xs = &vx.data()[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for c in 0..cols {
                        let xhat = (xs[c] - mu) * rs;
                        let dy = gs[c] * vg.data()[c];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dgamma[c] += gs[c] * xhat;
                        dbeta[c] += gs[c];
                    }
                    if requires(*x) {
                        let ds = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let xhat = (xs[c] - mu) * rs;
                            let dy = gs[c] * vg.data()[c];
                            ds[c] = rs * (dy - inv_n * (sum_dy + xhat * sum_dy_xhat));
                        }
                    }
                }
                if requires(*x) {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                train,
            } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gamma].value;
                let cols = vx.dim(1);
                let rows = vx.dim(0);
                let inv_n = T::one() / T::from_usize(rows);
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut sum_dy = vec![T::zero(); cols];
                let mut sum_dy_xhat = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let xhat = (vx.data()[r * cols + c] - mean[c]) * rstd[c];
                        let gi = g[r * cols + c];
                        dgamma[c] += gi * xhat;
                        dbeta[c] += gi;
                        let dy = gi * vg.data()[c];
                        sum_dy[c] += dy;
                        sum_dy_xhat[c] += dy * xhat;
                    }
                }
                if requires(*x) {
                    let mut dx = vec![T::zero(); vx.numel()];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g[r * cols + c];
                            let dy = gi * vg.data()[c];
                            dx[r * cols + c] = if *train {
                                let xhat = (vx.data()[r * cols + c] - mean[c]) * rstd[c];
                                rstd[c] * (dy - inv_n * (sum_dy[c] + xhat * sum_dy_xhat[c]))
                            } else {
                                dy * rstd[c]
                            };
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::MaxReduce { x, axis, argmax } => {
                let vx = &self.nodes[*x].value;
                let (outer, mid, inner) = axis_split(vx.shape(), *axis);
                let mut dx = vec![T::zero(); vx.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let m = argmax[o * inner + i];
                        dx[o * mid * inner + m * inner + i] += g[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[id].value.shape();
                let (outer, total_mid, inner) = axis_split(shape, *axis);
                let mut offset = 0usize;
                for &p in parts {
                    let mid = self.nodes[p].value.dim(*axis);
                    if requires(p) {
                        let mut dp = vec![T::zero(); outer * mid * inner];
                        for o in 0..outer {
                            let src_start = o * total_mid * inner + offset * inner;
                            dp[o * mid * inner..(o + 1) * mid * inner]
                                .copy_from_slice(&g[src_start..src_start + mid * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += mid;
                }
            }
            Op::Narrow { x, axis, start } => {
                let vx = &self.nodes[*x].value;
                let (outer, mid, inner) = axis_split(vx.shape(), *axis);
                let len = self.nodes[id].value.dim(*axis);
                let mut dx = vec![T::zero(); vx.numel()];
                for o in 0..outer {
                    let dst_start = o * mid * inner + start * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let vx = &self.nodes[*x].value;
                let cols = vx.dim(1);
                let mut dx = vec![T::zero(); vx.numel()];
                for (grow, &src) in g.chunks_exact(cols).zip(index) {
                    let dst = &mut dx[src * cols..(src + 1) * cols];
                    for (d, &gi) in dst.iter_mut().zip(grow) {
                        *d += gi;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterMean { x, index, counts } => {
                let vx = &self.nodes[*x].value;
                let cols = vx.dim(1);
                let mut dx = vec![T::zero(); vx.numel()];
                for (drow, &slot) in dx.chunks_exact_mut(cols).zip(index) {
                    let inv = T::one() / T::from_usize(counts[slot]);
                    let src = &g[slot * cols..(slot + 1) * cols];
                    for (d, &gi) in drow.iter_mut().zip(src) {
                        *d = gi * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterSum { x, index } => {
                let vx = &self.nodes[*x].value;
                let cols = vx.dim(1);
                let mut dx = vec![T::zero(); vx.numel()];
                for (drow, &slot) in dx.chunks_exact_mut(cols).zip(index) {
                    drow.copy_from_slice(&g[slot * cols..(slot + 1) * cols]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let n = self.nodes[*x].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.nodes[*logits].value.dim(1);
                let scale = g[0] / T::from_usize(labels.len());
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_exact_mut(classes).zip(labels) {
                    row[label] -= T::one();
                    for v in row {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

/// `out += a @ b` with `a` = m×k, `b` = k×n, all row-major. The (i,p,j)
/// loop order keeps the inner loop contiguous over both `b` and `out`.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// In-place stable softmax of one row.
fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

fn last_axis<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<usize> {
    let rank = t.rank();
    if rank == 0 || t.dim(rank - 1) == 0 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "last axis is empty",
        });
    }
    Ok(t.dim(rank - 1))
}

fn batch_norm_dims<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    if x.rank() != 2 || x.dim(0) == 0 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            shape: x.shape().to_vec(),
            reason: "rank-2 tensor with at least one row required",
        });
    }
    let cols = x.dim(1);
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok(cols)
}

/// Decompose a shape around `axis` into (outer, axis extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn out_write<T: Scalar>(row: &mut [T], c: usize, v: T) {
    row[c] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t2<T: Scalar>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::from_rows(rows, cols, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(1, 2, vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect()));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 0], vec![]).unwrap());
        assert!(matches!(g.softmax(x), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn max_reduce_returns_value_and_routes_grad_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 5.0, 3.0]).unwrap().with_requires_grad());
        let y = g.max_reduce(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn scatter_mean_averages_rows_and_zeros_empty_slots() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(2, 1, vec![2.0, 4.0]));
        let y = g.scatter_mean(x, &[0, 0], 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 0.0]);
    }

    #[test]
    fn scatter_then_gather_fixes_voxel_constant_rows() {
        let mut g = Graph::<f64>::new();
        let idx = [1usize, 0, 1, 1];
        // Rows already constant within each slot.
        let x = g.constant(t2(4, 2, vec![5.0, -1.0, 2.0, 2.0, 5.0, -1.0, 5.0, -1.0]));
        let m = g.scatter_mean(x, &idx, 2).unwrap();
        let back = g.gather_rows(m, &idx).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn dead_relu_kills_downstream_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1], vec![-1.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![1], vec![0.7]).unwrap().with_requires_grad());
        let r = g.relu(x);
        let prod = g.mul(r, w).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(1, 2, vec![1.0, 2.0]).with_requires_grad());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn add_broadcasts_bias_over_leading_axis_only() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(2, 3, vec![1.0; 6]).with_requires_grad());
        let b = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad());
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);

        let bad = g.constant(t2(3, 2, vec![0.0; 6]));
        let err = g.add(x, bad).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 3, vec![0.0; 6]));
        let b = g.constant(t2(2, 3, vec![0.0; 6]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t2(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn batch_norm_eval_is_a_fixed_affine_map() {
        let rm = Tensor::new(vec![2], vec![0.3, -0.1]).unwrap();
        let rv = Tensor::new(vec![2], vec![1.5, 0.7]).unwrap();
        let run = |_: ()| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(t2(3, 2, vec![0.1, 0.2, -0.4, 1.0, 2.0, -3.0]));
            let gm = g.constant(Tensor::new(vec![2], vec![1.2, 0.8]).unwrap());
            let bt = g.constant(Tensor::new(vec![2], vec![0.05, -0.02]).unwrap());
            let y = g.batch_norm_eval(x, gm, bt, &rm, &rv, 1e-5).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(()), run(()));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(t2(1, 40, vec![0.0; 40]));
        let loss = g.cross_entropy(logits, &[7]).unwrap();
        assert!((g.value(loss).item().unwrap() - (40.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let logits =
            g.leaf(t2(1, 3, vec![0.2, -0.1, 0.5]).with_requires_grad());
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        g.backward(loss).unwrap();
        let sm = g.softmax(logits).unwrap();
        let probs = g.value(sm).data().to_vec();
        let grad = g.grad(logits).unwrap();
        for c in 0..3 {
            let expect = probs[c] - if c == 2 { 1.0 } else { 0.0 };
            assert!((grad[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(t2(1, 3, vec![0.0; 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn margin_dominant_logit_drives_loss_to_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(t2(1, 5, vec![0.0, 60.0, 0.0, 0.0, 0.0]));
        let loss = g.cross_entropy(logits, &[1]).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_across_multiple_consumers() {
        // y = x*x + x  ->  dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap().with_requires_grad());
        let sq = g.mul(x, x).unwrap();
        let sum = g.add(sq, x).unwrap();
        let loss = g.sum_all(sum);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0, -3.0]);
    }

    #[test]
    fn unused_parameter_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad());
        let unused = g.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap().with_requires_grad());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_narrow_invert_each_other() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t2(2, 1, vec![5.0, 6.0]));
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let left = g.narrow(cat, 1, 0, 2).unwrap();
        let right = g.narrow(cat, 1, 2, 1).unwrap();
        assert_eq!(g.value(left).data(), g.value(a).data());
        assert_eq!(g.value(right).data(), g.value(b).data());
    }
}
