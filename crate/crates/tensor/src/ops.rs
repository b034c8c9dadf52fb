//! Differentiable operations on [`Var`] and their backward rules.

use crate::error::{Result, TensorError};
use crate::linalg;
use crate::tape::{Node, Op, Tape, Var};
use crate::tensor::{broadcast_binary, reduce_to_shape, Tensor};

/// Finite stand-in for `-inf` when masking attention scores.
pub const MASK_SENTINEL: f64 = -1.0e9;

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "variables recorded on different tapes"
    );
}

impl<'t> Var<'t> {
    fn unary(self, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'t>> {
        let (value, op, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            let (value, op) = f(&node.value)?;
            (value, op, node.requires_grad)
        };
        Ok(self.tape.push(value, rg, op))
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (f(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, rg, op))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| broadcast_binary("add", a, b, |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| broadcast_binary("sub", a, b, |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    /// Broadcasting Hadamard product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| broadcast_binary("mul", a, b, |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(|x| {
            Ok((
                x.map(|v| scale * v + shift),
                Op::Affine { x: self.id, scale },
            ))
        })
        .expect("affine is infallible")
    }

    pub fn scale(self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| Ok((x.map(|v| v.max(0.0)), Op::Relu(self.id))))
            .expect("relu is infallible")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| Ok((x.map(sigmoid), Op::Sigmoid(self.id))))
            .expect("sigmoid is infallible")
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(|x| Ok((x.map(f64::abs), Op::Abs(self.id))))
            .expect("abs is infallible")
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]`; batch axes broadcast.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, linalg::matmul_forward, Op::MatMul(self.id, other.id))
    }

    /// Softmax over the last axis of `self + mask`. The mask is a constant
    /// additive term broadcast to `self`'s shape.
    pub fn softmax_last(self, mask: Option<&Tensor>) -> Result<Var<'t>> {
        self.unary(|x| {
            let shifted;
            let input = match mask {
                Some(m) => {
                    shifted = broadcast_binary("softmax mask", x, m, |a, b| a + b)?;
                    if shifted.shape() != x.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "softmax mask",
                            lhs: x.shape().to_vec(),
                            rhs: m.shape().to_vec(),
                        });
                    }
                    &shifted
                }
                None => x,
            };
            Ok((softmax_rows(input)?, Op::Softmax(self.id)))
        })
    }

    /// Concatenate along the last axis; `self` first.
    pub fn concat_last(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, concat_last, Op::Concat(self.id, other.id))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let perm = perm.to_vec();
        self.unary(|x| {
            let out = x.permute(&perm)?;
            Ok((out, Op::Permute { x: self.id, perm }))
        })
    }

    /// Swap the last two axes (materialized).
    pub fn transpose_last2(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Rank {
                op: "transpose_last2",
                min: 2,
                shape: self.shape(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(|x| Ok((x.clone().reshape(shape.to_vec())?, Op::Reshape(self.id))))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        self.unary(|x| Ok((Tensor::scalar(x.sum()), Op::Sum(self.id))))
            .expect("sum is infallible")
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|v| v.numel()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.unary(|x| Ok((mean_axis(x, axis)?, Op::MeanAxis { x: self.id, axis })))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        same_tape(&self, &gain);
        same_tape(&self, &bias);
        let (value, rg, normalized, inv_std) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *x.value.shape().last().ok_or_else(|| TensorError::Rank {
                op: "layer_norm",
                min: 1,
                shape: vec![],
            })?;
            for p in [&g.value, &b.value] {
                if p.shape() != [d] {
                    return Err(TensorError::ShapeMismatch {
                        op: "layer_norm",
                        lhs: x.value.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            let rows = x.value.numel() / d;
            let mut normalized = vec![0.0; x.value.numel()];
            let mut out = vec![0.0; x.value.numel()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x.value.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    normalized[r * d + j] = h;
                    out[r * d + j] = h * g.value.data()[j] + b.value.data()[j];
                }
            }
            let shape = x.value.shape().to_vec();
            (
                Tensor::new(shape.clone(), out)?,
                x.requires_grad || g.requires_grad || b.requires_grad,
                Tensor::new(shape, normalized)?,
                inv_std,
            )
        };
        Ok(self.tape.push(
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized,
                inv_std,
            },
        ))
    }

    /// `Σ|(self − target) ⊙ mask| / Σ mask`, differentiable in `self`.
    pub fn masked_mae(self, target: &Tensor, mask: &Tensor) -> Result<Var<'t>> {
        self.unary(|est| {
            for other in [target, mask] {
                if other.shape() != est.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "masked_mae",
                        lhs: est.shape().to_vec(),
                        rhs: other.shape().to_vec(),
                    });
                }
            }
            let denom = mask.sum();
            if denom == 0.0 {
                return Err(TensorError::EmptyMask);
            }
            let mut total = 0.0;
            let mut slope = vec![0.0; est.numel()];
            for (i, ((&e, &t), &m)) in est
                .data()
                .iter()
                .zip(target.data())
                .zip(mask.data())
                .enumerate()
            {
                let diff = (e - t) * m;
                total += diff.abs();
                slope[i] = signum0(e - t) * m / denom;
            }
            Ok((
                Tensor::scalar(total / denom),
                Op::MaskedMae {
                    est: self.id,
                    slope: Tensor::new(est.shape().to_vec(), slope)?,
                },
            ))
        })
    }

    /// Multiply by a constant tensor of identical shape (dropout masks).
    pub fn mul_const(self, factor: Tensor) -> Result<Var<'t>> {
        self.unary(|x| {
            let out = x.zip_map(&factor, |a, b| a * b)?;
            Ok((out, Op::MulConst { x: self.id, factor }))
        })
    }
}

/// `mask ? on_true : on_false` elementwise, for a binary constant mask.
pub fn select<'t>(mask: &Tensor, on_true: Var<'t>, on_false: Var<'t>) -> Result<Var<'t>> {
    same_tape(&on_true, &on_false);
    let tape: &'t Tape = on_true.tape;
    let (value, rg) = {
        let nodes = tape.nodes();
        let (a, b) = (&nodes[on_true.id], &nodes[on_false.id]);
        for s in [a.value.shape(), b.value.shape()] {
            if s != mask.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "select",
                    lhs: mask.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let data = mask
            .data()
            .iter()
            .zip(a.value.data().iter().zip(b.value.data()))
            .map(|(&m, (&x, &y))| if m != 0.0 { x } else { y })
            .collect();
        (
            Tensor::new(mask.shape().to_vec(), data)?,
            a.requires_grad || b.requires_grad,
        )
    };
    Ok(tape.push(
        value,
        rg,
        Op::Select {
            mask: mask.clone(),
            on_true: on_true.id,
            on_false: on_false.id,
        },
    ))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| TensorError::Rank {
        op: "softmax",
        min: 1,
        shape: vec![],
    })?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra == 0 || ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_last",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (la, lb) = (a.shape()[ra - 1], b.shape()[rb - 1]);
    let rows = a.numel() / la;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * la..(r + 1) * la]);
        data.extend_from_slice(&b.data()[r * lb..(r + 1) * lb]);
    }
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = la + lb;
    Tensor::new(shape, data)
}

fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(TensorError::Axis {
            axis,
            shape: x.shape().to_vec(),
        });
    }
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..extent {
            let src = &x.data()[(o * extent + a) * inner..(o * extent + a + 1) * inner];
            for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    for v in &mut out {
        *v /= extent as f64;
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Tensor::new(out_shape, out)
}

/// Emit `(input, gradient)` pairs for node `id` given its output gradient.
pub(crate) fn backward_rule(
    nodes: &[Node],
    id: usize,
    g: Tensor,
    emit: &mut dyn FnMut(usize, Tensor),
) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*b) {
                emit(*b, reduce_to_shape(g.clone(), val(*b).shape()));
            }
            emit(*a, reduce_to_shape(g, val(*a).shape()));
        }
        Op::Sub(a, b) => {
            if needs(*b) {
                emit(*b, reduce_to_shape(g.map(|v| -v), val(*b).shape()));
            }
            emit(*a, reduce_to_shape(g, val(*a).shape()));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let ga = broadcast_binary("mul", &g, val(*b), |x, y| x * y).expect("forward shapes");
                emit(*a, reduce_to_shape(ga, val(*a).shape()));
            }
            if needs(*b) {
                let gb = broadcast_binary("mul", &g, val(*a), |x, y| x * y).expect("forward shapes");
                emit(*b, reduce_to_shape(gb, val(*b).shape()));
            }
        }
        Op::Affine { x, scale } => emit(*x, g.map(|v| v * scale)),
        Op::Relu(x) => {
            let gx = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
            emit(*x, gx.expect("same shape"));
        }
        Op::Sigmoid(x) => {
            let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
            emit(*x, gx.expect("same shape"));
        }
        Op::Abs(x) => {
            let gx = g.zip_map(val(*x), |gv, xv| gv * signum0(xv));
            emit(*x, gx.expect("same shape"));
        }
        Op::MatMul(a, b) => {
            let (ga, gb) = linalg::matmul_backward(val(*a), val(*b), &g, needs(*a), needs(*b));
            if let Some(ga) = ga {
                emit(*a, ga);
            }
            if let Some(gb) = gb {
                emit(*b, gb);
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = *y.shape().last().expect("rank >= 1");
            let mut gx = vec![0.0; y.numel()];
            for ((out, yr), gr) in gx
                .chunks_mut(d)
                .zip(y.data().chunks(d))
                .zip(g.data().chunks(d))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            emit(*x, Tensor::new(y.shape().to_vec(), gx).expect("same shape"));
        }
        Op::Concat(a, b) => {
            let la = *val(*a).shape().last().expect("rank >= 1");
            let lb = *val(*b).shape().last().expect("rank >= 1");
            let rows = val(*a).numel() / la;
            let mut ga = Vec::with_capacity(rows * la);
            let mut gb = Vec::with_capacity(rows * lb);
            for row in g.data().chunks(la + lb) {
                ga.extend_from_slice(&row[..la]);
                gb.extend_from_slice(&row[la..]);
            }
            if needs(*a) {
                emit(*a, Tensor::new(val(*a).shape().to_vec(), ga).expect("shape"));
            }
            if needs(*b) {
                emit(*b, Tensor::new(val(*b).shape().to_vec(), gb).expect("shape"));
            }
        }
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            emit(*x, g.permute(&inverse).expect("valid permutation"));
        }
        Op::Reshape(x) => {
            emit(*x, g.reshape(val(*x).shape().to_vec()).expect("same numel"));
        }
        Op::Sum(x) => {
            let s = g.item();
            emit(*x, Tensor::full(val(*x).shape().to_vec(), s));
        }
        Op::MeanAxis { x, axis } => {
            let shape = val(*x).shape();
            let outer: usize = shape[..*axis].iter().product();
            let extent = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for a in 0..extent {
                    let dst = &mut gx[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s / extent as f64;
                    }
                }
            }
            emit(*x, Tensor::new(shape.to_vec(), gx).expect("shape"));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = *normalized.shape().last().expect("rank >= 1");
            let gv = val(*gain).data();
            if needs(*gain) || needs(*bias) {
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (gr, hr) in g.data().chunks(d).zip(normalized.data().chunks(d)) {
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                }
                if needs(*gain) {
                    emit(*gain, Tensor::new(vec![d], ggain).expect("shape"));
                }
                if needs(*bias) {
                    emit(*bias, Tensor::new(vec![d], gbias).expect("shape"));
                }
            }
            if needs(*x) {
                let mut gx = vec![0.0; normalized.numel()];
                let mut dh = vec![0.0; d];
                for (r, (gr, hr)) in g
                    .data()
                    .chunks(d)
                    .zip(normalized.data().chunks(d))
                    .enumerate()
                {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dh[j] = gr[j] * gv[j];
                        sum_dh += dh[j];
                        sum_dh_h += dh[j] * hr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                emit(*x, Tensor::new(normalized.shape().to_vec(), gx).expect("shape"));
            }
        }
        Op::MaskedMae { est, slope } => {
            let s = g.item();
            emit(*est, slope.map(|v| v * s));
        }
        Op::MulConst { x, factor } => {
            emit(*x, g.zip_map(factor, |a, b| a * b).expect("same shape"));
        }
        Op::Select {
            mask,
            on_true,
            on_false,
        } => {
            if needs(*on_true) {
                let gt = g.zip_map(mask, |gv, m| if m != 0.0 { gv } else { 0.0 });
                emit(*on_true, gt.expect("same shape"));
            }
            if needs(*on_false) {
                let gf = g.zip_map(mask, |gv, m| if m != 0.0 { 0.0 } else { gv });
                emit(*on_false, gf.expect("same shape"));
            }
        }
        Op::Custom { op, inputs } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let grads = op.backward(&vals, &node.value, &g);
            assert_eq!(grads.len(), inputs.len(), "custom op {} gradient count", op.name());
            for (&i, gi) in inputs.iter().zip(grads) {
                if needs(i) {
                    emit(i, gi);
                }
            }
        }
    }
}
