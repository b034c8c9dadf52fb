//! Dense row-major `f64` storage with shape algebra.
//!
//! [`Tensor`] is a plain value: no gradient state lives here. Gradient
//! participation is a property of a [`Var`](crate::Var) recorded on a
//! [`Tape`](crate::Tape).

use std::fmt;

use crate::error::{Result, TensorError};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(
            shape.iter().all(|&e| e > 0),
            "zero extent in shape {shape:?}"
        );
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .zip(strides(&self.shape))
            .map(|((&i, &e), s)| {
                assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Slice `[start, start + len)` along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start + len > self.shape[0] || len == 0 {
            return Err(TensorError::Invalid(format!(
                "narrow0({start}, {len}) on shape {:?}",
                self.shape
            )));
        }
        let row = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: self.data[start * row..(start + len) * row].to_vec(),
        })
    }

    /// Gather rows along axis 0 in the given order.
    pub fn select0(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() || rows.is_empty() {
            return Err(TensorError::Invalid(format!(
                "select0 on shape {:?} with {} rows",
                self.shape,
                rows.len()
            )));
        }
        let row = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(TensorError::Invalid(format!(
                    "row {r} out of range for shape {:?}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Materialized axis permutation: `out.shape[i] == self.shape[perm[i]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Permutation(perm.to_vec()));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.shape.len();
        if rank < 2 {
            return Err(TensorError::Rank {
                op: "transpose_last2",
                min: 2,
                shape: self.shape.clone(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }
}

/// Numpy-style broadcast of two shapes, aligned on the right.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// True when `operand`, stripped of leading unit axes, equals a suffix of
/// `out`; the flat index then maps as `i % numel(operand)`.
fn is_suffix(operand: &[usize], out: &[usize]) -> bool {
    let first = operand.iter().position(|&e| e != 1).unwrap_or(operand.len());
    let core = &operand[first..];
    core.len() <= out.len() && out[out.len() - core.len()..] == *core
}

/// For every flat index of `out`, the flat index of `operand` it reads.
pub(crate) fn broadcast_index_map(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let len = numel(operand);
    if is_suffix(operand, out) {
        return (0..n).map(|i| i % len).collect();
    }
    let rank = out.len();
    let op_strides = strides(operand);
    let mut eff = vec![0usize; rank];
    for i in 0..operand.len() {
        let ax = rank - operand.len() + i;
        eff[ax] = if operand[i] == 1 { 0 } else { op_strides[i] };
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            src -= eff[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let n = numel(&out);
    let data = if a.shape == out && is_suffix(&b.shape, &out) {
        let lb = b.data.len();
        (0..n).map(|i| f(a.data[i], b.data[i % lb])).collect()
    } else if b.shape == out && is_suffix(&a.shape, &out) {
        let la = a.data.len();
        (0..n).map(|i| f(a.data[i % la], b.data[i])).collect()
    } else {
        let ma = broadcast_index_map(&a.shape, &out);
        let mb = broadcast_index_map(&b.shape, &out);
        (0..n).map(|i| f(a.data[ma[i]], b.data[mb[i]])).collect()
    };
    Ok(Tensor { shape: out, data })
}

/// Sum `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to_shape(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad;
    }
    let mut out = Tensor::zeros(shape.to_vec());
    if is_suffix(shape, &grad.shape) {
        let len = out.data.len();
        for (i, g) in grad.data.iter().enumerate() {
            out.data[i % len] += g;
        }
    } else {
        let map = broadcast_index_map(shape, &grad.shape);
        for (g, &m) in grad.data.iter().zip(&map) {
            out.data[m] += g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length_and_zero_extent() {
        assert!(matches!(
            Tensor::new([2, 2], vec![1.0; 3]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::new([2, 0], vec![]),
            Err(TensorError::ZeroExtent(_))
        ));
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn general_broadcast_matches_explicit_expansion() {
        let a = Tensor::from_fn([2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn([4, 1], |i| 10.0 * i as f64);
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    let want = a.get(&[i, 0, k]) + b.get(&[j, 0]);
                    assert_eq!(c.get(&[i, j, k]), want);
                }
            }
        }
        let back = reduce_to_shape(Tensor::ones([2, 4, 3]), &[4, 1]);
        assert_eq!(back.data(), &[6.0; 4]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), t.get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn select_and_narrow() {
        let t = Tensor::from_fn([3, 2], |i| i as f64);
        assert_eq!(t.select0(&[2, 0]).unwrap().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(t.narrow0(1, 2).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.narrow0(2, 2).is_err());
    }
}
