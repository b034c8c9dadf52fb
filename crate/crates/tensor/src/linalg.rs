//! Batched matrix products on row-major buffers.

use crate::error::{Result, TensorError};
use crate::tensor::{broadcast_index_map, broadcast_shape, numel, Tensor};

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a · b + beta · c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let last_a = (m - 1) * a.row_stride + (k - 1) * a.col_stride;
        let last_b = (k - 1) * b.row_stride + (n - 1) * b.col_stride;
        assert!(last_a < a.data.len() && last_b < b.data.len(), "gemm view out of bounds");
    }
    // SAFETY: every index touched by dgemm is bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch layout of a broadcasting matmul.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// Batch offsets (in matrices) into `a` and `b` for every output batch.
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
    /// `b` is one shared matrix and `a` has no broadcast batch axes.
    pub flat: bool,
}

pub(crate) fn plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    for (shape, op) in [(a, "matmul lhs"), (b, "matmul rhs")] {
        if shape.len() < 2 {
            return Err(TensorError::Rank {
                op,
                min: 2,
                shape: shape.to_vec(),
            });
        }
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (k2, n) = (b[rb - 2], b[rb - 1]);
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if k != k2 {
        return Err(mismatch());
    }
    let batch_a = &a[..ra - 2];
    let batch_b = &b[..rb - 2];
    let batch = broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let flat = numel(batch_b) == 1 && batch_a == batch.as_slice();
    let (a_batch, b_batch) = if batch.is_empty() {
        (vec![0], vec![0])
    } else {
        (
            broadcast_index_map(batch_a, &batch),
            broadcast_index_map(batch_b, &batch),
        )
    };
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        a_batch,
        b_batch,
        flat,
    })
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = plan(a.shape(), b.shape())?;
    let mut out = vec![0.0; numel(&p.out_shape)];
    let (m, k, n) = (p.m, p.k, p.n);
    if p.flat {
        let rows = a.numel() / k;
        gemm(
            MatRef::row_major(a.data(), rows, k),
            MatRef::row_major(b.data(), k, n),
            &mut out,
            0.0,
        );
    } else {
        for (bi, (&ia, &ib)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
            gemm(
                MatRef::row_major(&a.data()[ia * m * k..(ia + 1) * m * k], m, k),
                MatRef::row_major(&b.data()[ib * k * n..(ib + 1) * k * n], k, n),
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
    }
    Tensor::new(p.out_shape, out)
}

/// Gradients of `a · b` given the upstream gradient `g`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let p = plan(a.shape(), b.shape()).expect("shapes were validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = need_a.then(|| vec![0.0; a.numel()]);
    let mut gb = need_b.then(|| vec![0.0; b.numel()]);
    if p.flat {
        let rows = a.numel() / k;
        let gm = MatRef::row_major(g.data(), rows, n);
        if let Some(ga) = ga.as_mut() {
            gemm(gm, MatRef::row_major(b.data(), k, n).t(), ga, 0.0);
        }
        if let Some(gb) = gb.as_mut() {
            gemm(MatRef::row_major(a.data(), rows, k).t(), gm, gb, 0.0);
        }
    } else {
        for (bi, (&ia, &ib)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
            let gm = MatRef::row_major(&g.data()[bi * m * n..(bi + 1) * m * n], m, n);
            if let Some(ga) = ga.as_mut() {
                let bm = MatRef::row_major(&b.data()[ib * k * n..(ib + 1) * k * n], k, n);
                gemm(gm, bm.t(), &mut ga[ia * m * k..(ia + 1) * m * k], 1.0);
            }
            if let Some(gb) = gb.as_mut() {
                let am = MatRef::row_major(&a.data()[ia * m * k..(ia + 1) * m * k], m, k);
                gemm(am.t(), gm, &mut gb[ib * k * n..(ib + 1) * k * n], 1.0);
            }
        }
    }
    (
        ga.map(|d| Tensor::new(a.shape().to_vec(), d).expect("grad shape")),
        gb.map(|d| Tensor::new(b.shape().to_vec(), d).expect("grad shape")),
    )
}
