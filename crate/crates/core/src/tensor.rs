//! Dense row-major tensors of `f64` and the numeric kernels shared by the
//! forward and backward passes of the tape.

use crate::error::{Error, Result};

/// A dense, row-major n-dimensional array.
///
/// A rank-0 tensor (empty shape) holds exactly one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
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
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for axis of size {d}");
            acc * d + i
        })
    }

    /// Row `r` when the tensor is viewed as `[numel / last, last]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Plain (tape-free) matrix product with the same batching rules as
    /// [`crate::autograd::Var::matmul`].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let dims = MatmulDims::infer(self.shape(), other.shape(), false)?;
        let mut out = vec![0.0; dims.out_len()];
        dims.forward(self.data(), other.data(), 1.0, &mut out);
        Tensor::new(&dims.out_shape, out)
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = *self.shape() else {
            return Err(Error::shape("transpose", self.shape(), &[0, 0]));
        };
        let d = self.data();
        Tensor::new(
            &[c, r],
            (0..r * c).map(|i| d[(i % r) * c + i / r]).collect(),
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size `m x k` and
/// `op(b)` of size `k x n`. A transposed operand is stored row-major with its
/// logical dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices are exactly m*k, k*n and m*n long (checked above in
    // debug builds and guaranteed by every caller), and the strides describe
    // row-major layouts that stay inside those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a (possibly batched) matrix product.
///
/// `a` is `[.., m, k]`; `b` is either `[.., k, n]` with the same leading
/// dimensions or a plain `[k, n]` matrix broadcast over the batch. With
/// `b_trans`, `b` is stored as `[.., n, k]`.
#[derive(Clone, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_broadcast: bool,
    pub b_trans: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulDims {
    pub fn infer(a: &[usize], b: &[usize], b_trans: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if b_trans {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", a, b));
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let b_broadcast = b_lead.is_empty();
        if !b_broadcast && a_lead != b_lead {
            return Err(Error::shape("matmul", a, b));
        }
        let mut out_shape = a_lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulDims {
            batch: numel(a_lead),
            m,
            k,
            n,
            b_broadcast,
            b_trans,
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn forward(&self, a: &[f64], b: &[f64], alpha: f64, out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.b_broadcast {
            // One tall product: [batch*m, k] x [k, n].
            gemm(
                self.batch * m,
                k,
                n,
                alpha,
                a,
                false,
                b,
                self.b_trans,
                0.0,
                out,
            );
            return;
        }
        for bi in 0..self.batch {
            gemm(
                m,
                k,
                n,
                alpha,
                &a[bi * m * k..(bi + 1) * m * k],
                false,
                &b[bi * k * n..(bi + 1) * k * n],
                self.b_trans,
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }

    /// Accumulates `alpha * dC * op(B)^T` into `da`.
    pub fn grad_a(&self, dc: &[f64], b: &[f64], alpha: f64, da: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // op(B)^T is [n, k] logically; if B is stored [k, n] that is B^T,
        // if stored [n, k] (b_trans) it is B as-is.
        let b_t = !self.b_trans;
        if self.b_broadcast {
            gemm(self.batch * m, n, k, alpha, dc, false, b, b_t, 1.0, da);
            return;
        }
        for bi in 0..self.batch {
            gemm(
                m,
                n,
                k,
                alpha,
                &dc[bi * m * n..(bi + 1) * m * n],
                false,
                &b[bi * k * n..(bi + 1) * k * n],
                b_t,
                1.0,
                &mut da[bi * m * k..(bi + 1) * m * k],
            );
        }
    }

    /// Accumulates the gradient of the stored `b` operand into `db`.
    pub fn grad_b(&self, a: &[f64], dc: &[f64], alpha: f64, db: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let rows = if self.b_broadcast { self.batch * m } else { m };
        let chunks = if self.b_broadcast { 1 } else { self.batch };
        for bi in 0..chunks {
            let a_blk = &a[bi * rows * k..(bi + 1) * rows * k];
            let dc_blk = &dc[bi * rows * n..(bi + 1) * rows * n];
            let db_blk = &mut db[bi * k * n..(bi + 1) * k * n];
            if self.b_trans {
                // B stored [n, k]: dB = dC^T A.
                gemm(n, rows, k, alpha, dc_blk, true, a_blk, false, 1.0, db_blk);
            } else {
                // dB = A^T dC.
                gemm(k, rows, n, alpha, a_blk, true, dc_blk, false, 1.0, db_blk);
            }
        }
    }
}

pub(crate) const GELU_COEF: f64 = 0.044_715;

/// `sqrt(2 / pi)`.
pub(crate) const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax over the last axis of a plain tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let n = t.last_dim();
    if n > 0 {
        out.data_mut().chunks_mut(n).for_each(softmax_in_place);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn plain_matmul_identity_and_dot() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err.to_string(),
            "dimension mismatch in matmul: [2, 3] vs [2, 3]"
        );
    }

    #[test]
    fn softmax_reference_values() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&t);
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let big = softmax_rows(&Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-12);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_7).abs() < 1e-15);
    }
}
