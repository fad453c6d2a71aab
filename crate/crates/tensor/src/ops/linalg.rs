use crate::error::{Result, TensorError};
use crate::tape::{record, Op};
use crate::tensor::Tensor;

/// `c[m,n] (+)= op(a)[m,k] · op(b)[k,n]` for row-major buffers, where
/// `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is stored [m,k] or, transposed, [k,m]
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        // SAFETY: the strides above describe exactly the m×k, k×n and m×n
        // row-major buffers whose lengths the callers check.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

impl Tensor {
    /// 2-D product `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(TensorError::mismatch("matmul", &self.shape, &other.shape));
        }
        let (m, ka) = if ta { (self.shape[1], self.shape[0]) } else { (self.shape[0], self.shape[1]) };
        let (kb, n) = if tb { (other.shape[1], other.shape[0]) } else { (other.shape[0], other.shape[1]) };
        if ka != kb {
            return Err(TensorError::mismatch("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, &self.data, ta, &other.data, tb, &mut out, false);
        record(Op::MatMul { ta, tb }, &[self, other], out, vec![m, n])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }
}
