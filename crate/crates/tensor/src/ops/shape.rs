use super::layout::{check_axis, split_at_axis};
use crate::error::{Result, TensorError};
use crate::tape::{record, Op};
use crate::tensor::{numel, Tensor};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::mismatch("reshape", &self.shape, shape));
        }
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        // buffers are immutable, so the result shares storage
        record(Op::Reshape, &[self], self.data.clone(), shape.to_vec())
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation for shape {:?}", self.shape),
            ));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut src_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            src_strides[i] = src_strides[i + 1] * self.shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = vec![0.0; self.numel()];
        super::layout::for_each_strided(&shape, [&strides], |i, [o]| out[i] = self.data[o]);
        record(Op::Permute(perm.to_vec()), &[self], out, shape)
    }

    /// Swaps the two dimensions of a matrix.
    pub fn t(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("slice", &self.shape, axis)?;
        if start + len > self.shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} exceeds dim {} of {:?}", start + len, axis, self.shape),
            ));
        }
        let (outer, dim, inner) = split_at_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        record(Op::Slice { axis, start }, &[self], out, shape)
    }

    /// Zero padding along one axis; the adjoint of [`Tensor::slice`].
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        check_axis("pad", &self.shape, axis)?;
        let (outer, dim, inner) = split_at_axis(&self.shape, axis);
        let new_dim = before + dim + after;
        let mut out = vec![0.0; outer * new_dim * inner];
        for o in 0..outer {
            let dst = (o * new_dim + before) * inner;
            out[dst..dst + dim * inner].copy_from_slice(&self.data[o * dim * inner..(o + 1) * dim * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = new_dim;
        record(Op::Pad { axis, before }, &[self], out, shape)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        check_axis("concat", &first.shape, axis)?;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        record(Op::Concat { axis }, parts, out, shape)
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        check_axis("flip", &self.shape, axis)?;
        let (outer, dim, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for d in 0..dim {
                let src = (o * dim + d) * inner;
                let dst = (o * dim + dim - 1 - d) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        record(Op::Flip(axis), &[self], out, self.shape.clone())
    }
}
