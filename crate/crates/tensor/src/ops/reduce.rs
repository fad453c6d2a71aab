use super::layout::{broadcast_strides, can_broadcast_to, check_axis, for_each_strided, split_at_axis};
use crate::error::{Result, TensorError};
use crate::tape::{record, Op};
use crate::tensor::{numel, Tensor};

impl Tensor {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        record(Op::SumAll, &[self], vec![s], vec![])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", &self.shape, axis)?;
        let (outer, dim, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &self.data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (acc, v) in dst.iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        record(Op::SumAxis { axis, keepdim }, &[self], out, shape)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("mean_axis", &self.shape, axis)?;
        let n = self.shape[axis] as f64;
        self.sum_axis(axis, keepdim)?.scale(1.0 / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if !can_broadcast_to(&self.shape, shape) {
            return Err(TensorError::mismatch("broadcast_to", &self.shape, shape));
        }
        let src = broadcast_strides(&self.shape, shape);
        let mut out = vec![0.0; numel(shape)];
        for_each_strided(shape, [&src], |i, [o]| out[i] = self.data[o]);
        record(Op::BroadcastTo, &[self], out, shape.to_vec())
    }

    /// Sums broadcast dimensions away so the result has `shape`; the adjoint
    /// of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if !can_broadcast_to(shape, &self.shape) {
            return Err(TensorError::mismatch("sum_to", &self.shape, shape));
        }
        let dst = broadcast_strides(shape, &self.shape);
        let mut out = vec![0.0; numel(shape)];
        for_each_strided(&self.shape, [&dst], |i, [o]| out[o] += self.data[i]);
        record(Op::SumTo, &[self], out, shape.to_vec())
    }

    /// Exclusive cumulative sum along `axis`: element i holds the sum of
    /// elements strictly before i (strictly after i when `reverse`).
    pub fn cumsum_exclusive(&self, axis: usize, reverse: bool) -> Result<Tensor> {
        check_axis("cumsum_exclusive", &self.shape, axis)?;
        let (outer, dim, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                let at = |d: usize| (o * dim + d) * inner + i;
                if reverse {
                    for d in (0..dim).rev() {
                        out[at(d)] = acc;
                        acc += self.data[at(d)];
                    }
                } else {
                    for d in 0..dim {
                        out[at(d)] = acc;
                        acc += self.data[at(d)];
                    }
                }
            }
        }
        record(Op::CumSum { axis, reverse }, &[self], out, self.shape.clone())
    }

    /// Sum of elementwise products; both operands must have equal shape.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::mismatch("dot", &self.shape, &other.shape));
        }
        self.mul(other)?.sum()
    }
}
