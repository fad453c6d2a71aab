//! Shape arithmetic shared by the kernels.

use crate::error::{Result, TensorError};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape; broadcast
/// dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub(crate) fn can_broadcast_to(shape: &[usize], target: &[usize]) -> bool {
    if shape.len() > target.len() {
        return false;
    }
    let offset = target.len() - shape.len();
    shape
        .iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == target[i + offset])
}

/// Calls `f(out_index, offsets)` for every element of `out`, where
/// `offsets[k]` is the matching linear offset under `strides[k]`. The last
/// dimension is walked in a tight loop.
pub(crate) fn for_each_strided<const K: usize>(
    out: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, [0; K]);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = [0usize; K];
    let mut linear = 0;
    loop {
        for j in 0..inner {
            let offs: [usize; K] = std::array::from_fn(|k| base[k] + j * inner_strides[k]);
            f(linear + j, offs);
        }
        linear += inner;
        // odometer over the outer dimensions
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                base[k] += strides[k][d];
            }
            if idx[d] < out[d] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][d] * out[d];
            }
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}
