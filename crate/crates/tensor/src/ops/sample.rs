//! Bilinear lookups into a square feature plane.
//!
//! A plane is stored `[C, R, R]` with cell centres at `linspace(-1, 1, R)`
//! along both axes; `u` indexes columns and `v` rows. Coordinates outside
//! `[-1, 1]` are clamped to the edge, where the coordinate derivative is 0.
//!
//! The sampler is parameterised by derivative orders `(du, dv)` of the
//! bilinear weights. Order 0 is the ordinary lookup; order 1 yields the
//! partial derivative of the lookup. Since the weights are linear in each
//! coordinate separately, order 2 in one variable vanishes, which closes the
//! family under differentiation.

use crate::error::{Result, TensorError};
use crate::tape::{record, Op};
use crate::tensor::Tensor;

struct Taps {
    offsets: [usize; 4],
    weights: [f64; 4],
}

fn axis_weights(t: f64, res: usize, order: u8) -> (usize, [f64; 2]) {
    let inside = (-1.0..=1.0).contains(&t);
    let tc = t.clamp(-1.0, 1.0);
    let scale = (res - 1) as f64 / 2.0;
    let g = (tc + 1.0) * scale;
    let i0 = (g.floor() as usize).min(res - 2);
    let f = g - i0 as f64;
    let w = match order {
        0 => [1.0 - f, f],
        1 if inside => [-scale, scale],
        _ => [0.0, 0.0],
    };
    (i0, w)
}

fn taps(u: f64, v: f64, res: usize, du: u8, dv: u8) -> Taps {
    let (ix, wu) = axis_weights(u, res, du);
    let (iy, wv) = axis_weights(v, res, dv);
    let base = iy * res + ix;
    Taps {
        offsets: [base, base + 1, base + res, base + res + 1],
        weights: [wu[0] * wv[0], wu[1] * wv[0], wu[0] * wv[1], wu[1] * wv[1]],
    }
}

fn check_uv(op: &'static str, uv: &Tensor) -> Result<usize> {
    if uv.rank() != 2 || uv.shape[1] != 2 {
        return Err(TensorError::invalid(op, format!("coordinates must be [M, 2], got {:?}", uv.shape)));
    }
    Ok(uv.shape[0])
}

impl Tensor {
    /// Bilinear lookup of plane `self` [C,R,R] at `uv` [M,2] → [M,C].
    pub fn plane_sample(&self, uv: &Tensor) -> Result<Tensor> {
        self.plane_sample_deriv(uv, 0, 0)
    }

    pub(crate) fn plane_sample_deriv(&self, uv: &Tensor, du: u8, dv: u8) -> Result<Tensor> {
        if self.rank() != 3 || self.shape[1] != self.shape[2] || self.shape[1] < 2 {
            return Err(TensorError::invalid("plane_sample", format!("plane must be [C,R,R] with R >= 2, got {:?}", self.shape)));
        }
        let m = check_uv("plane_sample", uv)?;
        let (c, res) = (self.shape[0], self.shape[1]);
        let plane_len = res * res;
        let mut out = vec![0.0; m * c];
        if du <= 1 && dv <= 1 {
            for (i, row) in out.chunks_exact_mut(c).enumerate() {
                let t = taps(uv.data[2 * i], uv.data[2 * i + 1], res, du, dv);
                for (ch, o) in row.iter_mut().enumerate() {
                    let p = &self.data[ch * plane_len..];
                    *o = t.weights[0] * p[t.offsets[0]]
                        + t.weights[1] * p[t.offsets[1]]
                        + t.weights[2] * p[t.offsets[2]]
                        + t.weights[3] * p[t.offsets[3]];
                }
            }
        }
        record(Op::PlaneSample { du, dv }, &[self, uv], out, vec![m, c])
    }

    /// Adjoint of the lookup in the plane values: scatters rows of `self`
    /// [M,C] onto a [C,R,R] plane with the bilinear weights at `uv`.
    pub fn plane_scatter(&self, uv: &Tensor, res: usize) -> Result<Tensor> {
        self.plane_scatter_deriv(uv, res, 0, 0)
    }

    pub(crate) fn plane_scatter_deriv(&self, uv: &Tensor, res: usize, du: u8, dv: u8) -> Result<Tensor> {
        let m = check_uv("plane_scatter", uv)?;
        if self.rank() != 2 || self.shape[0] != m || res < 2 {
            return Err(TensorError::mismatch("plane_scatter", &self.shape, &uv.shape));
        }
        let c = self.shape[1];
        let plane_len = res * res;
        let mut out = vec![0.0; c * plane_len];
        if du <= 1 && dv <= 1 {
            for (i, row) in self.data.chunks_exact(c).enumerate() {
                let t = taps(uv.data[2 * i], uv.data[2 * i + 1], res, du, dv);
                for (ch, &g) in row.iter().enumerate() {
                    let p = &mut out[ch * plane_len..];
                    for k in 0..4 {
                        p[t.offsets[k]] += t.weights[k] * g;
                    }
                }
            }
        }
        record(Op::PlaneScatter { du, dv }, &[self, uv], out, vec![c, res, res])
    }
}
