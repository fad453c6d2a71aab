//! Vector-Jacobian products for every primitive, written with primitives so
//! they can themselves be recorded.

use crate::error::Result;
use crate::tape::Op;
use crate::tensor::Tensor;

fn when(need: bool, f: impl FnOnce() -> Result<Tensor>) -> Result<Option<Tensor>> {
    if need {
        f().map(Some)
    } else {
        Ok(None)
    }
}

/// Coordinate gradient of a derivative-order-(du, dv) plane sampler, as
/// `[M, 2]`: rowwise contraction of `weights` [M,C] with the next-order
/// lookups into `plane`.
fn plane_coord_grad(plane: &Tensor, uv: &Tensor, weights: &Tensor, du: u8, dv: u8) -> Result<Tensor> {
    let m = uv.shape()[0];
    let column = |du: u8, dv: u8| -> Result<Tensor> {
        if du > 1 || dv > 1 {
            return Ok(Tensor::zeros(&[m, 1]));
        }
        weights.mul(&plane.plane_sample_deriv(uv, du, dv)?)?.sum_axis(1, true)
    };
    Tensor::concat(&[&column(du + 1, dv)?, &column(du, dv + 1)?], 1)
}

pub(crate) fn backward_rule(
    op: &Op,
    x: &[Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let need = |i: usize| needs[i];
    let single = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![
            when(need(0), || g.sum_to(x[0].shape()))?,
            when(need(1), || g.sum_to(x[1].shape()))?,
        ]),
        Op::Sub => Ok(vec![
            when(need(0), || g.sum_to(x[0].shape()))?,
            when(need(1), || g.neg()?.sum_to(x[1].shape()))?,
        ]),
        Op::Mul => Ok(vec![
            when(need(0), || g.mul(&x[1])?.sum_to(x[0].shape()))?,
            when(need(1), || g.mul(&x[0])?.sum_to(x[1].shape()))?,
        ]),
        Op::Div => Ok(vec![
            when(need(0), || g.div(&x[1])?.sum_to(x[0].shape()))?,
            when(need(1), || g.mul(out)?.div(&x[1])?.neg()?.sum_to(x[1].shape()))?,
        ]),
        Op::Neg => single(g.neg()),
        Op::Scale(s) => single(g.scale(*s)),
        Op::AddScalar => single(Ok(g.clone())),
        Op::Exp => single(g.mul(out)),
        Op::Ln => single(g.div(&x[0])),
        Op::Tanh => single(g.mul(&out.square()?.neg()?.add_scalar(1.0)?)),
        Op::Sigmoid => single(g.mul(&out.mul(&out.neg()?.add_scalar(1.0)?)?)),
        Op::Softplus => single(g.mul(&x[0].sigmoid()?)),
        Op::Sqrt => single(g.div(out)?.scale(0.5)),
        Op::LeakyRelu(s) => single(g.mul(&x[0].leaky_slope_mask(*s))),
        Op::SumAll | Op::SumTo => single(g.broadcast_to(x[0].shape())),
        Op::SumAxis { axis, keepdim } => {
            let mut kept = x[0].shape().to_vec();
            kept[*axis] = 1;
            let g = if *keepdim { g.clone() } else { g.reshape(&kept)? };
            single(g.broadcast_to(x[0].shape()))
        }
        Op::BroadcastTo => single(g.sum_to(x[0].shape())),
        Op::MatMul { ta, tb } => {
            let (a, b) = (&x[0], &x[1]);
            Ok(vec![
                when(need(0), || if *ta { b.matmul_t(g, *tb, true) } else { g.matmul_t(b, false, !tb) })?,
                when(need(1), || if *tb { g.matmul_t(a, true, *ta) } else { a.matmul_t(g, !ta, false) })?,
            ])
        }
        Op::Reshape => single(g.reshape(x[0].shape())),
        Op::Permute(perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            single(g.permute(&inverse))
        }
        Op::Slice { axis, start } => {
            let after = x[0].shape()[*axis] - start - g.shape()[*axis];
            single(g.pad(*axis, *start, after))
        }
        Op::Pad { axis, before, .. } => single(g.slice(*axis, *before, x[0].shape()[*axis])),
        Op::Concat { axis } => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(x.len());
            for (i, part) in x.iter().enumerate() {
                let len = part.shape()[*axis];
                grads.push(when(need(i), || g.slice(*axis, offset, len))?);
                offset += len;
            }
            Ok(grads)
        }
        Op::Flip(axis) => single(g.flip(*axis)),
        Op::Conv2d { stride, pad } => {
            let (inp, w) = (&x[0], &x[1]);
            Ok(vec![
                when(need(0), || g.conv2d_input_grad(w, inp.shape(), *stride, *pad))?,
                when(need(1), || inp.conv2d_weight_grad(g, w.shape(), *stride, *pad))?,
            ])
        }
        Op::Conv2dInput { stride, pad } => {
            let (dy, w) = (&x[0], &x[1]);
            Ok(vec![
                when(need(0), || g.conv2d(w, *stride, *pad))?,
                when(need(1), || g.conv2d_weight_grad(dy, w.shape(), *stride, *pad))?,
            ])
        }
        Op::Conv2dWeight { stride, pad } => {
            let (inp, dy) = (&x[0], &x[1]);
            Ok(vec![
                when(need(0), || dy.conv2d_input_grad(g, inp.shape(), *stride, *pad))?,
                when(need(1), || inp.conv2d(g, *stride, *pad))?,
            ])
        }
        Op::Upsample2x => single(g.sum_pool2x()),
        Op::SumPool2x => single(g.upsample2x()),
        Op::PlaneSample { du, dv } => {
            let (plane, uv) = (&x[0], &x[1]);
            let res = plane.shape()[1];
            Ok(vec![
                when(need(0), || g.plane_scatter_deriv(uv, res, *du, *dv))?,
                when(need(1), || plane_coord_grad(plane, uv, g, *du, *dv))?,
            ])
        }
        Op::PlaneScatter { du, dv, .. } => {
            let (rows, uv) = (&x[0], &x[1]);
            Ok(vec![
                when(need(0), || g.plane_sample_deriv(uv, *du, *dv))?,
                when(need(1), || plane_coord_grad(g, uv, rows, *du, *dv))?,
            ])
        }
        Op::CumSum { axis, reverse } => single(g.cumsum_exclusive(*axis, !reverse)),
    }
}
