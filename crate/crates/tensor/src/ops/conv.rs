//! 2-D convolution as im2col + GEMM, plus nearest-neighbour resampling.
//!
//! The convolution and its two gradient maps are three separate recorded
//! primitives. Each is bilinear in its two operands, so each one's backward
//! is expressed with the other two and second derivatives come for free.

use super::linalg::gemm;
use crate::error::{Result, TensorError};
use crate::tape::{record, Op};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(op: &'static str, x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Geom> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] || stride == 0 {
            return Err(TensorError::mismatch(op, x, w));
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return Err(TensorError::mismatch(op, x, w));
        }
        let ho = (x[2] + 2 * pad - k) / stride + 1;
        let wo = (x[3] + 2 * pad - k) / stride + 1;
        Ok(Geom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn x_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    fn w_shape(&self) -> Vec<usize> {
        vec![self.o, self.c, self.k, self.k]
    }

    fn y_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    /// Visits (column row, output position, input offset) for every in-bounds
    /// tap of one image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.k;
        for c in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.wo + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let hw = self.hw_out();
        self.for_each_tap(|row, pos, src| cols[row * hw + pos] = img[src]);
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let hw = self.hw_out();
        self.for_each_tap(|row, pos, dst| img[dst] += cols[row * hw + pos]);
    }
}

fn conv_forward(g: &Geom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let mut cols = vec![0.0; ckk * hw];
    let mut y = vec![0.0; g.n * g.o * hw];
    let img = g.c * g.h * g.w;
    for b in 0..g.n {
        g.im2col(&x[b * img..(b + 1) * img], &mut cols);
        gemm(g.o, ckk, hw, w, false, &cols, false, &mut y[b * g.o * hw..(b + 1) * g.o * hw], false);
    }
    y
}

fn conv_input_grad(g: &Geom, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let mut cols = vec![0.0; ckk * hw];
    let img = g.c * g.h * g.w;
    let mut dx = vec![0.0; g.n * img];
    for b in 0..g.n {
        gemm(ckk, g.o, hw, w, true, &dy[b * g.o * hw..(b + 1) * g.o * hw], false, &mut cols, false);
        g.col2im(&cols, &mut dx[b * img..(b + 1) * img]);
    }
    dx
}

fn conv_weight_grad(g: &Geom, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let mut cols = vec![0.0; ckk * hw];
    let img = g.c * g.h * g.w;
    let mut dw = vec![0.0; g.o * ckk];
    for b in 0..g.n {
        g.im2col(&x[b * img..(b + 1) * img], &mut cols);
        gemm(g.o, hw, ckk, &dy[b * g.o * hw..(b + 1) * g.o * hw], false, &cols, true, &mut dw, true);
    }
    dw
}

impl Tensor {
    /// Cross-correlation of `self` [N,C,H,W] with `weight` [O,C,k,k], zero
    /// padding `pad` on each side. No bias.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let g = Geom::new("conv2d", &self.shape, &weight.shape, stride, pad)?;
        let y = conv_forward(&g, &self.data, &weight.data);
        record(Op::Conv2d { stride, pad }, &[self, weight], y, g.y_shape())
    }

    /// Gradient of a convolution with respect to its input, given the output
    /// gradient `self` [N,O,Ho,Wo]. `x_shape` is the input's shape.
    pub fn conv2d_input_grad(&self, weight: &Tensor, x_shape: &[usize], stride: usize, pad: usize) -> Result<Tensor> {
        let g = Geom::new("conv2d_input_grad", x_shape, &weight.shape, stride, pad)?;
        if self.shape != g.y_shape() {
            return Err(TensorError::mismatch("conv2d_input_grad", &self.shape, &g.y_shape()));
        }
        let dx = conv_input_grad(&g, &self.data, &weight.data);
        record(Op::Conv2dInput { stride, pad }, &[self, weight], dx, g.x_shape())
    }

    /// Gradient of a convolution with respect to its weight, given the input
    /// `self` and output gradient `dy`.
    pub fn conv2d_weight_grad(&self, dy: &Tensor, w_shape: &[usize], stride: usize, pad: usize) -> Result<Tensor> {
        let g = Geom::new("conv2d_weight_grad", &self.shape, w_shape, stride, pad)?;
        if dy.shape != g.y_shape() {
            return Err(TensorError::mismatch("conv2d_weight_grad", &dy.shape, &g.y_shape()));
        }
        let dw = conv_weight_grad(&g, &self.data, &dy.data);
        record(Op::Conv2dWeight { stride, pad }, &[self, dy], dw, g.w_shape())
    }

    /// Nearest-neighbour 2× upsampling of [N,C,H,W].
    pub fn upsample2x(&self) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(TensorError::invalid("upsample2x", format!("expected rank 4, got {:?}", self.shape)));
        }
        let (nc, h, w) = (self.shape[0] * self.shape[1], self.shape[2], self.shape[3]);
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + x] = self.data[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let shape = vec![self.shape[0], self.shape[1], 2 * h, 2 * w];
        record(Op::Upsample2x, &[self], out, shape)
    }

    /// Sum over non-overlapping 2×2 windows; the adjoint of
    /// [`Tensor::upsample2x`].
    pub fn sum_pool2x(&self) -> Result<Tensor> {
        if self.rank() != 4 || self.shape[2] % 2 != 0 || self.shape[3] % 2 != 0 {
            return Err(TensorError::invalid("sum_pool2x", format!("needs rank 4 with even H, W; got {:?}", self.shape)));
        }
        let (nc, h, w) = (self.shape[0] * self.shape[1], self.shape[2] / 2, self.shape[3] / 2);
        let mut out = vec![0.0; nc * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(p * h + y / 2) * w + x / 2] += self.data[(p * 2 * h + y) * 2 * w + x];
                }
            }
        }
        let shape = vec![self.shape[0], self.shape[1], h, w];
        record(Op::SumPool2x, &[self], out, shape)
    }
}
