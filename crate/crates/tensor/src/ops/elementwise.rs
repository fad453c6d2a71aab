use super::layout::{broadcast_shape, broadcast_strides, for_each_strided};
use crate::error::Result;
use crate::tape::{record, Op};
use crate::tensor::Tensor;

fn zip_broadcast(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((data, a.shape.clone()));
    }
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    if b.numel() == 1 && shape == a.shape {
        let y = b.data[0];
        return Ok((a.data.iter().map(|&x| f(x, y)).collect(), shape));
    }
    if a.numel() == 1 && shape == b.shape {
        let x = a.data[0];
        return Ok((b.data.iter().map(|&y| f(x, y)).collect(), shape));
    }
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let mut out = vec![0.0; shape.iter().product()];
    for_each_strided(&shape, [&sa, &sb], |i, [oa, ob]| {
        out[i] = f(a.data[oa], b.data[ob]);
    });
    Ok((out, shape))
}

pub fn softplus_value(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        record(op, &[self], data, self.shape.clone())
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape) = zip_broadcast("add", self, other, |x, y| x + y)?;
        record(Op::Add, &[self, other], data, shape)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape) = zip_broadcast("sub", self, other, |x, y| x - y)?;
        record(Op::Sub, &[self, other], data, shape)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape) = zip_broadcast("mul", self, other, |x, y| x * y)?;
        record(Op::Mul, &[self, other], data, shape)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (data, shape) = zip_broadcast("div", self, other, |x, y| x / y)?;
        record(Op::Div, &[self, other], data, shape)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary(Op::Scale(s), |v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar, |v| v + s)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, sigmoid_value)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(Op::Softplus, softplus_value)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        self.unary(Op::LeakyRelu(slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.leaky_relu(0.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Constant mask with the local slope of `leaky_relu` at each element.
    pub(crate) fn leaky_slope_mask(&self, slope: f64) -> Tensor {
        self.detach().map_values(|v| if v > 0.0 { 1.0 } else { slope })
    }
}
