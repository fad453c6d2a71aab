//! Stateless layer descriptions. Weights live in a [`ParamSet`] under
//! `"{name}.weight"` / `"{name}.bias"`, so the same layer can run against
//! pretrained, offset, or inner-loop-adapted parameters.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub fn weight_key(name: &str) -> String {
    format!("{name}.weight")
}

pub fn bias_key(name: &str) -> String {
    format!("{name}.bias")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Linear {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, init: Init, rng: &mut R) -> Result<()> {
        let shape = [self.outputs, self.inputs];
        let w = match init {
            Init::Scaled(gain) => Tensor::randn(&shape, gain / (self.inputs as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        params.insert(weight_key(&self.name), w)?;
        params.insert(bias_key(&self.name), Tensor::zeros(&[self.outputs]))
    }

    /// `x` [M, inputs] → [M, outputs].
    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = p.get(&weight_key(&self.name))?;
        let b = p.get(&bias_key(&self.name))?;
        x.matmul_t(w, false, true)?.add(b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, init: Init, rng: &mut R) -> Result<()> {
        let shape = self.weight_shape();
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        let w = match init {
            Init::Scaled(gain) => Tensor::randn(&shape, gain / fan_in.sqrt(), rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        params.insert(weight_key(&self.name), w)?;
        params.insert(bias_key(&self.name), Tensor::zeros(&[self.out_ch]))
    }

    /// "Same" zero padding; stride 1 keeps H×W, stride 2 halves it.
    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = p.get(&weight_key(&self.name))?;
        let b = p.get(&bias_key(&self.name))?;
        if x.rank() != 4 || x.shape()[1] != self.in_ch {
            return Err(TensorError::mismatch("conv2d layer", x.shape(), &self.weight_shape()));
        }
        x.conv2d(w, self.stride, self.kernel / 2)?
            .add(&b.reshape(&[1, self.out_ch, 1, 1])?)
    }
}

/// Convolution followed by per-channel affine modulation from a
/// conditioning vector: `y = conv(x) * (1 + scale(c)) + shift(c)`.
///
/// The projection producing (scale, shift) starts at zero, so a fresh block
/// is a plain convolution for any conditioning input.
#[derive(Clone, Debug)]
pub struct FiLMBlock {
    pub conv: Conv2d,
    pub proj: Linear,
}

impl FiLMBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, cond_dim: usize) -> Self {
        FiLMBlock {
            conv: Conv2d::new(format!("{name}.conv"), in_ch, out_ch, kernel, stride),
            proj: Linear::new(format!("{name}.film"), cond_dim, 2 * out_ch),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, conv_init: Init, rng: &mut R) -> Result<()> {
        self.conv.init(params, conv_init, rng)?;
        self.proj.init(params, Init::Zeros, rng)
    }

    /// `x` [N,C,H,W], `cond` [N, cond_dim].
    pub fn forward(&self, p: &ParamSet, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if cond.rank() != 2 || cond.shape()[1] != self.proj.inputs || cond.shape()[0] != x.shape()[0] {
            return Err(TensorError::mismatch("film", cond.shape(), &[x.shape()[0], self.proj.inputs]));
        }
        let y = self.conv.forward(p, x)?;
        let n = x.shape()[0];
        let o = self.conv.out_ch;
        let ss = self.proj.forward(p, cond)?;
        let scale = ss.slice(1, 0, o)?.reshape(&[n, o, 1, 1])?;
        let shift = ss.slice(1, o, o)?.reshape(&[n, o, 1, 1])?;
        y.mul(&scale.add_scalar(1.0)?)?.add(&shift)
    }
}
