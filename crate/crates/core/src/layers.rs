//! Parameterised building blocks shared by the encoder and decoder. Each
//! block stores only parameter names; values live in a [`ParamSet`].

use crate::error::Result;
use crate::params::{ParamSet, Scope};
use crate::tensor::{self, Real, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
}

impl Linear {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, din: usize, dout: usize) -> Result<Self> {
        Ok(Self { weight: s.weight("weight", &[din, dout], din)?, bias: s.weight("bias", &[dout], din)? })
    }

    /// Weight and bias start at zero.
    pub fn zeroed<T: Real>(s: &mut Scope<'_, T>, din: usize, dout: usize) -> Result<Self> {
        Ok(Self { weight: s.constant("weight", &[din, dout], 0.0)?, bias: s.constant("bias", &[dout], 0.0)? })
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::linear(x, p.get(&self.weight), Some(p.get(&self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Result<Self> {
        let fan_in = k * k * cin;
        Ok(Self { weight: s.weight("weight", &[k, k, cin, cout], fan_in)?, bias: s.weight("bias", &[cout], fan_in)?, stride, pad })
    }

    /// Odd `k`, stride 1, spatial extents preserved.
    pub fn same<T: Real>(s: &mut Scope<'_, T>, k: usize, cin: usize, cout: usize) -> Result<Self> {
        Self::new(s, k, cin, cout, 1, (k - 1) / 2)
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv2d(x, p.get(&self.weight), Some(p.get(&self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: String,
    pub bias: String,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, k: usize, c: usize) -> Result<Self> {
        Ok(Self { weight: s.weight("weight", &[k, k, c], k * k)?, bias: s.weight("bias", &[c], k * k)?, kernel: k })
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tensor::depthwise_conv2d(x, p.get(&self.weight), (self.kernel - 1) / 2)?;
        tensor::add_bias(&y, p.get(&self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, c: usize) -> Result<Self> {
        Ok(Self { gamma: s.constant("gamma", &[c], 1.0)?, beta: s.constant("beta", &[c], 0.0)? })
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::layer_norm(x, p.get(&self.gamma), p.get(&self.beta), LN_EPS)
    }
}

/// `fc2(gelu(fc1(x)))` over the last axis.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&mut s.sub("fc1"), din, hidden)?, fc2: Linear::new(&mut s.sub("fc2"), hidden, dout)? })
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = tensor::gelu(&self.fc1.forward(p, x)?);
        self.fc2.forward(p, &h)
    }
}
