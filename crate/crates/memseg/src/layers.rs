//! Shared parameter containers for conv layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `3×3` conv parameters plus stride.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor, // Cout×Cin×3×3
    pub bias: Tensor,   // Cout
    pub stride: usize,
}

impl ConvLayer {
    /// Xavier-uniform init in `[-a, a]`, `a = sqrt(6/(fan_in+fan_out))`;
    /// biases start at zero.
    pub fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> ConvLayer {
        let fan_in = (cin * 9) as f64;
        let fan_out = (cout * 9) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        let n = cout * cin * 9;
        let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
        ConvLayer {
            weight: Tensor::from_vec(vec![cout, cin, 3, 3], data).expect("conv shape"),
            bias: Tensor::zeros(&[cout]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv3x3(&self.weight, &self.bias, self.stride)
    }
}

/// `1×1` conv (per-pixel affine) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1 {
    pub weight: Tensor, // Cout×Cin
    pub bias: Tensor,   // Cout
}

impl Conv1x1 {
    pub fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Conv1x1 {
        let a = (6.0 / (cin + cout) as f64).sqrt();
        let data = (0..cout * cin).map(|_| rng.random_range(-a..a)).collect();
        Conv1x1 {
            weight: Tensor::from_vec(vec![cout, cin], data).expect("conv1x1 shape"),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Identity projection (requires `cin == cout`).
    pub fn identity(c: usize) -> Conv1x1 {
        Conv1x1 {
            weight: Tensor::eye(c),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv1x1(&self.weight, &self.bias)
    }
}

/// Tape-recorded twin of [`ConvLayer`].
#[derive(Clone, Copy)]
pub struct ConvLayerVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
    pub stride: usize,
}

impl ConvLayer {
    pub fn lift<'t>(
        &self,
        tape: &'t Tape,
        trainable: bool,
        leaves: &mut Vec<Var<'t>>,
    ) -> ConvLayerVars<'t> {
        let weight = lift_leaf(tape, &self.weight, trainable, leaves);
        let bias = lift_leaf(tape, &self.bias, trainable, leaves);
        ConvLayerVars {
            weight,
            bias,
            stride: self.stride,
        }
    }
}

impl<'t> ConvLayerVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.conv3x3(self.weight, self.bias, self.stride)
    }
}

/// Tape-recorded twin of [`Conv1x1`].
#[derive(Clone, Copy)]
pub struct Conv1x1Vars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl Conv1x1 {
    pub fn lift<'t>(
        &self,
        tape: &'t Tape,
        trainable: bool,
        leaves: &mut Vec<Var<'t>>,
    ) -> Conv1x1Vars<'t> {
        let weight = lift_leaf(tape, &self.weight, trainable, leaves);
        let bias = lift_leaf(tape, &self.bias, trainable, leaves);
        Conv1x1Vars { weight, bias }
    }
}

impl<'t> Conv1x1Vars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1x1(self.weight, self.bias)
    }
}

/// Put one parameter tensor on the tape, tracked or frozen, and remember the
/// leaf so gradients line up with the parameter enumeration order.
pub fn lift_leaf<'t>(
    tape: &'t Tape,
    value: &Tensor,
    trainable: bool,
    leaves: &mut Vec<Var<'t>>,
) -> Var<'t> {
    let var = if trainable {
        tape.param(value.clone())
    } else {
        tape.constant(value.clone())
    };
    leaves.push(var);
    var
}
