//! Layer helpers over a [`ParamSet`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::optim::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Glorot-normal weights, zero bias.
    pub fn new(params: &mut ParamSet, name: &str, i: usize, o: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (i + o) as f64).sqrt();
        Self::with_std(params, name, i, o, std, rng)
    }

    pub fn with_std(
        params: &mut ParamSet,
        name: &str,
        i: usize,
        o: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = if std == 0.0 {
            params.push(format!("{name}.w"), Tensor::zeros(&[i, o]))
        } else {
            params.push_normal(format!("{name}.w"), &[i, o], std, rng)
        };
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[o]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

/// 2-D convolution with per-channel bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal weights `[out, in, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        i: usize,
        o: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (i * k * k) as f64).sqrt();
        let w = params.push_normal(format!("{name}.w"), &[o, i, k, k], std, rng);
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[o, 1, 1]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.w), self.stride, self.pad)?;
        tape.add(y, p.var(self.b))
    }
}

/// Transposed convolution with per-channel bias; kernel `[in, out, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        i: usize,
        o: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (i * k * k / (stride * stride)).max(1) as f64).sqrt();
        let w = params.push_normal(format!("{name}.w"), &[i, o, k, k], std, rng);
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[o, 1, 1]));
        Self { w, b, stride }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv_transpose2d(x, p.var(self.w), self.stride, 0)?;
        tape.add(y, p.var(self.b))
    }
}
