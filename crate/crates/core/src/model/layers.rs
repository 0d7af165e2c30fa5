//! Parameterized layers built from tape primitives.

use sbcit_tensor::{Conv2dOptions, Element, Var};

use super::ctx::{Ctx, Init};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    /// 3×3 depthwise convolution, padding 1.
    pub fn depthwise(channels: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::new(channels, channels, 3)
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

pub fn conv<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, x: Var, s: ConvSpec) -> Result<Var> {
    let per_group = s.in_ch / s.groups;
    let w = ctx.param(
        &format!("{name}.weight"),
        &[s.out_ch, per_group, s.kernel, s.kernel],
        Init::KaimingFanIn(per_group * s.kernel * s.kernel),
    )?;
    let b = if s.bias {
        Some(ctx.param(&format!("{name}.bias"), &[s.out_ch], Init::Zeros)?)
    } else {
        None
    };
    let opts = Conv2dOptions::new(s.stride, s.padding).groups(s.groups);
    Ok(ctx.tape.conv2d(x, w, b, opts)?)
}

pub fn batch_norm<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, x: Var, channels: usize) -> Result<Var> {
    let gamma = ctx.param(&format!("{name}.gamma"), &[channels], Init::Ones)?;
    let beta = ctx.param(&format!("{name}.beta"), &[channels], Init::Zeros)?;
    let mean = ctx.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?;
    let var = ctx.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?;
    let train = ctx.is_train();
    let (y, stats) = ctx
        .tape
        .batch_norm(x, gamma, beta, (mean.data(), var.data()), train)?;
    if let Some(stats) = stats {
        ctx.push_bn_update(name, stats);
    }
    Ok(y)
}

pub fn layer_norm<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, x: Var, dim: usize) -> Result<Var> {
    let gamma = ctx.param(&format!("{name}.gamma"), &[dim], Init::Ones)?;
    let beta = ctx.param(&format!("{name}.beta"), &[dim], Init::Zeros)?;
    Ok(ctx.tape.layer_norm(x, gamma, beta)?)
}

pub fn linear<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, x: Var, d_in: usize, d_out: usize) -> Result<Var> {
    let w = ctx.param(&format!("{name}.weight"), &[d_out, d_in], Init::KaimingFanIn(d_in))?;
    let b = ctx.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
    Ok(ctx.tape.linear(x, w, Some(b))?)
}

/// conv → batch norm → ReLU.
pub fn conv_bn_relu<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, x: Var, s: ConvSpec) -> Result<Var> {
    let y = conv(ctx, &format!("{name}.conv"), x, s.no_bias())?;
    let y = batch_norm(ctx, &format!("{name}.bn"), y, s.out_ch)?;
    Ok(ctx.tape.relu(y))
}
