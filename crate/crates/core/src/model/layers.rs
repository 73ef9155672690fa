//! Convolutional building blocks shared by both networks.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Scalar;

use super::ModelConfig;

/// Convolution with the `{name}.w` kernel and `{name}.b` bias, "same" padding.
pub(crate) fn conv<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var<'t, T>,
    stride: usize,
) -> Result<Var<'t, T>> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let k = w.shape()[2];
    x.conv2d(w, Some(b), stride, k / 2)
}

fn conv_relu<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var<'t, T>,
    stride: usize,
) -> Result<Var<'t, T>> {
    Ok(conv(tape, store, name, x, stride)?.relu())
}

/// Frame `[n,3,h,w]` (dims divisible by 4) to a `[n,C,h/4,w/4]` feature.
pub(crate) fn encode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    config: &ModelConfig,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let mut f = conv_relu(tape, store, &format!("{prefix}.stem"), x, 1)?;
    f = conv_relu(tape, store, &format!("{prefix}.s1a"), f, 2)?;
    f = conv_relu(tape, store, &format!("{prefix}.s1b"), f, 1)?;
    f = conv_relu(tape, store, &format!("{prefix}.s2a"), f, 2)?;
    f = conv_relu(tape, store, &format!("{prefix}.s2b"), f, 1)?;
    for i in 0..config.res_blocks {
        let r = conv_relu(tape, store, &format!("{prefix}.res{i}.c1"), f, 1)?;
        let r = conv(tape, store, &format!("{prefix}.res{i}.c2"), r, 1)?;
        f = f.add(r)?;
    }
    Ok(f)
}

/// Stride-4 feature back to full resolution with a sigmoid head.
pub(crate) fn decode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    f: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let mut d = conv_relu(tape, store, &format!("{prefix}.c0"), f, 1)?;
    d = conv_relu(tape, store, &format!("{prefix}.up1"), d.upsample2x(), 1)?;
    d = conv_relu(tape, store, &format!("{prefix}.up2"), d.upsample2x(), 1)?;
    Ok(conv(tape, store, &format!("{prefix}.head"), d, 1)?.sigmoid())
}

/// Padding needed to bring `(h, w)` up to multiples of the feature stride.
pub(crate) fn stride_padding(h: usize, w: usize) -> (usize, usize) {
    let s = super::STRIDE;
    ((s - h % s) % s, (s - w % s) % s)
}
