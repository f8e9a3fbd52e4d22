//! Op-level entry points grouped the way the network code uses them.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::kernels::Padding;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    SoftmaxRows,
    LogSoftmaxRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    MeanAll,
    SumAll,
    GlobalAvgPoolHw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    UpNearest2x,
    DownAvg2x,
}

pub fn conv2d<'t, T: Scalar>(x: Var<'t, T>, kernel: Var<'t, T>, stride: usize, pad: Padding) -> Result<Var<'t, T>> {
    x.conv2d(kernel, stride, pad)
}

pub fn dense<'t, T: Scalar>(x: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    x.dense(weight, bias)
}

pub fn resample<T: Scalar>(x: Var<'_, T>, mode: Resample) -> Result<Var<'_, T>> {
    match mode {
        Resample::UpNearest2x => x.upsample2x(),
        Resample::DownAvg2x => x.downsample2x(),
    }
}

pub fn activation<T: Scalar>(x: Var<'_, T>, kind: Activation) -> Result<Var<'_, T>> {
    match kind {
        Activation::Relu => Ok(x.relu()),
        Activation::Tanh => Ok(x.tanh()),
        Activation::SoftmaxRows => x.softmax_rows(),
        Activation::LogSoftmaxRows => x.log_softmax_rows(),
    }
}

pub fn reduce<T: Scalar>(x: Var<'_, T>, kind: Reduce) -> Result<Var<'_, T>> {
    match kind {
        Reduce::MeanAll => Ok(x.mean_all()),
        Reduce::SumAll => Ok(x.sum_all()),
        Reduce::GlobalAvgPoolHw => x.global_avg_pool(),
    }
}

/// Gradient of the summed per-sample outputs of `critic` with respect to
/// its input, recorded on the tape so it can be differentiated again with
/// respect to whatever parameters `critic` closes over.
///
/// Returns the input leaf and the gradient (same shape as `x`).
pub fn input_gradient<'t, T: Scalar>(
    tape: &'t Tape<T>,
    critic: impl FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
    x: Tensor<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let n = x.shape().first().copied().unwrap_or(0);
    let xv = tape.param(x);
    let out = critic(xv)?;
    let shape = out.shape();
    let per_sample = matches!(shape.as_slice(), [m] if *m == n) || matches!(shape.as_slice(), [m, 1] if *m == n);
    if !per_sample {
        return Err(shape_err(
            "input_gradient",
            format!("critic must output one scalar per sample ({n}), got {shape:?}"),
        ));
    }
    let g = tape.gradients_graph(out, &[xv])?;
    Ok((xv, g[0]))
}
