//! Differentiable primitives. Every function here is pure: it reads its
//! inputs and returns freshly allocated outputs.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub(crate) mod gemm;
pub mod linear;
pub mod lstm;
pub mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use activation::{
    nll_loss, nll_loss_backward, relu, relu_backward, softmax_channels, softmax_channels_backward,
    softmax_cross_entropy, softmax_cross_entropy_backward,
};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormState};
pub use conv::{
    add_channel_bias, channel_bias_grad, conv2d_forward, conv3d_backward, conv3d_forward, ConvSpec,
};
pub use linear::{linear_backward, linear_forward};
pub use lstm::{
    lstm_cell_bn, lstm_cell_bn_backward, lstm_sequence_backward, lstm_sequence_forward, LstmCache,
    LstmGrads, LstmParams, LstmStepCache,
};
pub use pool::{pool3d_backward, pool3d_forward, PoolCache, PoolKind, PoolSpec};

/// How a window operator treats borders along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Padding {
    /// Zero padding so that `output = ceil(input / stride)`; the padding is
    /// split with the smaller half before the data.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisGeometry {
    pub output: usize,
    pub pad_before: usize,
}

pub fn axis_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<AxisGeometry> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(
            "window",
            format!("kernel ({kernel}) and stride ({stride}) must be at least 1"),
        ));
    }
    if input == 0 {
        return Err(Error::invalid("window", "input extent is zero"));
    }
    match padding {
        Padding::Same => {
            let output = input.div_ceil(stride);
            let total = ((output - 1) * stride + kernel).saturating_sub(input);
            Ok(AxisGeometry {
                output,
                pad_before: total / 2,
            })
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::invalid(
                    "window",
                    format!("VALID window of {kernel} does not fit input extent {input}"),
                ));
            }
            Ok(AxisGeometry {
                output: (input - kernel) / stride + 1,
                pad_before: 0,
            })
        }
    }
}

/// Per-axis geometry for a `(T, H, W)` window operator.
pub(crate) fn window_geometry(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [Padding; 3],
) -> Result<[AxisGeometry; 3]> {
    Ok([
        axis_geometry(input[0], kernel[0], stride[0], padding[0])?,
        axis_geometry(input[1], kernel[1], stride[1], padding[1])?,
        axis_geometry(input[2], kernel[2], stride[2], padding[2])?,
    ])
}
