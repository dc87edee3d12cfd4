//! Multiply-accumulate counts for standard and depthwise-separable
//! convolutions over a square `D_F x D_F` output map.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

/// Geometry of one square convolution: output side `df`, `m` input
/// channels, `n` output channels, kernel side `dk`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub df: usize,
    pub m: usize,
    pub n: usize,
    pub dk: usize,
}

impl ConvShape {
    pub fn new(df: usize, m: usize, n: usize, dk: usize) -> Result<Self> {
        if df == 0 || m == 0 || n == 0 || dk == 0 {
            return Err(Error::Config(format!(
                "conv shape fields must be positive (df={df}, m={m}, n={n}, dk={dk})"
            )));
        }
        if dk > df {
            return Err(Error::Config(format!("kernel size {dk} exceeds feature map size {df}")));
        }
        Ok(Self { df, m, n, dk })
    }
}

pub fn standard_conv_cost(s: ConvShape) -> u64 {
    let k2 = (s.dk * s.dk) as u64;
    let area = (s.df * s.df) as u64;
    k2 * s.m as u64 * s.n as u64 * area
}

/// Depthwise term plus pointwise term.
pub fn separable_conv_cost(s: ConvShape) -> u64 {
    let k2 = (s.dk * s.dk) as u64;
    let area = (s.df * s.df) as u64;
    k2 * s.m as u64 * area + s.m as u64 * s.n as u64 * area
}

pub fn cost_reduction_ratio(s: ConvShape) -> f64 {
    separable_conv_cost(s) as f64 / standard_conv_cost(s) as f64
}

/// `1/N + 1/D_K^2`.
pub fn closed_form_ratio(s: ConvShape) -> f64 {
    1.0 / s.n as f64 + 1.0 / (s.dk * s.dk) as f64
}

/// Runs the tape's standard convolution kernel on a zero input of the given
/// shape and returns the MACs it counted.
pub fn instrumented_standard_macs(s: ConvShape) -> Result<u64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, s.m, s.df, s.df]));
    let w = g.constant(Tensor::zeros(&[s.n, s.m, s.dk, s.dk]));
    g.conv2d(x, w, 1)?;
    Ok(g.mac_count())
}

/// Same as [`instrumented_standard_macs`] for depthwise followed by pointwise.
pub fn instrumented_separable_macs(s: ConvShape) -> Result<u64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, s.m, s.df, s.df]));
    let dw = g.constant(Tensor::zeros(&[s.m, s.dk, s.dk]));
    let pw = g.constant(Tensor::zeros(&[s.n, s.m]));
    let h = g.depthwise_conv2d(x, dw, 1)?;
    g.pointwise_conv2d(h, pw)?;
    Ok(g.mac_count())
}
