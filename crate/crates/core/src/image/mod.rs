//! Screenshot encoder and the convolution cost model behind it.

mod cost;
mod encoder;

pub use cost::{
    cost_reduction_ratio, closed_form_ratio, instrumented_separable_macs, instrumented_standard_macs,
    separable_conv_cost, standard_conv_cost, ConvShape,
};
pub use encoder::{ImageEncoder, ImageEncoderConfig, LayerCost, LayerKind};
