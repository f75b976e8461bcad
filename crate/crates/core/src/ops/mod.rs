//! The closed operation set the networks and losses are built from: conv,
//! batch norm, ReLU, sigmoid, bilinear resize, concat, elementwise algebra,
//! channel softmax and horizontal warping. Each op lives on [`crate::Tape`].

mod conv;
mod elementwise;
mod norm;
mod resize;
mod softmax;
mod warp;

pub use conv::conv_out_side;
pub use elementwise::flip_tensor;
pub use norm::{NormStats, ObservedStats};
pub use resize::resize_tensor;
pub use softmax::softmax_channels_tensor;
pub use warp::warp_tensor;
