//! Convolutional building blocks with explicit forward/backward passes.

pub mod activation;
pub mod conv;
pub mod deconv;
pub mod norm;

pub use activation::{maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, relu_inplace, PoolCache};
pub use conv::{conv2d_forward, Conv2d, Conv2dSpec, ConvCache};
pub use deconv::{bilinear_init, bilinear_tent, deconv2d_forward, Deconv2d, Deconv2dSpec, DeconvCache};
pub use norm::{channel_norms, l2norm_scale_forward, L2Norm, L2NormSpec, NormCache, DEFAULT_L2_EPS};
