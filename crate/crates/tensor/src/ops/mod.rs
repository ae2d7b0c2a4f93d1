mod conv;
mod elementwise;
pub(crate) mod linalg;
mod norm;
mod resize;
mod shape;

pub use conv::{conv2d, conv3d, conv_transpose3d, max_pool3d, upsample_nearest3d, Conv3dSpec};
pub use elementwise::{
    add, add_scalar, broadcast_shape, gelu, leaky_relu, mean_all, mul, neg, relu, rrelu, scale, sigmoid,
    sigmoid_f32, sub, sum_all, tanh,
};
pub use linalg::{linear, matmul, matmul_ex};
pub use norm::{batch_norm, instance_norm, layer_norm, normalize_rows, softmax_last};
pub use resize::resize_bilinear;
pub use shape::{cat, cumsum, gather, narrow, pad, permute, repeat_interleave, reshape, roll, ZERO_INDEX};
