//! Numeric kernels shared by every other module.

mod distance;
mod filter;
mod gradcheck;
mod map;
pub mod mct1;
mod morphology;
mod softmax;
mod tensor;

pub use distance::distance_to_set;
pub use filter::{gaussian_filter, Border, GaussianSpec};
pub(crate) use filter::{filter_plane, filter_plane_adjoint};
pub use gradcheck::{finite_diff_grad, relative_l2_error};
pub use map::Map2D;
pub use morphology::dilate;
pub(crate) use softmax::softmax_in_place;
pub use softmax::softmax_rows;
pub use tensor::Tensor;
