mod conv;
mod elementwise;
pub(crate) mod linalg;
pub(crate) mod transformer;

pub use linalg::softmax_into;
pub use transformer::{rms_norm_row, rope_angles, rope_row};
