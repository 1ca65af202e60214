//! Numeric substrate: tensors with reverse-mode autodiff, a counter-based
//! splittable RNG, deterministic elementary functions, the standard normal
//! CDF, and the two optimizers used for training.

pub mod optim;
pub mod rng;
pub mod special;
pub mod tensor;

pub use optim::{lr_at, OptimKind, OptimState};
pub use rng::Rng;
pub use special::std_normal_cdf;
pub use tensor::Tensor;
