//! Tensors with reverse-mode differentiation and the layers built on them.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod tape;

pub use conv::{conv2d_forward, PaddingMode, VerticalPadding};
pub use gradcheck::{gradcheck, GradcheckOptions};
pub use norm::{BatchNormMode, RunningStats};
pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};
