//! Origin predictor, polar transformer and classifier assembled into the
//! PTN, CCNN and PCNN architectures.

mod config;
mod model;

pub use config::{AugmentationConfig, BlockSpec, NetworkConfig, Variant};
pub use model::{argmax_rows, augment_rotation, rotate_items, ForwardOptions, ForwardTrace, Mode, Model, Param};
