//! Memory-augmented video semantic segmentation.
//!
//! The crate implements a small but complete video scene parsing stack:
//!
//! * a dense-tensor core with reverse-mode differentiation ([`tensor`],
//!   [`autodiff`]);
//! * a deterministic convolutional backbone ([`encoder`]) and a pyramid
//!   pooling + top-down fusion head ([`context`]);
//! * a dataset-level feature memory with moving-average updates ([`memory`])
//!   and mask-guided attention refinement ([`attention`]);
//! * temporal attention over recent frames ([`temporal`]);
//! * two decoder variants, ensembling, and multi-scale / multi-stage
//!   inference ([`model`], [`pipeline`]);
//! * synthetic video data, PNM IO and mIoU evaluation ([`data`], [`eval`]);
//! * an AdamW training loop with augmentation ([`train`]).

pub mod attention;
pub mod autodiff;
pub mod context;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod memory;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
