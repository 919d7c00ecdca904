//! Streaming chunk-wise self-attention kernels for wake-word style acoustic
//! models, plus the verification harness that proves them correct.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — strided dense arrays with zero-copy views
//! * [`autodiff`] — reverse-mode tape over tensor ops, including stop-gradient
//! * [`attention`] — attention kernels and the relative-embedding shift trick
//! * [`streaming`] — chunk segmentation, state caching and look-ahead
//! * [`model`] — the TDNN baseline and the streaming Transformer
//! * harness pieces — [`io`], [`synthetic`], [`train`], [`oracle`],
//!   [`verify`] and [`bench`]

#![forbid(unsafe_code)]

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod io;
pub mod model;
pub mod oracle;
pub mod streaming;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, StridedTensor};
