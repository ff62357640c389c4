//! Missing-aware modal switch training and Fourier prompt tuning for
//! multi-modal semantic segmentation under missing and degraded inputs.

pub mod error;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fpt;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod modality;
pub mod ops;
pub mod store;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
