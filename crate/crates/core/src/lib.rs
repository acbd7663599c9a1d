//! Multi-label weather recognition from outdoor images.
//!
//! A CNN backbone extracts features, a channel-wise attention block
//! recalibrates them against the recurrent hidden state, and a ConvLSTM
//! predicts one weather label per step in a fixed order derived from
//! label co-occurrence statistics. Everything — tensors, reverse-mode
//! gradients, the optimizer, image decoding — is implemented here from
//! scratch so the whole pipeline can be verified against finite
//! differences and brute-force oracles.

// index-based loops mirror the kernel arithmetic; iterators would
// obscure the gate/channel bookkeeping
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod backbone;
pub mod cells;
pub mod cooccur;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
