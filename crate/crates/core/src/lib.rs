//! Asymmetric deep semantic quantization (ADSQ).
//!
//! A label network and two independently weighted image networks are trained
//! so that the concatenation of their sign-quantized outputs forms a compact
//! binary code. Training alternates between gradient steps on the network
//! weights (with the discrete codes fixed) and a closed-form cyclic
//! coordinate descent over the code matrix (with the weights fixed).
//!
//! The crate also provides the retrieval side: bit-packed code storage,
//! popcount Hamming search and the usual hashing evaluation protocols
//! (mAP@R, precision within Hamming radius 2, precision-recall and
//! precision@N curves).

pub mod bstep;
pub mod codes;
pub mod data;
pub mod encoder;
mod error;
mod format;
pub mod imgnet;
pub mod labelnet;
pub mod metrics;
pub mod numerics;
pub mod synth;
pub mod trainer;

pub use error::{AdsqError, Result};
