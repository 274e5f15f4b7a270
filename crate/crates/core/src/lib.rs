//! Plaintext simulation of TFHE-style encrypted CNN inference on
//! frequency-domain (block-DCT) inputs.

pub mod analyzer;
pub mod config;
pub mod dct;
pub mod error;
pub mod io;
pub mod network;
pub mod noise;
pub mod quant;
pub mod sim;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
