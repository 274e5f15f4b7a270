//! Post-training quantization: BN folding, range calibration, integer
//! weights and lookup tables for every activation.

mod calibrate;
mod fold;
mod lut;
mod model;
mod params;

pub use calibrate::{calibrate, finish_calibration, observe, Calibration, Range, DEGENERATE_EPS};
pub use fold::fold_batchnorm;
pub use lut::{build_lut, AccFormat, CryptoParams, LutSpec, OffsetProb};
pub use model::{circuit_bitwidth, dequantized_head, quantize_model, IntWeights, NodeQuant, QuantizedModel};
pub use params::{bits_for_bound, make_qparams, round_accumulator, QuantParams};
