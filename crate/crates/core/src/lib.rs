//! Desk-scale laboratory for first- and second-order optimizers on toy
//! rate-distortion objectives, with alignment, outlier and quantization
//! diagnostics plus closed-form oracles to check them against.

pub mod densela;
pub mod diagnostics;
pub mod harness;
pub mod optim;
pub mod oracles;
pub mod problems;
pub mod quant;
pub mod rng;
