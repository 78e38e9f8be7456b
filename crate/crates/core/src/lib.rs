//! Compensation-based post-training quantization of linear layers.
//!
//! The solver quantizes weight columns one at a time and compensates the
//! not-yet-quantized columns for the error just introduced, using
//! second-order (Hessian) information from calibration activations. Four
//! variants share one engine:
//!
//! * `gptq` — symmetric objective, standard column update
//! * `gptaq` — asymmetric calibration against a full-precision activation
//!   flow (input-difference correction)
//! * `gptq-cae` / `gptaq-cae` — additionally correct for the drift between
//!   compensated and original weights (compensation-aware error)
//!
//! [`oracle`] holds independent brute-force references used to validate
//! every update formula at desk scale, and [`flows`] propagates the
//! quantized and full-precision activation flows through layer stacks.

// Indexed loops over matrix coordinates read better than iterator chains
// in the dense kernels below.
#![allow(clippy::needless_range_loop)]

pub mod calib;
pub mod engine;
pub mod flows;
pub mod linalg;
pub mod oracle;
pub mod problem;
pub mod quant;
pub mod synth;

pub use engine::{run_layer, run_layer_with_workers, LayerOutcome, LayerReport, MethodSpec};
pub use linalg::{LowerTriangular, Matrix};
pub use problem::LayerProblem;
pub use quant::GridSpec;
