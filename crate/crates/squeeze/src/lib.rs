//! Mixed-precision post-training weight quantization.
//!
//! The engine compresses dense weight matrices to ~1.6 bits per weight on
//! average by running a staged pipeline: a uniform k-bit pass (k = 4 by
//! default), a combined weight-salience metric that mixes second-order
//! (inverse-Hessian) importance with post-binarization activation-range
//! shift, and partial binarization of everything the metric marks
//! non-salient. Calibration activations can supervise the process from the
//! untouched full-precision model (full-information schedule, the default)
//! or from the partially quantized one.
//!
//! Crate layout:
//!
//! * [`tensor`] — S10T tensor container and model layer specs
//! * [`quant`] — uniform and sign quantization kernels
//! * [`packed`] — mixed-precision bit-packed storage (S10P) and budgets
//! * [`salience`] — Hessian accumulation/inversion and the V/B/M maps
//! * [`pipeline`] — per-layer and whole-model quantization
//! * [`strategies`] — supervision-schedule and sweep-axis registries
//! * [`eval`] — reconstruction error, histogram KL, range stats, sweeps
//! * [`synth`] — seeded synthetic stacks for the harness

pub mod config;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod packed;
pub mod pipeline;
pub mod quant;
pub mod salience;
pub mod strategies;
pub mod synth;
pub mod tensor;

pub use config::{QuantConfig, RangeMode, SupervisionMode};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use packed::{pack_mixed, unpack_mixed, BitBudget, PackedLayer, PackedModel};
pub use pipeline::{
    calibration_pass, quantize_layer, quantize_model, ModelView, QuantReport, QuantRun,
};
pub use quant::{
    binarize_row, compute_uniform_params, dequantize_uniform, quantize_uniform, BinParams,
    BinarizeMode, QuantParams,
};
pub use salience::{
    combine_pbar, compute_b, compute_v, select_salient, HessianState, SalienceMaps, SalienceMask,
};
pub use tensor::{
    load_container, pick_calibration, save_container, validate_model, ModelSpec, Tensor,
    TensorContainer,
};
