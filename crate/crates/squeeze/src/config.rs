//! Engine configuration shared by the pipeline, the packed format, and the
//! CLI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::BinarizeMode;

/// Which activations supervise per-layer calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    /// Every layer is calibrated on activations from the full-precision
    /// forward pass.
    Fias,
    /// Each layer is calibrated on activations propagated through the
    /// already-quantized upstream layers.
    General,
}

/// How the per-channel activation range is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeMode {
    /// max(y) − min(y)
    Raw,
    /// max(|y|) − min(|y|)
    Absolute,
}

/// Knobs for one quantization run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Bit width of the high-precision stage, in [2, 8].
    pub k_high: u8,
    /// Fraction of weights kept at `k_high` bits, in [0, 1].
    pub salient_ratio: f64,
    /// Weight of the activation-range term in the combined salience metric.
    pub lambda: f64,
    pub supervision: SupervisionMode,
    pub binarize_mode: BinarizeMode,
    /// Column-wise second-order error compensation while emitting codes.
    pub compensation: bool,
    /// Hessian damping as a fraction of mean(diag(H)).
    pub damping_fraction: f64,
    pub range_mode: RangeMode,
    /// Fit one scale/zero-point per layer instead of per output row.
    pub per_layer_params: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            k_high: 4,
            salient_ratio: 0.2,
            lambda: 3e-4,
            supervision: SupervisionMode::Fias,
            binarize_mode: BinarizeMode::ScaledSign,
            compensation: false,
            damping_fraction: 0.01,
            range_mode: RangeMode::Raw,
            per_layer_params: false,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.k_high) {
            return Err(Error::BadBits(self.k_high));
        }
        if !(0.0..=1.0).contains(&self.salient_ratio) {
            return Err(Error::InvalidConfig(format!(
                "salient_ratio {} outside [0, 1]",
                self.salient_ratio
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.damping_fraction < 0.0 || !self.damping_fraction.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "damping_fraction {} must be finite and >= 0",
                self.damping_fraction
            )));
        }
        Ok(())
    }
}
