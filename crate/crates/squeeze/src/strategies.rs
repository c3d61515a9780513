//! Strategy registries: interchangeable supervision schedules and sweep
//! axes behind common traits, looked up by name at run time.
//!
//! The CLI resolves `--supervision` and the `sweep-*` commands through
//! these tables, so adding a variant means implementing the trait and
//! appending it to the registry slice.

use rayon::prelude::*;

use crate::config::{QuantConfig, SupervisionMode};
use crate::error::{Error, Result};
use crate::eval::{
    designated_layer_kl, final_output_mse, model_payload_bits, HistogramSpec, SweepAxis,
    SweepPoint, SweepResult,
};
use crate::linalg::Matrix;
use crate::packed::PackedModel;
use crate::pipeline::{
    apply_nonlinearity, calibration_pass, model_nonlinearities, quantize_layer, LayerOutcome,
    ModelView, QuantReport, QuantRun, REPORT_NOTE,
};

// ── supervision schedules ───────────────────────────────────────────────────

/// A calibration/quantization schedule for a whole model.
pub trait SupervisionStrategy: Send + Sync {
    /// Registry key, also used by the CLI flag.
    fn name(&self) -> &'static str;

    fn mode(&self) -> SupervisionMode;

    /// Whether layers may be quantized concurrently. Only the
    /// full-information schedule admits this: its per-layer inputs never
    /// depend on other layers' quantization.
    fn layer_parallel(&self) -> bool;

    fn run(&self, model: &ModelView<'_>, inputs: &Matrix, config: &QuantConfig)
        -> Result<QuantRun>;
}

fn assemble_run(config: &QuantConfig, outcomes: Vec<LayerOutcome>) -> QuantRun {
    let mut packed = PackedModel::default();
    let mut reports = Vec::with_capacity(outcomes.len());
    let mut salience = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        packed.layers.push(o.packed);
        reports.push(o.report);
        salience.push(o.maps);
    }
    QuantRun {
        packed,
        report: QuantReport {
            note: REPORT_NOTE.to_string(),
            config: *config,
            layers: reports,
            wall_time_ms: 0.0,
        },
        salience,
    }
}

/// Full-information supervision: one full-precision calibration pass, then
/// every layer quantized independently (and concurrently) against its
/// recorded activations.
pub struct FiasSupervision;

impl SupervisionStrategy for FiasSupervision {
    fn name(&self) -> &'static str {
        "fias"
    }

    fn mode(&self) -> SupervisionMode {
        SupervisionMode::Fias
    }

    fn layer_parallel(&self) -> bool {
        true
    }

    fn run(
        &self,
        model: &ModelView<'_>,
        inputs: &Matrix,
        config: &QuantConfig,
    ) -> Result<QuantRun> {
        let record = calibration_pass(model, inputs, SupervisionMode::Fias, None)?;
        let outcomes: Vec<LayerOutcome> = model
            .layers
            .par_iter()
            .zip(record.xs.par_iter())
            .map(|(layer, x)| quantize_layer(layer.name, layer.weight, x, config))
            .collect::<Result<_>>()?;
        Ok(assemble_run(config, outcomes))
    }
}

/// Conventional supervision: layers processed strictly in order, each
/// calibrated on activations propagated through the already-quantized
/// prefix.
pub struct GeneralSupervision;

impl SupervisionStrategy for GeneralSupervision {
    fn name(&self) -> &'static str {
        "general"
    }

    fn mode(&self) -> SupervisionMode {
        SupervisionMode::General
    }

    fn layer_parallel(&self) -> bool {
        false
    }

    fn run(
        &self,
        model: &ModelView<'_>,
        inputs: &Matrix,
        config: &QuantConfig,
    ) -> Result<QuantRun> {
        let nls = model_nonlinearities(model);
        let mut outcomes = Vec::with_capacity(model.len());
        let mut x = inputs.clone();
        for (idx, layer) in model.layers.iter().enumerate() {
            let outcome = quantize_layer(layer.name, layer.weight, &x, config)?;
            if idx + 1 < model.len() {
                let dense = outcome.packed.dense_tensor()?.to_matrix();
                let mut y = x.matmul_nt(&dense);
                apply_nonlinearity(&mut y, nls[idx]);
                x = y;
            }
            outcomes.push(outcome);
        }
        Ok(assemble_run(config, outcomes))
    }
}

static FIAS: FiasSupervision = FiasSupervision;
static GENERAL: GeneralSupervision = GeneralSupervision;
static SUPERVISION_REGISTRY: [&dyn SupervisionStrategy; 2] = [&FIAS, &GENERAL];

pub fn supervision_strategies() -> &'static [&'static dyn SupervisionStrategy] {
    &SUPERVISION_REGISTRY
}

pub fn supervision_by_name(name: &str) -> Option<&'static dyn SupervisionStrategy> {
    supervision_strategies()
        .iter()
        .copied()
        .find(|s| s.name() == name)
}

pub fn supervision_for(mode: SupervisionMode) -> &'static dyn SupervisionStrategy {
    supervision_strategies()
        .iter()
        .copied()
        .find(|s| s.mode() == mode)
        .expect("every mode is registered")
}

// ── sweep axes ──────────────────────────────────────────────────────────────

/// One tunable axis swept over a grid of settings, everything else held at
/// the base configuration.
pub trait SweepStrategy: Send + Sync {
    /// Registry key; the CLI command `sweep-<name>` maps here.
    fn name(&self) -> &'static str;

    fn axis(&self) -> SweepAxis;

    fn default_grid(&self) -> Vec<f64>;

    /// Reject grid values the axis cannot take.
    fn validate_setting(&self, setting: f64) -> Result<()>;

    /// Base config with this axis moved to `setting`.
    fn apply(&self, config: &QuantConfig, setting: f64) -> QuantConfig;

    fn run(
        &self,
        model: &ModelView<'_>,
        inputs: &Matrix,
        config: &QuantConfig,
        grid: &[f64],
        kl_layer: usize,
    ) -> Result<SweepResult> {
        for &s in grid {
            self.validate_setting(s)?;
        }
        let mut settings = grid.to_vec();
        settings.sort_by(f64::total_cmp);

        // the lambda axis reports mask movement relative to λ = 0
        let baseline_masks: Option<Vec<Vec<bool>>> = if self.axis() == SweepAxis::Lambda {
            let run = crate::pipeline::quantize_model(
                model,
                inputs,
                &self.apply(config, 0.0),
            )?;
            Some(run.packed.layers.iter().map(|l| l.mask.clone()).collect())
        } else {
            None
        };

        let mut points = Vec::with_capacity(settings.len());
        for &setting in &settings {
            let cfg = self.apply(config, setting);
            let run = crate::pipeline::quantize_model(model, inputs, &cfg)?;
            let mask_hamming_from_lambda0 = baseline_masks.as_ref().map(|base| {
                run.packed
                    .layers
                    .iter()
                    .zip(base)
                    .map(|(l, b)| {
                        l.mask
                            .iter()
                            .zip(b)
                            .filter(|(a, b)| a != b)
                            .count() as u64
                    })
                    .sum()
            });
            points.push(SweepPoint {
                setting,
                per_layer_mse: run.report.layers.iter().map(|l| l.mse).collect(),
                final_mse: final_output_mse(model, &run.packed, inputs)?,
                mean_bits: model_payload_bits(&run.packed),
                d_kl: designated_layer_kl(
                    model,
                    &run.packed,
                    inputs,
                    kl_layer,
                    &HistogramSpec::default(),
                )?,
                mask_hamming_from_lambda0,
            });
        }
        let best = points
            .iter()
            .min_by(|a, b| a.d_kl.total_cmp(&b.d_kl).then(a.setting.total_cmp(&b.setting)))
            .map(|p| p.setting)
            .unwrap_or(f64::NAN);
        Ok(SweepResult {
            note: REPORT_NOTE.to_string(),
            axis: self.axis(),
            kl_layer,
            layer_names: model.layers.iter().map(|l| l.name.to_string()).collect(),
            points,
            best_d_kl_setting: best,
            config: *config,
        })
    }
}

/// Sweep of the high-precision stage's bit width.
pub struct BitsSweep;

impl SweepStrategy for BitsSweep {
    fn name(&self) -> &'static str {
        "bits"
    }

    fn axis(&self) -> SweepAxis {
        SweepAxis::IntermediateBits
    }

    fn default_grid(&self) -> Vec<f64> {
        (2..=8).map(|k| k as f64).collect()
    }

    fn validate_setting(&self, setting: f64) -> Result<()> {
        if setting.fract() != 0.0 || !(2.0..=8.0).contains(&setting) {
            return Err(Error::InvalidConfig(format!(
                "bit-width setting {setting} must be an integer in [2, 8]"
            )));
        }
        Ok(())
    }

    fn apply(&self, config: &QuantConfig, setting: f64) -> QuantConfig {
        QuantConfig {
            k_high: setting as u8,
            ..*config
        }
    }
}

/// Sweep of the salient-weight fraction.
pub struct RatioSweep;

impl SweepStrategy for RatioSweep {
    fn name(&self) -> &'static str {
        "ratio"
    }

    fn axis(&self) -> SweepAxis {
        SweepAxis::SalientRatio
    }

    fn default_grid(&self) -> Vec<f64> {
        vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    }

    fn validate_setting(&self, setting: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&setting) {
            return Err(Error::InvalidConfig(format!(
                "salient ratio setting {setting} outside [0, 1]"
            )));
        }
        Ok(())
    }

    fn apply(&self, config: &QuantConfig, setting: f64) -> QuantConfig {
        QuantConfig {
            salient_ratio: setting,
            ..*config
        }
    }
}

/// Sweep of the activation-range weight λ.
pub struct LambdaSweep;

impl SweepStrategy for LambdaSweep {
    fn name(&self) -> &'static str {
        "lambda"
    }

    fn axis(&self) -> SweepAxis {
        SweepAxis::Lambda
    }

    fn default_grid(&self) -> Vec<f64> {
        vec![1e-2, 1e-3, 3e-4, 1e-4, 1e-5]
    }

    fn validate_setting(&self, setting: f64) -> Result<()> {
        if setting < 0.0 || !setting.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda setting {setting} must be finite and >= 0"
            )));
        }
        Ok(())
    }

    fn apply(&self, config: &QuantConfig, setting: f64) -> QuantConfig {
        QuantConfig {
            lambda: setting,
            ..*config
        }
    }
}

static BITS: BitsSweep = BitsSweep;
static RATIO: RatioSweep = RatioSweep;
static LAMBDA: LambdaSweep = LambdaSweep;
static SWEEP_REGISTRY: [&dyn SweepStrategy; 3] = [&BITS, &RATIO, &LAMBDA];

pub fn sweep_strategies() -> &'static [&'static dyn SweepStrategy] {
    &SWEEP_REGISTRY
}

pub fn sweep_by_name(name: &str) -> Option<&'static dyn SweepStrategy> {
    sweep_strategies().iter().copied().find(|s| s.name() == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registries_resolve_by_name() {
        assert_eq!(supervision_by_name("fias").unwrap().mode(), SupervisionMode::Fias);
        assert_eq!(
            supervision_by_name("general").unwrap().mode(),
            SupervisionMode::General
        );
        assert!(supervision_by_name("nope").is_none());
        assert!(supervision_by_name("fias").unwrap().layer_parallel());
        assert!(!supervision_by_name("general").unwrap().layer_parallel());

        for name in ["bits", "ratio", "lambda"] {
            assert_eq!(sweep_by_name(name).unwrap().name(), name);
        }
        assert!(sweep_by_name("zeta").is_none());
    }

    #[test]
    fn sweep_grids_validate() {
        assert!(sweep_by_name("bits").unwrap().validate_setting(4.0).is_ok());
        assert!(sweep_by_name("bits").unwrap().validate_setting(4.5).is_err());
        assert!(sweep_by_name("bits").unwrap().validate_setting(9.0).is_err());
        assert!(sweep_by_name("ratio").unwrap().validate_setting(1.1).is_err());
        assert!(sweep_by_name("lambda").unwrap().validate_setting(-1e-3).is_err());
        // default grids are themselves valid
        for s in sweep_strategies() {
            for v in s.default_grid() {
                s.validate_setting(v).unwrap();
            }
        }
        assert_eq!(sweep_by_name("lambda").unwrap().default_grid(), vec![1e-2, 1e-3, 3e-4, 1e-4, 1e-5]);
    }
}
