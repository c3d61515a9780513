//! Desk-scale measurement harness.
//!
//! The model-quality numbers here are proxies: reconstruction MSE of layer
//! outputs and KL divergence between activation histograms, not task
//! accuracy. Every serialized report states this in its `note` field.

use serde::{Deserialize, Serialize};

use crate::config::{QuantConfig, SupervisionMode};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::packed::PackedModel;
use crate::pipeline::{
    calibration_pass, forward_pass, model_nonlinearities, model_weights, packed_weights,
    quantize_model, ModelView, REPORT_NOTE,
};

// ── reconstruction error ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputError {
    pub mse: f64,
    pub max_abs: f64,
}

/// Error between `Y = X·Wᵀ` and `Ŷ = X·Ŵᵀ`: mean squared over all N·d_out
/// outputs, plus the max absolute deviation.
pub fn layer_output_error(w: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<OutputError> {
    if w.rows() != w_hat.rows() || w.cols() != w_hat.cols() {
        return Err(Error::DimensionMismatch(format!(
            "weight shapes {}x{} vs {}x{}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols()
        )));
    }
    if x.cols() != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "activations have {} columns, weights have {}",
            x.cols(),
            w.cols()
        )));
    }
    let y = x.matmul_nt(w);
    let y_hat = x.matmul_nt(w_hat);
    let mut sq = 0.0f64;
    let mut max_abs = 0.0f64;
    for (a, b) in y.data().iter().zip(y_hat.data()) {
        let d = (a - b).abs();
        sq += d * d;
        if d > max_abs {
            max_abs = d;
        }
    }
    Ok(OutputError {
        mse: sq / y.data().len() as f64,
        max_abs,
    })
}

// ── activation histogram KL ─────────────────────────────────────────────────

/// Histogram construction parameters for the KL comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bin_count: usize,
    /// Fixed (min, max); `None` covers the union range of both samples.
    pub range: Option<(f64, f64)>,
    /// Mass added to every bin before normalization.
    pub smoothing: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bin_count: 256,
            range: None,
            smoothing: 1e-10,
        }
    }
}

fn histogram(sample: &[f64], lo: f64, hi: f64, bins: usize, smoothing: f64) -> Vec<f64> {
    let mut mass = vec![smoothing; bins];
    let width = hi - lo;
    for &v in sample {
        let idx = if width == 0.0 {
            0
        } else {
            (((v - lo) / width * bins as f64).floor() as usize).min(bins - 1)
        };
        mass[idx] += 1.0;
    }
    let total: f64 = mass.iter().sum();
    for m in &mut mass {
        *m /= total;
    }
    mass
}

/// `D_KL(p ‖ q)` between the histogram of the full-precision sample (p) and
/// the quantized sample (q), both built over the same bins. Clamped at zero
/// against rounding; identical samples give exactly 0.
pub fn activation_kl(sample_fp: &[f64], sample_q: &[f64], spec: &HistogramSpec) -> Result<f64> {
    if sample_fp.is_empty() || sample_q.is_empty() {
        return Err(Error::EmptySample(
            "activation_kl needs non-empty samples".into(),
        ));
    }
    if spec.bin_count == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let (lo, hi) = match spec.range {
        Some((lo, hi)) => {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "histogram range [{lo}, {hi}] is inverted"
                )));
            }
            (lo, hi)
        }
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in sample_fp.iter().chain(sample_q) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        }
    };
    let p = histogram(sample_fp, lo, hi, spec.bin_count, spec.smoothing);
    let q = histogram(sample_q, lo, hi, spec.bin_count, spec.smoothing);
    let mut kl = 0.0f64;
    for (pi, qi) in p.iter().zip(&q) {
        if *pi > 0.0 {
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

// ── per-channel range statistics ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channel: usize,
    pub min: f64,
    pub max: f64,
    pub range: f64,
    pub outlier_count: usize,
}

/// Default IQR multiplier for the outlier rule.
pub const DEFAULT_OUTLIER_IQR_FACTOR: f64 = 4.0;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between order statistics
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per output channel of `y` (N×d_out): min, max, range, and the count of
/// values with `|v − median| > factor·IQR`.
pub fn range_stats(y: &Matrix, outlier_iqr_factor: f64) -> Vec<ChannelStats> {
    let n = y.rows();
    let d_out = y.cols();
    let mut out = Vec::with_capacity(d_out);
    let mut column = vec![0.0f64; n];
    for c in 0..d_out {
        for (t, slot) in column.iter_mut().enumerate() {
            *slot = y.get(t, c);
        }
        let mut sorted = column.clone();
        sorted.sort_by(f64::total_cmp);
        let median = quantile(&sorted, 0.5);
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let threshold = outlier_iqr_factor * iqr;
        let outlier_count = column
            .iter()
            .filter(|&&v| (v - median).abs() > threshold)
            .count();
        out.push(ChannelStats {
            channel: c,
            min: sorted[0],
            max: sorted[n - 1],
            range: sorted[n - 1] - sorted[0],
            outlier_count,
        });
    }
    out
}

pub fn range_stats_csv(stats: &[ChannelStats]) -> String {
    let mut out = String::from("channel,min,max,range,outlier_count\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.channel, s.min, s.max, s.range, s.outlier_count
        ));
    }
    out
}

// ── model-level metrics ─────────────────────────────────────────────────────

/// MSE between the final post-nonlinearity outputs of the full-precision
/// model and the packed model on the same inputs.
pub fn final_output_mse(
    model: &ModelView<'_>,
    packed: &PackedModel,
    inputs: &Matrix,
) -> Result<f64> {
    let nls = model_nonlinearities(model);
    let fp = forward_pass(&model_weights(model), &nls, inputs)?.final_output(&nls);
    let q = forward_pass(&packed_weights(packed)?, &nls, inputs)?.final_output(&nls);
    let mut sq = 0.0;
    for (a, b) in fp.data().iter().zip(q.data()) {
        sq += (a - b) * (a - b);
    }
    Ok(sq / fp.data().len() as f64)
}

/// Element-weighted mean payload bits over all layers, computed from the
/// exact integer bit counts.
pub fn model_payload_bits(packed: &PackedModel) -> f64 {
    let mut num: u64 = 0;
    let mut den: u64 = 0;
    for layer in &packed.layers {
        num += layer.payload_bit_count();
        den += (layer.d_out * layer.d_in) as u64;
    }
    num as f64 / den as f64
}

/// KL divergence of the designated layer's linear output between the
/// full-precision and packed models.
pub fn designated_layer_kl(
    model: &ModelView<'_>,
    packed: &PackedModel,
    inputs: &Matrix,
    layer: usize,
    spec: &HistogramSpec,
) -> Result<f64> {
    if layer >= model.len() {
        return Err(Error::InvalidConfig(format!(
            "designated layer {layer} out of range for a {}-layer model",
            model.len()
        )));
    }
    let nls = model_nonlinearities(model);
    let fp = forward_pass(&model_weights(model), &nls, inputs)?;
    let q = forward_pass(&packed_weights(packed)?, &nls, inputs)?;
    activation_kl(fp.outputs[layer].data(), q.outputs[layer].data(), spec)
}

// ── sweeps ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    IntermediateBits,
    SalientRatio,
    Lambda,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub setting: f64,
    pub per_layer_mse: Vec<f64>,
    pub final_mse: f64,
    pub mean_bits: f64,
    pub d_kl: f64,
    /// Lambda axis only: mask bits differing from the λ = 0 selection,
    /// summed over layers.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_hamming_from_lambda0: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub note: String,
    pub axis: SweepAxis,
    /// Layer whose output feeds the KL comparison.
    pub kl_layer: usize,
    pub layer_names: Vec<String>,
    /// Ascending by setting, one row per requested setting.
    pub points: Vec<SweepPoint>,
    /// Setting with the smallest D_KL (recorded observation, not a gate).
    pub best_d_kl_setting: f64,
    pub config: QuantConfig,
}

impl SweepResult {
    /// Long-format CSV: `setting,layer,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,layer,metric,value\n");
        for p in &self.points {
            for (name, mse) in self.layer_names.iter().zip(&p.per_layer_mse) {
                out.push_str(&format!("{},{},mse,{}\n", p.setting, name, mse));
            }
            out.push_str(&format!("{},model,final_mse,{}\n", p.setting, p.final_mse));
            out.push_str(&format!("{},model,mean_bits,{}\n", p.setting, p.mean_bits));
            out.push_str(&format!("{},model,d_kl,{}\n", p.setting, p.d_kl));
            if let Some(h) = p.mask_hamming_from_lambda0 {
                out.push_str(&format!("{},model,mask_hamming,{}\n", p.setting, h));
            }
        }
        out
    }
}

// ── supervision comparison ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDrift {
    pub name: String,
    pub x_drift_max_abs: f64,
    pub x_drift_frobenius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervisionComparison {
    pub note: String,
    /// Recorded directional expectation; informational, never a gate.
    pub expected: String,
    pub layers: Vec<LayerDrift>,
    pub final_mse_fias: f64,
    pub final_mse_general: f64,
}

/// Quantize twice — full-information and general supervision — on the same
/// inputs, and report how far the calibration activations drift apart plus
/// both final-output errors against full precision.
pub fn compare_supervision(
    model: &ModelView<'_>,
    inputs: &Matrix,
    config: &QuantConfig,
) -> Result<SupervisionComparison> {
    let fias_cfg = QuantConfig {
        supervision: SupervisionMode::Fias,
        ..*config
    };
    let general_cfg = QuantConfig {
        supervision: SupervisionMode::General,
        ..*config
    };
    let fias_run = quantize_model(model, inputs, &fias_cfg)?;
    let general_run = quantize_model(model, inputs, &general_cfg)?;

    let fias_rec = calibration_pass(model, inputs, SupervisionMode::Fias, None)?;
    let general_rec = calibration_pass(
        model,
        inputs,
        SupervisionMode::General,
        Some(&general_run.packed.layers),
    )?;

    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let diff_max = fias_rec.xs[i].max_abs_diff(&general_rec.xs[i]);
            let mut sq = 0.0;
            for (a, b) in fias_rec.xs[i].data().iter().zip(general_rec.xs[i].data()) {
                sq += (a - b) * (a - b);
            }
            LayerDrift {
                name: l.name.to_string(),
                x_drift_max_abs: diff_max,
                x_drift_frobenius: sq.sqrt(),
            }
        })
        .collect();

    Ok(SupervisionComparison {
        note: REPORT_NOTE.to_string(),
        expected: "full-information supervision is expected to give final MSE <= general in the majority of seeds".to_string(),
        layers,
        final_mse_fias: final_output_mse(model, &fias_run.packed, inputs)?,
        final_mse_general: final_output_mse(model, &general_run.packed, inputs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_error_identity_and_scalar() {
        let w = Matrix::from_vec(1, 1, vec![1.0]);
        let x = Matrix::from_vec(1, 1, vec![2.0]);
        let same = layer_output_error(&w, &w, &x).unwrap();
        assert_eq!(same.mse, 0.0);
        assert_eq!(same.max_abs, 0.0);

        let w_hat = Matrix::from_vec(1, 1, vec![0.5]);
        let err = layer_output_error(&w, &w_hat, &x).unwrap();
        assert_eq!(err.mse, 1.0);
        assert_eq!(err.max_abs, 1.0);
    }

    #[test]
    fn output_error_token_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w_hat = Matrix::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        // reverse token order
        let mut rev_rows: Vec<f64> = Vec::new();
        for r in (0..4).rev() {
            rev_rows.extend_from_slice(x.row(r));
        }
        let x_rev = Matrix::from_vec(4, 3, rev_rows);
        let a = layer_output_error(&w, &w_hat, &x).unwrap();
        let b = layer_output_error(&w, &w_hat, &x_rev).unwrap();
        assert!((a.mse - b.mse).abs() < 1e-15);
        assert_eq!(a.max_abs, b.max_abs);
    }

    #[test]
    fn kl_self_divergence_is_zero() {
        let sample: Vec<f64> = (0..500).map(|i| (i as f64 * 0.731).sin()).collect();
        let kl = activation_kl(&sample, &sample, &HistogramSpec::default()).unwrap();
        assert!(kl <= 1e-12);
    }

    #[test]
    fn kl_two_bin_closed_form() {
        // p concentrated in bin 1, q uniform over both bins → ln 2
        let spec = HistogramSpec {
            bin_count: 2,
            range: Some((0.0, 2.0)),
            smoothing: 1e-12,
        };
        let fp = vec![1.5; 1000];
        let q = vec![0.5, 1.5];
        let kl = activation_kl(&fp, &q, &spec).unwrap();
        assert!(
            (kl - std::f64::consts::LN_2).abs() < 1e-6,
            "kl = {kl}, ln 2 = {}",
            std::f64::consts::LN_2
        );
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = HistogramSpec::default();
        for _ in 0..200 {
            let a: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert!(activation_kl(&a, &b, &spec).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_rejects_empty() {
        assert!(matches!(
            activation_kl(&[], &[1.0], &HistogramSpec::default()).unwrap_err(),
            Error::EmptySample(_)
        ));
    }

    #[test]
    fn range_stats_hand_cases() {
        // constant channel → range 0, no outliers
        let y = Matrix::from_vec(4, 1, vec![2.0; 4]);
        let stats = range_stats(&y, DEFAULT_OUTLIER_IQR_FACTOR);
        assert_eq!(stats[0].range, 0.0);
        assert_eq!(stats[0].outlier_count, 0);

        // [0,1,2,3,100]: median 2, IQR 2, threshold 8 → one outlier
        let y = Matrix::from_vec(5, 1, vec![0.0, 1.0, 2.0, 3.0, 100.0]);
        let stats = range_stats(&y, DEFAULT_OUTLIER_IQR_FACTOR);
        assert_eq!(stats[0].min, 0.0);
        assert_eq!(stats[0].max, 100.0);
        assert_eq!(stats[0].range, 100.0);
        assert_eq!(stats[0].outlier_count, 1);
    }

    #[test]
    fn range_stats_permutation_invariant() {
        let y = Matrix::from_vec(5, 1, vec![3.0, 0.0, 100.0, 1.0, 2.0]);
        let stats = range_stats(&y, DEFAULT_OUTLIER_IQR_FACTOR);
        assert_eq!(stats[0].range, 100.0);
        assert_eq!(stats[0].outlier_count, 1);
    }
}
