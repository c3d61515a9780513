//! Staged mixed-precision quantization of a layered model.
//!
//! Per layer: (1) fit and apply the k-bit uniform stage, (2) score every
//! weight with the combined salience metric computed from the stage-1
//! dequantized weights and the layer's calibration activations, (3) keep the
//! top fraction at k bits and binarize the rest, optionally propagating
//! per-column quantization error through the inverse Hessian.
//!
//! Calibration activations come from one of two supervision schedules (see
//! [`crate::strategies`]): the full-information schedule records every
//! layer's inputs from the untouched full-precision model, the general
//! schedule propagates them through already-quantized layers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{QuantConfig, SupervisionMode};
use crate::error::{Error, Result};
use crate::eval::layer_output_error;
use crate::linalg::Matrix;
use crate::packed::{pack_mixed, ConfigEcho, PackedLayer, PackedModel};
use crate::quant::{
    binarize_row, compute_uniform_params, dequantize_value, quantize_value, sign_code, BinParams,
    QuantParams,
};
use crate::salience::{
    combine_pbar, compute_b, compute_v, select_salient, HessianState, SalienceMaps, SalienceMask,
};
use crate::tensor::{validate_model, ModelSpec, Nonlinearity, Tensor, TensorContainer};

/// A model spec resolved against its weight container.
#[derive(Debug, Clone)]
pub struct ModelView<'a> {
    pub layers: Vec<LayerView<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub name: &'a str,
    pub weight: &'a Tensor,
    pub nonlinearity: Nonlinearity,
}

impl<'a> ModelView<'a> {
    /// Resolve and validate. Any diagnostic is a hard error here; callers
    /// that want the diagnostic list use [`validate_model`] directly.
    pub fn resolve(spec: &'a ModelSpec, container: &'a TensorContainer) -> Result<Self> {
        let diags = validate_model(spec, container);
        if !diags.is_empty() {
            let joined: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            return Err(Error::InvalidModel(joined.join("; ")));
        }
        if spec.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerView {
                name: l.weight.as_str(),
                weight: container.get(&l.weight).expect("validated above"),
                nonlinearity: l.nonlinearity,
            })
            .collect();
        Ok(ModelView { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Digest of every weight payload in layer order, for run provenance.
    pub fn weights_digest(&self) -> Sha256 {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            hasher.update(layer.name.as_bytes());
            for v in layer.weight.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
    }
}

pub(crate) fn digest_hex(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ── forward passes ──────────────────────────────────────────────────────────

pub fn apply_nonlinearity(m: &mut Matrix, nl: Nonlinearity) {
    if nl == Nonlinearity::Relu {
        for v in m.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Inputs and pre-nonlinearity outputs of every layer for one forward pass.
pub struct ForwardTrace {
    /// `inputs[ℓ]` is X_ℓ, the N×d_in activation fed to layer ℓ.
    pub inputs: Vec<Matrix>,
    /// `outputs[ℓ]` is Y_ℓ = X_ℓ·W_ℓᵀ before the nonlinearity.
    pub outputs: Vec<Matrix>,
}

impl ForwardTrace {
    /// Final post-nonlinearity model output.
    pub fn final_output(&self, nls: &[Nonlinearity]) -> Matrix {
        let mut out = self.outputs.last().expect("non-empty trace").clone();
        apply_nonlinearity(&mut out, *nls.last().expect("non-empty trace"));
        out
    }
}

/// Run `inputs` through dense weight matrices in order.
pub fn forward_pass(weights: &[Matrix], nls: &[Nonlinearity], inputs: &Matrix) -> Result<ForwardTrace> {
    assert_eq!(weights.len(), nls.len());
    let mut xs = Vec::with_capacity(weights.len());
    let mut ys = Vec::with_capacity(weights.len());
    let mut x = inputs.clone();
    for (w, &nl) in weights.iter().zip(nls) {
        if x.cols() != w.cols() {
            return Err(Error::DimensionMismatch(format!(
                "activations have {} columns, layer weight is {}x{}",
                x.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let y = x.matmul_nt(w);
        xs.push(x);
        let mut next = y.clone();
        apply_nonlinearity(&mut next, nl);
        ys.push(y);
        x = next;
    }
    Ok(ForwardTrace {
        inputs: xs,
        outputs: ys,
    })
}

pub fn model_weights(model: &ModelView<'_>) -> Vec<Matrix> {
    model.layers.iter().map(|l| l.weight.to_matrix()).collect()
}

pub fn model_nonlinearities(model: &ModelView<'_>) -> Vec<Nonlinearity> {
    model.layers.iter().map(|l| l.nonlinearity).collect()
}

pub fn packed_weights(packed: &PackedModel) -> Result<Vec<Matrix>> {
    packed
        .layers
        .iter()
        .map(|l| Ok(l.dense_tensor()?.to_matrix()))
        .collect()
}

// ── calibration ─────────────────────────────────────────────────────────────

/// Per-layer calibration activations for one supervision schedule.
#[derive(Debug, Clone)]
pub struct CalibrationRecord {
    pub xs: Vec<Matrix>,
    pub mode: SupervisionMode,
    /// Digest of the model weights and calibration inputs that produced
    /// this record.
    pub source_hash: String,
}

/// Produce X_ℓ for every layer.
///
/// * `Fias`: all inputs come from the full-precision forward pass;
///   `quantized_prefix` is ignored.
/// * `General`: X_ℓ is propagated through the dequantized packed layers
///   1..ℓ−1, which must be present in `quantized_prefix`.
pub fn calibration_pass(
    model: &ModelView<'_>,
    inputs: &Matrix,
    mode: SupervisionMode,
    quantized_prefix: Option<&[PackedLayer]>,
) -> Result<CalibrationRecord> {
    let mut hasher = model.weights_digest();
    for v in inputs.data() {
        hasher.update(v.to_le_bytes());
    }
    let source_hash = digest_hex(hasher);

    let nls = model_nonlinearities(model);
    let xs = match mode {
        SupervisionMode::Fias => {
            let weights = model_weights(model);
            forward_pass(&weights, &nls, inputs)?.inputs
        }
        SupervisionMode::General => {
            let needed = model.len() - 1;
            let prefix = quantized_prefix.unwrap_or(&[]);
            if prefix.len() < needed {
                return Err(Error::MissingPrefix {
                    layer: prefix.len() + 1,
                    required: needed,
                    found: prefix.len(),
                });
            }
            let weights: Vec<Matrix> = prefix[..needed]
                .iter()
                .map(|l| Ok(l.dense_tensor()?.to_matrix()))
                .collect::<Result<_>>()?;
            let mut xs = Vec::with_capacity(model.len());
            let mut x = inputs.clone();
            for (idx, w) in weights.iter().enumerate() {
                if x.cols() != w.cols() {
                    return Err(Error::DimensionMismatch(format!(
                        "calibration inputs have {} columns at layer {idx}, packed layer is {}x{}",
                        x.cols(),
                        w.rows(),
                        w.cols()
                    )));
                }
                xs.push(x.clone());
                let mut y = x.matmul_nt(w);
                apply_nonlinearity(&mut y, nls[idx]);
                x = y;
            }
            xs.push(x);
            xs
        }
    };
    Ok(CalibrationRecord {
        xs,
        mode,
        source_hash,
    })
}

// ── per-layer quantization ──────────────────────────────────────────────────

/// Metrics for one quantized layer, emitted in model order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    pub salient_count: usize,
    pub mean_bits: crate::packed::BitBudget,
    /// ‖(W − Ŵ)·Xᵀ‖²_F / (N·d_out) against the original weights.
    pub mse: f64,
    pub max_abs: f64,
    pub v_mean: f64,
    pub v_max: f64,
    pub b_mean: f64,
    pub b_max: f64,
    /// SHA-256 of the accumulated Hessian payload (pre-damping).
    pub hessian_sha256: String,
    /// Per-row ‖(w − ŵ)·Xᵀ‖₂ when compensation ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub compensation_row_error_l2: Option<Vec<f64>>,
}

/// Everything produced while quantizing one layer.
pub struct LayerOutcome {
    pub packed: PackedLayer,
    pub report: LayerReport,
    pub maps: SalienceMaps,
    pub mask: SalienceMask,
}

fn mean_and_max(m: &Matrix) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for &v in m.data() {
        sum += v;
        if v > max {
            max = v;
        }
    }
    (sum / m.data().len() as f64, max)
}

/// Propagate the error of quantizing column `q` of one row into the
/// not-yet-quantized columns: `w_j ← w_j − (w_q − ŵ_q)·hinv[q,j]/hinv[q,q]`
/// for j > q.
pub fn compensate_remaining(
    row: &mut [f64],
    q: usize,
    quantized_value: f64,
    hinv: &Matrix,
) -> Result<()> {
    let pivot = hinv.get(q, q);
    if pivot <= 0.0 {
        return Err(Error::ZeroPivot {
            column: q,
            value: pivot,
        });
    }
    let err = row[q] - quantized_value;
    if err == 0.0 {
        return Ok(());
    }
    for (j, slot) in row.iter_mut().enumerate().skip(q + 1) {
        *slot -= err * hinv.get(q, j) / pivot;
    }
    Ok(())
}

/// Quantize one layer against its calibration activations.
pub fn quantize_layer(
    name: &str,
    w: &Tensor,
    x: &Matrix,
    config: &QuantConfig,
) -> Result<LayerOutcome> {
    config.validate()?;
    let d_out = w.rows();
    let d_in = w.cols();
    if x.cols() != d_in {
        return Err(Error::DimensionMismatch(format!(
            "layer {name:?}: activations have {} columns, weights are {d_out}x{d_in}",
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyInput(format!(
            "layer {name:?}: calibration activations are empty"
        )));
    }

    // stage 1: uniform k-bit pass over the original weights
    let row_params: Vec<QuantParams> = if config.per_layer_params {
        let p = compute_uniform_params(w.data(), config.k_high)?;
        vec![p; d_out]
    } else {
        (0..d_out)
            .map(|r| compute_uniform_params(w.row(r), config.k_high))
            .collect::<Result<_>>()?
    };
    let mut stage1_codes = Vec::with_capacity(d_out * d_in);
    let mut w4 = Vec::with_capacity(d_out * d_in);
    for (r, p) in row_params.iter().enumerate() {
        for &v in w.row(r) {
            let code = quantize_value(v as f64, p);
            stage1_codes.push(code);
            w4.push(dequantize_value(code, p));
        }
    }
    let w4_mat = Matrix::from_vec(
        d_out,
        d_in,
        w4.iter().map(|&v| v as f64).collect(),
    );

    // calibration statistics
    let mut hessian = HessianState::new(d_in);
    hessian.accumulate(x)?;
    let hessian_sha256 = hessian.digest_hex();
    let hinv = hessian.invert(config.damping_fraction)?;

    // salience maps from the stage-1 weights
    let v = compute_v(&w4_mat, &hinv.diag)?;
    let row_bin: Vec<BinParams> = (0..d_out)
        .map(|r| {
            let row = &w4[r * d_in..(r + 1) * d_in];
            Ok(binarize_row(row, config.binarize_mode)?.1)
        })
        .collect::<Result<_>>()?;
    let bin_values: Vec<f32> = row_bin.iter().map(|b| b.alpha).collect();
    let b = compute_b(
        &w4_mat,
        x,
        |i, _j, val| {
            let alpha = bin_values[i] as f64;
            if val > 0.0 {
                alpha
            } else {
                -alpha
            }
        },
        config.range_mode,
    )?;
    let m = combine_pbar(&v, &b, config.lambda)?;
    let mask = select_salient(&m, config.salient_ratio);

    // emit code and sign planes from the stage-1 values
    let mut codes = Vec::with_capacity(mask.count_selected);
    let mut signs = Vec::with_capacity(d_out * d_in - mask.count_selected);
    let mut row_errors = config.compensation.then(|| Vec::with_capacity(d_out));
    let mut w_hat = vec![0.0f32; d_out * d_in];
    for r in 0..d_out {
        let p = &row_params[r];
        let bp = &row_bin[r];
        if config.compensation {
            let mut vals: Vec<f64> = w4_mat.row(r).to_vec();
            for q in 0..d_in {
                let idx = r * d_in + q;
                let emitted: f32 = if mask.mask[idx] {
                    let code = quantize_value(vals[q], p);
                    codes.push(code);
                    dequantize_value(code, p)
                } else {
                    let s = sign_code(vals[q]);
                    signs.push(s);
                    bp.value(s)
                };
                w_hat[idx] = emitted;
                compensate_remaining(&mut vals, q, emitted as f64, &hinv.matrix)?;
            }
            if let Some(errs) = row_errors.as_mut() {
                // ‖(w_orig − ŵ)·Xᵀ‖₂ for this row
                let mut diff = Matrix::zeros(1, d_in);
                for q in 0..d_in {
                    diff.data_mut()[q] = w.row(r)[q] as f64 - w_hat[r * d_in + q] as f64;
                }
                errs.push(diff.matmul_nt(x).frobenius_norm());
            }
        } else {
            for q in 0..d_in {
                let idx = r * d_in + q;
                w_hat[idx] = if mask.mask[idx] {
                    codes.push(stage1_codes[idx]);
                    dequantize_value(stage1_codes[idx], p)
                } else {
                    let s = sign_code(w4[idx] as f64);
                    signs.push(s);
                    bp.value(s)
                };
            }
        }
    }

    let packed = pack_mixed(
        name,
        d_out,
        d_in,
        mask.mask.clone(),
        codes,
        signs,
        row_params,
        row_bin,
        config.per_layer_params,
        ConfigEcho {
            ratio: config.salient_ratio as f32,
            lambda: config.lambda as f32,
            supervision: config.supervision,
        },
    )?;
    debug_assert_eq!(packed.dense()?, w_hat);

    let bits = packed.mean_bits();
    let w_hat_mat = Matrix::from_vec(d_out, d_in, w_hat.iter().map(|&v| v as f64).collect());
    let err = layer_output_error(&w.to_matrix(), &w_hat_mat, x)?;
    let (v_mean, v_max) = mean_and_max(&v);
    let (b_mean, b_max) = mean_and_max(&b);

    Ok(LayerOutcome {
        packed,
        report: LayerReport {
            name: name.to_string(),
            d_out,
            d_in,
            salient_count: mask.count_selected,
            mean_bits: bits,
            mse: err.mse,
            max_abs: err.max_abs,
            v_mean,
            v_max,
            b_mean,
            b_max,
            hessian_sha256,
            compensation_row_error_l2: row_errors,
        },
        maps: SalienceMaps {
            v,
            b,
            m,
            lambda_used: config.lambda,
        },
        mask,
    })
}

// ── whole-model runs ────────────────────────────────────────────────────────

/// Run report: one record per layer in model order plus the configuration
/// echo. Wall time is logged rather than serialized so identical runs
/// produce identical report files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantReport {
    /// Quality is reported as reconstruction MSE and activation-histogram
    /// KL divergence proxies, not task accuracy.
    pub note: String,
    pub config: QuantConfig,
    pub layers: Vec<LayerReport>,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

pub const REPORT_NOTE: &str =
    "quality metrics are reconstruction-MSE and activation-histogram KL proxies, not task accuracy";

/// A completed quantization run.
pub struct QuantRun {
    pub packed: PackedModel,
    pub report: QuantReport,
    pub salience: Vec<SalienceMaps>,
}

/// Quantize every layer of a model under the configured supervision
/// schedule. Dispatches through the strategy registry.
pub fn quantize_model(
    model: &ModelView<'_>,
    inputs: &Matrix,
    config: &QuantConfig,
) -> Result<QuantRun> {
    config.validate()?;
    let strategy = crate::strategies::supervision_for(config.supervision);
    let start = std::time::Instant::now();
    let mut run = strategy.run(model, inputs, config)?;
    run.report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    log::info!(
        "quantized {} layers in {:.1} ms ({})",
        run.packed.layers.len(),
        run.report.wall_time_ms,
        strategy.name()
    );
    Ok(run)
}

/// Export the V/B/M maps of each layer into a container for inspection.
pub fn salience_container(names: &[String], maps: &[SalienceMaps]) -> Result<TensorContainer> {
    let mut out = TensorContainer::new();
    for (name, m) in names.iter().zip(maps) {
        out.insert(Tensor::from_matrix(format!("{name}.V"), &m.v)?)?;
        out.insert(Tensor::from_matrix(format!("{name}.B"), &m.b)?)?;
        out.insert(Tensor::from_matrix(format!("{name}.M"), &m.m)?)?;
    }
    Ok(out)
}
