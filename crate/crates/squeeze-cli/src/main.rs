//! `squeeze` — batch front end for the mixed-precision quantization engine.
//!
//! Verbosity is controlled by `SQUEEZE_LOG={error,info,debug}`. Exit codes:
//! 0 success, 1 runtime failure (single-line diagnostic on stderr), 2 usage
//! error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use squeeze::config::{QuantConfig, RangeMode, SupervisionMode};
use squeeze::eval::{
    activation_kl, compare_supervision, range_stats, range_stats_csv, ChannelStats,
    HistogramSpec, DEFAULT_OUTLIER_IQR_FACTOR,
};
use squeeze::pipeline::{
    forward_pass, model_nonlinearities, model_weights, packed_weights, quantize_model,
    salience_container, ModelView, REPORT_NOTE,
};
use squeeze::quant::BinarizeMode;
use squeeze::strategies::{supervision_by_name, supervision_strategies, sweep_by_name};
use squeeze::synth::{synth_stack, SynthSpec};
use squeeze::tensor::{load_container, pick_calibration, save_container, ModelSpec};
use squeeze::{Matrix, PackedModel, TensorContainer};

#[derive(Parser)]
#[command(
    name = "squeeze",
    about = "Mixed-precision weight quantization: staged k-bit + salience-guided partial binarization",
    version
)]
struct Cli {
    /// Seed for every random draw (synthetic generation).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; 0 picks the hardware default. Layer-level
    /// parallelism only applies under fias supervision.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

fn supervision_names() -> PossibleValuesParser {
    PossibleValuesParser::new(
        supervision_strategies()
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>(),
    )
}

/// Flags mirroring `QuantConfig` one-to-one.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Bit width of the high-precision stage (2..=8).
    #[arg(long = "high-bits", default_value_t = 4)]
    high_bits: u8,

    /// Fraction of weights kept at high precision.
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,

    /// Weight of the activation-range salience term.
    #[arg(long, default_value_t = 3e-4)]
    lambda: f64,

    /// Supervision schedule.
    #[arg(long, default_value = "fias", value_parser = supervision_names())]
    supervision: String,

    /// Sign scaling: bare (±1) or scaled (±mean|row|).
    #[arg(long, default_value = "scaled", value_parser = ["bare", "scaled"])]
    binarize: String,

    /// Propagate per-column quantization error through the inverse Hessian.
    #[arg(long, default_value_t = false)]
    compensate: bool,

    /// Hessian damping as a fraction of mean(diag(H)).
    #[arg(long, default_value_t = 0.01)]
    damping: f64,

    /// Channel range measurement: raw (max−min) or absolute (max|·|−min|·|).
    #[arg(long = "range-mode", default_value = "raw", value_parser = ["raw", "absolute"])]
    range_mode: String,

    /// One scale/zero-point per layer instead of per output row.
    #[arg(long = "per-layer-params", default_value_t = false)]
    per_layer_params: bool,
}

impl ConfigArgs {
    fn to_config(&self) -> Result<QuantConfig> {
        let supervision = supervision_by_name(&self.supervision)
            .context("unknown supervision strategy")?
            .mode();
        let config = QuantConfig {
            k_high: self.high_bits,
            salient_ratio: self.ratio,
            lambda: self.lambda,
            supervision,
            binarize_mode: match self.binarize.as_str() {
                "bare" => BinarizeMode::BareSign,
                _ => BinarizeMode::ScaledSign,
            },
            compensation: self.compensate,
            damping_fraction: self.damping,
            range_mode: match self.range_mode.as_str() {
                "absolute" => RangeMode::Absolute,
                _ => RangeMode::Raw,
            },
            per_layer_params: self.per_layer_params,
        };
        config.validate()?;
        Ok(config)
    }
}

/// The model + calibration inputs every quantizing command needs.
#[derive(Args, Debug)]
struct ModelArgs {
    /// S10T container with the model weights.
    #[arg(long)]
    model: PathBuf,

    /// Model spec JSON ({"layers":[{"weight":...,"nonlinearity":...}]}).
    #[arg(long)]
    spec: PathBuf,

    /// S10T container with calibration activations (single tensor, or one
    /// named "calib").
    #[arg(long)]
    calib: PathBuf,
}

struct LoadedModel {
    container: TensorContainer,
    spec: ModelSpec,
    inputs: Matrix,
}

impl ModelArgs {
    fn load(&self) -> Result<LoadedModel> {
        let container = load_container(&self.model)?;
        let spec = ModelSpec::load(&self.spec)?;
        let calib = load_container(&self.calib)?;
        let inputs = pick_calibration(&calib)?.to_matrix();
        Ok(LoadedModel {
            container,
            spec,
            inputs,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a model into a packed S10P file plus a JSON report.
    Quantize {
        #[command(flatten)]
        model: ModelArgs,

        /// Output packed model path.
        #[arg(long)]
        out: PathBuf,

        /// Report JSON path (default: report.json next to --out).
        #[arg(long)]
        report: Option<PathBuf>,

        /// Also export per-layer V/B/M salience maps to this S10T file.
        #[arg(long = "salience-out")]
        salience_out: Option<PathBuf>,

        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Expand a packed model back to a dense S10T container.
    Dequantize {
        /// Packed S10P input.
        #[arg(long = "in")]
        input: PathBuf,

        /// Dense S10T output.
        #[arg(long)]
        out: PathBuf,
    },

    /// Summarize an S10T container or S10P packed model.
    Inspect {
        path: PathBuf,

        #[arg(long, default_value = "text", value_parser = ["text", "json"])]
        format: String,
    },

    /// Sweep the high-precision bit width (2..=8 by default).
    SweepBits {
        #[command(flatten)]
        model: ModelArgs,

        /// Comma-separated bit widths.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<f64>>,

        #[command(flatten)]
        common: SweepCommon,

        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Sweep the salient-weight fraction.
    SweepRatio {
        #[command(flatten)]
        model: ModelArgs,

        /// Comma-separated ratios in [0, 1].
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,

        #[command(flatten)]
        common: SweepCommon,

        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Sweep the activation-range weight lambda.
    SweepLambda {
        #[command(flatten)]
        model: ModelArgs,

        /// Comma-separated lambda values (>= 0).
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,

        #[command(flatten)]
        common: SweepCommon,

        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Quantize under both supervision schedules and report the drift.
    CompareSupervision {
        #[command(flatten)]
        model: ModelArgs,

        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,

        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Activation-histogram KL and per-channel range stats for one layer of
    /// a packed model against full precision.
    KlReport {
        #[command(flatten)]
        model: ModelArgs,

        /// Packed S10P model to evaluate.
        #[arg(long)]
        packed: PathBuf,

        /// Layer index for the comparison (default: last layer).
        #[arg(long)]
        layer: Option<usize>,

        /// Report JSON path; channel CSVs land next to it.
        #[arg(long)]
        out: PathBuf,

        /// Histogram bin count.
        #[arg(long, default_value_t = 256)]
        bins: usize,

        /// Mass added to every histogram bin before normalization.
        #[arg(long, default_value_t = 1e-10)]
        smoothing: f64,

        /// Fixed histogram minimum (default: union range of both samples).
        #[arg(long = "hist-min")]
        hist_min: Option<f64>,

        /// Fixed histogram maximum.
        #[arg(long = "hist-max")]
        hist_max: Option<f64>,
    },

    /// Generate a seeded synthetic model stack and calibration inputs.
    Gen {
        /// Number of square linear layers.
        #[arg(long, default_value_t = 12)]
        layers: usize,

        /// Layer width.
        #[arg(long, default_value_t = 16)]
        dim: usize,

        /// Calibration rows.
        #[arg(long, default_value_t = 32)]
        tokens: usize,

        /// Insert relu between layers.
        #[arg(long, default_value_t = false)]
        relu: bool,

        #[arg(long = "out-model")]
        out_model: PathBuf,

        #[arg(long = "out-spec")]
        out_spec: PathBuf,

        #[arg(long = "out-calib")]
        out_calib: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SweepCommon {
    /// Sweep result JSON path; the plot CSV lands at the same path with a
    /// .csv extension.
    #[arg(long)]
    out: PathBuf,

    /// Layer whose output feeds the KL comparison (default: last layer).
    #[arg(long = "kl-layer")]
    kl_layer: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SQUEEZE_LOG", "error"))
        .format_timestamp(None)
        .init();
    if cli.threads > 0 {
        // may already be set when called twice in-process; that's fine
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text_atomic(path, &text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Quantize {
            model,
            out,
            report,
            salience_out,
            config,
        } => {
            let config = config.to_config()?;
            let loaded = model.load()?;
            let view = ModelView::resolve(&loaded.spec, &loaded.container)?;
            let run = quantize_model(&view, &loaded.inputs, &config)?;
            run.packed.save(&out)?;
            let report_path = report
                .unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).join("report.json"));
            write_json_atomic(&report_path, &run.report)?;
            if let Some(path) = salience_out {
                let names: Vec<String> =
                    view.layers.iter().map(|l| l.name.to_string()).collect();
                save_container(&salience_container(&names, &run.salience)?, path)?;
            }
            log::info!(
                "wrote {} and {} ({:.1} ms)",
                out.display(),
                report_path.display(),
                run.report.wall_time_ms
            );
            Ok(())
        }

        Command::Dequantize { input, out } => {
            let packed = PackedModel::load(&input)?;
            let mut container = TensorContainer::new();
            for layer in &packed.layers {
                container.insert(layer.dense_tensor()?)?;
            }
            save_container(&container, &out)?;
            Ok(())
        }

        Command::Inspect { path, format } => inspect(&path, &format),

        Command::SweepBits {
            model,
            bits,
            common,
            config,
        } => run_sweep("bits", model, bits, common, config),

        Command::SweepRatio {
            model,
            ratios,
            common,
            config,
        } => run_sweep("ratio", model, ratios, common, config),

        Command::SweepLambda {
            model,
            lambdas,
            common,
            config,
        } => run_sweep("lambda", model, lambdas, common, config),

        Command::CompareSupervision { model, out, config } => {
            let config = config.to_config()?;
            let loaded = model.load()?;
            let view = ModelView::resolve(&loaded.spec, &loaded.container)?;
            let comparison = compare_supervision(&view, &loaded.inputs, &config)?;
            write_json_atomic(&out, &comparison)?;
            println!(
                "final MSE vs full precision: fias {:.6e}, general {:.6e}",
                comparison.final_mse_fias, comparison.final_mse_general
            );
            Ok(())
        }

        Command::KlReport {
            model,
            packed,
            layer,
            out,
            bins,
            smoothing,
            hist_min,
            hist_max,
        } => kl_report(
            model, packed, layer, out, bins, smoothing, hist_min, hist_max,
        ),

        Command::Gen {
            layers,
            dim,
            tokens,
            relu,
            out_model,
            out_spec,
            out_calib,
        } => {
            let spec = SynthSpec {
                layers,
                dim,
                tokens,
                relu,
            };
            let (container, model_spec, calib) = synth_stack(cli.seed, &spec)?;
            save_container(&container, &out_model)?;
            model_spec.save(&out_spec)?;
            let mut calib_container = TensorContainer::new();
            calib_container.insert(calib)?;
            save_container(&calib_container, &out_calib)?;
            println!(
                "generated {layers} layers of {dim}x{dim} with {tokens} calibration rows (seed {})",
                cli.seed
            );
            Ok(())
        }
    }
}

fn run_sweep(
    axis: &str,
    model: ModelArgs,
    grid: Option<Vec<f64>>,
    common: SweepCommon,
    config: ConfigArgs,
) -> Result<()> {
    let strategy = sweep_by_name(axis).context("unknown sweep axis")?;
    let config = config.to_config()?;
    let loaded = model.load()?;
    let view = ModelView::resolve(&loaded.spec, &loaded.container)?;
    let grid = grid.unwrap_or_else(|| strategy.default_grid());
    let kl_layer = common.kl_layer.unwrap_or(view.len() - 1);
    let result = strategy.run(&view, &loaded.inputs, &config, &grid, kl_layer)?;
    write_json_atomic(&common.out, &result)?;
    write_text_atomic(&common.out.with_extension("csv"), &result.to_csv())?;
    println!(
        "{} settings swept; smallest D_KL at {} = {}",
        result.points.len(),
        strategy.name(),
        result.best_d_kl_setting
    );
    Ok(())
}

// ── inspect ─────────────────────────────────────────────────────────────────

#[derive(Serialize)]
#[serde(tag = "format", rename_all = "lowercase")]
enum InspectSummary {
    S10T {
        tensors: Vec<TensorSummary>,
    },
    S10P {
        layers: Vec<LayerSummary>,
    },
}

#[derive(Serialize)]
struct TensorSummary {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize)]
struct LayerSummary {
    name: String,
    d_out: usize,
    d_in: usize,
    k: u8,
    ratio_echo: f32,
    lambda_echo: f32,
    supervision: SupervisionMode,
    scaled_sign: bool,
    salient_count: usize,
    mask_ratio: f64,
    payload_bits: f64,
    total_bits: f64,
}

fn inspect(path: &Path, format: &str) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let summary = match bytes.get(0..4) {
        Some(m) if m == squeeze::tensor::S10T_MAGIC => {
            let container = TensorContainer::from_bytes(&bytes)?;
            InspectSummary::S10T {
                tensors: container
                    .iter()
                    .map(|t| TensorSummary {
                        name: t.name().to_string(),
                        shape: t.shape(),
                    })
                    .collect(),
            }
        }
        Some(m) if m == squeeze::packed::S10P_MAGIC => {
            let packed = PackedModel::from_bytes(&bytes)?;
            InspectSummary::S10P {
                layers: packed
                    .layers
                    .iter()
                    .map(|l| {
                        let bits = l.mean_bits();
                        LayerSummary {
                            name: l.name.clone(),
                            d_out: l.d_out,
                            d_in: l.d_in,
                            k: l.row_params[0].k,
                            ratio_echo: l.echo.ratio,
                            lambda_echo: l.echo.lambda,
                            supervision: l.echo.supervision,
                            scaled_sign: l.row_bin[0].mode == BinarizeMode::ScaledSign,
                            salient_count: l.salient_count(),
                            mask_ratio: l.salient_count() as f64 / (l.d_out * l.d_in) as f64,
                            payload_bits: bits.payload_bits,
                            total_bits: bits.total_bits,
                        }
                    })
                    .collect(),
            }
        }
        _ => bail!(squeeze::Error::UnknownFormat(format!(
            "{} starts with neither S10T nor S10P magic",
            path.display()
        ))),
    };

    if format == "json" {
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    match &summary {
        InspectSummary::S10T { tensors } => {
            println!("S10T container: {} tensors", tensors.len());
            for t in tensors {
                println!("  {}  {}x{}", t.name, t.shape[0], t.shape[1]);
            }
        }
        InspectSummary::S10P { layers } => {
            println!("S10P model: {} layers", layers.len());
            for l in layers {
                println!(
                    "  {}  {}x{}  k={}  mask {}/{} ({:.2}%)  payload {:.2} bits  total {:.2} bits  {}  {}  lambda={:.1e}",
                    l.name,
                    l.d_out,
                    l.d_in,
                    l.k,
                    l.salient_count,
                    l.d_out * l.d_in,
                    100.0 * l.mask_ratio,
                    l.payload_bits,
                    l.total_bits,
                    if l.scaled_sign { "scaled_sign" } else { "bare_sign" },
                    match l.supervision {
                        SupervisionMode::Fias => "fias",
                        SupervisionMode::General => "general",
                    },
                    l.lambda_echo,
                );
            }
        }
    }
    Ok(())
}

// ── kl-report ───────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct KlReportOut {
    note: String,
    layer: usize,
    layer_name: String,
    d_kl: f64,
    histogram: HistogramSpec,
    output_drift_max_abs: f64,
    fp_channels: Vec<ChannelStats>,
    quant_channels: Vec<ChannelStats>,
}

#[allow(clippy::too_many_arguments)]
fn kl_report(
    model: ModelArgs,
    packed_path: PathBuf,
    layer: Option<usize>,
    out: PathBuf,
    bins: usize,
    smoothing: f64,
    hist_min: Option<f64>,
    hist_max: Option<f64>,
) -> Result<()> {
    let loaded = model.load()?;
    let view = ModelView::resolve(&loaded.spec, &loaded.container)?;
    let packed = PackedModel::load(&packed_path)?;
    let layer = layer.unwrap_or(view.len() - 1);
    if layer >= view.len() {
        bail!("layer {layer} out of range for a {}-layer model", view.len());
    }
    let spec = HistogramSpec {
        bin_count: bins,
        range: match (hist_min, hist_max) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => bail!("--hist-min and --hist-max must be given together"),
        },
        smoothing,
    };

    let nls = model_nonlinearities(&view);
    let fp = forward_pass(&model_weights(&view), &nls, &loaded.inputs)?;
    let qt = forward_pass(&packed_weights(&packed)?, &nls, &loaded.inputs)?;
    let y_fp = &fp.outputs[layer];
    let y_q = &qt.outputs[layer];
    let d_kl = activation_kl(y_fp.data(), y_q.data(), &spec)?;

    let fp_channels = range_stats(y_fp, DEFAULT_OUTLIER_IQR_FACTOR);
    let quant_channels = range_stats(y_q, DEFAULT_OUTLIER_IQR_FACTOR);
    let report = KlReportOut {
        note: REPORT_NOTE.to_string(),
        layer,
        layer_name: view.layers[layer].name.to_string(),
        d_kl,
        histogram: spec,
        output_drift_max_abs: y_fp.max_abs_diff(y_q),
        fp_channels,
        quant_channels,
    };
    write_json_atomic(&out, &report)?;
    write_text_atomic(
        &out.with_extension("fp.csv"),
        &range_stats_csv(&report.fp_channels),
    )?;
    write_text_atomic(
        &out.with_extension("quant.csv"),
        &range_stats_csv(&report.quant_channels),
    )?;
    println!("layer {layer} D_KL = {d_kl:.6e}");
    Ok(())
}
