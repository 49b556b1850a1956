//! `tensorpress` — compress weight checkpoints into MPO core chains and
//! quantized forms, inspect and verify the results, profile per-layer
//! sensitivity, and run the healing demo.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical error. Every output file is written atomically and inputs
//! are never modified; repeated runs with identical arguments and inputs
//! produce byte-identical outputs. `NO_COLOR` disables help coloring; no
//! other environment variables are consulted.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tensorpress_core::checkpoint::{
    inspect_checkpoint, read_checkpoint, store_quantized, write_bytes_atomic, write_checkpoint,
    Checkpoint,
};
use tensorpress_core::manifest::ModelManifest;
use tensorpress_core::pipeline::{all_verified, compress_model, verify_compressed};
use tensorpress_core::plan::{glob_match, parse_plan};
use tensorpress_core::profiler::{curves_to_csv, profile};
use tensorpress_core::quant::{quantize_affine, Granularity};
use tensorpress_core::trainer::{heal_demo_csv, run_heal_demo, HealDemoConfig, ToyEvaluator};
use tensorpress_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tensorpress",
    version,
    about = "Tensor-network compression for weight checkpoints"
)]
struct Cli {
    /// Emit machine-parsable JSON (inspect output and error reports).
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a compression plan to a checkpoint and write the result plus
    /// an accounting report.
    Compress {
        /// Source checkpoint.
        #[arg(long)]
        input: PathBuf,
        /// Model manifest JSON describing the layers.
        #[arg(long)]
        manifest: PathBuf,
        /// Compression plan JSON.
        #[arg(long)]
        plan: PathBuf,
        /// Destination checkpoint.
        #[arg(long)]
        output: PathBuf,
        /// Destination for the per-layer report.
        #[arg(long)]
        report: PathBuf,
        /// Report file format.
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        report_format: ReportFormat,
    },
    /// Validate a checkpoint and summarize its tensors and metadata.
    Inspect {
        #[arg(long)]
        input: PathBuf,
    },
    /// Check a compressed checkpoint against the original: MPO layers must
    /// honor their truncation certificates, quantized layers their scale
    /// bounds, and kept tensors must match exactly.
    Verify {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
    },
    /// Sweep bond caps over chosen layers and score each working point
    /// with the bundled classifier-accuracy evaluator (the checkpoint must
    /// be a toy-model save).
    Profile {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Glob over manifest layer names (`*` and `?`).
        #[arg(long)]
        layers: String,
        /// Comma-separated bond caps; the saturating `full` point is always
        /// evaluated and may be listed explicitly.
        #[arg(long, value_parser = parse_chi_grid)]
        chi_grid: ChiGrid,
        /// Seed for the evaluation metric.
        #[arg(long)]
        seed: u64,
        /// Cores per tensorized layer.
        #[arg(long, default_value_t = 3, value_parser = positive_usize())]
        cores: usize,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the demo classifier, tensorize its square hidden layer, heal
    /// the cores, and write both phases' metrics.
    HealDemo {
        /// Master seed for the dataset, the init, and both training phases.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Bond cap for the compressed layer.
        #[arg(long, default_value_t = 4, value_parser = positive_usize())]
        chi: usize,
        /// Cores per tensorized layer.
        #[arg(long, default_value_t = 3, value_parser = positive_usize())]
        cores: usize,
        /// Healing epochs (cores-only retraining).
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        /// Destination CSV for the epoch curves.
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize every 2-D float tensor of a checkpoint; everything else
    /// copies through unchanged.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        /// Integer width.
        #[arg(long, value_parser = parse_bits)]
        bits: u8,
        /// Scale granularity.
        #[arg(long, value_enum)]
        granularity: GranularityArg,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    #[value(name = "per_row")]
    PerRow,
    #[value(name = "per_tensor")]
    PerTensor,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Granularity {
        match g {
            GranularityArg::PerRow => Granularity::PerRow,
            GranularityArg::PerTensor => Granularity::PerTensor,
        }
    }
}

#[derive(Clone, Debug)]
struct ChiGrid(Vec<usize>);

fn parse_chi_grid(s: &str) -> std::result::Result<ChiGrid, String> {
    let mut grid = Vec::new();
    for tok in s.split(',') {
        let tok = tok.trim();
        match tok {
            "" => return Err("empty entry in the chi grid".into()),
            "full" => continue, // always evaluated
            _ => {
                let v: usize = tok
                    .parse()
                    .map_err(|_| format!("{tok:?} is neither a bond dimension nor `full`"))?;
                if v == 0 {
                    return Err("bond dimensions start at 1".into());
                }
                if grid.contains(&v) {
                    return Err(format!("duplicate bond dimension {v}"));
                }
                grid.push(v);
            }
        }
    }
    if grid.is_empty() {
        return Err("the chi grid needs at least one numeric bond dimension".into());
    }
    Ok(ChiGrid(grid))
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        _ => Err("supported widths are 4 and 8".into()),
    }
}

fn positive_usize() -> clap::builder::RangedU64ValueParser<usize> {
    clap::builder::RangedU64ValueParser::new().range(1..)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_numerical() { 3u8 } else { 2u8 };
            if cli.json {
                let obj = serde_json::json!({
                    "error": { "exit_code": code, "message": e.to_string() }
                });
                eprintln!("{obj}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Compress {
            input,
            manifest,
            plan,
            output,
            report,
            report_format,
        } => cmd_compress(input, manifest, plan, output, report, *report_format),
        Command::Inspect { input } => cmd_inspect(input, cli.json),
        Command::Verify {
            original,
            compressed,
        } => cmd_verify(original, compressed),
        Command::Profile {
            input,
            manifest,
            layers,
            chi_grid,
            seed,
            cores,
            out,
        } => cmd_profile(input, manifest, layers, chi_grid, *seed, *cores, out),
        Command::HealDemo {
            seed,
            chi,
            cores,
            epochs,
            out,
        } => cmd_heal_demo(*seed, *chi, *cores, *epochs, out),
        Command::Quantize {
            input,
            bits,
            granularity,
            output,
        } => cmd_quantize(input, *bits, (*granularity).into(), output),
    }
}

fn cmd_compress(
    input: &Path,
    manifest_path: &Path,
    plan_path: &Path,
    output: &Path,
    report_path: &Path,
    format: ReportFormat,
) -> Result<()> {
    let ckpt = read_checkpoint(input)?;
    let manifest = ModelManifest::load(manifest_path)?;
    let plan_text = std::fs::read_to_string(plan_path)?;
    let plan = parse_plan(&plan_text)?;
    let (compressed, report) = compress_model(&ckpt, &manifest, &plan)?;
    write_checkpoint(&compressed, output)?;
    let rendered = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv(),
    };
    write_bytes_atomic(report_path, rendered.as_bytes())?;
    let t = &report.totals;
    println!(
        "compressed {} layers: params {} -> {} ({:.2}% smaller), bytes {} -> {} ({:.2}% smaller)",
        report.rows.len(),
        t.params_before,
        t.params_after,
        t.parameter_reduction_pct,
        t.bytes_before,
        t.bytes_after,
        t.byte_reduction_pct
    );
    Ok(())
}

fn cmd_inspect(input: &Path, json: bool) -> Result<()> {
    let report = inspect_checkpoint(input)?;
    if json {
        let text = serde_json::to_string_pretty(&report).expect("inspect reports serialize");
        println!("{text}");
        return Ok(());
    }
    println!(
        "{} tensors, {} bytes total (header {}, payload {})",
        report.tensors.len(),
        report.total_bytes,
        report.header_bytes,
        report.payload_bytes
    );
    let name_w = report
        .tensors
        .iter()
        .map(|t| t.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    println!("{:name_w$}  {:8}  {:6}  shape", "name", "dtype", "bytes");
    for t in &report.tensors {
        println!(
            "{:name_w$}  {:8}  {:6}  {:?}",
            t.name, t.dtype, t.payload_bytes, t.shape
        );
    }
    if !report.metadata.is_empty() {
        println!("metadata:");
        for (k, v) in &report.metadata {
            println!("  {k} = {v}");
        }
    }
    Ok(())
}

fn cmd_verify(original: &Path, compressed: &Path) -> Result<()> {
    let orig = read_checkpoint(original)?;
    let comp = read_checkpoint(compressed)?;
    let rows = verify_compressed(&orig, &comp)?;
    for r in &rows {
        println!(
            "{}  {:9}  rel_error {:.6e}  bound {:.6e}  {}",
            if r.ok { "ok  " } else { "FAIL" },
            r.form,
            r.rel_error,
            r.bound,
            r.name
        );
    }
    let failures = rows.iter().filter(|r| !r.ok).count();
    if all_verified(&rows) {
        println!("verified {} tensors: all within bounds", rows.len());
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "verification failed for {failures} of {} tensors",
            rows.len()
        )))
    }
}

fn cmd_profile(
    input: &Path,
    manifest_path: &Path,
    layers: &str,
    chi_grid: &ChiGrid,
    seed: u64,
    cores: usize,
    out: &Path,
) -> Result<()> {
    let ckpt = read_checkpoint(input)?;
    let manifest = ModelManifest::load(manifest_path)?;
    let targets: Vec<String> = manifest
        .layers
        .iter()
        .map(|l| l.name.clone())
        .filter(|name| glob_match(layers, name))
        .collect();
    if targets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no manifest layer matches {layers:?}"
        )));
    }
    let evaluator = ToyEvaluator::default();
    let curves = profile(
        &ckpt, &manifest, &targets, &chi_grid.0, cores, &evaluator, seed,
    )?;
    write_bytes_atomic(out, curves_to_csv(&curves).as_bytes())?;
    for curve in &curves {
        if let Some(err) = &curve.error {
            eprintln!("warning: {} truncated: {err}", curve.layer_name);
        }
    }
    println!(
        "profiled {} layers over {} bond caps (baseline metric {})",
        curves.len(),
        chi_grid.0.len() + 1,
        curves
            .first()
            .map(|c| c.baseline_metric.to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_heal_demo(seed: u64, chi: usize, cores: usize, epochs: usize, out: &Path) -> Result<()> {
    let outcome = run_heal_demo(&HealDemoConfig {
        seed,
        chi,
        k: cores,
        heal_epochs: epochs,
        ..HealDemoConfig::default()
    })?;
    if outcome.baseline_history.diverged || outcome.healing_history.diverged {
        return Err(Error::Numerical(
            "training diverged; adjust the seed or learning rate".into(),
        ));
    }
    write_bytes_atomic(out, heal_demo_csv(&outcome).as_bytes())?;
    println!(
        "baseline_acc={:.4} compressed_acc={:.4} healed_acc={:.4} param_reduction_pct={:.2}",
        outcome.baseline_accuracy,
        outcome.compressed_accuracy,
        outcome.healed_accuracy,
        outcome.param_reduction_pct
    );
    Ok(())
}

fn cmd_quantize(input: &Path, bits: u8, granularity: Granularity, output: &Path) -> Result<()> {
    let ckpt = read_checkpoint(input)?;
    let mut out = Checkpoint::new();
    for (key, value) in ckpt.metadata_entries() {
        out.set_metadata(key, value)?;
    }
    let mut quantized = 0usize;
    for (name, tensor) in ckpt.tensors() {
        if tensor.rank() == 2 && tensor.dtype().is_float() {
            let q = quantize_affine(tensor, bits, granularity)?;
            store_quantized(&mut out, name, &q)?;
            quantized += 1;
        } else {
            out.insert(name, tensor.clone())?;
        }
    }
    write_checkpoint(&out, output)?;
    println!(
        "quantized {quantized} of {} tensors to int{bits} ({})",
        ckpt.len(),
        granularity.name()
    );
    Ok(())
}
