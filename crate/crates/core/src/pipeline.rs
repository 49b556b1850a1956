//! Applying a compression plan to a whole checkpoint, and verifying the
//! result against the original.
//!
//! [`compress_model`] walks the manifest's layers, resolves each one's
//! disposition from the plan, and transforms the layers independently (in
//! parallel when the `parallel` feature is on). Tensors the manifest does
//! not claim — biases, norms, anything else — pass through verbatim, as does
//! all metadata. The output is deterministic and schedule-independent:
//! compressing the layers in any order produces byte-identical files.
//!
//! [`verify_compressed`] is the independent back-check: it rediscovers every
//! transformed layer from the compressed container alone, reconstructs it,
//! and compares against the original, enforcing each form's error bound.

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::manifest::ModelManifest;
use crate::mpo::{self, estimate_tensorized_params, IndexScheme, MpoLayer};
use crate::parallel::par_map;
use crate::plan::{CompressionPlan, Disposition};
use crate::quant::{self, QuantizedTensor};
use crate::report::{CompressionReport, ReportRow};
use crate::tensor::{frobenius_norm, DenseTensor, Dtype};

/// Machine epsilon of the storage dtype, used to pad error bounds for the
/// rounding introduced by storing factor cores below f64.
fn storage_eps(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F64 => f64::EPSILON,
        Dtype::F32 => f32::EPSILON as f64,
        Dtype::F16 => 9.765625e-4, // 2^-10
        Dtype::I8 | Dtype::I4Packed => 0.0,
    }
}

fn bond_dims_label(dims: &[usize]) -> String {
    if dims.is_empty() {
        "-".into()
    } else {
        dims.iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn rel_error(original: &DenseTensor, approx: &DenseTensor) -> Result<f64> {
    let a = original.to_f64_vec();
    let b = approx.to_f64_vec();
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare {} elements with {}",
            a.len(),
            b.len()
        )));
    }
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        let d = x - y;
        diff += d * d;
        norm += x * x;
    }
    if norm == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((diff / norm).sqrt())
}

fn tensor_payload_bytes(t: &DenseTensor) -> usize {
    t.dtype().payload_bytes(t.len())
}

enum LayerOutcome {
    Keep,
    Mpo(MpoLayer),
    Quant(QuantizedTensor),
}

fn transform_layer(
    name: &str,
    w: &DenseTensor,
    disposition: &Disposition,
) -> Result<(LayerOutcome, ReportRow)> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let params_before = rows * cols;
    let bytes_before = tensor_payload_bytes(w);
    let base_row = ReportRow {
        name: name.to_string(),
        action: "keep".into(),
        params_before,
        params_after: params_before,
        bytes_before,
        bytes_after: bytes_before,
        rel_error: 0.0,
        bond_dims: "-".into(),
        note: String::new(),
    };
    match disposition {
        Disposition::Keep => Ok((LayerOutcome::Keep, base_row)),
        Disposition::Quantize { bits, granularity } => {
            let q = quant::quantize_affine(w, *bits, *granularity)
                .map_err(|e| e.with_layer_context(name))?;
            let deq = quant::dequantize(&q).map_err(|e| e.with_layer_context(name))?;
            let err = rel_error(w, &deq.cast(Dtype::F64)?)?;
            let bytes_after =
                tensor_payload_bytes(q.qdata()) + std::mem::size_of_val(q.scales());
            let row = ReportRow {
                action: "quantize".into(),
                params_after: q.param_count(),
                bytes_after,
                rel_error: err,
                ..base_row
            };
            Ok((LayerOutcome::Quant(q), row))
        }
        Disposition::Tensorize {
            k,
            chi,
            store_dtype,
            scheme,
        } => {
            let scheme = match scheme {
                Some(s) => {
                    let s = IndexScheme::new(s.row_factors.clone(), s.col_factors.clone())
                        .map_err(|e| e.with_layer_context(name))?;
                    if s.rows() != rows || s.cols() != cols {
                        return Err(Error::Plan(format!(
                            "layer {name:?}: scheme encodes {} x {} but tensor is {} x {}",
                            s.rows(),
                            s.cols(),
                            rows,
                            cols
                        )));
                    }
                    s
                }
                None => IndexScheme::auto(rows, cols, *k).map_err(|e| e.with_layer_context(name))?,
            };
            // Tensorizing must never inflate the layer: when the core chain
            // at this chi would hold at least as many scalars as the dense
            // matrix (prime dims are the usual culprit), keep it instead.
            let estimated = estimate_tensorized_params(&scheme, *chi);
            if estimated >= params_before {
                let row = ReportRow {
                    note: format!(
                        "kept: tensorize at chi={chi} would store {estimated} params >= {params_before}"
                    ),
                    ..base_row
                };
                return Ok((LayerOutcome::Keep, row));
            }
            let layer = mpo::decompose(w, &scheme, *chi, 0.0)
                .and_then(|l| l.cast(*store_dtype))
                .map_err(|e| e.with_layer_context(name))?;
            let recon = mpo::reconstruct(&layer).map_err(|e| e.with_layer_context(name))?;
            let err = rel_error(w, &recon)?;
            let bytes_after: usize = layer
                .cores()
                .iter()
                .map(|c| tensor_payload_bytes(c.tensor()))
                .sum();
            let row = ReportRow {
                action: "tensorize".into(),
                params_after: layer.param_count(),
                bytes_after,
                rel_error: err,
                bond_dims: bond_dims_label(&layer.bond_dims()),
                ..base_row
            };
            Ok((LayerOutcome::Mpo(layer), row))
        }
    }
}

impl Error {
    /// Prefix an error with the layer it occurred in, preserving the variant
    /// so exit-code mapping still works.
    fn with_layer_context(self, layer: &str) -> Error {
        match self {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("layer {layer:?}: {m}")),
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("layer {layer:?}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("layer {layer:?}: {m}")),
            Error::Plan(m) => Error::Plan(format!("layer {layer:?}: {m}")),
            other => other,
        }
    }
}

/// Apply `plan` to every manifest layer of `ckpt`, producing the compressed
/// checkpoint and its accounting report (rows in manifest order).
///
/// Every manifest layer must be present as a plain dense tensor; compressing
/// an already-compressed checkpoint is not supported.
pub fn compress_model(
    ckpt: &Checkpoint,
    manifest: &ModelManifest,
    plan: &CompressionPlan,
) -> Result<(Checkpoint, CompressionReport)> {
    manifest.validate()?;
    plan.validate()?;

    let mut jobs: Vec<(String, &DenseTensor, Disposition)> = Vec::new();
    for layer in &manifest.layers {
        let Some(w) = ckpt.tensor(&layer.name) else {
            return Err(Error::Manifest(format!(
                "layer {:?} has no plain weight tensor in the checkpoint",
                layer.name
            )));
        };
        if w.shape() != [layer.output_dim, layer.input_dim] {
            return Err(Error::Manifest(format!(
                "layer {:?}: manifest says {} x {} but tensor is {:?}",
                layer.name,
                layer.output_dim,
                layer.input_dim,
                w.shape()
            )));
        }
        jobs.push((
            layer.name.clone(),
            w,
            plan.disposition(manifest, &layer.name)?,
        ));
    }

    let results = par_map(&jobs, |(name, w, disposition)| {
        transform_layer(name, w, disposition)
    });
    // Surface the first failure in manifest order so errors are independent
    // of the parallel schedule.
    let mut outcomes = Vec::with_capacity(results.len());
    for result in results {
        outcomes.push(result?);
    }

    let layer_names: std::collections::BTreeSet<&str> =
        manifest.layers.iter().map(|l| l.name.as_str()).collect();
    let mut out = Checkpoint::new();
    for (key, value) in ckpt.metadata_entries() {
        out.set_metadata(key, value)?;
    }
    for (name, tensor) in ckpt.tensors() {
        if !layer_names.contains(name) {
            out.insert(name, tensor.clone())?;
        }
    }
    let mut rows = Vec::with_capacity(outcomes.len());
    for ((name, w, _), (outcome, row)) in jobs.iter().zip(outcomes) {
        match outcome {
            LayerOutcome::Keep => out.insert(name, (*w).clone())?,
            LayerOutcome::Mpo(layer) => checkpoint::store_mpo_layer(&mut out, name, &layer)?,
            LayerOutcome::Quant(q) => checkpoint::store_quantized(&mut out, name, &q)?,
        }
        rows.push(row);
    }
    Ok((out, CompressionReport::from_rows(rows)))
}

/// One layer's verification outcome.
#[derive(Clone, Debug, serde::Serialize)]
pub struct VerifyRow {
    pub name: String,
    /// `mpo`, `quantized`, or `kept`.
    pub form: String,
    pub rel_error: f64,
    /// The certified relative-error bound this form must satisfy.
    pub bound: f64,
    pub ok: bool,
}

/// True when every row satisfies its bound.
pub fn all_verified(rows: &[VerifyRow]) -> bool {
    rows.iter().all(|r| r.ok)
}

/// Reconstruct every transformed layer of `compressed` and measure it
/// against `original`.
///
/// Transformed layers are discovered from the compressed container's own
/// records, so no manifest or plan is needed. MPO layers must honor their
/// recorded truncation-error certificate (converted to a relative bound,
/// padded by storage-dtype rounding); quantized layers must sit within the
/// half-step bound their scales imply; kept tensors must match exactly.
pub fn verify_compressed(original: &Checkpoint, compressed: &Checkpoint) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    // Tensor names in `compressed` that belong to a transformed layer's
    // storage (cores, quantized payloads) rather than standing for
    // themselves.
    let mut accounted = std::collections::BTreeSet::new();
    let mut transformed = std::collections::BTreeSet::new();

    for (key, _) in compressed.metadata_entries() {
        if let Some(layer_name) = key.strip_suffix(".mpo") {
            let w = original.tensor(layer_name).ok_or_else(|| {
                Error::MissingTensor(format!(
                    "{layer_name:?} is tensorized in the compressed checkpoint but absent from the original"
                ))
            })?;
            let layer = checkpoint::load_mpo_layer(compressed, layer_name)?;
            for i in 0..layer.cores().len() {
                accounted.insert(format!("{layer_name}.mpo.core{i}"));
            }
            transformed.insert(layer_name.to_string());
            let recon = mpo::reconstruct(&layer)?;
            let err = rel_error(w, &recon)?;
            let norm = frobenius_norm(w)?;
            let k = layer.cores().len() as f64;
            let bound = if norm == 0.0 {
                0.0
            } else {
                layer.truncation_error() / norm + 4.0 * k * storage_eps(layer.dtype()) + 1e-12
            };
            rows.push(VerifyRow {
                name: layer_name.to_string(),
                form: "mpo".into(),
                rel_error: err,
                bound,
                ok: err <= bound,
            });
        } else if let Some(layer_name) = key.strip_suffix(".q") {
            let w = original.tensor(layer_name).ok_or_else(|| {
                Error::MissingTensor(format!(
                    "{layer_name:?} is quantized in the compressed checkpoint but absent from the original"
                ))
            })?;
            let q = checkpoint::load_quantized(compressed, layer_name)?;
            accounted.insert(format!("{layer_name}.q.data"));
            accounted.insert(format!("{layer_name}.q.scales"));
            transformed.insert(layer_name.to_string());
            let deq = quant::dequantize(&q)?;
            let err = rel_error(w, &deq.cast(Dtype::F64)?)?;
            let norm = frobenius_norm(w)?;
            // Elementwise error is at most half a quantization step, so the
            // Frobenius error is at most sqrt(sum over rows of n*(s/2)^2).
            let (nrows, ncols) = q.original_shape();
            let per_row = q.scales().len() == nrows;
            let mut worst_sq = 0.0f64;
            for r in 0..nrows {
                let s = if per_row { q.scales()[r] } else { q.scales()[0] } as f64;
                worst_sq += ncols as f64 * (s / 2.0) * (s / 2.0);
            }
            let bound = if norm == 0.0 {
                0.0
            } else {
                worst_sq.sqrt() / norm * (1.0 + 1e-6) + 1e-9
            };
            rows.push(VerifyRow {
                name: layer_name.to_string(),
                form: "quantized".into(),
                rel_error: err,
                bound,
                ok: err <= bound,
            });
        }
    }

    for (name, tensor) in original.tensors() {
        if transformed.contains(name) {
            continue;
        }
        let Some(counterpart) = compressed.tensor(name) else {
            return Err(Error::MissingTensor(format!(
                "{name:?} is present in the original but has no counterpart in the compressed checkpoint"
            )));
        };
        let identical = tensor.dtype() == counterpart.dtype()
            && tensor.shape() == counterpart.shape()
            && tensor.payload_le_bytes() == counterpart.payload_le_bytes();
        let err = if identical {
            0.0
        } else if tensor.len() == counterpart.len() {
            rel_error(tensor, &DenseTensor::from_f64(
                tensor.shape(),
                counterpart.to_f64_vec(),
            )?)?
        } else {
            f64::INFINITY
        };
        rows.push(VerifyRow {
            name: name.to_string(),
            form: "kept".into(),
            rel_error: err,
            bound: 0.0,
            ok: identical,
        });
    }

    for (name, _) in compressed.tensors() {
        if !accounted.contains(name) && !original.contains(name) {
            return Err(Error::MissingTensor(format!(
                "{name:?} appears in the compressed checkpoint but corresponds to nothing in the original"
            )));
        }
    }

    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(rows)
}
