//! A small, fully deterministic MLP classifier used to demonstrate healing:
//! train dense, swap hot layers for MPO core chains, retrain the cores.
//!
//! The model is an ordered chain of affine layers with rectifier activations
//! between them and softmax cross-entropy on top. A layer holds either a
//! dense `(out, in)` weight or an [`MpoLayer`] replacing it; biases stay
//! dense either way. All arithmetic is f64, forward batches are `(features,
//! batch)` column matrices, and gradients are exact reverse-mode chain-rule
//! contractions — MPO core gradients come from
//! [`mpo::apply_backward`], never from densifying the chain.

pub mod data;
pub mod heal;
pub mod train;

pub use data::{generate_dataset, ToyDataset, INPUT_DIM, NUM_CLASSES};
pub use heal::{heal_demo_csv, run_heal_demo, HealDemoConfig, HealDemoOutcome};
pub use train::{
    history_to_csv, train, EpochMetrics, Optimizer, TrainConfig, TrainHistory, TrainableScope,
};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::matmul;
use crate::manifest::{LayerInfo, LayerKind, ModelManifest};
use crate::mpo::{self, ApplyCache, IndexScheme, MpoLayer};
use crate::profiler::Evaluator;
use crate::tensor::{permute_f64, DenseTensor, Dtype};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One affine layer's parameters.
#[derive(Clone, Debug)]
pub enum LayerParams {
    Dense { weight: DenseTensor, bias: Vec<f64> },
    MpoDense { mpo: MpoLayer, bias: Vec<f64> },
}

impl LayerParams {
    pub fn input_dim(&self) -> usize {
        match self {
            LayerParams::Dense { weight, .. } => weight.shape()[1],
            LayerParams::MpoDense { mpo, .. } => mpo.original_shape().1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LayerParams::Dense { weight, .. } => weight.shape()[0],
            LayerParams::MpoDense { mpo, .. } => mpo.original_shape().0,
        }
    }

    pub fn is_tensorized(&self) -> bool {
        matches!(self, LayerParams::MpoDense { .. })
    }

    /// Scalars in the weight representation (biases not included).
    pub fn weight_param_count(&self) -> usize {
        match self {
            LayerParams::Dense { weight, .. } => weight.len(),
            LayerParams::MpoDense { mpo, .. } => mpo.param_count(),
        }
    }
}

/// Which parameter tensor of a layer a [`ParamSlot`] addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamPart {
    Weight,
    Core(usize),
    Bias,
}

/// A stable address for one trainable tensor; the canonical order is layer
/// by layer, weight (or cores in chain order) before bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamSlot {
    pub layer: usize,
    pub part: ParamPart,
}

/// The classifier. See the module docs for conventions.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub(crate) layers: Vec<LayerParams>,
}

/// Per-layer intermediates kept during a training forward pass.
struct ForwardTrace {
    /// Input to each layer, `(in_dim, batch)` flattened.
    activations: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    zs: Vec<Vec<f64>>,
    /// Contraction caches for tensorized layers.
    caches: Vec<Option<ApplyCache>>,
}

impl ToyModel {
    /// Fresh dense model over the dim chain (`[in, hidden.., out]`,
    /// at least two entries). Weights draw from the seeded uniform
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`; biases start at zero.
    pub fn new_dense(dims: &[usize], seed: u64) -> Result<ToyModel> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a model needs an input and an output dim".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            layers.push(LayerParams::Dense {
                weight: DenseTensor::from_f64(&[fan_out, fan_in], data)?,
                bias: vec![0.0; fan_out],
            });
        }
        Ok(ToyModel { layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, idx: usize) -> Option<&LayerParams> {
        self.layers.get(idx)
    }

    /// The dim chain `[in, hidden.., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].input_dim()];
        dims.extend(self.layers.iter().map(|l| l.output_dim()));
        dims
    }

    /// Replace layer `idx`'s dense weight with its chi-capped factorization
    /// (balanced index split, `k` cores). The cores inherit the truncated
    /// weights exactly — healing always starts from the factorization, not
    /// from a random re-init.
    pub fn tensorize_layer(&mut self, idx: usize, k: usize, chi: usize) -> Result<()> {
        let Some(layer) = self.layers.get_mut(idx) else {
            return Err(Error::InvalidArgument(format!(
                "layer index {idx} out of range"
            )));
        };
        match layer {
            LayerParams::MpoDense { .. } => Err(Error::InvalidArgument(format!(
                "layer {idx} is already tensorized"
            ))),
            LayerParams::Dense { weight, bias } => {
                let scheme = IndexScheme::auto(weight.shape()[0], weight.shape()[1], k)?;
                let mpo = mpo::decompose(weight, &scheme, chi, 0.0)?;
                *layer = LayerParams::MpoDense {
                    mpo,
                    bias: std::mem::take(bias),
                };
                Ok(())
            }
        }
    }

    /// Every trainable tensor, in canonical order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Dense { .. } => slots.push(ParamSlot {
                    layer: i,
                    part: ParamPart::Weight,
                }),
                LayerParams::MpoDense { mpo, .. } => {
                    for c in 0..mpo.cores().len() {
                        slots.push(ParamSlot {
                            layer: i,
                            part: ParamPart::Core(c),
                        });
                    }
                }
            }
            slots.push(ParamSlot {
                layer: i,
                part: ParamPart::Bias,
            });
        }
        slots
    }

    pub fn param(&self, slot: ParamSlot) -> Result<&[f64]> {
        let bad = || Error::InvalidArgument(format!("no parameter at {slot:?}"));
        let layer = self.layers.get(slot.layer).ok_or_else(bad)?;
        match (layer, slot.part) {
            (LayerParams::Dense { weight, .. }, ParamPart::Weight) => {
                weight.as_f64_slice().ok_or_else(bad)
            }
            (LayerParams::MpoDense { mpo, .. }, ParamPart::Core(c)) => mpo
                .cores()
                .get(c)
                .and_then(|core| core.tensor().as_f64_slice())
                .ok_or_else(bad),
            (LayerParams::Dense { bias, .. }, ParamPart::Bias)
            | (LayerParams::MpoDense { bias, .. }, ParamPart::Bias) => Ok(bias),
            _ => Err(bad()),
        }
    }

    pub fn param_mut(&mut self, slot: ParamSlot) -> Result<&mut [f64]> {
        let bad = || Error::InvalidArgument(format!("no parameter at {slot:?}"));
        let layer = self.layers.get_mut(slot.layer).ok_or_else(bad)?;
        match (layer, slot.part) {
            (LayerParams::Dense { weight, .. }, ParamPart::Weight) => {
                weight.as_f64_slice_mut().ok_or_else(bad)
            }
            (LayerParams::MpoDense { mpo, .. }, ParamPart::Core(c)) => mpo.core_f64_mut(c),
            (LayerParams::Dense { bias, .. }, ParamPart::Bias)
            | (LayerParams::MpoDense { bias, .. }, ParamPart::Bias) => Ok(bias),
            _ => Err(bad()),
        }
    }

    fn run_forward(
        &self,
        x: &DenseTensor,
        want_trace: bool,
    ) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
        if x.rank() != 2 || x.dtype() != Dtype::F64 {
            return Err(Error::ShapeMismatch(format!(
                "expected an f64 (features, batch) input, got {} {:?}",
                x.dtype().name(),
                x.shape()
            )));
        }
        if x.shape()[0] != self.layers[0].input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "model takes {} features, input has {}",
                self.layers[0].input_dim(),
                x.shape()[0]
            )));
        }
        let batch = x.shape()[1];
        let last = self.layers.len() - 1;
        let mut trace = want_trace.then(|| ForwardTrace {
            activations: Vec::with_capacity(self.layers.len()),
            zs: Vec::with_capacity(self.layers.len()),
            caches: Vec::with_capacity(self.layers.len()),
        });

        let mut a: Vec<f64> = x.to_f64_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out_dim, in_dim) = (layer.output_dim(), layer.input_dim());
            let (mut z, cache) = match layer {
                LayerParams::Dense { weight, .. } => {
                    let w = weight.as_f64_slice().expect("dense weights are f64");
                    (matmul(w, out_dim, in_dim, &a, batch), None)
                }
                LayerParams::MpoDense { mpo, .. } => {
                    let xt = DenseTensor::from_f64(&[in_dim, batch], a.clone())?;
                    if want_trace {
                        let (y, cache) = mpo::apply_with_cache(mpo, &xt)?;
                        (y.to_f64_vec(), Some(cache))
                    } else {
                        (mpo::apply(mpo, &xt)?.to_f64_vec(), None)
                    }
                }
            };
            let bias = match layer {
                LayerParams::Dense { bias, .. } | LayerParams::MpoDense { bias, .. } => bias,
            };
            for r in 0..out_dim {
                for b in 0..batch {
                    z[r * batch + b] += bias[r];
                }
            }
            if let Some(t) = trace.as_mut() {
                t.activations.push(std::mem::take(&mut a));
                t.zs.push(z.clone());
                t.caches.push(cache);
            }
            a = if i == last {
                z
            } else {
                z.into_iter().map(|v| v.max(0.0)).collect()
            };
        }
        Ok((a, trace))
    }

    /// Class logits for a `(features, batch)` input, shaped
    /// `(classes, batch)`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let batch = x.shape().get(1).copied().unwrap_or(0);
        let (logits, _) = self.run_forward(x, false)?;
        DenseTensor::from_f64(&[self.layers.last().unwrap().output_dim(), batch], logits)
    }

    /// Mean softmax cross-entropy over the batch plus the gradient of every
    /// parameter tensor, aligned with [`ToyModel::param_slots`].
    pub fn loss_and_grads(
        &self,
        x: &DenseTensor,
        labels: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let batch = x.shape()[1];
        if labels.len() != batch {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        let classes = self.layers.last().unwrap().output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (logits, trace) = self.run_forward(x, true)?;
        let trace = trace.expect("trace requested");

        // Stable softmax cross-entropy and its gradient.
        let mut loss = 0.0f64;
        let mut dz = vec![0.0f64; classes * batch];
        for b in 0..batch {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(logits[c * batch + b]);
            }
            let mut sum = 0.0f64;
            for c in 0..classes {
                sum += (logits[c * batch + b] - max).exp();
            }
            let lse = max + sum.ln();
            loss += lse - logits[labels[b] * batch + b];
            for c in 0..classes {
                let p = (logits[c * batch + b] - lse).exp();
                let y = (c == labels[b]) as usize as f64;
                dz[c * batch + b] = (p - y) / batch as f64;
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            let worst = logits.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            return Err(Error::Numerical(format!(
                "non-finite loss on a batch of {batch} (max |logit| = {worst:e})"
            )));
        }

        // Reverse pass. dz holds the gradient at the current layer's
        // pre-activation output.
        struct LayerGrads {
            weights: Vec<Vec<f64>>,
            bias: Vec<f64>,
        }
        let mut per_layer: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let (out_dim, in_dim) = (layer.output_dim(), layer.input_dim());
            let mut db = vec![0.0f64; out_dim];
            for r in 0..out_dim {
                for b in 0..batch {
                    db[r] += dz[r * batch + b];
                }
            }
            let a = &trace.activations[i];
            let (weight_grads, da) = match layer {
                LayerParams::Dense { weight, .. } => {
                    let w = weight.as_f64_slice().expect("dense weights are f64");
                    let (_, a_t) = permute_f64(a, &[in_dim, batch], &[1, 0]);
                    let dw = matmul(&dz, out_dim, batch, &a_t, in_dim);
                    let (_, w_t) = permute_f64(w, &[out_dim, in_dim], &[1, 0]);
                    let da = matmul(&w_t, in_dim, out_dim, &dz, batch);
                    (vec![dw], da)
                }
                LayerParams::MpoDense { mpo, .. } => {
                    let cache = trace.caches[i].as_ref().expect("cache for MPO layer");
                    let gy = DenseTensor::from_f64(&[out_dim, batch], dz.clone())?;
                    let grads = mpo::apply_backward(mpo, cache, &gy)?;
                    let cores = grads
                        .core_grads
                        .iter()
                        .map(|g| g.to_f64_vec())
                        .collect::<Vec<_>>();
                    (cores, grads.input_grad.to_f64_vec())
                }
            };
            per_layer.push(LayerGrads { weights: weight_grads, bias: db });
            if i > 0 {
                // Rectifier gate from the previous layer's pre-activations
                // (derivative at exactly zero defined as zero).
                let z_prev = &trace.zs[i - 1];
                dz = da
                    .iter()
                    .zip(z_prev)
                    .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                    .collect();
            }
        }
        per_layer.reverse();

        let mut grads = Vec::new();
        for layer_grads in per_layer {
            grads.extend(layer_grads.weights);
            grads.push(layer_grads.bias);
        }
        Ok((loss, grads))
    }

    /// Argmax classification accuracy over a row-major `(n, in_dim)` input
    /// set; ties resolve to the lowest class index.
    pub fn evaluate(&self, inputs: &[f64], labels: &[usize]) -> Result<f64> {
        let in_dim = self.layers[0].input_dim();
        if labels.is_empty() || inputs.len() != labels.len() * in_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs for {} labels of dim {in_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        let n = labels.len();
        let mut correct = 0usize;
        let indices: Vec<usize> = (0..n).collect();
        for chunk in indices.chunks(512) {
            let x = data::batch_matrix(inputs, in_dim, chunk);
            let logits = self.forward(&x)?;
            let l = logits.to_f64_vec();
            let classes = logits.shape()[0];
            let batch = chunk.len();
            for (b, &sample) in chunk.iter().enumerate() {
                let mut best = (0usize, f64::NEG_INFINITY);
                for c in 0..classes {
                    let v = l[c * batch + b];
                    if v > best.1 {
                        best = (c, v);
                    }
                }
                if best.0 == labels[sample] {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / n as f64)
    }

    /// Serialize into a checkpoint plus matching manifest. Layer `i` stores
    /// its weight as `layers.{i}.weight` (dense or MPO form) and its bias as
    /// `layers.{i}.bias`; the first layer is tagged embedding, the last
    /// head, the rest mlp.
    pub fn to_checkpoint(&self, model_name: &str) -> Result<(Checkpoint, ModelManifest)> {
        let mut ckpt = Checkpoint::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let weight_name = format!("layers.{i}.weight");
            match layer {
                LayerParams::Dense { weight, bias } => {
                    ckpt.insert(&weight_name, weight.clone())?;
                    ckpt.insert(
                        &format!("layers.{i}.bias"),
                        DenseTensor::from_f64(&[bias.len()], bias.clone())?,
                    )?;
                }
                LayerParams::MpoDense { mpo, bias } => {
                    checkpoint::store_mpo_layer(&mut ckpt, &weight_name, mpo)?;
                    ckpt.insert(
                        &format!("layers.{i}.bias"),
                        DenseTensor::from_f64(&[bias.len()], bias.clone())?,
                    )?;
                }
            }
            let kind = if i == 0 {
                LayerKind::Embedding
            } else if i == last {
                LayerKind::Head
            } else {
                LayerKind::Mlp
            };
            layers.push(LayerInfo {
                name: weight_name,
                kind,
                input_dim: layer.input_dim(),
                output_dim: layer.output_dim(),
                block_index: i,
            });
        }
        let manifest = ModelManifest {
            model_name: model_name.to_string(),
            version: 1,
            layers,
        };
        manifest.validate_against(&ckpt)?;
        Ok((ckpt, manifest))
    }

    /// Rebuild a model saved by [`ToyModel::to_checkpoint`] (dense and
    /// MPO-form layers; weights are cast up to f64 for training).
    pub fn from_checkpoint(ckpt: &Checkpoint, manifest: &ModelManifest) -> Result<ToyModel> {
        manifest.validate()?;
        if manifest.layers.is_empty() {
            return Err(Error::Manifest("manifest lists no layers".into()));
        }
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for info in &manifest.layers {
            let Some(stem) = info.name.strip_suffix(".weight") else {
                return Err(Error::Manifest(format!(
                    "toy model layers are named <stem>.weight, got {:?}",
                    info.name
                )));
            };
            let bias_name = format!("{stem}.bias");
            let bias_t = ckpt.tensor(&bias_name).ok_or_else(|| {
                Error::MissingTensor(format!("bias tensor {bias_name:?}"))
            })?;
            let bias = bias_t.to_f64_vec();
            if bias.len() != info.output_dim {
                return Err(Error::Manifest(format!(
                    "{bias_name:?} has {} entries for an output dim of {}",
                    bias.len(),
                    info.output_dim
                )));
            }
            let layer = if let Some(w) = ckpt.tensor(&info.name) {
                if w.shape() != [info.output_dim, info.input_dim] {
                    return Err(Error::Manifest(format!(
                        "layer {:?}: manifest says {} x {} but tensor is {:?}",
                        info.name,
                        info.output_dim,
                        info.input_dim,
                        w.shape()
                    )));
                }
                LayerParams::Dense {
                    weight: w.cast(Dtype::F64)?,
                    bias,
                }
            } else if checkpoint::has_mpo_layer(ckpt, &info.name) {
                let mpo = checkpoint::load_mpo_layer(ckpt, &info.name)?.cast(Dtype::F64)?;
                if mpo.original_shape() != (info.output_dim, info.input_dim) {
                    return Err(Error::Manifest(format!(
                        "layer {:?}: manifest says {} x {} but MPO encodes {:?}",
                        info.name,
                        info.output_dim,
                        info.input_dim,
                        mpo.original_shape()
                    )));
                }
                LayerParams::MpoDense { mpo, bias }
            } else {
                return Err(Error::MissingTensor(format!(
                    "layer {:?} is neither a plain tensor nor an MPO record",
                    info.name
                )));
            };
            if let Some(prev) = layers.last() {
                let prev: &LayerParams = prev;
                if prev.output_dim() != layer.input_dim() {
                    return Err(Error::Manifest(format!(
                        "layer {:?} takes {} features but the previous layer emits {}",
                        info.name,
                        layer.input_dim(),
                        prev.output_dim()
                    )));
                }
            }
            layers.push(layer);
        }
        Ok(ToyModel { layers })
    }
}

/// The bundled profiler metric: rebuild the toy model from the checkpoint,
/// regenerate the dataset from the evaluation seed, and report test
/// accuracy. Pure in its inputs, so profiling runs are reproducible.
#[derive(Clone, Copy, Debug)]
pub struct ToyEvaluator {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for ToyEvaluator {
    fn default() -> ToyEvaluator {
        ToyEvaluator {
            n_train: 8000,
            n_test: 2000,
        }
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, ckpt: &Checkpoint, manifest: &ModelManifest, seed: u64) -> Result<f64> {
        let model = ToyModel::from_checkpoint(ckpt, manifest)?;
        let dataset = data::generate_dataset(seed, self.n_train, self.n_test);
        model.evaluate(&dataset.test_inputs, &dataset.test_labels)
    }
}
