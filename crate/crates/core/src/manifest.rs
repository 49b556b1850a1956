//! Model manifest: a sidecar JSON inventory of the layers in a checkpoint.
//!
//! The manifest names each layer's weight tensor, classifies it (dense,
//! attention projection, MLP, embedding, head), and records its geometry and
//! block index. Compression plans and the profiler consume manifests to
//! decide which tensors are layer weights and how they may be transformed.

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// What role a layer plays in the model.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    AttentionProj,
    Mlp,
    Embedding,
    Head,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::AttentionProj => "attention_proj",
            LayerKind::Mlp => "mlp",
            LayerKind::Embedding => "embedding",
            LayerKind::Head => "head",
        }
    }
}

/// One layer's entry: the weight tensor it owns and its geometry. The weight
/// is `output_dim x input_dim`, row-major.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub block_index: usize,
}

/// The layer inventory for one model.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub model_name: String,
    pub version: u32,
    pub layers: Vec<LayerInfo>,
}

impl ModelManifest {
    /// Structural checks that need no checkpoint: unique, well-formed layer
    /// names and positive dims.
    pub fn validate(&self) -> Result<()> {
        if self.model_name.is_empty() {
            return Err(Error::Manifest("model_name is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for layer in &self.layers {
            if layer.name.is_empty() || !layer.name.is_ascii() {
                return Err(Error::Manifest(format!(
                    "layer name {:?} must be non-empty ASCII",
                    layer.name
                )));
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate layer name {:?}",
                    layer.name
                )));
            }
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(Error::Manifest(format!(
                    "layer {:?} has zero dims ({} x {})",
                    layer.name, layer.output_dim, layer.input_dim
                )));
            }
        }
        Ok(())
    }

    /// Full consistency check against a checkpoint: every layer must be
    /// present in exactly one storage form (plain weight tensor, MPO cores,
    /// or quantized payload), with matching geometry where visible.
    pub fn validate_against(&self, ckpt: &Checkpoint) -> Result<()> {
        self.validate()?;
        for layer in &self.layers {
            let plain = ckpt.contains(&layer.name);
            let mpo = checkpoint::has_mpo_layer(ckpt, &layer.name);
            let quant = checkpoint::has_quantized(ckpt, &layer.name);
            match (plain, mpo, quant) {
                (true, false, false) => {
                    let t = ckpt.tensor(&layer.name).expect("checked present");
                    if t.shape() != [layer.output_dim, layer.input_dim] {
                        return Err(Error::Manifest(format!(
                            "layer {:?}: manifest says {} x {} but tensor is {:?}",
                            layer.name,
                            layer.output_dim,
                            layer.input_dim,
                            t.shape()
                        )));
                    }
                }
                (false, true, false) => {
                    let loaded = checkpoint::load_mpo_layer(ckpt, &layer.name)?;
                    if loaded.original_shape() != (layer.output_dim, layer.input_dim) {
                        return Err(Error::Manifest(format!(
                            "layer {:?}: manifest says {} x {} but MPO scheme encodes {:?}",
                            layer.name,
                            layer.output_dim,
                            layer.input_dim,
                            loaded.original_shape()
                        )));
                    }
                }
                (false, false, true) => {
                    let q = checkpoint::load_quantized(ckpt, &layer.name)?;
                    if q.original_shape() != (layer.output_dim, layer.input_dim) {
                        return Err(Error::Manifest(format!(
                            "layer {:?}: manifest says {} x {} but quantized payload is {:?}",
                            layer.name,
                            layer.output_dim,
                            layer.input_dim,
                            q.original_shape()
                        )));
                    }
                }
                (false, false, false) => {
                    return Err(Error::Manifest(format!(
                        "layer {:?} has no tensor in the checkpoint",
                        layer.name
                    )));
                }
                _ => {
                    return Err(Error::Manifest(format!(
                        "layer {:?} is stored in more than one form",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<ModelManifest> {
        let manifest: ModelManifest =
            serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        checkpoint::write_bytes_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<ModelManifest> {
        let text = std::fs::read_to_string(path)?;
        ModelManifest::from_json(&text)
    }
}
