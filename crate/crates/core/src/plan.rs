//! Declarative compression plans.
//!
//! A plan is a small JSON document deciding, per layer, whether to factorize
//! the weight into an MPO core chain, quantize it, or keep it untouched.
//! Resolution order for a layer:
//!
//! 1. plan `exclusions` (glob patterns) force keep;
//! 2. first matching entry in `rules` wins;
//! 3. built-in default exclusions (unless disabled): embedding and head
//!    layers, and each block's final MLP layer, are kept — these are the
//!    layers that empirically tolerate compression worst;
//! 4. otherwise the plan `defaults` apply: tensorize when a default `chi`
//!    is set, else keep.
//!
//! ```json
//! {
//!   "schema": 1,
//!   "defaults": { "k": 3, "chi": 4, "store_dtype": "f16" },
//!   "rules": [
//!     { "pattern": "layers.*.attn*", "action": { "tensorize": { "chi": 8 } } },
//!     { "pattern": "head.weight", "action": { "quantize": { "bits": 8 } } },
//!     { "pattern": "layers.0.*", "action": "keep" }
//!   ],
//!   "exclusions": ["*.norm*"],
//!   "default_exclusions": true
//! }
//! ```

use crate::error::{Error, Result};
use crate::manifest::{LayerKind, ModelManifest};
use crate::quant::Granularity;
use crate::tensor::Dtype;
use serde::{Deserialize, Serialize};

/// Match `name` against a glob pattern supporting `*` (any run, including
/// empty) and `?` (any single byte). Patterns and names are ASCII.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p = pattern.as_bytes();
    let n = name.as_bytes();
    // Iterative wildcard matching with single-star backtracking.
    let (mut pi, mut ni) = (0usize, 0usize);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == b'?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ni));
            pi += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == b'*' {
        pi += 1;
    }
    pi == p.len()
}

fn default_schema() -> u32 {
    1
}
fn default_k() -> usize {
    3
}
fn default_store_dtype() -> String {
    "f16".into()
}
fn default_bits() -> u8 {
    8
}
fn default_granularity() -> String {
    "per_row".into()
}
fn default_true() -> bool {
    true
}

/// Explicit index factorization for a tensorize rule; when absent, factors
/// are chosen automatically by balanced factorization of each dimension.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub row_factors: Vec<usize>,
    pub col_factors: Vec<usize>,
}

/// Tensorize-rule parameters; unset fields fall back to plan defaults.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct TensorizeSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chi: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store_dtype: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeSpec>,
}

/// Quantize-rule parameters.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QuantizeSpec {
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default = "default_granularity")]
    pub granularity: String,
}

/// What a rule does to the layers it matches.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum PlanAction {
    Tensorize(TensorizeSpec),
    Quantize(QuantizeSpec),
    Keep,
}

/// One pattern → action entry.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlanRule {
    pub pattern: String,
    pub action: PlanAction,
}

/// Plan-wide fallbacks for fields a rule leaves unset.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlanDefaults {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<usize>,
    #[serde(default = "default_store_dtype")]
    pub store_dtype: String,
}

impl Default for PlanDefaults {
    fn default() -> PlanDefaults {
        PlanDefaults {
            k: default_k(),
            chi: None,
            store_dtype: default_store_dtype(),
        }
    }
}

/// A validated compression plan. See the module docs for the JSON schema
/// and resolution order.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default)]
    pub defaults: PlanDefaults,
    #[serde(default)]
    pub rules: Vec<PlanRule>,
    #[serde(default)]
    pub exclusions: Vec<String>,
    #[serde(default = "default_true")]
    pub default_exclusions: bool,
}

impl Default for CompressionPlan {
    fn default() -> CompressionPlan {
        CompressionPlan {
            schema: 1,
            defaults: PlanDefaults::default(),
            rules: Vec::new(),
            exclusions: Vec::new(),
            default_exclusions: true,
        }
    }
}

/// The fully resolved decision for one layer, with every fallback applied.
#[derive(Clone, Debug, PartialEq)]
pub enum Disposition {
    Tensorize {
        k: usize,
        chi: usize,
        store_dtype: Dtype,
        scheme: Option<SchemeSpec>,
    },
    Quantize {
        bits: u8,
        granularity: Granularity,
    },
    Keep,
}

fn parse_store_dtype(name: &str) -> Result<Dtype> {
    let dtype = Dtype::parse(name)?;
    if !dtype.is_float() {
        return Err(Error::Plan(format!(
            "store_dtype must be a float type, got {name:?}"
        )));
    }
    Ok(dtype)
}

/// Parse and validate a plan from JSON text. Unknown keys, χ < 1, k < 1,
/// bits outside {4, 8}, and malformed dtypes or granularities are rejected.
pub fn parse_plan(text: &str) -> Result<CompressionPlan> {
    let plan: CompressionPlan =
        serde_json::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
    plan.validate()?;
    Ok(plan)
}

impl CompressionPlan {
    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::Plan(format!(
                "unsupported schema version {} (this build reads schema 1)",
                self.schema
            )));
        }
        if self.defaults.k < 1 {
            return Err(Error::Plan("defaults.k must be at least 1".into()));
        }
        if self.defaults.chi == Some(0) {
            return Err(Error::Plan("defaults.chi must be at least 1".into()));
        }
        parse_store_dtype(&self.defaults.store_dtype)?;
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.pattern.is_empty() || !rule.pattern.is_ascii() {
                return Err(Error::Plan(format!(
                    "rules[{i}].pattern must be non-empty ASCII"
                )));
            }
            match &rule.action {
                PlanAction::Tensorize(t) => {
                    if t.k == Some(0) {
                        return Err(Error::Plan(format!("rules[{i}]: k must be at least 1")));
                    }
                    if t.chi == Some(0) {
                        return Err(Error::Plan(format!("rules[{i}]: chi must be at least 1")));
                    }
                    if let Some(d) = &t.store_dtype {
                        parse_store_dtype(d)?;
                    }
                    if let Some(s) = &t.scheme {
                        if s.row_factors.is_empty()
                            || s.col_factors.is_empty()
                            || s.row_factors.len() != s.col_factors.len()
                        {
                            return Err(Error::Plan(format!(
                                "rules[{i}]: scheme needs equal-length, non-empty factor lists"
                            )));
                        }
                        if s.row_factors.iter().chain(&s.col_factors).any(|&f| f == 0) {
                            return Err(Error::Plan(format!(
                                "rules[{i}]: scheme factors must be positive"
                            )));
                        }
                    }
                }
                PlanAction::Quantize(q) => {
                    if q.bits != 4 && q.bits != 8 {
                        return Err(Error::Plan(format!(
                            "rules[{i}]: bits must be 4 or 8, got {}",
                            q.bits
                        )));
                    }
                    Granularity::parse(&q.granularity)?;
                }
                PlanAction::Keep => {}
            }
        }
        for (i, pattern) in self.exclusions.iter().enumerate() {
            if pattern.is_empty() || !pattern.is_ascii() {
                return Err(Error::Plan(format!(
                    "exclusions[{i}] must be non-empty ASCII"
                )));
            }
        }
        Ok(())
    }

    /// Layer names the built-in default exclusions keep: embeddings, heads,
    /// and the last MLP layer of each block.
    fn is_default_excluded(manifest: &ModelManifest, layer_name: &str) -> bool {
        let Some(layer) = manifest.layer(layer_name) else {
            return false;
        };
        match layer.kind {
            LayerKind::Embedding | LayerKind::Head => true,
            LayerKind::Mlp => {
                let last_mlp_in_block = manifest
                    .layers
                    .iter()
                    .rfind(|l| l.kind == LayerKind::Mlp && l.block_index == layer.block_index);
                last_mlp_in_block.map(|l| l.name == layer.name).unwrap_or(false)
            }
            _ => false,
        }
    }

    /// Resolve the disposition for one layer. See the module docs for the
    /// precedence chain.
    pub fn disposition(&self, manifest: &ModelManifest, layer_name: &str) -> Result<Disposition> {
        if self.exclusions.iter().any(|p| glob_match(p, layer_name)) {
            return Ok(Disposition::Keep);
        }
        if let Some(rule) = self
            .rules
            .iter()
            .find(|r| glob_match(&r.pattern, layer_name))
        {
            return match &rule.action {
                PlanAction::Tensorize(t) => {
                    let chi = match t.chi.or(self.defaults.chi) {
                        Some(chi) => chi,
                        None => {
                            return Err(Error::Plan(format!(
                                "layer {layer_name:?}: tensorize rule without chi and no defaults.chi"
                            )))
                        }
                    };
                    Ok(Disposition::Tensorize {
                        k: t.k.unwrap_or(self.defaults.k),
                        chi,
                        store_dtype: parse_store_dtype(
                            t.store_dtype.as_deref().unwrap_or(&self.defaults.store_dtype),
                        )?,
                        scheme: t.scheme.clone(),
                    })
                }
                PlanAction::Quantize(q) => Ok(Disposition::Quantize {
                    bits: q.bits,
                    granularity: Granularity::parse(&q.granularity)?,
                }),
                PlanAction::Keep => Ok(Disposition::Keep),
            };
        }
        if self.default_exclusions && Self::is_default_excluded(manifest, layer_name) {
            return Ok(Disposition::Keep);
        }
        match self.defaults.chi {
            Some(chi) => Ok(Disposition::Tensorize {
                k: self.defaults.k,
                chi,
                store_dtype: parse_store_dtype(&self.defaults.store_dtype)?,
                scheme: None,
            }),
            None => Ok(Disposition::Keep),
        }
    }
}
