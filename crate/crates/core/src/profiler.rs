//! Layer sensitivity profiling: sweep the bond-dimension cap for one layer
//! at a time, score the perturbed model with a pluggable evaluator, and
//! collect metric-vs-chi curves.
//!
//! Each grid point clones the input checkpoint, replaces exactly one layer
//! with the dense reconstruction of its truncated factorization (cast back
//! to the layer's original dtype), and evaluates. Perturbations never
//! accumulate and the input checkpoint is never mutated. A `full` point —
//! the cap at which truncation stops losing anything — is always appended,
//! anchoring every curve to its exactness limit.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::manifest::ModelManifest;
use crate::mpo::{decompose, reconstruct, IndexScheme};
use crate::parallel::par_map;
use std::fmt;

/// A model-quality metric: deterministic in its inputs and the seed, valued
/// in `[0, 1]`.
pub trait Evaluator: Sync {
    fn evaluate(&self, ckpt: &Checkpoint, manifest: &ModelManifest, seed: u64) -> Result<f64>;
}

/// A swept cap: an explicit bond dimension or the saturating (lossless) one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChiPoint {
    Bond(usize),
    Full,
}

impl fmt::Display for ChiPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChiPoint::Bond(b) => write!(f, "{b}"),
            ChiPoint::Full => write!(f, "full"),
        }
    }
}

/// One evaluated grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub chi: ChiPoint,
    pub metric: f64,
    /// Largest bond the decomposition actually produced at this cap — can
    /// sit below the cap when the layer's numerical rank saturates first.
    pub realized_max_bond: usize,
}

/// The sensitivity curve for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityCurve {
    pub layer_name: String,
    pub baseline_metric: f64,
    /// Points in ascending chi order, `full` last. Truncated when `error`
    /// is set.
    pub points: Vec<CurvePoint>,
    pub evaluation_seed: u64,
    /// Set when a grid point failed; the curve stops at the failure.
    pub error: Option<String>,
}

fn validate_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("chi grid is empty".into()));
    }
    if grid.contains(&0) {
        return Err(Error::InvalidArgument("chi grid contains 0".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!(
            "chi grid contains duplicates: {grid:?}"
        )));
    }
    Ok(())
}

/// Rebuild the checkpoint with `name` replaced by the dense reconstruction
/// of its chi-capped factorization; returns the realized max bond too.
fn perturbed_checkpoint(
    ckpt: &Checkpoint,
    name: &str,
    scheme: &IndexScheme,
    cap: usize,
) -> Result<(Checkpoint, usize)> {
    let w = ckpt
        .tensor(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    let layer = decompose(w, scheme, cap, 0.0)?;
    let realized = layer.bond_dims().iter().copied().max().unwrap_or(1);
    let materialized = reconstruct(&layer)?.cast(w.dtype())?;
    let mut working = ckpt.clone();
    working.remove(name);
    working.insert(name, materialized)?;
    Ok((working, realized))
}

/// Profile each target layer over `chi_grid` (plus the automatic `full`
/// point), scoring with `evaluator` at `seed`.
///
/// The grid must be non-empty, positive, and free of duplicates. A failure
/// at one grid point truncates that layer's curve and records the error;
/// other layers still profile. Curves come back in `target_layers` order.
pub fn profile<E>(
    ckpt: &Checkpoint,
    manifest: &ModelManifest,
    target_layers: &[String],
    chi_grid: &[usize],
    k: usize,
    evaluator: &E,
    seed: u64,
) -> Result<Vec<SensitivityCurve>>
where
    E: Evaluator + ?Sized,
{
    manifest.validate()?;
    validate_grid(chi_grid)?;
    if k < 1 {
        return Err(Error::InvalidArgument("core count must be at least 1".into()));
    }
    let mut jobs = Vec::with_capacity(target_layers.len());
    for name in target_layers {
        let info = manifest.layer(name).ok_or_else(|| {
            Error::Manifest(format!("target layer {name:?} is not in the manifest"))
        })?;
        if !ckpt.contains(name) {
            return Err(Error::MissingTensor(format!(
                "target layer {name:?} has no plain tensor in the checkpoint"
            )));
        }
        let scheme = IndexScheme::auto(info.output_dim, info.input_dim, k)?;
        jobs.push((name.clone(), scheme));
    }

    let baseline = evaluator.evaluate(ckpt, manifest, seed)?;
    let mut grid = chi_grid.to_vec();
    grid.sort_unstable();

    let curves = par_map(&jobs, |(name, scheme)| {
        let mut curve = SensitivityCurve {
            layer_name: name.clone(),
            baseline_metric: baseline,
            points: Vec::with_capacity(grid.len() + 1),
            evaluation_seed: seed,
            error: None,
        };
        let caps = grid
            .iter()
            .map(|&chi| (ChiPoint::Bond(chi), chi))
            .chain(std::iter::once((ChiPoint::Full, scheme.saturating_bond())));
        for (label, cap) in caps {
            let outcome = perturbed_checkpoint(ckpt, name, scheme, cap).and_then(
                |(working, realized)| {
                    let metric = evaluator.evaluate(&working, manifest, seed)?;
                    Ok((metric, realized))
                },
            );
            match outcome {
                Ok((metric, realized)) => curve.points.push(CurvePoint {
                    chi: label,
                    metric,
                    realized_max_bond: realized,
                }),
                Err(e) => {
                    curve.error = Some(format!("at chi={label}: {e}"));
                    break;
                }
            }
        }
        curve
    });
    Ok(curves)
}

/// Render curves as CSV: `layer,chi,metric,baseline,seed`, one row per
/// evaluated point, `full` spelled out for the saturating cap.
pub fn curves_to_csv(curves: &[SensitivityCurve]) -> String {
    let mut out = String::from("layer,chi,metric,baseline,seed\n");
    for curve in curves {
        for point in &curve.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                curve.layer_name, point.chi, point.metric, curve.baseline_metric, curve.evaluation_seed
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::checkpoint_to_bytes;
    use crate::manifest::{LayerInfo, LayerKind};
    use crate::tensor::DenseTensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Deterministic stand-in metric: a smooth, bounded function of every
    /// float entry in the checkpoint, with the seed folded in. Sensitive to
    /// any value change; indifferent to everything else.
    struct SumEvaluator;

    impl Evaluator for SumEvaluator {
        fn evaluate(&self, ckpt: &Checkpoint, _m: &ModelManifest, seed: u64) -> Result<f64> {
            let mut acc = (seed % 1024) as f64 * 1e-3;
            for (_, t) in ckpt.tensors() {
                if t.dtype().is_float() {
                    acc += t.to_f64_vec().iter().sum::<f64>();
                }
            }
            Ok((acc.sin() + 1.0) / 2.0)
        }
    }

    /// Fails whenever the watched tensor's first entry drifts by more than
    /// one percent from the captured value.
    struct FragileEvaluator {
        watched: String,
        expected: f64,
    }

    impl Evaluator for FragileEvaluator {
        fn evaluate(&self, ckpt: &Checkpoint, _m: &ModelManifest, _seed: u64) -> Result<f64> {
            let t = ckpt
                .tensor(&self.watched)
                .ok_or_else(|| Error::MissingTensor(self.watched.clone()))?;
            let v = t.to_f64_vec()[0];
            if (v - self.expected).abs() > 0.01 * self.expected.abs() {
                return Err(Error::Numerical(format!(
                    "{} drifted: {} vs {}",
                    self.watched, v, self.expected
                )));
            }
            Ok(0.5)
        }
    }

    fn toy() -> (Checkpoint, ModelManifest) {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut ckpt = Checkpoint::new();
        let mut layers = Vec::new();
        for i in 0..3 {
            let name = format!("layers.{i}.weight");
            let data: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ckpt.insert(&name, DenseTensor::from_f64(&[16, 16], data).unwrap())
                .unwrap();
            layers.push(LayerInfo {
                name,
                kind: LayerKind::Mlp,
                input_dim: 16,
                output_dim: 16,
                block_index: i,
            });
        }
        let manifest = ModelManifest {
            model_name: "toy".into(),
            version: 1,
            layers,
        };
        (ckpt, manifest)
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("layers.{i}.weight")).collect()
    }

    #[test]
    fn curve_shape_contract() {
        let (ckpt, manifest) = toy();
        let curves = profile(&ckpt, &manifest, &names(3), &[4], 2, &SumEvaluator, 7).unwrap();
        assert_eq!(curves.len(), 3);
        for curve in &curves {
            assert_eq!(curve.points.len(), 2); // chi=4 plus full
            assert_eq!(curve.points[0].chi, ChiPoint::Bond(4));
            assert_eq!(curve.points[1].chi, ChiPoint::Full);
            assert!(curve.error.is_none());
            assert_eq!(curve.evaluation_seed, 7);
        }
    }

    #[test]
    fn grid_is_sorted_and_full_hits_baseline() {
        let (ckpt, manifest) = toy();
        let curves =
            profile(&ckpt, &manifest, &names(3), &[8, 1, 4], 2, &SumEvaluator, 7).unwrap();
        for curve in &curves {
            let caps: Vec<ChiPoint> = curve.points.iter().map(|p| p.chi).collect();
            assert_eq!(
                caps,
                vec![ChiPoint::Bond(1), ChiPoint::Bond(4), ChiPoint::Bond(8), ChiPoint::Full]
            );
            let full = curve.points.last().unwrap();
            assert!(
                (full.metric - curve.baseline_metric).abs() <= 1e-6,
                "{}: {} vs {}",
                curve.layer_name,
                full.metric,
                curve.baseline_metric
            );
            // 16x16 at k=2 factors into (4,4)/(4,4): both cuts allow 16, and
            // a random matrix realizes it.
            assert_eq!(full.realized_max_bond, 16);
            assert!(curve.points[0].realized_max_bond <= 1);
        }
    }

    #[test]
    fn input_checkpoint_is_untouched() {
        let (ckpt, manifest) = toy();
        let before = checkpoint_to_bytes(&ckpt).unwrap();
        profile(&ckpt, &manifest, &names(3), &[1, 2], 2, &SumEvaluator, 7).unwrap();
        assert_eq!(checkpoint_to_bytes(&ckpt).unwrap(), before);
    }

    #[test]
    fn identical_seeds_give_identical_csv() {
        let (ckpt, manifest) = toy();
        let a = profile(&ckpt, &manifest, &names(3), &[1, 4], 2, &SumEvaluator, 11).unwrap();
        let b = profile(&ckpt, &manifest, &names(3), &[1, 4], 2, &SumEvaluator, 11).unwrap();
        assert_eq!(curves_to_csv(&a), curves_to_csv(&b));
        let c = profile(&ckpt, &manifest, &names(3), &[1, 4], 2, &SumEvaluator, 12).unwrap();
        assert_ne!(curves_to_csv(&a), curves_to_csv(&c));
    }

    #[test]
    fn evaluator_failure_truncates_one_curve_only() {
        let (ckpt, manifest) = toy();
        let watched = "layers.1.weight";
        let expected = ckpt.tensor(watched).unwrap().to_f64_vec()[0];
        let evaluator = FragileEvaluator {
            watched: watched.into(),
            expected,
        };
        let curves = profile(&ckpt, &manifest, &names(3), &[1], 2, &evaluator, 7).unwrap();
        let broken = curves.iter().find(|c| c.layer_name == watched).unwrap();
        assert!(broken.error.is_some(), "{broken:?}");
        for curve in curves.iter().filter(|c| c.layer_name != watched) {
            assert!(curve.error.is_none(), "{curve:?}");
            assert_eq!(curve.points.len(), 2);
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let (ckpt, manifest) = toy();
        let e = profile(&ckpt, &manifest, &names(1), &[], 2, &SumEvaluator, 0).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
        let e = profile(&ckpt, &manifest, &names(1), &[0], 2, &SumEvaluator, 0).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
        let e = profile(&ckpt, &manifest, &names(1), &[2, 2], 2, &SumEvaluator, 0).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
        let e = profile(
            &ckpt,
            &manifest,
            &["ghost.weight".into()],
            &[1],
            2,
            &SumEvaluator,
            0,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Manifest(_)));
    }

    #[test]
    fn csv_layout() {
        let (ckpt, manifest) = toy();
        let curves = profile(&ckpt, &manifest, &names(2), &[2], 2, &SumEvaluator, 3).unwrap();
        let csv = curves_to_csv(&curves);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "layer,chi,metric,baseline,seed");
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[1].starts_with("layers.0.weight,2,"));
        assert!(lines[2].starts_with("layers.0.weight,full,"));
        for line in &lines[1..] {
            assert!(line.ends_with(",3"), "{line}");
            assert_eq!(line.split(',').count(), 5);
        }
    }
}
