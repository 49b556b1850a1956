//! Minibatch training loop over [`ToyModel`] with seeded shuffling, two
//! optimizers, and a scope switch so healing can touch MPO cores only.

use super::data::{batch_matrix, ToyDataset};
use super::{ParamPart, ToyModel};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradient update rule. Both keep per-parameter state aligned with the
/// model's slot order.
#[derive(Clone, Copy, Debug)]
pub enum Optimizer {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Optimizer {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which parameters a run is allowed to move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableScope {
    All,
    /// Only [`ParamPart::Core`] slots — dense weights and every bias stay
    /// frozen. This is the healing configuration.
    MpoCoresOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Seeds the epoch shuffles; everything else about a run is already
    /// deterministic.
    pub seed: u64,
    pub scope: TrainableScope,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            scope: TrainableScope::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        match self.optimizer {
            Optimizer::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidArgument(format!(
                        "momentum must lie in [0, 1), got {momentum}"
                    )));
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::InvalidArgument(format!(
                        "Adam betas must lie in [0, 1), got {beta1} and {beta2}"
                    )));
                }
                if eps.is_nan() || eps <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "Adam epsilon must be positive, got {eps}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Test accuracy measured after the epoch's updates.
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
    /// Set when a batch loss stopped being finite; `epochs` then holds the
    /// completed epochs up to that point.
    pub diverged: bool,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }
}

/// Run minibatch gradient descent in place and report per-epoch metrics.
///
/// Batch order reshuffles every epoch from one seeded stream, optimizer
/// state persists across epochs, and a non-finite batch loss aborts the run
/// with the history collected so far flagged as diverged.
pub fn train(model: &mut ToyModel, dataset: &ToyDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let in_dim = model.layer(0).expect("models are non-empty").input_dim();
    let n = dataset.train_labels.len();
    if n == 0 || dataset.train_inputs.len() != n * in_dim {
        return Err(Error::ShapeMismatch(format!(
            "dataset carries {} training values for {} labels of dim {in_dim}",
            dataset.train_inputs.len(),
            n
        )));
    }

    let slots = model.param_slots();
    let trainable: Vec<bool> = slots
        .iter()
        .map(|s| match cfg.scope {
            TrainableScope::All => true,
            TrainableScope::MpoCoresOnly => matches!(s.part, ParamPart::Core(_)),
        })
        .collect();
    if !trainable.iter().any(|&t| t) {
        return Err(Error::InvalidArgument(
            "scope selects no parameters (no tensorized layers to heal?)".into(),
        ));
    }

    // First and second moment buffers per slot; SGD-with-momentum uses only
    // the first.
    let mut moment1: Vec<Vec<f64>> = slots
        .iter()
        .map(|&s| vec![0.0; model.param(s).map(<[f64]>::len).unwrap_or(0)])
        .collect();
    let mut moment2: Vec<Vec<f64>> = moment1.clone();
    let mut step = 0u64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_matrix(&dataset.train_inputs, in_dim, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.train_labels[i]).collect();
            let (loss, grads) = match model.loss_and_grads(&x, &labels) {
                Ok(pair) => pair,
                Err(e) if e.is_numerical() => {
                    history.diverged = true;
                    return Ok(history);
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * chunk.len() as f64;

            step += 1;
            for (i, slot) in slots.iter().enumerate() {
                if !trainable[i] {
                    continue;
                }
                let g = &grads[i];
                let p = model.param_mut(*slot)?;
                match cfg.optimizer {
                    Optimizer::SgdMomentum { momentum } => {
                        let m = &mut moment1[i];
                        for e in 0..p.len() {
                            m[e] = momentum * m[e] + g[e];
                            p[e] -= cfg.learning_rate * m[e];
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let bias1 = 1.0 - beta1.powi(step as i32);
                        let bias2 = 1.0 - beta2.powi(step as i32);
                        let (m, v) = (&mut moment1[i], &mut moment2[i]);
                        for e in 0..p.len() {
                            m[e] = beta1 * m[e] + (1.0 - beta1) * g[e];
                            v[e] = beta2 * v[e] + (1.0 - beta2) * g[e] * g[e];
                            let m_hat = m[e] / bias1;
                            let v_hat = v[e] / bias2;
                            p[e] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
        history.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            test_accuracy: model.evaluate(&dataset.test_inputs, &dataset.test_labels)?,
        });
    }
    Ok(history)
}

/// Render a history as `epoch,train_loss,test_accuracy` CSV.
pub fn history_to_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,test_accuracy\n");
    for e in &history.epochs {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.test_accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::data::generate_dataset;
    use super::*;
    use crate::trainer::ToyModel;

    fn snapshot(model: &ToyModel) -> Vec<Vec<f64>> {
        model
            .param_slots()
            .into_iter()
            .map(|s| model.param(s).unwrap().to_vec())
            .collect()
    }

    fn small_setup(seed: u64) -> (ToyModel, ToyDataset) {
        let model = ToyModel::new_dense(&[64, 32, 8], seed).unwrap();
        let dataset = generate_dataset(seed.wrapping_add(1), 600, 200);
        (model, dataset)
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (mut a, data_a) = small_setup(7);
        let (mut b, data_b) = small_setup(7);
        let ha = train(&mut a, &data_a, &cfg).unwrap();
        let hb = train(&mut b, &data_b, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(snapshot(&a), snapshot(&b));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (mut model, dataset) = small_setup(3);
        let before = snapshot(&model);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &dataset, &cfg).unwrap();
        assert_eq!(snapshot(&model), before);
        assert_eq!(history.epochs.len(), 2);
        assert!(!history.diverged);
        // With no movement, both epochs must report the same numbers.
        assert_eq!(
            history.epochs[0].test_accuracy,
            history.epochs[1].test_accuracy
        );
    }

    #[test]
    fn cores_only_scope_freezes_everything_else() {
        let (mut model, dataset) = small_setup(11);
        model.tensorize_layer(0, 2, 4).unwrap();
        let before = snapshot(&model);
        let slots = model.param_slots();
        let cfg = TrainConfig {
            epochs: 1,
            scope: TrainableScope::MpoCoresOnly,
            ..TrainConfig::default()
        };
        train(&mut model, &dataset, &cfg).unwrap();
        let after = snapshot(&model);
        let mut cores_moved = false;
        for (i, slot) in slots.iter().enumerate() {
            match slot.part {
                ParamPart::Core(_) => cores_moved |= before[i] != after[i],
                _ => assert_eq!(before[i], after[i], "{slot:?} should be frozen"),
            }
        }
        assert!(cores_moved);
    }

    #[test]
    fn cores_only_scope_needs_a_tensorized_layer() {
        let (mut model, dataset) = small_setup(5);
        let cfg = TrainConfig {
            scope: TrainableScope::MpoCoresOnly,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &dataset, &cfg).unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn a_short_run_beats_the_initial_model() {
        let (mut model, dataset) = small_setup(13);
        let initial = model
            .evaluate(&dataset.test_inputs, &dataset.test_labels)
            .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &dataset, &cfg).unwrap();
        let final_acc = history.final_accuracy().unwrap();
        assert!(
            final_acc > initial && final_acc > 0.5,
            "{initial} -> {final_acc}"
        );
        // Losses should trend down over the run.
        assert!(history.epochs.last().unwrap().train_loss < history.epochs[0].train_loss);
    }

    #[test]
    fn runaway_learning_rate_sets_the_diverged_flag() {
        let (mut model, dataset) = small_setup(17);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e3,
            optimizer: Optimizer::SgdMomentum { momentum: 0.9 },
            ..TrainConfig::default()
        };
        let history = train(&mut model, &dataset, &cfg).unwrap();
        assert!(history.diverged);
        assert!(history.epochs.len() < 50);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (mut model, dataset) = small_setup(1);
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: Optimizer::SgdMomentum { momentum: 1.0 },
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: Optimizer::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 0.0,
                },
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&mut model, &dataset, &cfg).is_err());
        }
    }

    #[test]
    fn history_csv_layout() {
        let history = TrainHistory {
            epochs: vec![
                EpochMetrics {
                    epoch: 1,
                    train_loss: 2.0,
                    test_accuracy: 0.5,
                },
                EpochMetrics {
                    epoch: 2,
                    train_loss: 1.5,
                    test_accuracy: 0.625,
                },
            ],
            diverged: false,
        };
        let csv = history_to_csv(&history);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,test_accuracy");
        assert_eq!(lines[1], "1,2,0.5");
        assert_eq!(lines[2], "2,1.5,0.625");
        assert_eq!(lines.len(), 3);
    }
}
