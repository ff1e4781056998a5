use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{gradients, LossParams, PairedBatch};
use super::{seeded_rng, streams, AdamState, Probe, ProbeConfig};
use crate::error::{Error, Result};
use crate::feature_store::{class_counts, Label, PairedSample};
use crate::metrics;

/// Validation metrics reported once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub composite: f64,
    pub ece: f64,
    pub auroc: f64,
}

pub trait EpochValidator {
    fn validate(&mut self, epoch: usize, probe: &Probe) -> Result<ValidationScore>;
}

/// Scores the base view of a labeled validation set.
pub struct DatasetValidator {
    d_h: usize,
    features: Vec<f64>,
    labels: Vec<bool>,
}

impl DatasetValidator {
    pub fn new(val: &[PairedSample]) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::Empty("validation set is empty".into()));
        }
        let labels: Vec<bool> = val.iter().map(|s| s.y).collect();
        if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
            return Err(Error::UndefinedMetric(
                "validation set has a single class, AUROC is undefined".into(),
            ));
        }
        let d_h = val[0].h_base.len();
        let mut features = Vec::with_capacity(val.len() * d_h);
        for s in val {
            if s.h_base.len() != d_h {
                return Err(Error::Dimension {
                    expected: d_h,
                    got: s.h_base.len(),
                });
            }
            features.extend_from_slice(&s.h_base);
        }
        Ok(DatasetValidator { d_h, features, labels })
    }
}

impl EpochValidator for DatasetValidator {
    fn validate(&mut self, _epoch: usize, probe: &Probe) -> Result<ValidationScore> {
        if probe.d_h != self.d_h {
            return Err(Error::Dimension {
                expected: probe.d_h,
                got: self.d_h,
            });
        }
        let conf = probe.predict_rows(&self.features, self.labels.len())?;
        let ece = metrics::ece(&conf, &self.labels, metrics::DEFAULT_BINS)?;
        let auroc = metrics::auroc(&conf, &self.labels)?;
        Ok(ValidationScore {
            composite: metrics::composite(auroc, ece),
            ece,
            auroc,
        })
    }
}

/// Patience-based early stopping on a score to maximize.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one validation score. Returns `(improved, stop)`; only a
    /// strict improvement resets the patience counter.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bce: f64,
    pub brier: f64,
    pub rank: f64,
    pub total: f64,
    pub val_composite: f64,
    pub val_ece: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the retained checkpoint.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub w_plus: f64,
}

impl TrainHistory {
    pub fn composites(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_composite).collect()
    }

    pub fn best_composite(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_composite
    }
}

/// Decision of an external observer after each validated epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub probe: Probe,
    pub history: TrainHistory,
    /// True when the observer stopped the run.
    pub interrupted: bool,
}

/// Trains with the default validation set scorer and no external observer.
pub fn train(train_set: &[PairedSample], val_set: &[PairedSample], config: &ProbeConfig) -> Result<(Probe, TrainHistory)> {
    let mut validator = DatasetValidator::new(val_set)?;
    let out = train_with(train_set, config, &mut validator, &mut |_, _| EpochControl::Continue)?;
    Ok((out.probe, out.history))
}

/// Minibatch Adam on the three-term loss with per-epoch validation,
/// best-checkpoint retention and patience stopping. `on_epoch` sees each
/// epoch's composite score and may stop the run early.
pub fn train_with(
    train_set: &[PairedSample],
    config: &ProbeConfig,
    validator: &mut dyn EpochValidator,
    on_epoch: &mut dyn FnMut(usize, f64) -> EpochControl,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let d_h = train_set[0].h_base.len();
    if let Some(s) = train_set
        .iter()
        .find(|s| s.h_base.len() != d_h || s.h_blank.len() != d_h)
    {
        return Err(Error::Dimension {
            expected: d_h,
            got: s.h_base.len().min(s.h_blank.len()),
        });
    }
    let (n_plus, n_minus) = class_counts(train_set.iter().map(|s| Label::from_bool(s.y)))?;
    if n_plus == 0 || n_minus == 0 {
        return Err(Error::Validation(
            "training split needs both correct and incorrect samples".into(),
        ));
    }
    let params = LossParams {
        w_plus: n_minus as f64 / n_plus as f64,
        beta: config.beta,
        lambda: config.lambda,
        gamma: config.gamma,
    };

    let mut probe = Probe::init(config, d_h)?;
    let mut adam = AdamState::new(&probe);
    let mut shuffle_rng = seeded_rng(config.seed, streams::SHUFFLE);
    let mut dropout_rng = seeded_rng(config.seed, streams::DROPOUT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_probe = probe.clone();
    let mut epochs = Vec::new();
    let mut interrupted = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(config.batch_size) {
            let batch = PairedBatch::from_samples(d_h, chunk.iter().map(|&i| &train_set[i]));
            let rows = batch.rows();
            let mb = probe.sample_masks(rows, &mut dropout_rng);
            let mk = probe.sample_masks(rows, &mut dropout_rng);
            let (loss, grads) = gradients(&batch, &probe, &params, Some((&mb, &mk)))?;
            adam.step(&mut probe, &grads, config.learning_rate, config.weight_decay);
            let w = rows as f64;
            sums[0] += w * loss.bce;
            sums[1] += w * loss.brier;
            sums[2] += w * loss.rank;
            sums[3] += w * loss.total;
        }
        if probe.layers.iter().any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite())) {
            return Err(Error::Validation(format!("parameters diverged at epoch {epoch}")));
        }
        let n = train_set.len() as f64;
        let score = validator.validate(epoch, &probe)?;
        epochs.push(EpochRecord {
            epoch,
            bce: sums[0] / n,
            brier: sums[1] / n,
            rank: sums[2] / n,
            total: sums[3] / n,
            val_composite: score.composite,
            val_ece: score.ece,
            val_auroc: score.auroc,
        });
        let (improved, stop) = stopper.observe(epoch, score.composite);
        if improved {
            best_probe.clone_from(&probe);
        }
        if on_epoch(epoch, score.composite) == EpochControl::Stop {
            interrupted = true;
            break;
        }
        if stop {
            break;
        }
    }

    if stopper.best_epoch == 0 {
        return Err(Error::Validation("no epoch produced a comparable validation score".into()));
    }
    let stopped_epoch = epochs.len();
    Ok(TrainOutcome {
        probe: best_probe,
        history: TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch,
            stopped_epoch,
            w_plus: params.w_plus,
        },
        interrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::HashId;

    struct Scripted(Vec<f64>);

    impl EpochValidator for Scripted {
        fn validate(&mut self, epoch: usize, _probe: &Probe) -> Result<ValidationScore> {
            let c = self.0.get(epoch - 1).copied().unwrap_or(f64::NEG_INFINITY);
            Ok(ValidationScore {
                composite: c,
                ece: 0.0,
                auroc: 0.0,
            })
        }
    }

    fn tiny_data(n: usize) -> Vec<PairedSample> {
        (0..n)
            .map(|i| {
                let y = i % 3 != 0;
                let x = if y { 1.0 } else { -1.0 } + 0.1 * (i as f64).sin();
                PairedSample {
                    hash_id: HashId([i as u8; 16]),
                    h_base: vec![x, 0.5 * x, (i as f64).cos()],
                    h_blank: vec![0.0, 0.0, (i as f64).cos()],
                    y,
                    dataset: String::new(),
                }
            })
            .collect()
    }

    fn tiny_config() -> ProbeConfig {
        ProbeConfig {
            hidden_widths: vec![4],
            max_epochs: 200,
            batch_size: 8,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn stopper_peak_then_decline() {
        let mut s = EarlyStopping::new(20);
        let mut stopped = None;
        for epoch in 1..=200 {
            let score = if epoch <= 5 { epoch as f64 } else { 5.0 - 0.01 * (epoch - 5) as f64 };
            if s.observe(epoch, score).1 {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(25));
        assert_eq!(s.best_epoch, 5);
    }

    #[test]
    fn monotone_landscape_runs_to_max_epochs() {
        let data = tiny_data(24);
        let mut v = Scripted((1..=200).map(|e| e as f64 / 200.0).collect());
        let out = train_with(&data, &tiny_config(), &mut v, &mut |_, _| EpochControl::Continue).unwrap();
        assert_eq!(out.history.best_epoch, 200);
        assert_eq!(out.history.stopped_epoch, 200);
    }

    #[test]
    fn scripted_peak_stops_after_patience() {
        let data = tiny_data(24);
        let script: Vec<f64> = (1..=200)
            .map(|e| if e <= 5 { 0.5 + 0.05 * e as f64 } else { 0.7 - 0.001 * e as f64 })
            .collect();
        let mut v = Scripted(script);
        let out = train_with(&data, &tiny_config(), &mut v, &mut |_, _| EpochControl::Continue).unwrap();
        assert_eq!(out.history.best_epoch, 5);
        assert_eq!(out.history.stopped_epoch, 25);
        let best = out.history.best_composite();
        assert!(out.history.composites().iter().all(|&c| c <= best));
    }

    #[test]
    fn best_checkpoint_is_returned() {
        let data = tiny_data(24);
        let cfg = ProbeConfig {
            max_epochs: 6,
            ..tiny_config()
        };
        // peak at epoch 3: the returned probe must be the epoch-3 weights
        let mut v = Scripted(vec![0.1, 0.2, 0.9, 0.3, 0.2, 0.1]);
        let full = train_with(&data, &cfg, &mut v, &mut |_, _| EpochControl::Continue).unwrap();
        let cfg3 = ProbeConfig { max_epochs: 3, ..cfg };
        let mut v3 = Scripted(vec![0.1, 0.2, 0.9]);
        let short = train_with(&data, &cfg3, &mut v3, &mut |_, _| EpochControl::Continue).unwrap();
        assert_eq!(full.probe, short.probe);
    }

    #[test]
    fn observer_can_interrupt() {
        let data = tiny_data(24);
        let mut v = Scripted((1..=200).map(|e| e as f64).collect());
        let out = train_with(&data, &tiny_config(), &mut v, &mut |e, _| {
            if e == 7 {
                EpochControl::Stop
            } else {
                EpochControl::Continue
            }
        })
        .unwrap();
        assert!(out.interrupted);
        assert_eq!(out.history.stopped_epoch, 7);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = tiny_data(60);
        let cfg = ProbeConfig {
            max_epochs: 30,
            ..tiny_config()
        };
        let (p1, h1) = train(&data, &data, &cfg).unwrap();
        let (p2, h2) = train(&data, &data, &cfg).unwrap();
        assert_eq!(p1.to_bytes(), p2.to_bytes());
        assert_eq!(h1, h2);
        assert!(h1.best_composite() > 0.8);
        assert_eq!(h1.w_plus, 20.0 / 40.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = tiny_data(12);
        assert!(matches!(train(&[], &data, &tiny_config()), Err(Error::Empty(_))));
        assert!(matches!(train(&data, &[], &tiny_config()), Err(Error::Empty(_))));
        let single: Vec<_> = data.iter().filter(|s| s.y).cloned().collect();
        assert!(matches!(train(&data, &single, &tiny_config()), Err(Error::UndefinedMetric(_))));
    }
}
