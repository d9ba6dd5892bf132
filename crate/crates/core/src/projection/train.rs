use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, mix, stack_pairs, AdamConfig, AdamState, DropoutMask, HeadSpec, Mode,
    ProjectionError, ProjectionModel,
};
use crate::compose::ComposedPair;
use crate::metrics::spearman;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Applied to activated layers only.
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            batch_size: 512,
            dropout_rate: 0.15,
            max_epochs: 50,
            seed: 0,
            early_stop_patience: 20,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProjectionError> {
        let bad = |msg: &str| Err(ProjectionError::InvalidConfig(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation scores were constant.
    pub val_spearman: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    /// 0 means no epoch beat the initial weights.
    pub best_epoch: usize,
    pub best_val_spearman: Option<f64>,
    pub history: Vec<EpochRecord>,
}

fn validation_spearman(model: &ProjectionModel, val: &[ComposedPair]) -> Result<Option<f64>, ProjectionError> {
    let scores = model.score_pairs(val)?;
    let ratings: Vec<f64> = val.iter().map(|p| p.rating).collect();
    Ok(spearman(&scores, &ratings).ok())
}

/// Mini-batch Adam on the mean batch loss, keeping the weights with the best
/// validation Spearman (earliest on ties) and stopping after
/// `early_stop_patience` epochs without improvement.
pub fn train(
    train_pairs: &[ComposedPair],
    val_pairs: &[ComposedPair],
    config: &TrainConfig,
    head: HeadSpec,
) -> Result<TrainOutcome, ProjectionError> {
    config.validate()?;
    let d = match train_pairs.first() {
        Some(p) => p.dim(),
        None => return Err(ProjectionError::EmptyTrainSet),
    };
    if val_pairs.len() < 2 {
        return Err(ProjectionError::EmptyValidationSet);
    }
    if let Some(p) = val_pairs.iter().find(|p| p.dim() != d) {
        return Err(ProjectionError::DimMismatch {
            expected: d,
            got: p.dim(),
        });
    }
    let (e1, e2) = stack_pairs(train_pairs, d)?;
    let ratings: Vec<f64> = train_pairs.iter().map(|p| p.rating).collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix(config.seed));
    let mut model = ProjectionModel::init(head, d, config.dropout_rate, &mut init_rng)?;
    let mut optim: Vec<AdamState> = model
        .layers()
        .iter()
        .map(|w| AdamState::new(w.dim(), config.adam()))
        .collect();

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score: Option<f64> = None;
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ mix(epoch as u64)));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let b1: Array2<f64> = e1.select(Axis(0), batch);
            let b2: Array2<f64> = e2.select(Axis(0), batch);
            let r: Vec<f64> = batch.iter().map(|&i| ratings[i]).collect();
            let masks: Vec<DropoutMask> = (0..2u64)
                .flat_map(|branch| {
                    let model = &model;
                    batch.iter().map(move |&i| {
                        DropoutMask::draw(model, config.seed, epoch as u64, i as u64, branch)
                    })
                })
                .collect();
            let (loss, grads) =
                model.batch_loss_and_grad(b1.view(), b2.view(), &r, Mode::Train, Some(&masks))?;
            loss_sum += loss * batch.len() as f64;
            for ((w, g), state) in model.layers_mut().iter_mut().zip(&grads).zip(&mut optim) {
                adam_step(state, w, g)?;
            }
        }
        if model.layers().iter().any(|w| w.iter().any(|x| !x.is_finite())) {
            return Err(ProjectionError::NonFinite("weights"));
        }
        let val_spearman = validation_spearman(&model, val_pairs)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_pairs.len() as f64,
            val_spearman,
        });
        if let Some(score) = val_spearman {
            if best_score.is_none_or(|b| score > b) {
                best = model.clone();
                best_epoch = epoch;
                best_score = Some(score);
            }
        }
        if best_epoch == epoch {
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_val_spearman: best_score,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::HeadKind;
    use rand::Rng;

    fn toy_pairs(n: usize, d: usize, seed: u64) -> Vec<ComposedPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let e1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let e2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let r = 0.5 + 0.5 * crate::metrics::cosine(&e1[..2], &e2[..2]).unwrap();
                ComposedPair {
                    record_id: i.to_string(),
                    e1,
                    e2,
                    rating: r,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let pairs = toy_pairs(10, 6, 0);
        let config = TrainConfig {
            max_epochs: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let head = HeadSpec::new(HeadKind::Linear, 3);
        let out = train(&pairs, &pairs, &config, head).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(4));
        let init = ProjectionModel::init(head, 6, config.dropout_rate, &mut rng).unwrap();
        assert_eq!(out.model, init);
    }

    #[test]
    fn same_seed_same_model() {
        let pairs = toy_pairs(60, 8, 1);
        let config = TrainConfig {
            max_epochs: 5,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let head = HeadSpec::new(HeadKind::Nonlinear, 4);
        let a = train(&pairs[..40], &pairs[40..], &config, head).unwrap();
        let b = train(&pairs[..40], &pairs[40..], &config, head).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let c = train(&pairs[..40], &pairs[40..], &TrainConfig { seed: 10, ..config }, head).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn training_reduces_loss() {
        let pairs = toy_pairs(200, 8, 2);
        let config = TrainConfig {
            max_epochs: 40,
            batch_size: 32,
            lr: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&pairs[..150], &pairs[150..], &config, HeadSpec::new(HeadKind::Linear, 4)).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
        let best = out.best_val_spearman.unwrap();
        assert!(out.history.iter().all(|h| h.val_spearman.unwrap_or(f64::MIN) <= best));
    }

    #[test]
    fn early_stopping_and_errors() {
        let pairs = toy_pairs(40, 4, 3);
        let config = TrainConfig {
            max_epochs: 200,
            early_stop_patience: 2,
            batch_size: 8,
            seed: 0,
            ..TrainConfig::default()
        };
        let out = train(&pairs[..30], &pairs[30..], &config, HeadSpec::new(HeadKind::Linear, 2)).unwrap();
        assert!(out.history.len() < 200);
        assert!(out.history.len() - out.best_epoch <= 2);

        assert!(matches!(
            train(&[], &pairs, &config, HeadSpec::new(HeadKind::Linear, 2)),
            Err(ProjectionError::EmptyTrainSet)
        ));
        let mut odd = pairs.clone();
        odd[35].e1.push(0.0);
        odd[35].e2.push(0.0);
        assert!(matches!(
            train(&odd[..30], &odd[30..], &config, HeadSpec::new(HeadKind::Linear, 2)),
            Err(ProjectionError::DimMismatch { .. })
        ));
        let bad = TrainConfig { batch_size: 0, ..config };
        assert!(train(&pairs, &pairs, &bad, HeadSpec::new(HeadKind::Linear, 2)).is_err());
    }
}
