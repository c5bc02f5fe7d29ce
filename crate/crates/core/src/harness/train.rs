use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, subsample, Dataset, Split};
use crate::error::{Error, Result};
use crate::harness::{Checkpoint, TrainConfig};
use crate::model::{build, ForwardMode, Model};
use crate::ops::softmax_cross_entropy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Fraction of training images classified correctly during the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Loads the configured training split and trains on it. Writes the
/// checkpoint when the config names a path.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = config.dataset.kind.load(&config.dataset.root(), Split::Train)?;
    let outcome = train_on(config, &data)?;
    if let Some(path) = &config.checkpoint {
        outcome.checkpoint.save(path)?;
        info!("wrote checkpoint {}", path.display());
    }
    Ok(outcome)
}

/// Trains on `data`, which holds clean images in `[0, 1]`. Applies the
/// configured subsample, then normalizes.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if data.item_shape() != config.model.input_shape {
        return Err(Error::shape(
            "train",
            format!(
                "dataset items are {:?} but {} expects {:?}",
                data.item_shape(),
                config.model.id(),
                config.model.input_shape
            ),
        ));
    }
    let data = match config.subsample {
        Some(n) => subsample(data, n, config.seed)?,
        None => data.clone(),
    };
    let norm = config.dataset.normalization();
    let data = normalize(&data, &norm)?;

    let mut model: Model<f32> = build(&config.model, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let snapshot = |model: &Model<f32>, epochs| {
        Checkpoint::from_model(model, config.seed, config.dataset.kind, norm.clone(), epochs)
    };
    let mut last_good = snapshot(&model, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut correct = 0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let x = data.images.gather_batch(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            model.zero_grad();
            let logits = model.forward(&x, ForwardMode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    last_good: Some(Box::new(last_good)),
                });
            }
            correct += logits
                .argmax_rows()?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            loss_sum += loss as f64;
            batches += 1;
            model.backward(&grad)?;
            model.sgd_step(&config.sgd, epoch);
            if model.params().iter().any(|(_, p)| !p.value().all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    last_good: Some(Box::new(last_good)),
                });
            }
        }
        let stats = EpochStats {
            epoch,
            learning_rate: config.sgd.lr_at(epoch),
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        info!(
            "{} epoch {}: loss {:.4}, accuracy {:.4}, lr {}",
            config.model.id(),
            epoch + 1,
            stats.loss,
            stats.accuracy,
            stats.learning_rate
        );
        history.push(stats);
        last_good = snapshot(&model, epoch + 1);
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        history,
    })
}
