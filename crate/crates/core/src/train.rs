//! Training protocol: sparse categorical cross-entropy on softmax outputs,
//! Adam, per-epoch exponential learning-rate decay.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{softmax_stable, ActivationKind};
use crate::data::{load_dataset, minibatches, Dataset, Subset};
use crate::error::{Error, Result};
use crate::model::{backward, build_model, forward_full, Architecture, ModelParams};
use crate::optim::{AdamState, LrSchedule};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub activation: ActivationKind,
    pub lr0: f64,
    pub decay: f64,
    pub hidden: usize,
    pub data_root: Option<PathBuf>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            activation: ActivationKind::Asu,
            lr0: 1e-3,
            decay: 0.1,
            hidden: 64,
            data_root: None,
            train_subset: None,
            test_subset: None,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            activation: self.activation,
            ..Architecture::default()
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr0, self.decay)
    }

    pub fn subset(&self) -> Subset {
        Subset {
            train: self.train_subset,
            test: self.test_subset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        self.schedule()?;
        self.architecture().validate()
    }

    /// Shuffle seed of one epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

/// Loss `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn sparse_cce_with_softmax<T: Element>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Usage(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let sum: T = logits.iter().map(|&x| (x - max).exp()).sum();
    let loss = sum.ln() - (logits[label] - max);
    if !loss.is_finite() {
        return Err(Error::divergence("loss"));
    }
    let mut grad = softmax_stable(logits);
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Loss, correctness and parameter gradients for one example.
pub fn example_gradients<T: Element>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    label: usize,
) -> Result<(T, bool, Vec<Tensor<T>>)> {
    let fwd = forward_full(params, image)?;
    let (loss, grad) = sparse_cce_with_softmax(fwd.logits.data(), label)?;
    let correct = fwd.logits.argmax() == label;
    let grad = Tensor::from_vec(fwd.logits.dims(), grad)?;
    let grads = backward(params, &fwd.trace, &grad)?;
    Ok((loss, correct, grads))
}

/// Mean loss and top-1 accuracy; parameters are not touched.
pub fn evaluate(params: &ModelParams<f32>, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let per_example: Vec<(f64, bool)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let fwd = forward_full(params, &data.images[i])?;
            let label = data.labels[i] as usize;
            let (loss, _) = sparse_cce_with_softmax(fwd.logits.data(), label)?;
            Ok((loss as f64, fwd.logits.argmax() == label))
        })
        .collect::<Result<_>>()?;
    let n = per_example.len() as f64;
    let loss = per_example.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per_example.iter().filter(|(_, c)| *c).count() as f64 / n;
    Ok((loss, acc))
}

/// Running statistics of one training epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// One pass over `data` in seeded minibatches, one Adam step per batch with
/// the batch-averaged gradient. Loss and accuracy are averaged over the
/// examples as they were seen during the epoch.
pub fn train_epoch(
    params: &mut ModelParams<f32>,
    state: &mut AdamState<f32>,
    data: &Dataset,
    batch_size: usize,
    lr: f64,
    epoch_seed: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let mut loss_sum = 0f64;
    let mut correct = 0usize;
    for (b, batch) in minibatches(data.len(), batch_size, epoch_seed)?
        .iter()
        .enumerate()
    {
        let model = &*params;
        let results: Vec<(f32, bool, Vec<Tensor<f32>>)> = batch
            .par_iter()
            .map(|&i| example_gradients(model, &data.images[i], data.labels[i] as usize))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::Divergence { location } => Error::Divergence {
                    location: format!("{location} (batch {b})"),
                },
                other => other,
            })?;

        // ordered reduction keeps the sum independent of the thread count
        let mut iter = results.into_iter();
        let (l0, c0, mut grads) = iter.next().expect("batches are non-empty");
        loss_sum += l0 as f64;
        correct += c0 as usize;
        for (l, c, g) in iter {
            loss_sum += l as f64;
            correct += c as usize;
            for (acc, g) in grads.iter_mut().zip(&g) {
                acc.add_assign(g)?;
            }
        }
        let scale = 1.0 / batch.len() as f32;
        grads.iter_mut().for_each(|g| g.scale(scale));
        state.step(&mut params.tensors_mut(), &grads, lr)?;
    }
    let n = data.len() as f64;
    Ok(EpochStats {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
    })
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Train from a freshly initialized model on in-memory data. `on_epoch` is
/// called after every epoch.
pub fn fit_with_data(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitOutcome> {
    config.validate()?;
    let schedule = config.schedule()?;
    let mut params = build_model::<f32>(config.architecture(), config.seed)?;
    let mut state = AdamState::new(params.tensors());
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = schedule.lr_at_epoch(epoch);
        let stats = train_epoch(
            &mut params,
            &mut state,
            train,
            config.batch_size,
            lr,
            config.epoch_seed(epoch),
        )
        .map_err(|e| match e {
            Error::Divergence { location } => Error::Divergence {
                location: format!("epoch {epoch}: {location}"),
            },
            other => other,
        })?;
        let (val_loss, val_acc) = evaluate(&params, val)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_loss,
            val_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(FitOutcome { params, metrics })
}

/// Load the configured dataset and train; validation uses the test split.
pub fn fit(config: &TrainConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<FitOutcome> {
    config.validate()?;
    let root = config
        .data_root
        .as_deref()
        .ok_or_else(|| Error::Usage("no dataset directory configured".into()))?;
    let (train, test) = load_dataset(root, config.subset(), config.seed)?;
    fit_with_data(config, &train, &test, on_epoch)
}
