//! Minibatch training with plateau decay, early stopping on the
//! validation loss, and restoration of the best weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{stack, LabeledImage};
use crate::error::{Result, XblError};
use crate::graph::{Graph, Var};
use crate::losses::{
    confounder_masks, cross_entropy, exbl_triplet_graph, l2_penalty, rrr_loss, rrr_loss_and_param_grads,
    total_loss, ExemplarPair, LossWeights,
};
use crate::metrics::EVAL_CHUNK;
use crate::model::{argmax, Classifier, ForwardOptions};
use crate::optim::{Adam, AdamConfig, PlateauDecay};
use crate::tensor::Tensor;

/// The explanation term added to cross-entropy.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CeOnly,
    Exbl(&'a ExemplarPair),
    Rrr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
    pub early_stop_patience: usize,
    pub weights: LossWeights,
    /// Drives shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig::default(),
            lr_decay_factor: 0.5,
            lr_decay_patience: 3,
            early_stop_patience: 5,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from `best_epoch`.
    pub model: Classifier,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Loss pieces of one batch, each a per-instance mean except `l2`.
struct BatchLoss {
    ce: f64,
    expl: f64,
    correct: usize,
}

fn labels_of(images: &[&LabeledImage]) -> Vec<usize> {
    images.iter().map(|im| im.label).collect()
}

/// One optimizer step on `batch`; returns the value of the minimized loss.
fn train_step(
    model: &mut Classifier,
    opt: &mut Adam,
    batch: &[&LabeledImage],
    objective: Objective<'_>,
    w: &LossWeights,
    dropout_seed: u64,
) -> Result<f64> {
    let x = stack(batch)?;
    let labels = labels_of(batch);
    let mut g = Graph::<f32>::training(dropout_seed);
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, xv, ForwardOptions::default())?;
    let ce = cross_entropy(&mut g, fwd.probs, &labels)?;
    let trainable: Vec<Var> = fwd
        .params
        .iter()
        .zip(model.trainable_mask())
        .filter(|(_, t)| *t)
        .map(|(&v, _)| v)
        .collect();
    let l2 = l2_penalty(&mut g, &trainable, w.lambda_l2)?;
    let expl = match objective {
        Objective::Exbl(pair) if w.expl_scale > 0.0 => {
            exbl_triplet_graph(&mut g, model, &fwd, xv, &x, pair, w.margin)?
        }
        _ => g.constant(Tensor::scalar(0.0)),
    };
    let loss = total_loss(&mut g, ce, expl, l2, w)?;
    g.backward(loss)?;
    let mut value = g.value(loss).item()? as f64;
    let mut grads: Vec<Option<Vec<f32>>> = fwd.params.iter().map(|&p| g.grad(p).map(<[f32]>::to_vec)).collect();
    if matches!(objective, Objective::Rrr) && w.expl_scale > 0.0 {
        let masks = confounder_masks(batch)?;
        let (r, rg) = rrr_loss_and_param_grads(model, &x, &masks)?;
        value += w.expl_scale * r;
        for (acc, extra) in grads.iter_mut().zip(rg) {
            if let (Some(a), Some(e)) = (acc.as_mut(), extra) {
                a.iter_mut().zip(e).for_each(|(a, e)| *a += (w.expl_scale as f32) * e);
            }
        }
    }
    opt.step(model, &grads)?;
    Ok(value)
}

fn eval_batch(model: &Classifier, batch: &[&LabeledImage], objective: Objective<'_>, margin: f64) -> Result<BatchLoss> {
    let x = stack(batch)?;
    let labels = labels_of(batch);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, xv, ForwardOptions::default())?;
    let ce = cross_entropy(&mut g, fwd.probs, &labels)?;
    let ce = g.value(ce).item()? as f64 * batch.len() as f64;
    let k = model.num_classes();
    let correct = g
        .value(fwd.probs)
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let expl = match objective {
        Objective::CeOnly => 0.0,
        Objective::Exbl(pair) => {
            let t = exbl_triplet_graph(&mut g, model, &fwd, xv, &x, pair, margin)?;
            g.value(t).item()? as f64
        }
        Objective::Rrr => rrr_loss::<f32>(model, &x, &confounder_masks(batch)?)?,
    };
    Ok(BatchLoss { ce, expl, correct })
}

fn l2_value(model: &Classifier, lambda: f64) -> f64 {
    let mask = model.trainable_mask();
    lambda
        * model
            .params()
            .iter()
            .zip(mask)
            .filter(|(_, t)| *t)
            .flat_map(|(p, _)| p.value.data().iter().map(|&v| (v as f64) * (v as f64)))
            .sum::<f64>()
}

/// Validation loss and accuracy. The loss is mean cross-entropy plus
/// `expl_scale` times the mean per-instance explanation term plus the L2
/// penalty, so it is comparable across validation sets of any size.
pub fn validation_loss(
    model: &Classifier,
    data: &[LabeledImage],
    objective: Objective<'_>,
    w: &LossWeights,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(XblError::Dataset("validation split is empty".into()));
    }
    let (mut ce, mut expl, mut correct) = (0.0, 0.0, 0usize);
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let b = eval_batch(model, &refs, objective, w.margin)?;
        ce += b.ce;
        expl += b.expl;
        correct += b.correct;
    }
    let n = data.len() as f64;
    let loss = ce / n + w.expl_scale * expl / n + l2_value(model, w.lambda_l2);
    Ok((loss, correct as f64 / n))
}

/// Trains `model` and returns the weights of the epoch with the lowest
/// validation loss. Stops once that loss has not improved for
/// `early_stop_patience` epochs.
pub fn train(
    mut model: Classifier,
    train: &[LabeledImage],
    validation: &[LabeledImage],
    objective: Objective<'_>,
    s: &TrainSettings,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(XblError::Dataset("training split is empty".into()));
    }
    if s.batch_size == 0 || s.epochs == 0 {
        return Err(XblError::Config("epochs and batch_size must be positive".into()));
    }
    s.adam.validate()?;
    s.weights.validate()?;
    if matches!(objective, Objective::Rrr) {
        let refs: Vec<&LabeledImage> = train.iter().chain(validation).collect();
        confounder_masks(&refs).map_err(|_| {
            XblError::Dataset("the input-gradient penalty needs confounder masks on every image".into())
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut opt = Adam::new(s.adam.clone(), &model);
    let mut decay = PlateauDecay::new(s.lr_decay_factor, s.lr_decay_patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Classifier)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=s.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(s.batch_size) {
            let batch: Vec<&LabeledImage> = idx.iter().map(|&i| &train[i]).collect();
            total += train_step(&mut model, &mut opt, &batch, objective, &s.weights, rng.gen())?;
            batches += 1;
        }
        let (val_loss, val_acc) = validation_loss(&model, validation, objective, &s.weights)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss,
            val_acc,
            lr: opt.lr(),
        });
        opt.set_lr(decay.observe(val_loss, opt.lr()));
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= s.early_stop_patience {
                stopped_early = epoch < s.epochs;
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}
