//! Mini-batch training with Adam, weighted binary cross-entropy and
//! validation-loss early stopping.

use std::path::Path;

use biastrial_core::seeds::rng_for;
use biastrial_core::simba_gen::{BiasGroup, ClassLabel, DatasetManifest, Split};
use biastrial_core::{Dims, Error, Result, TemplateVolume};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::mitigate::{BiasHead, SampleWeights};
use crate::model::{backward, dropout_seed, forward, predict_logits, update_moving_stats, Freeze, Grads, Mode, ModelParams};
use crate::real::{real, softplus, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Epochs before validation loss is monitored for early stopping.
    pub start_from_epoch: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            patience: 15,
            start_from_epoch: 40,
            max_epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the full-size network.
    pub fn full() -> Self {
        Self { learning_rate: 1e-4, start_from_epoch: 0, max_epochs: 200, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0 && self.epsilon > 0.0;
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !positive || !betas || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: u32,
    pub input: Vec<T>,
    pub label: bool,
    pub group: BiasGroup,
}

/// Volumes grouped by split, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData<T> {
    pub dims: Dims,
    pub train: Vec<Example<T>>,
    pub val: Vec<Example<T>>,
    pub test: Vec<Example<T>>,
}

impl SplitData<f32> {
    pub fn from_manifest(manifest: &DatasetManifest, volumes: &[TemplateVolume]) -> Result<Self> {
        if manifest.records.len() != volumes.len() {
            return Err(Error::Config("manifest/volume count mismatch".into()));
        }
        let dims = volumes.first().ok_or_else(|| Error::Config("empty dataset".into()))?.dims();
        let mut out = SplitData { dims, train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for (rec, vol) in manifest.records.iter().zip(volumes) {
            if vol.dims() != dims {
                return Err(Error::Shape { expected: dims, actual: vol.dims() });
            }
            let ex = Example {
                id: rec.id,
                input: vol.voxels.as_slice().to_vec(),
                label: rec.class == ClassLabel::Disease,
                group: rec.group,
            };
            match rec.split {
                Some(Split::Train) => out.train.push(ex),
                Some(Split::Val) => out.val.push(ex),
                Some(Split::Test) => out.test.push(ex),
                None => return Err(Error::Config(format!("subject {} has no split", rec.id))),
            }
        }
        Ok(out)
    }
}

impl<T: Real> SplitData<T> {
    /// Keeps only subjects of `group` in every split.
    pub fn restrict(&self, group: BiasGroup) -> Self {
        let keep = |v: &[Example<T>]| v.iter().filter(|e| e.group == group).cloned().collect();
        Self { dims: self.dims, train: keep(&self.train), val: keep(&self.val), test: keep(&self.test) }
    }

    pub fn cast<U: Real>(&self) -> SplitData<U> {
        let conv = |v: &[Example<T>]| {
            v.iter()
                .map(|e| Example {
                    id: e.id,
                    input: e.input.iter().map(|x| real(x.to_f64().unwrap())).collect(),
                    label: e.label,
                    group: e.group,
                })
                .collect()
        };
        SplitData { dims: self.dims, train: conv(&self.train), val: conv(&self.val), test: conv(&self.test) }
    }

    pub fn inputs(examples: &[Example<T>]) -> Vec<&[T]> {
        examples.iter().map(|e| e.input.as_slice()).collect()
    }
}

/// Mean (unweighted) binary cross-entropy and accuracy at threshold 0.5.
pub fn evaluate<T: Real>(params: &ModelParams<T>, examples: &[Example<T>], dims: Dims) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let logits = predict_logits(params, &SplitData::inputs(examples), dims)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (z, e) in logits.iter().zip(examples) {
        let z = z.to_f64().unwrap();
        loss += softplus(z) - if e.label { z } else { 0.0 };
        correct += usize::from((z >= 0.0) == e.label);
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Adam with the bias correction folded into the step size.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig, shapes: impl Iterator<Item = usize>) -> Self {
        let zeros: Vec<Vec<T>> = shapes.map(|n| vec![T::zero(); n]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn for_params(cfg: &TrainConfig, params: &ModelParams<T>) -> Self {
        Self::new(cfg, params.tensors.iter().map(|t| t.data.len()))
    }

    /// Applies one update to each `(slot, values, gradient)`; slots index the
    /// moment buffers.
    pub fn update<'a>(&mut self, tensors: impl Iterator<Item = (usize, &'a mut [T], &'a [T])>) {
        self.step += 1;
        let lr_t = self.lr * (1.0 - self.beta2.powi(self.step)).sqrt() / (1.0 - self.beta1.powi(self.step));
        let (b1, b2, eps, lr): (T, T, T, T) = (real(self.beta1), real(self.beta2), real(self.epsilon), real(lr_t));
        for (slot, values, grad) in tensors {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                values[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &Grads<T>, frozen: &Freeze) {
        let active: Vec<bool> =
            (0..params.tensors.len()).map(|i| params.tensors[i].trainable && !frozen.tensor_frozen(params, i)).collect();
        self.update(
            params
                .tensors
                .iter_mut()
                .zip(&grads.tensors)
                .enumerate()
                .filter(|(i, _)| active[*i])
                .map(|(i, (t, g))| (i, t.data.as_mut_slice(), g.as_slice())),
        );
    }
}

/// Extra objective added to the disease loss during training.
#[derive(Debug, Clone, Copy)]
pub enum LossTerm<'a, T> {
    /// `weight * confusion_loss(head(features))`; the head itself is fixed.
    Confusion { head: &'a BiasHead<T>, weight: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a, T> {
    pub weights: Option<&'a SampleWeights>,
    pub freeze: Option<Freeze>,
    pub terms: Vec<LossTerm<'a, T>>,
    /// Disables early stopping and best-epoch restoration.
    pub run_all_epochs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
    }
}

/// Per-batch weighted BCE, its logit gradient, and the auxiliary terms'
/// feature gradient. Returns the batch loss.
pub(crate) fn batch_objective<T: Real>(
    logits: &[T],
    features: &[T],
    labels: &[bool],
    weights: &[f64],
    terms: &[LossTerm<'_, T>],
) -> (f64, Vec<T>, Option<Vec<T>>) {
    let total: f64 = weights.iter().sum();
    let mut loss = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    for ((&z, &y), &w) in logits.iter().zip(labels).zip(weights) {
        let zf = z.to_f64().unwrap();
        loss += w * (softplus(zf) - if y { zf } else { 0.0 });
        let p = crate::real::sigmoid(z);
        let target = if y { T::one() } else { T::zero() };
        d_logits.push((p - target) * real(w / total));
    }
    loss /= total;

    let mut d_features: Option<Vec<T>> = None;
    for term in terms {
        match *term {
            LossTerm::Confusion { head, weight } => {
                let (l, g) = head.confusion_and_feature_grad(features);
                loss += weight * l;
                let g: Vec<T> = g.into_iter().map(|v| v * real(weight)).collect();
                match &mut d_features {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => d_features = Some(g),
                }
            }
        }
    }
    (loss, d_logits, d_features)
}

fn check_data<T: Real>(data: &SplitData<T>, weights: Option<&SampleWeights>) -> Result<()> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    if let Some(w) = weights {
        if let Some(e) = data.train.iter().find(|e| w.get(e.id).is_none()) {
            return Err(Error::Config(format!("no sample weight for training subject {}", e.id)));
        }
    }
    Ok(())
}

pub fn train<T: Real>(
    params: ModelParams<T>,
    data: &SplitData<T>,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_, T>,
) -> Result<(ModelParams<T>, History)> {
    train_observed(params, data, cfg, opts, &mut |_, _| {})
}

/// [`train`] with a callback invoked after every epoch's updates.
pub fn train_observed<T: Real>(
    mut params: ModelParams<T>,
    data: &SplitData<T>,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_, T>,
    observer: &mut dyn FnMut(usize, &ModelParams<T>),
) -> Result<(ModelParams<T>, History)> {
    cfg.validate()?;
    check_data(data, opts.weights)?;
    let freeze = opts.freeze.clone().unwrap_or_else(|| Freeze::none(params.blocks()));
    let mut adam = Adam::for_params(cfg, &params);
    let mut history = History::default();
    let mut best: Option<(f64, ModelParams<T>)> = None;
    let mut wait = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data.train[i]).collect();
            let inputs: Vec<T> = batch.iter().flat_map(|e| e.input.iter().copied()).collect();
            let labels: Vec<bool> = batch.iter().map(|e| e.label).collect();
            let weights: Vec<f64> =
                batch.iter().map(|e| opts.weights.and_then(|w| w.get(e.id)).unwrap_or(1.0)).collect();
            let mode = Mode::Train { dropout_seed: dropout_seed(cfg.seed, epoch, bi) };
            let cache = forward(&params, &inputs, data.dims, mode, &freeze)?;
            let (loss, d_logits, d_feat) = batch_objective(&cache.logits, &cache.features, &labels, &weights, &opts.terms);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            let grads = backward(&params, &cache, &d_logits, d_feat.as_deref(), &freeze, false);
            adam.apply(&mut params, &grads, &freeze);
            update_moving_stats(&mut params, &cache);
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameters at epoch {epoch}")));
        }
        observer(epoch, &params);

        let (val_loss, val_acc) = evaluate(&params, &data.val, data.dims)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / data.train.len() as f64,
            val_loss,
            val_acc,
        });
        if opts.run_all_epochs || epoch <= cfg.start_from_epoch {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            history.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    } else {
        history.best_epoch = history.records.len();
    }
    Ok((params, history))
}
