//! Bias mitigation: reweighing, adversarial unlearning with a confusion loss,
//! and per-group models fine-tuned from a shared pretraining pass.

use std::collections::BTreeMap;
use std::path::Path;

use biastrial_core::seeds::rng_for;
use biastrial_core::simba_gen::{BiasGroup, ClassLabel, DatasetManifest, Split};
use biastrial_core::{Dims, Error, Result};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::model::{
    backward, dropout_seed, encode, forward, predict, update_moving_stats, Freeze, Mode, ModelParams,
};
use crate::real::{real, Real};
use crate::train::{batch_objective, evaluate, train, Adam, Example, History, LossTerm, SplitData, TrainConfig, TrainOptions};

/// Per-subject training weights plus the exact per-cell rationals they were
/// materialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    pub by_id: BTreeMap<u32, f64>,
    pub cells: BTreeMap<(BiasGroup, ClassLabel), Ratio<u64>>,
}

impl SampleWeights {
    pub fn get(&self, id: u32) -> Option<f64> {
        self.by_id.get(&id).copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["id", "weight"]).map_err(|e| Error::Format(e.to_string()))?;
        for (id, wt) in &self.by_id {
            w.write_record([id.to_string(), wt.to_string()]).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Calders-Kamiran reweighing over the training split:
/// `w(s, y) = N_s * N_y / (N * N_{s,y})`.
pub fn reweigh_weights(manifest: &DatasetManifest) -> Result<SampleWeights> {
    let train: Vec<_> = manifest.records.iter().filter(|r| r.split == Some(Split::Train)).collect();
    let n = train.len() as u64;
    let mut cell: BTreeMap<(BiasGroup, ClassLabel), u64> = BTreeMap::new();
    let mut by_group: BTreeMap<BiasGroup, u64> = BTreeMap::new();
    let mut by_class: BTreeMap<ClassLabel, u64> = BTreeMap::new();
    for r in &train {
        *cell.entry((r.group, r.class)).or_default() += 1;
        *by_group.entry(r.group).or_default() += 1;
        *by_class.entry(r.class).or_default() += 1;
    }
    let mut cells = BTreeMap::new();
    for g in [BiasGroup::Bias, BiasGroup::NonBias] {
        for c in [ClassLabel::Disease, ClassLabel::NonDisease] {
            let n_sy = cell.get(&(g, c)).copied().unwrap_or(0);
            if n_sy == 0 {
                return Err(Error::Undefined(format!("reweighing: empty training cell {g:?}/{c:?}")));
            }
            cells.insert((g, c), Ratio::new(by_group[&g] * by_class[&c], n * n_sy));
        }
    }
    let by_id = train
        .iter()
        .map(|r| {
            let w = cells[&(r.group, r.class)];
            (r.id, *w.numer() as f64 / *w.denom() as f64)
        })
        .collect();
    Ok(SampleWeights { by_id, cells })
}

pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionLoss {
    pub value: f64,
    /// Set when some probability was clamped to [`PROBABILITY_FLOOR`].
    pub floored: bool,
}

/// Mean over samples of the cross-entropy to the uniform distribution,
/// `-(1/K) sum_k log p_k`.
pub fn confusion_loss(probabilities: &[Vec<f64>]) -> Result<ConfusionLoss> {
    if probabilities.is_empty() {
        return Err(Error::Config("confusion loss of an empty batch".into()));
    }
    let mut total = 0.0;
    let mut floored = false;
    for p in probabilities {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("probabilities sum to {sum}, not 1")));
        }
        let k = p.len() as f64;
        for &q in p {
            floored |= q < PROBABILITY_FLOOR;
            total -= q.max(PROBABILITY_FLOOR).ln() / k;
        }
    }
    Ok(ConfusionLoss { value: total / probabilities.len() as f64, floored })
}

/// Two-way softmax classifier of the bias group on pooled encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasHead<T> {
    pub features: usize,
    /// Row-major `2 x features`; row 0 scores the bias group.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

fn softmax2<T: Real>(a: T, b: T) -> [T; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

impl<T: Real> BiasHead<T> {
    pub fn init(features: usize, seed: u64) -> Self {
        let limit = (6.0 / (features + 2) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let mut rng = rng_for(seed, "bias-head", 0);
        Self {
            features,
            weights: (0..2 * features).map(|_| real(dist.sample(&mut rng))).collect(),
            bias: vec![T::zero(); 2],
        }
    }

    /// Class probabilities `[p_bias, p_nonbias]` per sample.
    pub fn probabilities(&self, features: &[T]) -> Vec<[T; 2]> {
        let f = self.features;
        features
            .chunks(f)
            .map(|x| {
                let z = |k: usize| self.weights[k * f..(k + 1) * f].iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + self.bias[k];
                softmax2(z(0), z(1))
            })
            .collect()
    }

    /// Confusion loss of the batch and its gradient with respect to the
    /// input features (`d/dz_j = p_j - 1/K`, averaged over the batch).
    pub fn confusion_and_feature_grad(&self, features: &[T]) -> (f64, Vec<T>) {
        let f = self.features;
        let probs = self.probabilities(features);
        let n = probs.len();
        let half: T = real(0.5);
        let inv_n: T = real(1.0 / n as f64);
        let mut loss = 0.0;
        let mut grad = vec![T::zero(); features.len()];
        for (b, p) in probs.iter().enumerate() {
            loss -= 0.5 * (p[0].to_f64().unwrap().max(PROBABILITY_FLOOR).ln() + p[1].to_f64().unwrap().max(PROBABILITY_FLOOR).ln());
            for k in 0..2 {
                let dz = (p[k] - half) * inv_n;
                for j in 0..f {
                    grad[b * f + j] += dz * self.weights[k * f + j];
                }
            }
        }
        (loss / n as f64, grad)
    }

    /// Mean cross-entropy for predicting `groups` and the parameter gradients
    /// `(d_weights, d_bias)`.
    pub fn cross_entropy_grad(&self, features: &[T], groups: &[BiasGroup]) -> (f64, Vec<T>, Vec<T>) {
        let f = self.features;
        let probs = self.probabilities(features);
        let inv_n: T = real(1.0 / probs.len() as f64);
        let mut loss = 0.0;
        let mut dw = vec![T::zero(); 2 * f];
        let mut db = vec![T::zero(); 2];
        for (b, (p, g)) in probs.iter().zip(groups).enumerate() {
            let target = usize::from(*g != BiasGroup::Bias);
            loss -= p[target].to_f64().unwrap().max(PROBABILITY_FLOOR).ln();
            for k in 0..2 {
                let dz = (p[k] - if k == target { T::one() } else { T::zero() }) * inv_n;
                db[k] += dz;
                for j in 0..f {
                    dw[k * f + j] += dz * features[b * f + j];
                }
            }
        }
        (loss / probs.len() as f64, dw, db)
    }

    pub fn accuracy(&self, features: &[T], groups: &[BiasGroup]) -> f64 {
        let probs = self.probabilities(features);
        let correct = probs.iter().zip(groups).filter(|(p, g)| (p[0] >= p[1]) == (**g == BiasGroup::Bias)).count();
        correct as f64 / groups.len() as f64
    }

    fn adam_update(&mut self, adam: &mut Adam<T>, dw: &[T], db: &[T]) {
        adam.update([(0, self.weights.as_mut_slice(), dw), (1, self.bias.as_mut_slice(), db)].into_iter());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    /// Weight of the confusion term in the encoder objective.
    pub alpha: f64,
    pub epochs: usize,
    /// Early-stop window: stop when disease accuracy has not improved and
    /// bias accuracy has not decreased for this many epochs.
    pub stop_window: usize,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self { alpha: 1.0, epochs: 5, stop_window: 2, seed: 0 }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("confusion weight {} must be finite and nonnegative", self.alpha)));
        }
        if self.epochs == 0 || self.stop_window == 0 {
            return Err(Error::Config("unlearning needs at least one epoch and a positive stop window".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnEpoch {
    pub epoch: usize,
    pub disease_val_acc: f64,
    pub bias_val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome<T> {
    pub params: ModelParams<T>,
    pub head: BiasHead<T>,
    /// Bias-head validation accuracy of the stage-2 head on the frozen encoder.
    pub head_val_acc: f64,
    pub epochs: Vec<UnlearnEpoch>,
    /// `max(p, 1 - p)` for the bias-group prevalence `p` in validation.
    pub chance_level: f64,
}

impl<T> UnlearnOutcome<T> {
    pub fn final_bias_acc(&self) -> f64 {
        self.epochs.last().map(|e| e.bias_val_acc).unwrap_or(self.head_val_acc)
    }
}

fn groups_of<T>(examples: &[Example<T>]) -> Vec<BiasGroup> {
    examples.iter().map(|e| e.group).collect()
}

pub fn chance_level<T>(examples: &[Example<T>]) -> f64 {
    let p = examples.iter().filter(|e| e.group == BiasGroup::Bias).count() as f64 / examples.len() as f64;
    p.max(1.0 - p)
}

/// Trains a fresh bias head on frozen encoder features with early stopping on
/// validation cross-entropy. Returns the head and its validation accuracy.
pub fn train_bias_head<T: Real>(
    params: &ModelParams<T>,
    data: &SplitData<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(BiasHead<T>, f64)> {
    let f = params.config.features();
    let train_x = encode(params, &SplitData::inputs(&data.train), data.dims)?;
    let val_x = encode(params, &SplitData::inputs(&data.val), data.dims)?;
    let (train_g, val_g) = (groups_of(&data.train), groups_of(&data.val));

    let mut head = BiasHead::init(f, seed);
    let mut adam = Adam::new(cfg, [2 * f, 2].into_iter());
    let mut best = (f64::INFINITY, head.clone());
    let mut wait = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(seed, "head-shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<T> = chunk.iter().flat_map(|&i| train_x[i * f..(i + 1) * f].iter().copied()).collect();
            let g: Vec<BiasGroup> = chunk.iter().map(|&i| train_g[i]).collect();
            let (_, dw, db) = head.cross_entropy_grad(&x, &g);
            head.adam_update(&mut adam, &dw, &db);
        }
        let (val_loss, _, _) = head.cross_entropy_grad(&val_x, &val_g);
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("bias head loss diverged at epoch {epoch}")));
        }
        if val_loss < best.0 {
            best = (val_loss, head.clone());
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    let head = best.1;
    let acc = head.accuracy(&val_x, &val_g);
    Ok((head, acc))
}

/// Adversarial unlearning starting from a converged disease model (stage 1).
/// Stage 2 fits the bias head on the frozen encoder; stage 3 alternates per
/// batch between the encoder/disease head (disease BCE + alpha * confusion)
/// and the bias head (cross-entropy on the same batch's detached features).
pub fn unlearn<T: Real>(
    stage1: ModelParams<T>,
    data: &SplitData<T>,
    train_cfg: &TrainConfig,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome<T>> {
    cfg.validate()?;
    train_cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    let (mut head, head_val_acc) = train_bias_head(&stage1, data, train_cfg, cfg.seed)?;

    let mut params = stage1;
    let f = params.config.features();
    let freeze = Freeze::none(params.blocks());
    let mut adam = Adam::for_params(train_cfg, &params);
    let mut head_adam = Adam::new(train_cfg, [2 * f, 2].into_iter());
    let val_groups = groups_of(&data.val);
    let mut epochs: Vec<UnlearnEpoch> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "unlearn-shuffle", epoch as u64));
        for (bi, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data.train[i]).collect();
            let inputs: Vec<T> = batch.iter().flat_map(|e| e.input.iter().copied()).collect();
            let labels: Vec<bool> = batch.iter().map(|e| e.label).collect();
            let groups: Vec<BiasGroup> = batch.iter().map(|e| e.group).collect();
            let mode = Mode::Train { dropout_seed: dropout_seed(cfg.seed ^ train_cfg.seed, 10_000 + epoch, bi) };

            let cache = forward(&params, &inputs, data.dims, mode, &freeze)?;
            let terms = [LossTerm::Confusion { head: &head, weight: cfg.alpha }];
            let (loss, d_logits, d_feat) =
                batch_objective(&cache.logits, &cache.features, &labels, &vec![1.0; labels.len()], &terms);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite unlearning loss at epoch {epoch}")));
            }
            let grads = backward(&params, &cache, &d_logits, d_feat.as_deref(), &freeze, false);
            adam.apply(&mut params, &grads, &freeze);
            update_moving_stats(&mut params, &cache);

            let (_, dw, db) = head.cross_entropy_grad(&cache.features, &groups);
            head.adam_update(&mut head_adam, &dw, &db);
        }
        let (_, disease_val_acc) = evaluate(&params, &data.val, data.dims)?;
        let val_x = encode(&params, &SplitData::inputs(&data.val), data.dims)?;
        let bias_val_acc = head.accuracy(&val_x, &val_groups);
        epochs.push(UnlearnEpoch { epoch, disease_val_acc, bias_val_acc });
        if should_stop(&epochs, cfg.stop_window) {
            break;
        }
    }
    Ok(UnlearnOutcome { params, head, head_val_acc, epochs, chance_level: chance_level(&data.val) })
}

/// True when, over the last `window` epochs, disease accuracy has not
/// exceeded its earlier best and bias accuracy has not gone below its
/// earlier minimum.
pub fn should_stop(epochs: &[UnlearnEpoch], window: usize) -> bool {
    if epochs.len() <= window {
        return false;
    }
    let (before, recent) = epochs.split_at(epochs.len() - window);
    let best_disease = before.iter().map(|e| e.disease_val_acc).fold(f64::NEG_INFINITY, f64::max);
    let min_bias = before.iter().map(|e| e.bias_val_acc).fold(f64::INFINITY, f64::min);
    recent.iter().all(|e| e.disease_val_acc <= best_disease && e.bias_val_acc >= min_bias)
}

#[derive(Debug, Clone)]
pub struct GroupModels<T> {
    pub bias: ModelParams<T>,
    pub non_bias: ModelParams<T>,
    pub bias_history: History,
    pub non_bias_history: History,
}

impl<T: Real> GroupModels<T> {
    pub fn for_group(&self, group: BiasGroup) -> &ModelParams<T> {
        match group {
            BiasGroup::Bias => &self.bias,
            BiasGroup::NonBias => &self.non_bias,
        }
    }

    /// Scores every example with its own group's model, preserving order.
    pub fn predict(&self, examples: &[Example<T>], dims: Dims) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); examples.len()];
        for group in [BiasGroup::Bias, BiasGroup::NonBias] {
            let idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].group == group).collect();
            let inputs: Vec<&[T]> = idx.iter().map(|&i| examples[i].input.as_slice()).collect();
            for (i, p) in idx.into_iter().zip(predict(self.for_group(group), &inputs, dims)?) {
                out[i] = p;
            }
        }
        Ok(out)
    }
}

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 5;

/// A fixed number of epochs on the full training split, no early stopping.
pub fn pretrain<T: Real>(
    init: ModelParams<T>,
    data: &SplitData<T>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<ModelParams<T>> {
    let cfg = TrainConfig { max_epochs: epochs, ..cfg.clone() };
    let opts = TrainOptions { run_all_epochs: true, ..Default::default() };
    Ok(train(init, data, &cfg, &opts)?.0)
}

/// Independent fine-tunings of a pretrained model on each bias group.
pub fn finetune_groups<T: Real>(
    pretrained: &ModelParams<T>,
    data: &SplitData<T>,
    cfg: &TrainConfig,
) -> Result<GroupModels<T>> {
    let fit = |group: BiasGroup| -> Result<(ModelParams<T>, History)> {
        let subset = data.restrict(group);
        if subset.train.is_empty() || subset.val.is_empty() {
            return Err(Error::Config(format!("group {group:?} has an empty train or validation split")));
        }
        train(pretrained.clone(), &subset, cfg, &TrainOptions::default())
    };
    let (bias, bias_history) = fit(BiasGroup::Bias)?;
    let (non_bias, non_bias_history) = fit(BiasGroup::NonBias)?;
    Ok(GroupModels { bias, non_bias, bias_history, non_bias_history })
}

pub fn train_group_models<T: Real>(
    init: ModelParams<T>,
    data: &SplitData<T>,
    cfg: &TrainConfig,
    pretrain_epochs: usize,
) -> Result<GroupModels<T>> {
    let pretrained = pretrain(init, data, cfg, pretrain_epochs)?;
    finetune_groups(&pretrained, data, cfg)
}
