//! Fixed-architecture volumetric CNN: `conv3 -> batch norm -> sigmoid ->
//! maxpool` blocks, global average pooling, dropout and a single logistic
//! output. Gradients are hand-written reverse mode over that fixed layer set.

use biastrial_core::seeds::{derive_seed, rng_for};
use biastrial_core::simba_gen::ClassLabel;
use biastrial_core::{Dims, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layers::{col2im, im2col, maxpool, pooled_dims, voxels, TAPS};
use crate::real::{gemm_nn, gemm_nt, gemm_tn, real, sigmoid, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub filters: Vec<usize>,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl CnnConfig {
    /// Small network for 32^3 volumes. Evaluation uses the statistics of
    /// the last training batch (momentum 0): with a moving average the
    /// stored statistics lag the weights and validation flips to one class.
    pub fn desk() -> Self {
        Self { filters: vec![8, 16, 32], dropout: 0.2, bn_momentum: 0.0, bn_epsilon: 1e-3 }
    }

    pub fn full() -> Self {
        Self { filters: vec![32, 64, 128, 256, 512], dropout: 0.2, bn_momentum: 0.99, bn_epsilon: 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("filter counts must be positive and nonempty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(Error::Config("batch-norm momentum must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }

    /// Every block pools by two, so each input side needs `2^blocks` voxels.
    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let min = 1usize << self.filters.len();
        if dims.iter().any(|&d| d < min) {
            return Err(Error::Config(format!("input {dims:?} too small for {} pooling blocks", self.filters.len())));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        *self.filters.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

/// Offsets of one block's tensors in [`ModelParams::tensors`].
const KERNEL_T: usize = 0;
const BIAS_T: usize = 1;
const GAMMA_T: usize = 2;
const BETA_T: usize = 3;
const MEAN_T: usize = 4;
const VAR_T: usize = 5;
const PER_BLOCK: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: CnnConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn blocks(&self) -> usize {
        self.config.filters.len()
    }

    fn t(&self, block: usize, which: usize) -> &[T] {
        &self.tensors[block * PER_BLOCK + which].data
    }

    fn dense_index(&self) -> usize {
        self.blocks() * PER_BLOCK
    }

    pub fn dense_weights(&self) -> &[T] {
        &self.tensors[self.dense_index()].data
    }

    pub fn dense_bias(&self) -> T {
        self.tensors[self.dense_index() + 1].data[0]
    }

    /// Layer a tensor belongs to: `block<i>` or `dense`.
    pub fn layer_of(&self, tensor: usize) -> String {
        if tensor >= self.dense_index() {
            "dense".into()
        } else {
            format!("block{}", tensor / PER_BLOCK)
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and `f32` little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for &d in &t.shape {
                h.update((d as u32).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| real(v.to_f64().unwrap())).collect(),
                    trainable: t.trainable,
                })
                .collect(),
        }
    }
}

/// Glorot-uniform conv kernels, zero biases, identity batch norm and a zero
/// dense head (a fresh model outputs exactly 0.5).
pub fn init_params<T: Real>(config: &CnnConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut tensors = Vec::new();
    let mut cin = 1;
    for (i, &cout) in config.filters.iter().enumerate() {
        let (fan_in, fan_out) = ((cin * TAPS) as f64, (cout * TAPS) as f64);
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let mut rng = rng_for(seed, "init", i as u64);
        let kernel = (0..cout * cin * TAPS).map(|_| real(dist.sample(&mut rng))).collect();
        let mut push = |name: String, shape: Vec<usize>, data: Vec<T>, trainable| {
            tensors.push(Tensor { name, shape, data, trainable })
        };
        push(format!("conv{i}.kernel"), vec![cout, cin, 3, 3, 3], kernel, true);
        push(format!("conv{i}.bias"), vec![cout], vec![T::zero(); cout], true);
        push(format!("bn{i}.gamma"), vec![cout], vec![T::one(); cout], true);
        push(format!("bn{i}.beta"), vec![cout], vec![T::zero(); cout], true);
        push(format!("bn{i}.moving_mean"), vec![cout], vec![T::zero(); cout], false);
        push(format!("bn{i}.moving_variance"), vec![cout], vec![T::one(); cout], false);
        cin = cout;
    }
    tensors.push(Tensor { name: "dense.kernel".into(), shape: vec![cin, 1], data: vec![T::zero(); cin], trainable: true });
    tensors.push(Tensor { name: "dense.bias".into(), shape: vec![1], data: vec![T::zero()], trainable: true });
    Ok(ModelParams { config: config.clone(), tensors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Layers excluded from updates. Frozen blocks also run batch norm on their
/// moving statistics, as a non-trainable layer does.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Freeze {
    pub blocks: Vec<bool>,
    pub dense: bool,
}

impl Freeze {
    pub fn none(blocks: usize) -> Self {
        Self { blocks: vec![false; blocks], dense: false }
    }

    pub fn encoder(blocks: usize) -> Self {
        Self { blocks: vec![true; blocks], dense: false }
    }

    /// Parses layer names `block<i>` / `dense`.
    pub fn layers<T: Real>(params: &ModelParams<T>, names: &[&str]) -> Result<Self> {
        let mut f = Self::none(params.blocks());
        for &name in names {
            if name == "dense" {
                f.dense = true;
                continue;
            }
            let i: usize = name
                .strip_prefix("block")
                .and_then(|s| s.parse().ok())
                .filter(|&i| i < params.blocks())
                .ok_or_else(|| Error::Config(format!("unknown layer '{name}'")))?;
            f.blocks[i] = true;
        }
        Ok(f)
    }

    fn block(&self, i: usize) -> bool {
        self.blocks.get(i).copied().unwrap_or(false)
    }

    pub fn tensor_frozen<T: Real>(&self, params: &ModelParams<T>, tensor: usize) -> bool {
        if tensor >= params.dense_index() {
            self.dense
        } else {
            self.block(tensor / PER_BLOCK)
        }
    }
}

struct BlockCache<T> {
    dims: Dims,
    cin: usize,
    col: Vec<T>,
    xhat: Vec<T>,
    act: Vec<T>,
    arg: Vec<u32>,
    invstd: Vec<T>,
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

pub struct Cache<T> {
    n: usize,
    blocks: Vec<BlockCache<T>>,
    last_voxels: usize,
    pub features: Vec<T>,
    mask: Vec<T>,
    hidden: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Real> Cache<T> {
    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn probabilities(&self) -> Vec<T> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

fn check_finite<T: Real>(values: &[T], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activations in {layer}")))
    }
}

/// Runs `n` single-channel volumes (concatenated in `inputs`) through the net.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    inputs: &[T],
    dims: Dims,
    mode: Mode,
    frozen: &Freeze,
) -> Result<Cache<T>> {
    let cfg = &params.config;
    cfg.check_input(dims)?;
    let s0 = voxels(dims);
    if s0 == 0 || !inputs.len().is_multiple_of(s0) {
        return Err(Error::Config(format!("input length {} is not a multiple of {s0}", inputs.len())));
    }
    let n = inputs.len() / s0;
    let eps: T = real(cfg.bn_epsilon);

    let mut x = inputs.to_vec();
    let mut cur = dims;
    let mut cin = 1;
    let mut blocks = Vec::with_capacity(params.blocks());
    for (i, &cout) in cfg.filters.iter().enumerate() {
        let s = voxels(cur);
        let k = cin * TAPS;
        let (kernel, bias) = (params.t(i, KERNEL_T), params.t(i, BIAS_T));
        let mut col = vec![T::zero(); n * k * s];
        let mut z = vec![T::zero(); n * cout * s];
        for b in 0..n {
            let colb = &mut col[b * k * s..(b + 1) * k * s];
            im2col(&x[b * cin * s..(b + 1) * cin * s], cin, cur, colb);
            let zb = &mut z[b * cout * s..(b + 1) * cout * s];
            gemm_nn(cout, k, s, kernel, colb, T::zero(), zb);
            for c in 0..cout {
                zb[c * s..(c + 1) * s].iter_mut().for_each(|v| *v += bias[c]);
            }
        }

        let batch_bn = matches!(mode, Mode::Train { .. }) && !frozen.block(i);
        let (mean, var) = if batch_bn {
            let count: T = real((n * s) as f64);
            let mut mean = vec![T::zero(); cout];
            let mut var = vec![T::zero(); cout];
            for c in 0..cout {
                let mut acc = T::zero();
                for b in 0..n {
                    acc += z[(b * cout + c) * s..(b * cout + c + 1) * s].iter().copied().sum::<T>();
                }
                mean[c] = acc / count;
                let mut sq = T::zero();
                for b in 0..n {
                    sq += z[(b * cout + c) * s..(b * cout + c + 1) * s]
                        .iter()
                        .map(|&v| (v - mean[c]) * (v - mean[c]))
                        .sum::<T>();
                }
                var[c] = sq / count;
            }
            (mean, var)
        } else {
            (params.t(i, MEAN_T).to_vec(), params.t(i, VAR_T).to_vec())
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gamma, beta) = (params.t(i, GAMMA_T), params.t(i, BETA_T));
        let mut act = vec![T::zero(); z.len()];
        for b in 0..n {
            for c in 0..cout {
                let r = (b * cout + c) * s..(b * cout + c + 1) * s;
                for (zv, a) in z[r.clone()].iter_mut().zip(&mut act[r]) {
                    let xh = (*zv - mean[c]) * invstd[c];
                    *zv = xh;
                    *a = gamma[c] * xh + beta[c];
                }
            }
        }
        T::sigmoid_slice(&mut act);
        check_finite(&act, &format!("block{i}"))?;

        let pd = pooled_dims(cur);
        let ps = voxels(pd);
        let mut pooled = vec![T::zero(); n * cout * ps];
        let mut arg = vec![0u32; n * cout * ps];
        for b in 0..n {
            maxpool(
                &act[b * cout * s..(b + 1) * cout * s],
                cout,
                cur,
                &mut pooled[b * cout * ps..(b + 1) * cout * ps],
                &mut arg[b * cout * ps..(b + 1) * cout * ps],
            );
        }
        blocks.push(BlockCache {
            dims: cur,
            cin,
            col,
            xhat: z,
            act,
            arg,
            invstd,
            batch_stats: batch_bn.then_some((mean, var)),
        });
        x = pooled;
        cur = pd;
        cin = cout;
    }

    let f = cin;
    let ls = voxels(cur);
    let inv_ls: T = real(1.0 / ls as f64);
    let features: Vec<T> = (0..n * f).map(|j| x[j * ls..(j + 1) * ls].iter().copied().sum::<T>() * inv_ls).collect();

    let mask: Vec<T> = match mode {
        Mode::Train { dropout_seed } if cfg.dropout > 0.0 => {
            let keep: T = real(1.0 / (1.0 - cfg.dropout));
            let mut rng = rng_for(dropout_seed, "dropout", 0);
            (0..n * f).map(|_| if rng.random::<f64>() < cfg.dropout { T::zero() } else { keep }).collect()
        }
        _ => vec![T::one(); n * f],
    };
    let hidden: Vec<T> = features.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    let (w, bias) = (params.dense_weights(), params.dense_bias());
    let logits: Vec<T> =
        (0..n).map(|b| hidden[b * f..(b + 1) * f].iter().zip(w).map(|(&h, &wv)| h * wv).sum::<T>() + bias).collect();
    check_finite(&logits, "dense")?;

    Ok(Cache { n, blocks, last_voxels: ls, features, mask, hidden, logits })
}

/// Gradients aligned with [`ModelParams::tensors`]; frozen and non-trainable
/// tensors stay zero.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub tensors: Vec<Vec<T>>,
    pub input: Option<Vec<T>>,
}

/// Reverse pass from `d_logits` (and optionally an extra gradient on the
/// pooled features, used by auxiliary heads).
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &Cache<T>,
    d_logits: &[T],
    d_features: Option<&[T]>,
    frozen: &Freeze,
    want_input: bool,
) -> Grads<T> {
    let n = cache.n;
    let cfg = &params.config;
    let f = cfg.features();
    let mut grads: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
    let di = params.dense_index();

    if !frozen.dense {
        for b in 0..n {
            for c in 0..f {
                grads[di][c] += d_logits[b] * cache.hidden[b * f + c];
            }
            grads[di + 1][0] += d_logits[b];
        }
    }
    let w = params.dense_weights();
    let mut d_feat: Vec<T> = (0..n * f).map(|j| d_logits[j / f] * w[j % f] * cache.mask[j]).collect();
    if let Some(extra) = d_features {
        d_feat.iter_mut().zip(extra).for_each(|(a, &e)| *a += e);
    }

    let lowest = if want_input { 0 } else { (0..params.blocks()).find(|&i| !frozen.block(i)).unwrap_or(params.blocks()) };
    let inv_ls: T = real(1.0 / cache.last_voxels as f64);
    let mut d_x: Vec<T> = d_feat.iter().flat_map(|&g| std::iter::repeat_n(g * inv_ls, cache.last_voxels)).collect();

    for i in (lowest..params.blocks()).rev() {
        let bc = &cache.blocks[i];
        let cout = cfg.filters[i];
        let s = voxels(bc.dims);
        let k = bc.cin * TAPS;

        let mut d = vec![T::zero(); n * cout * s];
        for (j, &a) in bc.arg.iter().enumerate() {
            let plane = j / (voxels(pooled_dims(bc.dims)) * cout);
            d[plane * cout * s + a as usize] += d_x[j];
        }
        for (g, &a) in d.iter_mut().zip(&bc.act) {
            *g *= a * (T::one() - a);
        }

        let gamma = params.t(i, GAMMA_T);
        let mut dgamma = vec![T::zero(); cout];
        let mut dbeta = vec![T::zero(); cout];
        for b in 0..n {
            for c in 0..cout {
                let r = (b * cout + c) * s..(b * cout + c + 1) * s;
                for (&g, &xh) in d[r.clone()].iter().zip(&bc.xhat[r]) {
                    dgamma[c] += g * xh;
                    dbeta[c] += g;
                }
            }
        }
        let count: T = real((n * s) as f64);
        for b in 0..n {
            for c in 0..cout {
                let r = (b * cout + c) * s..(b * cout + c + 1) * s;
                let scale = gamma[c] * bc.invstd[c];
                if bc.batch_stats.is_some() {
                    let (mb, mx) = (dbeta[c] / count, dgamma[c] / count);
                    for (g, &xh) in d[r.clone()].iter_mut().zip(&bc.xhat[r]) {
                        *g = scale * (*g - mb - xh * mx);
                    }
                } else {
                    d[r].iter_mut().for_each(|g| *g *= scale);
                }
            }
        }

        if !frozen.block(i) {
            let base = i * PER_BLOCK;
            grads[base + GAMMA_T] = dgamma;
            grads[base + BETA_T] = dbeta;
            for b in 0..n {
                let db = &d[b * cout * s..(b + 1) * cout * s];
                for c in 0..cout {
                    grads[base + BIAS_T][c] += db[c * s..(c + 1) * s].iter().copied().sum::<T>();
                }
                gemm_nt(cout, s, k, db, &bc.col[b * k * s..(b + 1) * k * s], T::one(), &mut grads[base + KERNEL_T]);
            }
        }

        if i > lowest || want_input {
            let kernel = params.t(i, KERNEL_T);
            let mut dcol = vec![T::zero(); k * s];
            let mut dx = vec![T::zero(); n * bc.cin * s];
            for b in 0..n {
                gemm_tn(k, cout, s, kernel, &d[b * cout * s..(b + 1) * cout * s], T::zero(), &mut dcol);
                col2im(&dcol, bc.cin, bc.dims, &mut dx[b * bc.cin * s..(b + 1) * bc.cin * s]);
            }
            d_x = dx;
        }
    }

    Grads { tensors: grads, input: want_input.then_some(d_x) }
}

/// Moves running batch-norm statistics toward the batch statistics of a
/// training-mode pass: `moving = momentum * moving + (1 - momentum) * batch`.
pub fn update_moving_stats<T: Real>(params: &mut ModelParams<T>, cache: &Cache<T>) {
    let m: T = real(params.config.bn_momentum);
    for (i, bc) in cache.blocks.iter().enumerate() {
        if let Some((mean, var)) = &bc.batch_stats {
            for (which, batch) in [(MEAN_T, mean), (VAR_T, var)] {
                let t = &mut params.tensors[i * PER_BLOCK + which].data;
                t.iter_mut().zip(batch).for_each(|(r, &v)| *r = m * *r + (T::one() - m) * v);
            }
        }
    }
}

const PREDICT_CHUNK: usize = 8;

/// Eval-mode probabilities, one per volume.
pub fn predict<T: Real>(params: &ModelParams<T>, volumes: &[&[T]], dims: Dims) -> Result<Vec<T>> {
    Ok(predict_logits(params, volumes, dims)?.into_iter().map(sigmoid).collect())
}

pub fn predict_logits<T: Real>(params: &ModelParams<T>, volumes: &[&[T]], dims: Dims) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(volumes.len());
    let frozen = Freeze::none(params.blocks());
    for chunk in volumes.chunks(PREDICT_CHUNK) {
        let batch: Vec<T> = chunk.iter().flat_map(|v| v.iter().copied()).collect();
        out.extend(forward(params, &batch, dims, Mode::Eval, &frozen)?.logits);
    }
    Ok(out)
}

/// Eval-mode pooled features (encoder output), `features()` values per volume.
pub fn encode<T: Real>(params: &ModelParams<T>, volumes: &[&[T]], dims: Dims) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(volumes.len() * params.config.features());
    let frozen = Freeze::none(params.blocks());
    for chunk in volumes.chunks(PREDICT_CHUNK) {
        let batch: Vec<T> = chunk.iter().flat_map(|v| v.iter().copied()).collect();
        out.extend(forward(params, &batch, dims, Mode::Eval, &frozen)?.features);
    }
    Ok(out)
}

/// Gradient of the target-class logit with respect to every input voxel,
/// eval mode. The non-disease target is the negated disease logit.
pub fn input_gradient<T: Real>(params: &ModelParams<T>, volume: &[T], dims: Dims, target: ClassLabel) -> Result<Vec<T>> {
    let frozen = Freeze::none(params.blocks());
    let cache = forward(params, volume, dims, Mode::Eval, &frozen)?;
    if cache.n != 1 {
        return Err(Error::Config(format!("input_gradient takes one volume, got {}", cache.n)));
    }
    let sign = if target.is_positive() { T::one() } else { -T::one() };
    let g = backward(params, &cache, &[sign], None, &frozen, true).input.expect("requested");
    check_finite(&g, "input gradient")?;
    Ok(g)
}

/// Seed for the dropout mask of one training step.
pub fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    derive_seed(seed, "dropout-step", ((epoch as u64) << 32) | batch as u64)
}
