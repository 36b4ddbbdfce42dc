//! SmoothGrad saliency, group-averaged maps and region-weighted scores.

use biastrial_core::seeds::{derive_seed, rng_for};
use biastrial_core::simba_gen::{BiasGroup, ClassLabel};
use biastrial_core::{Dims, Error, Grid, RegionAtlas, Result};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{input_gradient, predict, ModelParams};
use crate::real::{real, Real};
use crate::train::{Example, SplitData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    pub samples: usize,
    /// Noise standard deviation as a fraction of the input's intensity range.
    pub noise_fraction: f64,
    pub seed: u64,
    /// Take absolute values per draw before averaging instead of after.
    pub abs_before_mean: bool,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { samples: 10, noise_fraction: 0.10, seed: 0, abs_before_mean: false }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || !(self.noise_fraction >= 0.0) {
            return Err(Error::Config(format!("invalid saliency configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Grid<f32>,
    pub subjects: Vec<u32>,
    pub class: Option<ClassLabel>,
    pub group: Option<BiasGroup>,
    /// Set when fewer subjects than requested were available.
    pub short: bool,
}

/// SmoothGrad around an arbitrary gradient oracle.
pub fn smoothgrad_with<T: Real>(
    mut gradient: impl FnMut(&[T]) -> Result<Vec<T>>,
    volume: &[T],
    cfg: &SaliencyConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (lo, hi) = volume.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let v = v.to_f64().unwrap();
        (lo.min(v), hi.max(v))
    });
    let sigma = cfg.noise_fraction * (hi - lo).max(0.0);
    let mut acc = vec![0.0f64; volume.len()];
    let mut noisy = volume.to_vec();
    for draw in 0..cfg.samples {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            let mut rng = rng_for(cfg.seed, "smoothgrad", draw as u64);
            for (n, &v) in noisy.iter_mut().zip(volume) {
                *n = v + real(normal.sample(&mut rng));
            }
        }
        let g = gradient(&noisy)?;
        if g.len() != volume.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite or misshapen saliency gradient".into()));
        }
        for (a, v) in acc.iter_mut().zip(&g) {
            let v = v.to_f64().unwrap();
            *a += if cfg.abs_before_mean { v.abs() } else { v };
        }
    }
    let n = cfg.samples as f64;
    Ok(acc.into_iter().map(|a| (a / n).abs()).collect())
}

/// SmoothGrad map of the disease logit for one volume.
pub fn smoothgrad<T: Real>(params: &ModelParams<T>, volume: &[T], dims: Dims, cfg: &SaliencyConfig) -> Result<Vec<f64>> {
    smoothgrad_with(|x| input_gradient(params, x, dims, ClassLabel::Disease), volume, cfg)
}

/// Voxelwise mean SmoothGrad map over the first `count` correctly classified
/// examples of `(class, group)`, in the given order. Each subject's noise is
/// seeded from its id.
pub fn group_average_map<T: Real>(
    params: &ModelParams<T>,
    examples: &[Example<T>],
    dims: Dims,
    class: ClassLabel,
    group: BiasGroup,
    count: usize,
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap> {
    let candidates: Vec<&Example<T>> =
        examples.iter().filter(|e| e.label == class.is_positive() && e.group == group).collect();
    let probs = predict(params, &candidates.iter().map(|e| e.input.as_slice()).collect::<Vec<_>>(), dims)?;
    let chosen: Vec<&Example<T>> = candidates
        .into_iter()
        .zip(probs)
        .filter(|(e, p)| (p.to_f64().unwrap() >= 0.5) == e.label)
        .map(|(e, _)| e)
        .take(count)
        .collect();
    let mut acc = vec![0.0f64; dims[0] * dims[1] * dims[2]];
    for e in &chosen {
        let sub = SaliencyConfig { seed: derive_seed(cfg.seed, "subject", e.id as u64), ..cfg.clone() };
        for (a, v) in acc.iter_mut().zip(smoothgrad(params, &e.input, dims, &sub)?) {
            *a += v;
        }
    }
    let k = chosen.len().max(1) as f64;
    Ok(SaliencyMap {
        values: Grid::from_vec(dims, acc.into_iter().map(|a| (a / k) as f32).collect())?,
        subjects: chosen.iter().map(|e| e.id).collect(),
        class: Some(class),
        group: Some(group),
        short: chosen.len() < count,
    })
}

/// Mean saliency inside region `label` over mean saliency across all
/// labelled (nonzero) voxels.
pub fn weighted_saliency_score(map: &Grid<f32>, atlas: &RegionAtlas, label: i32) -> Result<f64> {
    if map.dims() != atlas.dims() {
        return Err(Error::Shape { expected: atlas.dims(), actual: map.dims() });
    }
    atlas.region(label)?;
    let (mut inside, mut n_in, mut all, mut n_all) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &l) in map.as_slice().iter().zip(atlas.labels.as_slice()) {
        if l == 0 {
            continue;
        }
        all += v as f64;
        n_all += 1;
        if l == label {
            inside += v as f64;
            n_in += 1;
        }
    }
    if n_in == 0 {
        return Err(Error::Undefined(format!("region {label} has no voxels")));
    }
    if all <= 0.0 {
        return Err(Error::Undefined("saliency map is zero over the labelled volume".into()));
    }
    Ok((inside / n_in as f64) / (all / n_all as f64))
}

/// Convenience for callers holding [`SplitData`]: the test split's map.
pub fn test_group_map<T: Real>(
    params: &ModelParams<T>,
    data: &SplitData<T>,
    class: ClassLabel,
    group: BiasGroup,
    count: usize,
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap> {
    group_average_map(params, &data.test, data.dims, class, group, count, cfg)
}
