//! The three paired scenarios (no bias, near bias, far bias) built from one
//! dataset configuration.

use serde::{Deserialize, Serialize};

use super::{MagnitudeDist, ScenarioSpec};
use crate::deform::{EffectParams, MaskSource};
use crate::error::{Error, Result};
use crate::phantom::{RegionAtlas, RegionRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    NoBias,
    NearBias,
    FarBias,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::NoBias, ScenarioKind::NearBias, ScenarioKind::FarBias];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::NoBias => "no-bias",
            ScenarioKind::NearBias => "near-bias",
            ScenarioKind::FarBias => "far-bias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}'")))
    }

    pub fn bias_role(self) -> Option<RegionRole> {
        match self {
            ScenarioKind::NoBias => None,
            ScenarioKind::NearBias => Some(RegionRole::BiasNear),
            ScenarioKind::FarBias => Some(RegionRole::BiasFar),
        }
    }
}

/// Effect model settings; the magnitude scale is derived so that a unit
/// coefficient gives `support_rms` voxels of RMS speed over the mask support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectConfig {
    pub modes: usize,
    pub smoothness_sigma: f64,
    pub mask_sigma: f64,
    pub support_rms: f64,
    pub seed: u64,
}

impl EffectConfig {
    pub fn params(&self, atlas: &RegionAtlas, region: MaskSource) -> Result<EffectParams> {
        let mask = region.mask(atlas, self.mask_sigma)?;
        let support = mask.as_slice().iter().filter(|&&m| m > 0.0).count();
        Ok(EffectParams {
            region,
            modes: self.modes,
            smoothness_sigma: self.smoothness_sigma,
            mask_sigma: self.mask_sigma,
            magnitude_scale: self.support_rms * (support as f64).sqrt(),
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_disease: usize,
    pub n_nondisease: usize,
    pub bias_fraction_disease: f64,
    pub bias_fraction_nondisease: f64,
    pub subject: EffectConfig,
    pub disease: EffectConfig,
    pub bias: EffectConfig,
    pub subject_dist: MagnitudeDist,
    pub disease_dist: MagnitudeDist,
    pub bias_dist: MagnitudeDist,
    pub integration_steps: u32,
    pub master_seed: u64,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_disease: 100,
            n_nondisease: 100,
            bias_fraction_disease: 0.7,
            bias_fraction_nondisease: 0.3,
            subject: EffectConfig { modes: 8, smoothness_sigma: 4.0, mask_sigma: 1.0, support_rms: 0.3, seed: 101 },
            disease: EffectConfig { modes: 1, smoothness_sigma: 4.0, mask_sigma: 2.0, support_rms: 0.35, seed: 202 },
            bias: EffectConfig { modes: 1, smoothness_sigma: 4.0, mask_sigma: 2.0, support_rms: 1.0, seed: 303 },
            subject_dist: MagnitudeDist::default_coefficient(),
            disease_dist: MagnitudeDist::default_magnitude(),
            bias_dist: MagnitudeDist::default_magnitude(),
            integration_steps: 5,
            master_seed: 2024,
            split_fractions: [0.5, 0.25, 0.25],
            split_seed: 17,
        }
    }
}

impl DatasetConfig {
    pub fn scenario(&self, atlas: &RegionAtlas, kind: ScenarioKind) -> Result<ScenarioSpec> {
        let disease = MaskSource::Label(atlas.role_label(RegionRole::Disease)?);
        let bias_effect = match kind.bias_role() {
            Some(role) => Some(self.bias.params(atlas, MaskSource::Label(atlas.role_label(role)?))?),
            None => None,
        };
        let spec = ScenarioSpec {
            name: kind.name().to_string(),
            n_disease: self.n_disease,
            n_nondisease: self.n_nondisease,
            bias_fraction_disease: self.bias_fraction_disease,
            bias_fraction_nondisease: self.bias_fraction_nondisease,
            subject_effect: self.subject.params(atlas, MaskSource::Foreground)?,
            disease_effect: self.disease.params(atlas, disease)?,
            bias_effect,
            subject_dist: self.subject_dist,
            disease_dist: self.disease_dist,
            bias_dist: self.bias_dist,
            integration_steps: self.integration_steps,
            master_seed: self.master_seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}
