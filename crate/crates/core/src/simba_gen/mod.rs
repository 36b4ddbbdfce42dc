//! Counterfactual dataset factory.
//!
//! A scenario fixes the class/group composition and the effect models; the
//! master seed fixes everything that is shared across scenarios (subject
//! morphology, disease magnitudes, bias magnitudes, splits). Scenarios that
//! share a master seed differ only in where, or whether, the bias effect is
//! applied.

pub mod presets;
mod split;
pub mod stratify;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deform::{exp_svf, jacobian_min, make_effect_model, sample_velocity, warp, EffectModel, EffectParams, MaskSource, VelocityField};
use crate::error::{Error, Result};
use crate::io;
use crate::phantom::{RegionAtlas, TemplateVolume};
use crate::seeds;

pub use presets::{DatasetConfig, EffectConfig, ScenarioKind};
pub use split::split_dataset;
pub use stratify::{ks_distance, stratified_assign, stratified_assign_sized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLabel {
    Disease,
    NonDisease,
}

impl ClassLabel {
    pub fn is_positive(self) -> bool {
        self == ClassLabel::Disease
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasGroup {
    Bias,
    NonBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Sampling law for effect magnitudes / coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum MagnitudeDist {
    TruncatedNormal { mean: f64, std: f64, lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Constant { value: f64 },
}

impl MagnitudeDist {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            MagnitudeDist::TruncatedNormal { mean, std, lo, hi } => loop {
                let z: f64 = StandardNormal.sample(rng);
                let x = mean + std * z;
                if (lo..=hi).contains(&x) {
                    break x;
                }
            },
            MagnitudeDist::Uniform { lo, hi } => rng.random_range(lo..=hi),
            MagnitudeDist::Constant { value } => value,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            MagnitudeDist::TruncatedNormal { mean, std, lo, hi } => {
                std > 0.0 && lo < hi && mean.is_finite() && lo <= mean + 3.0 * std && hi >= mean - 3.0 * std
            }
            MagnitudeDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            MagnitudeDist::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {what} distribution {self:?}")))
        }
    }

    fn upper_abs(&self) -> f64 {
        match *self {
            MagnitudeDist::TruncatedNormal { lo, hi, .. } | MagnitudeDist::Uniform { lo, hi } => lo.abs().max(hi.abs()),
            MagnitudeDist::Constant { value } => value.abs(),
        }
    }

    /// Truncated normal on [0.5, 1.5] (mean 1, std 0.25).
    pub fn default_magnitude() -> Self {
        MagnitudeDist::TruncatedNormal { mean: 1.0, std: 0.25, lo: 0.5, hi: 1.5 }
    }

    /// Standard normal truncated at +-2.5.
    pub fn default_coefficient() -> Self {
        MagnitudeDist::TruncatedNormal { mean: 0.0, std: 1.0, lo: -2.5, hi: 2.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub n_disease: usize,
    pub n_nondisease: usize,
    pub bias_fraction_disease: f64,
    pub bias_fraction_nondisease: f64,
    pub subject_effect: EffectParams,
    pub disease_effect: EffectParams,
    /// `None` for the no-bias counterfactual; group labels are still assigned.
    pub bias_effect: Option<EffectParams>,
    pub subject_dist: MagnitudeDist,
    pub disease_dist: MagnitudeDist,
    pub bias_dist: MagnitudeDist,
    /// Scaling-and-squaring steps shared by every subject. A fixed count keeps
    /// paired scenarios bit-identical away from the bias region.
    pub integration_steps: u32,
    pub master_seed: u64,
}

impl ScenarioSpec {
    pub fn disease_region(&self) -> Option<i32> {
        match self.disease_effect.region {
            MaskSource::Label(l) => Some(l),
            MaskSource::Foreground => None,
        }
    }

    pub fn bias_region(&self) -> Option<i32> {
        self.bias_effect.and_then(|p| match p.region {
            MaskSource::Label(l) => Some(l),
            MaskSource::Foreground => None,
        })
    }

    /// Subjects per (class, group) cell, in [`CELLS`] order.
    pub fn cell_sizes(&self) -> Result<[usize; 4]> {
        for f in [self.bias_fraction_disease, self.bias_fraction_nondisease] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("bias fraction {f} outside [0, 1]")));
            }
        }
        // half-up on the disease class, down on the non-disease class
        let db = (self.n_disease as f64 * self.bias_fraction_disease + 0.5).floor() as usize;
        let nb = (self.n_nondisease as f64 * self.bias_fraction_nondisease).floor() as usize;
        let db = db.min(self.n_disease);
        let sizes = [db, self.n_disease - db, nb, self.n_nondisease - nb];
        if sizes.contains(&0) {
            return Err(Error::Config(format!(
                "scenario '{}' has an empty class/group cell: {:?}",
                self.name, sizes
            )));
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_disease == 0 || self.n_nondisease == 0 {
            return Err(Error::Config("both classes need subjects".into()));
        }
        if self.integration_steps == 0 {
            return Err(Error::Config("integration_steps must be >= 1".into()));
        }
        if self.disease_effect.modes != 1 || self.bias_effect.is_some_and(|b| b.modes != 1) {
            return Err(Error::Config("disease and bias effects are single-mode models".into()));
        }
        self.subject_dist.validate("subject coefficient")?;
        self.disease_dist.validate("disease magnitude")?;
        self.bias_dist.validate("bias magnitude")?;
        for (what, d) in [("disease", &self.disease_dist), ("bias", &self.bias_dist)] {
            let positive = match *d {
                MagnitudeDist::TruncatedNormal { lo, .. } | MagnitudeDist::Uniform { lo, .. } => lo > 0.0,
                MagnitudeDist::Constant { value } => value > 0.0,
            };
            if !positive {
                return Err(Error::Config(format!("{what} magnitudes must be strictly positive")));
            }
        }
        self.cell_sizes()?;
        Ok(())
    }
}

/// Cell order used throughout: (class, group).
pub const CELLS: [(ClassLabel, BiasGroup); 4] = [
    (ClassLabel::Disease, BiasGroup::Bias),
    (ClassLabel::Disease, BiasGroup::NonBias),
    (ClassLabel::NonDisease, BiasGroup::Bias),
    (ClassLabel::NonDisease, BiasGroup::NonBias),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u32,
    pub class: ClassLabel,
    pub group: BiasGroup,
    pub split: Option<Split>,
    pub subject_coeffs: Vec<f64>,
    pub disease_mag: f64,
    pub bias_mag: f64,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

impl SubjectRecord {
    pub fn coeff_norm(&self) -> f64 {
        self.subject_coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Record fields that must agree across paired scenarios.
    pub fn counterfactual_key(&self) -> (u32, ClassLabel, BiasGroup, Option<Split>, &[f64], u64, u64) {
        (self.id, self.class, self.group, self.split, &self.subject_coeffs, self.disease_mag.to_bits(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenario: String,
    pub records: Vec<SubjectRecord>,
    pub checksum: String,
    pub params: ScenarioSpec,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn compute_checksum(records: &[SubjectRecord]) -> String {
        let bytes = serde_json::to_vec(records).expect("records serialise");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn refresh_checksum(&mut self) {
        self.checksum = Self::compute_checksum(&self.records);
    }

    pub fn count(&self, class: ClassLabel, group: BiasGroup) -> usize {
        self.records.iter().filter(|r| r.class == class && r.group == group).count()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == Some(split)).collect()
    }
}

/// Effect models shared by a scenario's subjects.
#[derive(Debug, Clone)]
pub struct ScenarioModels {
    pub subject: EffectModel,
    pub disease: EffectModel,
    pub bias: Option<EffectModel>,
}

impl ScenarioModels {
    pub fn build(spec: &ScenarioSpec, atlas: &RegionAtlas) -> Result<Self> {
        Ok(Self {
            subject: make_effect_model(atlas, spec.subject_effect)?,
            disease: make_effect_model(atlas, spec.disease_effect)?,
            bias: spec.bias_effect.map(|p| make_effect_model(atlas, p)).transpose()?,
        })
    }

    fn check(&self, spec: &ScenarioSpec) -> Result<()> {
        if self.subject.params != spec.subject_effect || self.disease.params != spec.disease_effect {
            return Err(Error::Config("effect models were not built from this scenario".into()));
        }
        if self.bias.as_ref().map(|m| m.params) != spec.bias_effect {
            return Err(Error::Config("bias model does not match the scenario's bias effect".into()));
        }
        Ok(())
    }
}

/// Everything a scenario draws from its master seed. Independent of the bias
/// region, so paired scenarios see identical draws.
struct Draws {
    cells: [Vec<(Vec<f64>, f64, f64)>; 4],
}

fn draw(spec: &ScenarioSpec, sizes: [usize; 4]) -> Result<Draws> {
    let n: usize = sizes.iter().sum();
    let k = spec.subject_effect.modes;
    let mut rng = seeds::rng_for(spec.master_seed, "subject-coeffs", 0);
    let coeffs: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| spec.subject_dist.sample(&mut rng)).collect()).collect();
    let norms: Vec<f64> = coeffs.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let by_cell = stratified_assign_sized(&norms, &sizes, spec.master_seed)?;

    let mut rng = seeds::rng_for(spec.master_seed, "disease-mags", 0);
    let dis: Vec<f64> = (0..sizes[0] + sizes[1]).map(|_| spec.disease_dist.sample(&mut rng)).collect();
    let dis_cells = stratified_assign_sized(&dis, &sizes[..2], spec.master_seed ^ 1)?;

    let mut rng = seeds::rng_for(spec.master_seed, "bias-mags", 0);
    let bias: Vec<f64> = (0..sizes[0] + sizes[2]).map(|_| spec.bias_dist.sample(&mut rng)).collect();
    let bias_cells = stratified_assign_sized(&bias, &[sizes[0], sizes[2]], spec.master_seed ^ 2)?;

    let mut cells: [Vec<(Vec<f64>, f64, f64)>; 4] = Default::default();
    for (c, members) in by_cell.into_iter().enumerate() {
        // decouple within-cell order of the three stratified quantities
        let shuffle = |m: Vec<usize>, tag: &str| {
            let p = stratify::seeded_permutation(m.len(), spec.master_seed ^ c as u64, tag);
            p.into_iter().map(|i| m[i]).collect::<Vec<_>>()
        };
        let members = shuffle(members, "cell-subjects");
        let d = match c {
            0 | 1 => shuffle(dis_cells[c].clone(), "cell-disease").into_iter().map(|i| dis[i]).collect(),
            _ => vec![0.0; sizes[c]],
        };
        let b = match c {
            0 => shuffle(bias_cells[0].clone(), "cell-bias").into_iter().map(|i| bias[i]).collect(),
            2 => shuffle(bias_cells[1].clone(), "cell-bias").into_iter().map(|i| bias[i]).collect(),
            _ => vec![0.0; sizes[c]],
        };
        cells[c] = members.into_iter().zip(d).zip(b).map(|((m, d), b)| (coeffs[m].clone(), d, b)).collect();
    }
    Ok(Draws { cells })
}

/// Manifest of the scenario's subjects without volumes. Splits are unset.
pub fn plan_dataset(spec: &ScenarioSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let sizes = spec.cell_sizes()?;
    let draws = draw(spec, sizes)?;
    let has_bias = spec.bias_effect.is_some();
    let mut records = Vec::with_capacity(sizes.iter().sum());
    for (c, members) in draws.cells.into_iter().enumerate() {
        let (class, group) = CELLS[c];
        for (coeffs, d, b) in members {
            let id = records.len() as u32;
            records.push(SubjectRecord {
                id,
                class,
                group,
                split: None,
                subject_coeffs: coeffs,
                disease_mag: d,
                bias_mag: if has_bias { b } else { 0.0 },
                seed: seeds::derive_seed(spec.master_seed, "subject", id as u64),
                file: format!("scenario/{}/subject_{:05}.sbvl", spec.name, id),
                sha256: String::new(),
            });
        }
    }
    let mut manifest = DatasetManifest {
        scenario: spec.name.clone(),
        records,
        checksum: String::new(),
        params: spec.clone(),
        warnings: Vec::new(),
    };
    manifest.refresh_checksum();
    Ok(manifest)
}

/// Velocity fields of one subject: (subject + disease, bias).
pub fn subject_velocities(
    record: &SubjectRecord,
    models: &ScenarioModels,
) -> Result<(VelocityField, Option<VelocityField>)> {
    let mut base = sample_velocity(&models.subject, &record.subject_coeffs)?;
    if record.class == ClassLabel::Disease {
        base = base.add(&sample_velocity(&models.disease, &[record.disease_mag])?)?;
    }
    let bias = match (&models.bias, record.group) {
        (Some(m), BiasGroup::Bias) => Some(sample_velocity(m, &[record.bias_mag])?),
        _ => None,
    };
    Ok((base, bias))
}

pub fn render_subject(
    record: &SubjectRecord,
    models: &ScenarioModels,
    template: &TemplateVolume,
    steps: u32,
) -> Result<TemplateVolume> {
    let (base, bias) = subject_velocities(record, models)?;
    let total = match bias {
        Some(b) => base.add(&b)?,
        None => base,
    };
    let speed = total.0.max_norm();
    if speed / 2f64.powi(steps as i32) > 0.5 {
        return Err(Error::Numeric(format!(
            "subject {}: max speed {speed:.3} needs more than {steps} squaring steps",
            record.id
        )));
    }
    let phi = exp_svf(&total, Some(steps))?;
    let j = jacobian_min(&phi)?;
    if !(j > 0.0) {
        return Err(Error::Numeric(format!(
            "subject {}: deformation folds (minimum Jacobian {j:.3}); lower the effect magnitudes or raise their smoothness",
            record.id
        )));
    }
    warp(template, &phi)
}

/// Generates the scenario's manifest (unsplit) and one volume per subject.
pub fn generate_dataset(
    spec: &ScenarioSpec,
    models: &ScenarioModels,
    template: &TemplateVolume,
    atlas: &RegionAtlas,
) -> Result<(DatasetManifest, Vec<TemplateVolume>)> {
    if template.dims() != atlas.dims() {
        return Err(Error::Shape { expected: atlas.dims(), actual: template.dims() });
    }
    models.check(spec)?;
    if models.subject.dims() != atlas.dims() {
        return Err(Error::Config("effect models were built against a different atlas".into()));
    }
    for label in [spec.disease_region(), spec.bias_region()].into_iter().flatten() {
        atlas.region(label)?;
    }
    let mut manifest = plan_dataset(spec)?;
    let mut volumes = Vec::with_capacity(manifest.records.len());
    for rec in &mut manifest.records {
        let vol = render_subject(rec, models, template, spec.integration_steps)?;
        rec.sha256 = hex::encode(Sha256::digest(io::encode_volume(&vol)));
        volumes.push(vol);
    }
    manifest.refresh_checksum();
    Ok((manifest, volumes))
}

/// Writes `scenario/<name>/subject_<id>.sbvl`, the bare record array
/// `scenario/<name>/manifest.json` and the full `scenario/<name>/dataset.json`.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, volumes: &[TemplateVolume]) -> Result<()> {
    if manifest.records.len() != volumes.len() {
        return Err(Error::Config("manifest/volume count mismatch".into()));
    }
    let dir = root.join("scenario").join(&manifest.scenario);
    std::fs::create_dir_all(&dir)?;
    for (rec, vol) in manifest.records.iter().zip(volumes) {
        io::write_file(&root.join(&rec.file), &io::encode_volume(vol))?;
    }
    io::write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest.records)?)?;
    io::write_file(&dir.join("dataset.json"), &serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`], verifying every file hash.
pub fn read_dataset(root: &Path, scenario: &str) -> Result<(DatasetManifest, Vec<TemplateVolume>)> {
    let dir = root.join("scenario").join(scenario);
    let manifest: DatasetManifest = serde_json::from_slice(&io::read_file(&dir.join("dataset.json"))?)?;
    if DatasetManifest::compute_checksum(&manifest.records) != manifest.checksum {
        return Err(Error::Format(format!("manifest checksum mismatch in {}", dir.display())));
    }
    let mut volumes = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let bytes = io::read_file(&root.join(&rec.file))?;
        if hex::encode(Sha256::digest(&bytes)) != rec.sha256 {
            return Err(Error::Format(format!("hash mismatch for {}", rec.file)));
        }
        volumes.push(io::decode_volume(&bytes)?);
    }
    Ok((manifest, volumes))
}

/// Upper bound on any subject's velocity speed under the scenario's
/// distribution caps.
pub fn speed_bound(spec: &ScenarioSpec, models: &ScenarioModels) -> f64 {
    let mode_max = |m: &EffectModel| m.basis.iter().map(|b| b.max_norm()).collect::<Vec<_>>();
    let subject: f64 = mode_max(&models.subject).iter().sum::<f64>()
        * spec.subject_dist.upper_abs()
        * models.subject.magnitude_scale();
    let disease = mode_max(&models.disease)[0] * spec.disease_dist.upper_abs() * models.disease.magnitude_scale();
    let bias = models
        .bias
        .as_ref()
        .map(|m| mode_max(m)[0] * spec.bias_dist.upper_abs() * m.magnitude_scale())
        .unwrap_or(0.0);
    subject + disease + bias
}
