//! Cell-by-cell trial execution with on-disk, hash-checked artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/scenario/<scenario>/...            datasets (simba_gen layout)
//! runs/<scenario>/<method>/seed-<n>/      per-cell models, histories, records
//! report/                                 emitted reports
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use biastrial_core::fairmetrics::{disparities, group_confusion, DisparityReport, GroupMetrics};
use biastrial_core::phantom::{build_phantom, RegionAtlas, RegionRole, TemplateVolume};
use biastrial_core::simba_gen::{
    generate_dataset, read_dataset, split_dataset, write_dataset, BiasGroup, ClassLabel, DatasetManifest, ScenarioKind,
    ScenarioModels,
};
use biastrial_core::io;
use biastrial_nn::checkpoint;
use biastrial_nn::mitigate::{train_group_models, unlearn, GroupModels, UnlearnEpoch};
use biastrial_nn::saliency::{test_group_map, weighted_saliency_score};
use biastrial_nn::train::TrainOptions;
use biastrial_nn::{init_params, predict, reweigh_weights, train, History, ModelParams, SaliencyConfig, SplitData, TrainConfig};
use log::info;
use serde::{Deserialize, Serialize};

use crate::artifact::{content_hash, sha256_hex, Sealed};
use crate::config::{Cell, Method, TrialConfig};
use crate::error::{Context, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub file: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnSummary {
    /// Stage-2 head accuracy on the frozen naive encoder.
    pub head_val_acc: f64,
    pub final_bias_acc: f64,
    pub chance_level: f64,
    pub epochs: Vec<UnlearnEpoch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub cell: Cell,
    /// Hash of the configuration the models were trained under.
    pub inputs: String,
    pub init_checksum: String,
    pub models: Vec<ModelFile>,
    /// (epochs run, best epoch) per trained model, in `models` order.
    pub epochs: Vec<(usize, usize)>,
    pub unlearn: Option<UnlearnSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub cell: Cell,
    pub fit_hash: String,
    pub ids: Vec<u32>,
    pub probabilities: Vec<f64>,
    pub metrics: GroupMetrics,
    /// `None` when a group rate is undefined on the test split.
    pub disparity: Option<DisparityReport>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub label: i32,
    pub region: String,
    pub role: RegionRole,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub cell: Cell,
    pub fit_hash: String,
    pub inputs: String,
    pub subjects: Vec<u32>,
    pub short: bool,
    pub map_sha256: String,
    pub scores: Vec<RegionScore>,
}

/// Trained parameters of one cell.
#[derive(Debug, Clone)]
pub enum Fitted {
    Single(ModelParams<f32>),
    Groups(GroupModels<f32>),
}

impl Fitted {
    pub fn predict(&self, data: &SplitData<f32>) -> Result<Vec<f64>> {
        let p = match self {
            Fitted::Single(m) => predict(m, &SplitData::inputs(&data.test), data.dims)?,
            Fitted::Groups(g) => g.predict(&data.test, data.dims)?,
        };
        Ok(p.into_iter().map(f64::from).collect())
    }

    /// Model applied to subjects of `group`.
    pub fn for_group(&self, group: BiasGroup) -> &ModelParams<f32> {
        match self {
            Fitted::Single(m) => m,
            Fitted::Groups(g) => g.for_group(group),
        }
    }
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub data: SplitData<f32>,
}

/// Owns the phantom, the datasets and the output tree of one trial.
pub struct Trial {
    pub cfg: TrialConfig,
    pub resume: bool,
    /// Methods whose valid fits are reused even without `resume`, for
    /// commands that only consume trained models.
    pub reuse_fits: Vec<Method>,
    pub template: TemplateVolume,
    pub atlas: RegionAtlas,
    datasets: BTreeMap<ScenarioKind, Dataset>,
    fitted_now: HashSet<Cell>,
}

impl Trial {
    pub fn new(cfg: TrialConfig, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let (template, atlas) = build_phantom(&cfg.phantom)?;
        Ok(Self { cfg, resume, reuse_fits: Vec::new(), template, atlas, datasets: BTreeMap::new(), fitted_now: HashSet::new() })
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn data_root(&self) -> PathBuf {
        self.cfg.out_dir.join("data")
    }

    pub fn cell_dir(&self, cell: Cell) -> PathBuf {
        self.cfg
            .out_dir
            .join("runs")
            .join(cell.scenario.name())
            .join(cell.method.name())
            .join(format!("seed-{}", cell.seed))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("report")
    }

    /// Generates (or, when resuming, reloads) the scenario's dataset.
    pub fn ensure_dataset(&mut self, kind: ScenarioKind) -> Result<()> {
        if !self.datasets.contains_key(&kind) {
            let ds = self.load_or_generate(kind)?;
            self.datasets.insert(kind, ds);
        }
        Ok(())
    }

    /// A dataset loaded by [`Trial::ensure_dataset`].
    pub fn dataset(&self, kind: ScenarioKind) -> &Dataset {
        &self.datasets[&kind]
    }

    fn load_or_generate(&self, kind: ScenarioKind) -> Result<Dataset> {
        let dc = &self.cfg.dataset;
        let spec = dc.scenario(&self.atlas, kind)?;
        let root = self.data_root();
        if self.resume {
            if let Ok((manifest, volumes)) = read_dataset(&root, kind.name()) {
                if manifest.params == spec && manifest.records.iter().all(|r| r.split.is_some()) {
                    info!("{}: reusing dataset in {}", kind.name(), root.display());
                    let data = SplitData::from_manifest(&manifest, &volumes)?;
                    return Ok(Dataset { manifest, data });
                }
            }
        }
        info!("{}: generating {} subjects", kind.name(), dc.n_disease + dc.n_nondisease);
        let models = ScenarioModels::build(&spec, &self.atlas)?;
        let (manifest, volumes) = generate_dataset(&spec, &models, &self.template, &self.atlas)?;
        let manifest = split_dataset(&manifest, dc.split_fractions, dc.split_seed)?;
        for w in &manifest.warnings {
            log::warn!("{}: {w}", kind.name());
        }
        write_dataset(&root, &manifest, &volumes)?;
        io::write_file(&root.join("template.sbvl"), &io::encode_volume(&self.template))?;
        io::write_file(&root.join("atlas.sbla"), &io::encode_atlas(&self.atlas)?)?;
        let data = SplitData::from_manifest(&manifest, &volumes)?;
        Ok(Dataset { manifest, data })
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.cfg.train.clone() }
    }

    fn fit_inputs(&self, cell: Cell) -> String {
        let c = &self.cfg;
        let unlearn = (cell.method == Method::Unlearn).then_some(&c.unlearn);
        let pretrain = (cell.method == Method::GroupModels).then_some(c.pretrain_epochs);
        content_hash(&(&c.phantom, &c.dataset, &c.model, self.train_config(cell.seed), unlearn, pretrain))
    }

    fn saliency_inputs(&self, cell: Cell) -> String {
        content_hash(&(&self.cfg.saliency, self.cfg.saliency_subjects, cell.seed))
    }

    fn valid_fit(&self, cell: Cell) -> Option<Sealed<FitRecord>> {
        let dir = self.cell_dir(cell);
        let rec = Sealed::<FitRecord>::read_valid(&dir.join("fit.json"))?;
        let ok = rec.body.cell == cell
            && rec.body.inputs == self.fit_inputs(cell)
            && rec.body.models.iter().all(|m| {
                checkpoint::load::<f32>(&dir.join(&m.file)).map(|p| p.checksum() == m.checksum).unwrap_or(false)
            });
        ok.then_some(rec)
    }

    fn load_fitted(&self, cell: Cell, rec: &FitRecord) -> Result<Fitted> {
        let dir = self.cell_dir(cell);
        let mut models = rec.models.iter().map(|m| checkpoint::load::<f32>(&dir.join(&m.file)));
        Ok(match cell.method {
            Method::GroupModels => {
                let (bias, non_bias) = (models.next().unwrap()?, models.next().unwrap()?);
                let h = |name: &str| -> Result<History> {
                    Ok(History { records: History::read_csv(&dir.join(name))?, ..Default::default() })
                };
                Fitted::Groups(GroupModels {
                    bias,
                    non_bias,
                    bias_history: h("history-bias.csv")?,
                    non_bias_history: h("history-non-bias.csv")?,
                })
            }
            _ => Fitted::Single(models.next().unwrap()?),
        })
    }

    /// Trained models of `cell`, training them unless a valid record exists
    /// (from this run, or from an earlier one when resuming).
    pub fn fit(&mut self, cell: Cell) -> Result<(Sealed<FitRecord>, Fitted)> {
        if self.resume || self.reuse_fits.contains(&cell.method) || self.fitted_now.contains(&cell) {
            if let Some(rec) = self.valid_fit(cell) {
                let fitted = self.load_fitted(cell, &rec.body).in_cell(cell)?;
                return Ok((rec, fitted));
            }
        }
        let out = self.fit_fresh(cell).in_cell(cell)?;
        self.fitted_now.insert(cell);
        Ok(out)
    }

    fn fit_fresh(&mut self, cell: Cell) -> Result<(Sealed<FitRecord>, Fitted)> {
        info!("{cell}: training");
        let init = init_params::<f32>(&self.cfg.model, cell.seed)?;
        let init_checksum = init.checksum();
        let tc = self.train_config(cell.seed);
        self.ensure_dataset(cell.scenario)?;
        let dir = self.cell_dir(cell);
        std::fs::create_dir_all(&dir)?;
        let inputs = self.fit_inputs(cell);
        let mut rec = FitRecord { cell, inputs, init_checksum, models: Vec::new(), epochs: Vec::new(), unlearn: None };
        let save = |rec: &mut FitRecord, p: &ModelParams<f32>, file: &str| -> Result<()> {
            checkpoint::save(p, &dir.join(file))?;
            rec.models.push(ModelFile { file: file.into(), checksum: p.checksum() });
            Ok(())
        };
        let fitted = match cell.method {
            Method::Naive | Method::Reweigh => {
                let ds = self.dataset(cell.scenario);
                let weights = match cell.method {
                    Method::Reweigh => Some(reweigh_weights(&ds.manifest)?),
                    _ => None,
                };
                if let Some(w) = &weights {
                    w.write_csv(&dir.join("weights.csv"))?;
                }
                let opts = TrainOptions { weights: weights.as_ref(), ..Default::default() };
                let (p, h) = train(init, &ds.data, &tc, &opts)?;
                h.write_csv(&dir.join("history.csv"))?;
                rec.epochs.push((h.records.len(), h.best_epoch));
                save(&mut rec, &p, "model.sbnn")?;
                Fitted::Single(p)
            }
            Method::Unlearn => {
                let naive = Cell { method: Method::Naive, ..cell };
                let (_, stage1) = self.fit(naive)?;
                let Fitted::Single(stage1) = stage1 else { unreachable!("naive cells hold one model") };
                let ucfg = biastrial_nn::UnlearnConfig { seed: cell.seed, ..self.cfg.unlearn.clone() };
                let out = unlearn(stage1, &self.dataset(cell.scenario).data, &tc, &ucfg)?;
                write_unlearn_csv(&dir.join("unlearn.csv"), &out.epochs)?;
                rec.epochs.push((out.epochs.len(), out.epochs.len()));
                rec.unlearn = Some(UnlearnSummary {
                    head_val_acc: out.head_val_acc,
                    final_bias_acc: out.final_bias_acc(),
                    chance_level: out.chance_level,
                    epochs: out.epochs.clone(),
                });
                save(&mut rec, &out.params, "model.sbnn")?;
                Fitted::Single(out.params)
            }
            Method::GroupModels => {
                let pre = self.cfg.pretrain_epochs;
                let g = train_group_models(init, &self.dataset(cell.scenario).data, &tc, pre)?;
                g.bias_history.write_csv(&dir.join("history-bias.csv"))?;
                g.non_bias_history.write_csv(&dir.join("history-non-bias.csv"))?;
                for h in [&g.bias_history, &g.non_bias_history] {
                    rec.epochs.push((h.records.len(), h.best_epoch));
                }
                save(&mut rec, &g.bias, "model-bias.sbnn")?;
                save(&mut rec, &g.non_bias, "model-non-bias.sbnn")?;
                Fitted::Groups(g)
            }
        };
        let sealed = Sealed::new(rec);
        sealed.write(&dir.join("fit.json"))?;
        Ok((sealed, fitted))
    }

    /// Test-split metrics of a cell.
    pub fn evaluate(&mut self, cell: Cell) -> Result<Sealed<EvalRecord>> {
        let (fit, fitted) = self.fit(cell)?;
        let path = self.cell_dir(cell).join("eval.json");
        if self.resume {
            if let Some(rec) = Sealed::<EvalRecord>::read_valid(&path) {
                if rec.body.cell == cell && rec.body.fit_hash == fit.hash {
                    return Ok(rec);
                }
            }
        }
        let rec = self.evaluate_fresh(cell, &fit.hash, &fitted).in_cell(cell)?;
        let sealed = Sealed::new(rec);
        sealed.write(&path).in_cell(cell)?;
        Ok(sealed)
    }

    fn evaluate_fresh(&mut self, cell: Cell, fit_hash: &str, fitted: &Fitted) -> Result<EvalRecord> {
        self.ensure_dataset(cell.scenario)?;
        let data = &self.dataset(cell.scenario).data;
        let probabilities = fitted.predict(data)?;
        let labels: Vec<bool> = data.test.iter().map(|e| e.label).collect();
        let groups: Vec<BiasGroup> = data.test.iter().map(|e| e.group).collect();
        let metrics = group_confusion(&probabilities, &labels, &groups, 0.5)?;
        let (disparity, flags) = match disparities(&metrics, cell.seed) {
            Ok(d) => (Some(d), metrics.flags()),
            Err(biastrial_core::Error::Undefined(msg)) => {
                let mut f = metrics.flags();
                f.push(msg);
                (None, f)
            }
            Err(e) => return Err(e.into()),
        };
        let mut csv = csv::Writer::from_path(self.cell_dir(cell).join("predictions.csv"))?;
        csv.write_record(["id", "label", "group", "probability"])?;
        for ((e, p), g) in data.test.iter().zip(&probabilities).zip(&groups) {
            let group = if *g == BiasGroup::Bias { "bias" } else { "non-bias" };
            csv.write_record([e.id.to_string(), u8::from(e.label).to_string(), group.to_string(), p.to_string()])?;
        }
        csv.flush()?;
        Ok(EvalRecord {
            cell,
            fit_hash: fit_hash.to_string(),
            ids: data.test.iter().map(|e| e.id).collect(),
            probabilities,
            metrics,
            disparity,
            flags,
        })
    }

    /// Group-averaged SmoothGrad map of the disease-class bias group on the
    /// test split, and its weighted score in every atlas region.
    pub fn saliency(&mut self, cell: Cell) -> Result<Sealed<SaliencyRecord>> {
        let (fit, fitted) = self.fit(cell)?;
        let path = self.cell_dir(cell).join("saliency.json");
        if self.resume {
            if let Some(rec) = Sealed::<SaliencyRecord>::read_valid(&path) {
                let map_ok = std::fs::read(self.cell_dir(cell).join("saliency_map.sbvl"))
                    .map(|b| sha256_hex(&b) == rec.body.map_sha256)
                    .unwrap_or(false);
                let same = rec.body.cell == cell && rec.body.fit_hash == fit.hash && rec.body.inputs == self.saliency_inputs(cell);
                if same && map_ok {
                    return Ok(rec);
                }
            }
        }
        let rec = self.saliency_fresh(cell, &fit.hash, &fitted).in_cell(cell)?;
        let sealed = Sealed::new(rec);
        sealed.write(&path).in_cell(cell)?;
        Ok(sealed)
    }

    fn saliency_fresh(&mut self, cell: Cell, fit_hash: &str, fitted: &Fitted) -> Result<SaliencyRecord> {
        info!("{cell}: saliency");
        let scfg = SaliencyConfig { seed: cell.seed, ..self.cfg.saliency.clone() };
        let count = self.cfg.saliency_subjects;
        let (group, class) = (BiasGroup::Bias, ClassLabel::Disease);
        self.ensure_dataset(cell.scenario)?;
        let data = &self.dataset(cell.scenario).data;
        let map = test_group_map(fitted.for_group(group), data, class, group, count, &scfg)?;
        if map.short {
            log::warn!("{cell}: only {} of {count} correctly classified subjects for the saliency map", map.subjects.len());
        }
        let bytes = io::encode_channels(&[&map.values], self.template.spacing)?;
        io::write_file(&self.cell_dir(cell).join("saliency_map.sbvl"), &bytes)?;
        let scores = self
            .atlas
            .regions
            .iter()
            .map(|r| {
                let score = match weighted_saliency_score(&map.values, &self.atlas, r.label) {
                    Ok(s) => Some(s),
                    Err(biastrial_core::Error::Undefined(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(RegionScore { label: r.label, region: r.name.clone(), role: r.role, score })
            })
            .collect::<biastrial_core::Result<Vec<_>>>()?;
        Ok(SaliencyRecord {
            cell,
            fit_hash: fit_hash.to_string(),
            inputs: self.saliency_inputs(cell),
            subjects: map.subjects,
            short: map.short,
            map_sha256: sha256_hex(&bytes),
            scores,
        })
    }
}

fn write_unlearn_csv(path: &Path, epochs: &[UnlearnEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cell's sealed records without computing anything.
pub fn read_cell(trial: &Trial, cell: Cell) -> Result<(Sealed<FitRecord>, Sealed<EvalRecord>, Sealed<SaliencyRecord>)> {
    let missing = |what: &str| Error::config(format!("no valid {what} record; run the trial first"));
    let fit = trial.valid_fit(cell).ok_or_else(|| missing("fit"))?;
    let dir = trial.cell_dir(cell);
    let eval = Sealed::<EvalRecord>::read_valid(&dir.join("eval.json"))
        .filter(|e| e.body.fit_hash == fit.hash)
        .ok_or_else(|| missing("eval"))?;
    let sal = Sealed::<SaliencyRecord>::read_valid(&dir.join("saliency.json"))
        .filter(|s| s.body.fit_hash == fit.hash && s.body.inputs == trial.saliency_inputs(cell))
        .ok_or_else(|| missing("saliency"))?;
    Ok((fit, eval, sal))
}
