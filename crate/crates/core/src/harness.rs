//! End-to-end experiments: load and preprocess subjects, pretrain one model
//! per (strategy, repeat) cell, probe it and collect a report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::GroupingTable;
use crate::error::{Error, Result};
use crate::io::{list_subjects, read_any, read_labels, read_labels_csv};
use crate::mae::{masked_mse, pretrain, AtlasInputs, MaeModel, PatchSpec, Sample, TrainConfig};
use crate::masking::{apply_mask, generate_mask, MaskContext, MaskStrategy};
use crate::preprocess::{align_atlas, preprocess_subject, PreprocessConfig};
use crate::probe::{
    evaluate, extract_features, split_subjects, train_head, HeadConfig, LogisticHead, Metrics,
    SplitAssignment,
};
use crate::rng::derive;
use crate::scalar::pairwise_sum;
use crate::volume::{GridDims, LabelVolume, Volume4D};

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "ROIMASK_WORKERS";

const TAG_SPLIT: u64 = 0x53_504C;
const TAG_CELL: u64 = 0x43_454C;
const TAG_EVAL: u64 = 0x45_564C;

/// Where subjects come from and how they are prepared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub data_dir: PathBuf,
    /// Defaults to `labels.csv` inside `data_dir`.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub atlas: Option<PathBuf>,
    /// Defaults to the bundled AAL3 grouping when an atlas is given.
    #[serde(default)]
    pub grouping: Option<PathBuf>,
    /// Omit to use volumes as stored.
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
}

impl DataSpec {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        DataSpec {
            data_dir: data_dir.into(),
            labels: None,
            atlas: None,
            grouping: None,
            preprocess: None,
        }
    }

    fn labels_path(&self) -> PathBuf {
        self.labels
            .clone()
            .unwrap_or_else(|| self.data_dir.join("labels.csv"))
    }

    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        for p in [&mut self.labels, &mut self.atlas, &mut self.grouping]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

/// Preprocessed subjects on one common grid.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<Sample<f32>>,
    /// Class label per subject, when a label table was read.
    pub labels: Option<Vec<u8>>,
    pub atlas: Option<LabelVolume>,
    pub grouping: Option<GroupingTable>,
}

impl Dataset {
    pub fn dims(&self) -> GridDims {
        self.samples[0].volume.dims()
    }

    pub fn atlas_inputs(&self) -> Option<AtlasInputs<'_>> {
        match (&self.atlas, &self.grouping) {
            (Some(labels), Some(grouping)) => Some(AtlasInputs { labels, grouping }),
            _ => None,
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    fn indices(&self, ids: &[String]) -> Vec<usize> {
        ids.iter()
            .map(|id| self.index_of(id).expect("split built from dataset ids"))
            .collect()
    }
}

/// Appends zero frames so the frame count is a multiple of `pt`.
fn pad_frames(vol: &Volume4D<f32>, pt: usize) -> Result<Volume4D<f32>> {
    let d = vol.dims();
    let nt = d.nt.div_ceil(pt) * pt;
    if nt == d.nt {
        return Ok(vol.clone());
    }
    let mut data = vol.data().to_vec();
    data.resize(d.n_spatial() * nt, 0.0);
    vol.like(d.with_frames(nt), data)
}

/// Loads every subject in `spec.data_dir`. With `require_labels`, subjects
/// missing from the label table are an error; otherwise labels are read
/// only if the table exists.
pub fn load_dataset(spec: &DataSpec, patch: [usize; 4], require_labels: bool) -> Result<Dataset> {
    let listed = list_subjects(&spec.data_dir)?;
    if listed.is_empty() {
        return Err(Error::invalid(format!(
            "no volumes found in {}",
            spec.data_dir.display()
        )));
    }
    let label_path = spec.labels_path();
    let table = if require_labels || label_path.exists() {
        Some(read_labels_csv(&label_path)?)
    } else {
        None
    };
    let raw_atlas = spec.atlas.as_ref().map(read_labels).transpose()?;
    let grouping = match (&spec.grouping, &raw_atlas) {
        (Some(p), _) => Some(GroupingTable::load(p)?),
        (None, Some(_)) => Some(GroupingTable::default_aal3()),
        (None, None) => None,
    };

    let prepared: Vec<Result<(Sample<f32>, Option<LabelVolume>)>> = listed
        .par_iter()
        .map(|(id, path)| {
            let vol: Volume4D<f32> = read_any(path)?;
            let (vol, brain, atlas) = match &spec.preprocess {
                Some(cfg) => {
                    let p = preprocess_subject(&vol, raw_atlas.as_ref(), cfg)?;
                    (p.volume, p.brain, p.atlas)
                }
                None => {
                    let atlas = raw_atlas
                        .as_ref()
                        .map(|a| align_atlas(a, &vol))
                        .transpose()?;
                    let brain = vol.brain_mask();
                    (vol, brain, atlas)
                }
            };
            let spatial = vol.dims().shape();
            if (0..3).any(|a| spatial[a] % patch[a] != 0) {
                return Err(Error::invalid(format!(
                    "subject {id}: grid {spatial:?} is not divisible by patch {patch:?}; \
                     choose a preprocessing target shape that is"
                )));
            }
            let volume = pad_frames(&vol, patch[3])?;
            Ok((Sample { volume, brain }, atlas))
        })
        .collect();

    let mut ids = Vec::new();
    let mut samples = Vec::new();
    let mut atlas: Option<LabelVolume> = None;
    let mut labels = table.as_ref().map(|_| Vec::new());
    for ((id, _), r) in listed.iter().zip(prepared) {
        let (sample, aligned) = r?;
        if let Some(first) = samples.first().map(|s: &Sample<f32>| s.volume.dims()) {
            if sample.volume.dims() != first {
                return Err(Error::invalid(format!(
                    "subject {id} has grid {:?}, expected {:?}; enable preprocessing",
                    sample.volume.dims(),
                    first
                )));
            }
        }
        match (&atlas, aligned) {
            (None, Some(a)) => atlas = Some(a),
            (Some(a), Some(b)) if *a != b => {
                return Err(Error::invalid(format!(
                    "atlas aligns differently for subject {id}; subjects must share one space"
                )))
            }
            _ => {}
        }
        if let (Some(table), Some(out)) = (&table, labels.as_mut()) {
            match table.get(id) {
                Some(&l) => out.push(l),
                None => {
                    return Err(Error::invalid(format!(
                        "subject {id} is missing from {}",
                        label_path.display()
                    )))
                }
            }
        }
        ids.push(id.clone());
        samples.push(sample);
    }
    if let Some(table) = &table {
        let extra = table.keys().filter(|k| !ids.contains(k)).count();
        if extra > 0 {
            warn!("{extra} labelled subjects have no volume");
        }
    }
    Ok(Dataset {
        ids,
        samples,
        labels,
        atlas,
        grouping,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub data: DataSpec,
    /// Mask strategy strings, e.g. `random-tube:0.1` or `roi:limbic:1`.
    pub strategies: Vec<String>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: HeadConfig,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths are taken relative to its folder.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve_against(base);
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::invalid("at least one strategy is required"));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        self.parsed_strategies(0)?;
        self.train.validate()?;
        self.probe.validate()?;
        if let Some(p) = &self.data.preprocess {
            p.validate()?;
        }
        if !self.data.data_dir.is_dir() {
            return Err(Error::invalid(format!(
                "data dir {} does not exist",
                self.data.data_dir.display()
            )));
        }
        for p in [&self.data.atlas, &self.data.grouping]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::invalid(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn parsed_strategies(&self, seed: u64) -> Result<Vec<MaskStrategy>> {
        self.strategies
            .iter()
            .map(|s| MaskStrategy::parse(s, seed))
            .collect()
    }

    pub fn split_seed(&self) -> u64 {
        derive(self.seed, &[TAG_SPLIT])
    }

    /// Seed of repeat `r`, shared by every strategy.
    pub fn cell_seed(&self, repeat: usize) -> u64 {
        derive(self.seed, &[TAG_CELL, repeat as u64])
    }
}

/// Which split the row's metrics were measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Test,
    /// Too few subjects for a test split.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    pub repeat: usize,
    pub seed: u64,
    /// Masked MSE of the final model on the evaluation split.
    pub recon_loss: f64,
    /// Base seed of the evaluation masks; subject `k` of the split uses
    /// `derive(eval_mask_seed, [k])`.
    pub eval_mask_seed: u64,
    pub final_epoch_loss: f64,
    pub first_epoch_loss: f64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub masked_voxels: f64,
    pub masked_percent: f64,
    pub eval_split: EvalSplit,
    pub model_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = pairwise_sum(n, |i| values[i]) / n as f64;
        let std = if n > 1 {
            (pairwise_sum(n, |i| (values[i] - mean).powi(2)) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: String,
    pub recon_loss: Stat,
    pub final_epoch_loss: Stat,
    pub acc: Stat,
    pub auc: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub strategy: String,
    pub repeat: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub split: [usize; 3],
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<CellFailure>,
}

impl ExperimentReport {
    pub fn from_rows(split: [usize; 3], rows: Vec<ReportRow>, failures: Vec<CellFailure>) -> Self {
        let mut order: Vec<&str> = Vec::new();
        for r in &rows {
            if !order.contains(&r.strategy.as_str()) {
                order.push(&r.strategy);
            }
        }
        let aggregates = order
            .iter()
            .map(|s| {
                let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.strategy == *s).collect();
                let col = |f: fn(&ReportRow) -> f64| mine.iter().map(|r| f(r)).collect::<Vec<_>>();
                let aucs: Vec<f64> = mine.iter().filter_map(|r| r.auc).collect();
                Aggregate {
                    strategy: s.to_string(),
                    recon_loss: Stat::of(&col(|r| r.recon_loss)).unwrap(),
                    final_epoch_loss: Stat::of(&col(|r| r.final_epoch_loss)).unwrap(),
                    acc: Stat::of(&col(|r| r.acc)).unwrap(),
                    auc: Stat::of(&aucs),
                }
            })
            .collect();
        ExperimentReport {
            split,
            rows,
            aggregates,
            failures,
        }
    }

    pub fn aggregate(&self, strategy: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.strategy == strategy)
    }

    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Subjects used for metrics and reconstruction loss.
fn eval_ids(split: &SplitAssignment) -> (&[String], EvalSplit) {
    if split.test.is_empty() {
        (&split.train, EvalSplit::Train)
    } else {
        (&split.test, EvalSplit::Test)
    }
}

/// Mask applied to subject `k` of the evaluation split.
pub fn eval_mask(
    data: &Dataset,
    strategy: &MaskStrategy,
    eval_mask_seed: u64,
    subject: usize,
    k: usize,
) -> Result<crate::volume::Mask4D> {
    let sample = &data.samples[subject];
    let ctx = match data.atlas_inputs() {
        Some(a) => MaskContext::with_atlas(&sample.brain, a.labels, a.grouping),
        None => MaskContext::new(&sample.brain),
    };
    let sub = strategy.with_seed(derive(eval_mask_seed, &[k as u64]));
    generate_mask(&sub, sample.volume.dims(), &ctx)
}

/// Mean masked MSE of `model` over `subjects`, masks from `eval_mask_seed`.
pub fn reconstruction_loss(
    model: &MaeModel<f32>,
    data: &Dataset,
    subjects: &[usize],
    strategy: &MaskStrategy,
    eval_mask_seed: u64,
) -> Result<f64> {
    let spec = PatchSpec::new(data.dims(), model.patch())?;
    let losses = subjects
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let mask = eval_mask(data, strategy, eval_mask_seed, i, k)?;
            let vol = &data.samples[i].volume;
            let recon = model.forward(&apply_mask(vol, &mask, 0.0)?, &spec)?;
            masked_mse(&recon, vol, &mask)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(losses.len(), |i| losses[i]) / losses.len() as f64)
}

/// Head fitted on frozen features and its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub split: [usize; 3],
    pub head: LogisticHead,
    pub val: Option<Metrics>,
    pub eval: Metrics,
    pub eval_split: EvalSplit,
}

/// Extracts features for every subject, trains a head on the train split,
/// selects on val and evaluates on test.
pub fn run_probe(
    model: &MaeModel<f32>,
    data: &Dataset,
    split: &SplitAssignment,
    cfg: &HeadConfig,
) -> Result<ProbeResult> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("probing needs subject labels"))?;
    let spec = PatchSpec::new(data.dims(), model.patch())?;
    let features = data
        .samples
        .par_iter()
        .map(|s| extract_features(model, &s.volume, &spec))
        .collect::<Result<Vec<_>>>()?;
    let pick = |ids: &[String]| {
        let idx = data.indices(ids);
        let x: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        (x, y)
    };
    let (tx, ty) = pick(&split.train);
    let (vx, vy) = pick(&split.val);
    let val = (!vx.is_empty()).then_some((vx.as_slice(), vy.as_slice()));
    let (head, _) = train_head(&tx, &ty, val, cfg)?;
    let val = val.map(|(x, y)| evaluate(&head, x, y)).transpose()?;
    let (ids, eval_split) = eval_ids(split);
    let (ex, ey) = pick(ids);
    Ok(ProbeResult {
        split: [split.train.len(), split.val.len(), split.test.len()],
        eval: evaluate(&head, &ex, &ey)?,
        head,
        val,
        eval_split,
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &Dataset,
    split: &SplitAssignment,
    strategy_text: &str,
    repeat: usize,
) -> Result<ReportRow> {
    let seed = cfg.cell_seed(repeat);
    let strategy = MaskStrategy::parse(strategy_text, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let train_idx = data.indices(&split.train);
    let train: Vec<&Sample<f32>> = train_idx.iter().map(|&i| &data.samples[i]).collect();
    let outcome = pretrain(&train, &strategy, &train_cfg, data.atlas_inputs())?;
    let model = outcome.model;

    let model_dir = cfg.out_dir.join("models");
    fs::create_dir_all(&model_dir)?;
    let model_file = format!("{}-r{repeat}.bin", strategy.kind.slug());
    model.save(model_dir.join(&model_file))?;

    let (ids, eval_split) = eval_ids(split);
    let eval_idx = data.indices(ids);
    let eval_mask_seed = derive(seed, &[TAG_EVAL]);
    let recon_loss = reconstruction_loss(&model, data, &eval_idx, &strategy, eval_mask_seed)?;

    let first = eval_mask(data, &strategy, eval_mask_seed, eval_idx[0], 0)?;
    let d = data.dims();
    let brain = &data.samples[eval_idx[0]].brain;
    let in_brain = first
        .indices()
        .filter(|&i| brain.get_index(i % d.n_spatial()))
        .count();
    let probe = run_probe(&model, data, split, &cfg.probe)?;
    info!(
        "{strategy_text} r{repeat}: loss {recon_loss:.5}, acc {:.3}, auc {:?}",
        probe.eval.acc, probe.eval.auc
    );
    Ok(ReportRow {
        strategy: strategy_text.to_string(),
        repeat,
        seed,
        recon_loss,
        eval_mask_seed,
        final_epoch_loss: *outcome.epoch_losses.last().unwrap(),
        first_epoch_loss: outcome.epoch_losses[0],
        acc: probe.eval.acc,
        auc: probe.eval.auc,
        masked_voxels: first.count() as f64 / d.nt as f64,
        masked_percent: 100.0 * in_brain as f64 / (brain.count() * d.nt) as f64,
        eval_split,
        model_file,
    })
}

/// Worker count from [`WORKERS_ENV`], if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| Error::invalid(format!("{WORKERS_ENV} must be a positive integer"))),
        Err(_) => Ok(None),
    }
}

/// Runs every (strategy, repeat) cell and writes the report files into
/// `cfg.out_dir`. Failed cells are listed in the report rather than aborting
/// the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data, cfg.train.patch, true)?;
    let split = split_subjects(&data.ids, cfg.split_seed())?;
    info!(
        "{} subjects, split {}/{}/{}",
        data.ids.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(
        cfg.out_dir.join("split.json"),
        serde_json::to_string_pretty(&split)?,
    )?;

    let cells: Vec<(usize, &String)> = (0..cfg.repeats)
        .flat_map(|r| cfg.strategies.iter().map(move |s| (r, s)))
        .collect();
    let run = || {
        cells
            .par_iter()
            .map(|&(r, s)| run_cell(cfg, &data, &split, s, r))
            .collect::<Vec<_>>()
    };
    let results = match workers_from_env()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(run),
        None => run(),
    };

    // rows ordered by strategy as configured, then repeat
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut by_cell: BTreeMap<(usize, usize), Result<ReportRow>> = BTreeMap::new();
    for ((r, s), res) in cells.iter().zip(results) {
        let si = cfg.strategies.iter().position(|x| x == *s).unwrap();
        by_cell.insert((si, *r), res);
    }
    for ((si, r), res) in by_cell {
        match res {
            Ok(row) => rows.push(row),
            Err(e) => {
                error!("cell {} r{r} failed: {e}", cfg.strategies[si]);
                failures.push(CellFailure {
                    strategy: cfg.strategies[si].clone(),
                    repeat: r,
                    seed: cfg.cell_seed(r),
                    error: e.to_string(),
                });
            }
        }
    }
    let report = ExperimentReport::from_rows(
        [split.train.len(), split.val.len(), split.test.len()],
        rows,
        failures,
    );
    if !report.rows.is_empty() {
        for fmt in [
            ReportFormat::Csv,
            ReportFormat::Json,
            ReportFormat::Markdown,
        ] {
            emit_report(&report, fmt, cfg.out_dir.join(fmt.file_name()))?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
            ReportFormat::Markdown => "report.md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

pub const REPORT_NOTE: &str = "Reconstruction loss is averaged over masked voxels only. \
Strategies hide different numbers of voxels, so loss values should not be compared across rows.";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

pub fn report_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "strategy",
        "repeat",
        "seed",
        "recon_loss",
        "eval_mask_seed",
        "final_epoch_loss",
        "first_epoch_loss",
        "acc",
        "aucroc",
        "masked_voxels",
        "masked_percent",
        "eval_split",
        "model_file",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.strategy.clone(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.recon_loss.to_string(),
            r.eval_mask_seed.to_string(),
            r.final_epoch_loss.to_string(),
            r.first_epoch_loss.to_string(),
            r.acc.to_string(),
            opt(r.auc),
            r.masked_voxels.to_string(),
            r.masked_percent.to_string(),
            format!("{:?}", r.eval_split).to_lowercase(),
            r.model_file.clone(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn pm(s: &Stat, scale: f64, digits: usize) -> String {
    if s.n > 1 {
        format!(
            "{:.*} ± {:.*}",
            digits,
            s.mean * scale,
            digits,
            s.std * scale
        )
    } else {
        format!("{:.*}", digits, s.mean * scale)
    }
}

pub fn report_markdown(report: &ExperimentReport) -> String {
    let mut out =
        String::from("| Mask | Reconstruction loss | ACC | AUCROC |\n|---|---|---|---|\n");
    for a in &report.aggregates {
        let auc = a
            .auc
            .as_ref()
            .map(|s| pm(s, 1.0, 3))
            .unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            a.strategy,
            pm(&a.recon_loss, 1.0, 4),
            pm(&a.acc, 100.0, 2),
            auc
        );
    }
    let _ = write!(
        out,
        "\nACC in percent; mean ± sample std over repeats. Split {}/{}/{}.\n\nNote: {REPORT_NOTE}\n",
        report.split[0], report.split[1], report.split[2]
    );
    if !report.failures.is_empty() {
        let _ = writeln!(out, "\nFailed cells: {}", report.failures.len());
    }
    out
}

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::invalid("report has no rows"));
    }
    match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Markdown => Ok(report_markdown(report)),
    }
}

pub fn emit_report(
    report: &ExperimentReport,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = render_report(report, format)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, repeat: usize, acc: f64, auc: Option<f64>) -> ReportRow {
        ReportRow {
            strategy: strategy.into(),
            repeat,
            seed: 10 + repeat as u64,
            recon_loss: 0.1 + repeat as f64 * 0.01,
            eval_mask_seed: 3,
            final_epoch_loss: 0.2,
            first_epoch_loss: 0.3,
            acc,
            auc,
            masked_voxels: 12.0,
            masked_percent: 1.0 / 3.0,
            eval_split: EvalSplit::Test,
            model_file: "m.bin".into(),
        }
    }

    #[test]
    fn stats() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn aggregates_follow_first_appearance() {
        let r = ExperimentReport::from_rows(
            [8, 1, 1],
            vec![
                row("b", 0, 0.5, Some(0.6)),
                row("a", 0, 1.0, None),
                row("b", 1, 0.7, Some(0.8)),
            ],
            vec![],
        );
        assert_eq!(r.aggregates[0].strategy, "b");
        let b = r.aggregate("b").unwrap();
        assert!((b.acc.mean - 0.6).abs() < 1e-12);
        assert!(r.aggregate("a").unwrap().auc.is_none());
    }

    #[test]
    fn empty_report_is_an_error() {
        let r = ExperimentReport::from_rows([0, 0, 0], vec![], vec![]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        assert!(emit_report(&r, ReportFormat::Csv, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn single_row_csv() {
        let r =
            ExperimentReport::from_rows([8, 1, 1], vec![row("roi:limbic:1", 0, 0.5, None)], vec![]);
        let csv = render_report(&r, ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("strategy,repeat,seed,recon_loss"));
        assert!(lines[1].contains(",NA,"));
    }

    #[test]
    fn json_roundtrip() {
        let r = ExperimentReport::from_rows(
            [8, 1, 1],
            vec![
                row("x", 0, 0.25, Some(0.1 + 0.2)),
                row("x", 1, 1.0 / 3.0, None),
            ],
            vec![CellFailure {
                strategy: "y".into(),
                repeat: 0,
                seed: 1,
                error: "boom".into(),
            }],
        );
        let text = render_report(&r, ReportFormat::Json).unwrap();
        let back: ExperimentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn markdown_columns() {
        let r = ExperimentReport::from_rows(
            [8, 1, 1],
            vec![row("random-tube:0.1", 0, 0.5, Some(0.5))],
            vec![],
        );
        let md = render_report(&r, ReportFormat::Markdown).unwrap();
        assert!(md.starts_with("| Mask | Reconstruction loss | ACC | AUCROC |"));
        assert!(md.contains("| random-tube:0.1 | 0.1000 | 50.00 | 0.500 |"));
        assert!("pdf".parse::<ReportFormat>().is_err());
        assert_eq!(
            "MD".parse::<ReportFormat>().unwrap(),
            ReportFormat::Markdown
        );
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = ExperimentConfig {
            data: DataSpec {
                preprocess: Some(PreprocessConfig::default()),
                ..DataSpec::new("data")
            },
            strategies: vec!["random-tube:0.1".into()],
            train: TrainConfig::default(),
            probe: HeadConfig::default(),
            out_dir: "out".into(),
            seed: 3,
            repeats: 2,
        };
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn frame_padding() {
        let d = GridDims::new(2, 1, 1, 3).unwrap();
        let v = Volume4D::new(d, vec![1.0; 6]).unwrap();
        let p = pad_frames(&v, 2).unwrap();
        assert_eq!(p.dims().nt, 4);
        assert_eq!(p.data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(pad_frames(&v, 3).unwrap(), v);
    }
}
