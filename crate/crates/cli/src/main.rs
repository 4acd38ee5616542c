use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use roimask::atlas::{mask_stats, mask_stats_csv, GroupingTable};
use roimask::harness::{
    load_dataset, read_report, render_report, run_experiment, run_probe, DataSpec,
    ExperimentConfig, ReportFormat,
};
use roimask::io::{list_subjects, read_any, read_labels, write_any, write_labels, VolumeFormat};
use roimask::mae::{pretrain, LossScope, TrainConfig};
use roimask::masking::MaskStrategy;
use roimask::preprocess::{
    atlas_on_preprocessed_grid, preprocess_subject, BackgroundRule, PreprocessConfig,
};
use roimask::probe::{split_subjects, HeadConfig};
use roimask::synth::{write_dataset, PhantomConfig};
use roimask::{Model, Volume};

#[derive(Parser)]
#[command(name = "roimask", version, about = "Atlas-guided masking for 4D fMRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample, crop/pad and z-score volumes.
    Preprocess(PreprocessCmd),
    /// Per-region voxel counts of an atlas on the preprocessed grid.
    MaskStats(MaskStatsCmd),
    /// Write a synthetic phantom dataset.
    Synth(SynthCmd),
    /// Masked-reconstruction pretraining on every subject of a folder.
    Pretrain(PretrainCmd),
    /// Fit and evaluate a logistic head on frozen features.
    Probe(ProbeCmd),
    /// Run a full experiment from a TOML config.
    Experiment(ExperimentCmd),
    /// Re-render a saved JSON report.
    Report(ReportCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Nii,
    V4d,
}

impl From<Format> for VolumeFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Nii => VolumeFormat::Nifti,
            Format::V4d => VolumeFormat::V4d,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Background {
    Intensity,
    Atlas,
}

fn parse_list<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected {N} comma-separated values, got {}", v.len()))
}

#[derive(Args)]
struct PreprocessArgs {
    /// Isotropic output spacing in mm.
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    /// Output grid, e.g. 96,96,96.
    #[arg(long, value_parser = parse_list::<3>, default_value = "96,96,96")]
    shape: [usize; 3],
    /// Output repetition time in seconds.
    #[arg(long, default_value_t = 0.8)]
    tr: f64,
    #[arg(long, value_enum, default_value = "intensity")]
    background: Background,
}

impl PreprocessArgs {
    fn config(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_spacing_mm: self.spacing,
            target_shape: self.shape,
            target_tr_s: self.tr,
            background_rule: match self.background {
                Background::Intensity => BackgroundRule::Intensity,
                Background::Atlas => BackgroundRule::Atlas,
            },
            ..PreprocessConfig::default()
        }
    }
}

#[derive(Args)]
struct PreprocessCmd {
    /// A volume file or a folder of volumes.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nii")]
    format: Format,
    #[command(flatten)]
    pp: PreprocessArgs,
}

#[derive(Args)]
struct MaskStatsCmd {
    #[arg(long)]
    atlas: PathBuf,
    /// Region grouping; the bundled AAL3 table when omitted.
    #[arg(long)]
    grouping: Option<PathBuf>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Count on the atlas's own grid.
    #[arg(long)]
    native: bool,
    #[command(flatten)]
    pp: PreprocessArgs,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    out: PathBuf,
    /// Subjects per class.
    #[arg(long, default_value_t = 40)]
    subjects: usize,
    #[arg(long, value_parser = parse_list::<4>, default_value = "16,16,16,24")]
    dims: [usize; 4],
    #[arg(long, default_value_t = 6)]
    target_region: u16,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum, default_value = "v4d")]
    format: Format,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long)]
    grouping: Option<PathBuf>,
    /// TOML preprocessing settings; volumes are used as stored when omitted.
    #[arg(long)]
    preprocess: Option<PathBuf>,
}

impl DataArgs {
    fn spec(&self, labels: Option<PathBuf>) -> Result<DataSpec> {
        let preprocess = match &self.preprocess {
            Some(p) => Some(
                toml::from_str(&fs::read_to_string(p)?)
                    .with_context(|| format!("reading {}", p.display()))?,
            ),
            None => None,
        };
        Ok(DataSpec {
            data_dir: self.data.clone(),
            labels,
            atlas: self.atlas.clone(),
            grouping: self.grouping.clone(),
            preprocess,
        })
    }
}

#[derive(Args)]
struct PretrainCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Mask strategy, e.g. random-tube:0.1 or roi:limbic:1.
    #[arg(long)]
    mask: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_parser = parse_list::<4>, default_value = "4,4,4,4")]
    patch: [usize; 4],
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 16)]
    latent: usize,
    /// Average the loss over every voxel instead of masked ones.
    #[arg(long)]
    all_voxels: bool,
    /// Keep one mask per subject for the whole run.
    #[arg(long)]
    fixed_masks: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeCmd {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    head_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    head_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentCmd {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    /// report.json written by `experiment`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn volume_paths(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        Ok(list_subjects(input)?)
    } else {
        let id = roimask::io::subject_id(input)
            .with_context(|| format!("{} is not a volume file", input.display()))?;
        Ok(vec![(id, input.to_path_buf())])
    }
}

fn cmd_preprocess(c: PreprocessCmd) -> Result<()> {
    let cfg = c.pp.config();
    let atlas = c.atlas.as_ref().map(read_labels).transpose()?;
    fs::create_dir_all(&c.out)?;
    let format = VolumeFormat::from(c.format);
    let mut aligned_atlas = None;
    for (id, path) in volume_paths(&c.input)? {
        let vol: Volume = read_any(&path)?;
        let p = preprocess_subject(&vol, atlas.as_ref(), &cfg)
            .with_context(|| format!("preprocessing {id}"))?;
        write_any(&p.volume, c.out.join(format.file_name(&id)))?;
        info!("{id}: {:?}", p.volume.dims());
        if aligned_atlas.is_none() {
            aligned_atlas = p.atlas;
        }
    }
    if let Some(a) = aligned_atlas {
        write_labels(&a, c.out.join("atlas.nii"))?;
    }
    Ok(())
}

fn cmd_mask_stats(c: MaskStatsCmd) -> Result<()> {
    let atlas = read_labels(&c.atlas)?;
    let grouping = match &c.grouping {
        Some(p) => GroupingTable::load(p)?,
        None => GroupingTable::default_aal3(),
    };
    let grid = if c.native {
        atlas
    } else {
        atlas_on_preprocessed_grid(&atlas, &c.pp.config())?
    };
    let rows = mask_stats(&grid, &grouping, &grid.foreground())?;
    let csv = mask_stats_csv(&rows);
    match c.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_synth(c: SynthCmd) -> Result<()> {
    let defaults = PhantomConfig::default();
    let cfg = PhantomConfig {
        dims: c.dims,
        margin: c.dims[..3].iter().min().unwrap() / 8,
        target_region: c.target_region,
        n_subjects_per_class: c.subjects,
        seed: c.seed,
        amplitude: c.amplitude.unwrap_or(defaults.amplitude),
        noise_std: c.noise.unwrap_or(defaults.noise_std),
        ..defaults
    };
    write_dataset(&cfg, &c.out, c.format.into())?;
    info!("wrote {} subjects to {}", 2 * c.subjects, c.out.display());
    Ok(())
}

fn cmd_pretrain(c: PretrainCmd) -> Result<()> {
    let cfg = TrainConfig {
        epochs: c.epochs,
        batch_size: c.batch,
        seed: c.seed,
        lr: c.lr,
        weight_decay: c.weight_decay,
        patch: c.patch,
        hidden: c.hidden,
        latent: c.latent,
        loss_scope: if c.all_voxels {
            LossScope::All
        } else {
            LossScope::Masked
        },
        resample_masks: !c.fixed_masks,
    };
    let strategy = MaskStrategy::parse(&c.mask, c.seed)?;
    let data = load_dataset(&c.data.spec(None)?, cfg.patch, false)?;
    let samples: Vec<_> = data.samples.iter().collect();
    let out = pretrain(&samples, &strategy, &cfg, data.atlas_inputs())?;
    out.model.save(&c.out)?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.6}", e + 1);
    }
    info!(
        "saved {} parameters to {}",
        out.model.param_count(),
        c.out.display()
    );
    Ok(())
}

fn cmd_probe(c: ProbeCmd) -> Result<()> {
    let model = Model::load(&c.model)?;
    let data = load_dataset(&c.data.spec(c.labels.clone())?, model.patch(), true)?;
    let split = split_subjects(&data.ids, c.seed)?;
    let head = HeadConfig {
        epochs: c.head_epochs,
        lr: c.head_lr,
        l2: c.l2,
    };
    let result = run_probe(&model, &data, &split, &head)?;
    fs::write(&c.out, serde_json::to_string_pretty(&result)? + "\n")?;
    println!(
        "acc {:.4}  auc {}",
        result.eval.acc,
        result
            .eval
            .auc
            .map(|a| format!("{a:.4}"))
            .unwrap_or("NA".into())
    );
    Ok(())
}

fn cmd_experiment(c: ExperimentCmd) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(o) = c.out_dir {
        cfg.out_dir = o;
    }
    let report = run_experiment(&cfg)?;
    if report.rows.is_empty() {
        bail!("every cell failed");
    }
    print!("{}", render_report(&report, ReportFormat::Markdown)?);
    for f in &report.failures {
        eprintln!("failed: {} r{}: {}", f.strategy, f.repeat, f.error);
    }
    Ok(report.all_succeeded())
}

fn cmd_report(c: ReportCmd) -> Result<()> {
    let report = read_report(&c.input)?;
    let text = render_report(&report, c.format.parse()?)?;
    match c.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(c) => cmd_preprocess(c).map(|_| true),
        Command::MaskStats(c) => cmd_mask_stats(c).map(|_| true),
        Command::Synth(c) => cmd_synth(c).map(|_| true),
        Command::Pretrain(c) => cmd_pretrain(c).map(|_| true),
        Command::Probe(c) => cmd_probe(c).map(|_| true),
        Command::Experiment(c) => cmd_experiment(c),
        Command::Report(c) => cmd_report(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
