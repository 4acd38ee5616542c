//! Block phantoms: a cubic "brain" tiled into labelled blocks, a shared
//! oscillation everywhere inside it, and a class-dependent oscillation at
//! twice the base frequency inside one target block.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{GroupingTable, RegionGroup, RegionName};
use crate::error::{Error, Result};
use crate::io::{write_any, write_labels, write_labels_csv, VolumeFormat};
use crate::rng::keyed_rng;
use crate::volume::{diagonal_affine, GridDims, LabelVolume, Volume4D};

const TAG_SUBJECT: u64 = 0x5355_424A;
const AR_COEFF: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 4],
    /// Background voxels on each side of the brain block along every axis.
    pub margin: usize,
    pub n_regions: usize,
    /// Label (1-based) carrying the class signal.
    pub target_region: u16,
    pub baseline: f64,
    pub shared_amplitude: f64,
    pub amplitude: f64,
    pub base_freq_hz: f64,
    pub noise_std: f64,
    pub n_subjects_per_class: usize,
    pub seed: u64,
    pub tr_s: f64,
    pub spacing_mm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [16, 16, 16, 24],
            margin: 2,
            n_regions: 7,
            target_region: 6,
            baseline: 100.0,
            shared_amplitude: 1.0,
            amplitude: 1.0,
            base_freq_hz: 0.1,
            noise_std: 0.5,
            n_subjects_per_class: 40,
            seed: 7,
            tr_s: 0.8,
            spacing_mm: 2.0,
        }
    }
}

impl PhantomConfig {
    pub fn grid(&self) -> Result<GridDims> {
        let [nx, ny, nz, nt] = self.dims;
        GridDims::new(nx, ny, nz, nt)
    }

    /// Lower corner and side lengths of the brain block.
    pub fn brain_block(&self) -> Result<([usize; 3], [usize; 3])> {
        let mut side = [0; 3];
        for (a, s) in side.iter_mut().enumerate() {
            *s = self.dims[a]
                .checked_sub(2 * self.margin)
                .filter(|&s| s > 0)
                .ok_or_else(|| Error::invalid("margin leaves no brain voxels"))?;
        }
        Ok(([self.margin; 3], side))
    }

    /// Blocks per axis needed to host `n_regions`.
    pub fn blocks_per_axis(&self) -> usize {
        let mut g = 1;
        while g * g * g < self.n_regions {
            g += 1;
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let (_, side) = self.brain_block()?;
        if self.n_regions == 0 || self.n_regions > u16::MAX as usize {
            return Err(Error::invalid("n_regions must be in 1..=65535"));
        }
        if self.blocks_per_axis() > *side.iter().min().unwrap() {
            return Err(Error::invalid(format!(
                "{} regions do not fit on a {side:?} brain block",
                self.n_regions
            )));
        }
        if self.target_region == 0 || self.target_region as usize > self.n_regions {
            return Err(Error::invalid(format!(
                "target region {} is not in 1..={}",
                self.target_region, self.n_regions
            )));
        }
        let finite = [
            self.baseline,
            self.shared_amplitude,
            self.amplitude,
            self.base_freq_hz,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || !(self.noise_std >= 0.0) || !(self.tr_s > 0.0) || !(self.spacing_mm > 0.0) {
            return Err(Error::invalid(
                "phantom amplitudes, noise, TR and spacing must be valid",
            ));
        }
        Ok(())
    }
}

fn block_edges(len: usize, g: usize) -> Vec<usize> {
    (0..=g).map(|i| i * len / g).collect()
}

/// Block parcellation of the brain: blocks are numbered x-fastest and block
/// `k` gets label `min(k + 1, n_regions)`, so surplus blocks join the last
/// region.
pub fn generate_atlas(cfg: &PhantomConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    let d = cfg.grid()?.to_spatial();
    let (lo, side) = cfg.brain_block()?;
    let g = cfg.blocks_per_axis();
    let edges: Vec<Vec<usize>> = (0..3).map(|a| block_edges(side[a], g)).collect();
    let block_of = |a: usize, c: usize| edges[a].iter().rposition(|&e| e <= c).unwrap().min(g - 1);
    let mut labels = vec![0u16; d.len()];
    for z in 0..side[2] {
        for y in 0..side[1] {
            for x in 0..side[0] {
                let k = block_of(0, x) + g * (block_of(1, y) + g * block_of(2, z));
                let label = (k + 1).min(cfg.n_regions) as u16;
                labels[d.index_unchecked(lo[0] + x, lo[1] + y, lo[2] + z, 0)] = label;
            }
        }
    }
    let s = [cfg.spacing_mm; 3];
    LabelVolume::with_metadata(d, s, diagonal_affine(s), labels)
}

/// Grouping table for a phantom atlas: label `i` belongs to the `i`-th
/// region name, wrapping around when there are more than seven labels.
pub fn phantom_grouping(n_regions: usize) -> Result<GroupingTable> {
    let names = RegionName::ALL;
    let mut ids: Vec<Vec<u16>> = vec![Vec::new(); names.len()];
    for label in 1..=n_regions as u16 {
        ids[(label as usize - 1) % names.len()].push(label);
    }
    let groups = names
        .iter()
        .zip(ids)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| RegionGroup::new(*n, l))
        .collect::<Result<Vec<_>>>()?;
    GroupingTable::new(groups, "phantom")
}

/// One subject. Noise and phases depend only on `(cfg.seed, subject_seed)`,
/// never on `class`.
pub fn generate_subject(
    cfg: &PhantomConfig,
    class: u8,
    subject_seed: u64,
) -> Result<Volume4D<f32>> {
    if class > 1 {
        return Err(Error::invalid("class must be 0 or 1"));
    }
    let atlas = generate_atlas(cfg)?;
    let d = cfg.grid()?;
    let ns = d.n_spatial();
    let mut phase_rng = keyed_rng(cfg.seed, &[TAG_SUBJECT, subject_seed], u64::MAX);
    let phi: f64 = phase_rng.random_range(0.0..TAU);
    let times: Vec<f64> = (0..d.nt).map(|t| t as f64 * cfg.tr_s).collect();
    let shared: Vec<f64> = times
        .iter()
        .map(|t| cfg.baseline + cfg.shared_amplitude * (TAU * cfg.base_freq_hz * t + phi).sin())
        .collect();
    let class_wave: Vec<f64> = times
        .iter()
        .map(|t| cfg.amplitude * (TAU * 2.0 * cfg.base_freq_hz * t).sin())
        .collect();
    let innovation = cfg.noise_std * (1.0 - AR_COEFF * AR_COEFF).sqrt();

    let series: Vec<Vec<f32>> = (0..ns)
        .into_par_iter()
        .map(|i| {
            let label = atlas.labels()[i];
            if label == 0 {
                return vec![0.0; d.nt];
            }
            let mut rng = keyed_rng(cfg.seed, &[TAG_SUBJECT, subject_seed], i as u64);
            let mut e = 0.0f64;
            (0..d.nt)
                .map(|t| {
                    let w: f64 = rng.sample(StandardNormal);
                    e = if t == 0 {
                        cfg.noise_std * w
                    } else {
                        AR_COEFF * e + innovation * w
                    };
                    let mut v = shared[t] + e;
                    if class == 1 && label == cfg.target_region {
                        v += class_wave[t];
                    }
                    v as f32
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0f32; d.len()];
    for (i, s) in series.iter().enumerate() {
        for (t, v) in s.iter().enumerate() {
            data[t * ns + i] = *v;
        }
    }
    let s = [cfg.spacing_mm; 3];
    Volume4D::with_metadata(d, s, cfg.tr_s, diagonal_affine(s), data)
}

/// Subject ids and classes: `sub-0000`, `sub-0001`, ... alternating class 0
/// and 1.
pub fn subject_roster(cfg: &PhantomConfig) -> Vec<(String, u8, u64)> {
    (0..2 * cfg.n_subjects_per_class)
        .map(|i| (format!("sub-{i:04}"), (i % 2) as u8, i as u64))
        .collect()
}

/// Files written by [`write_dataset`].
pub const ATLAS_FILE: &str = "atlas.nii";
pub const GROUPING_FILE: &str = "grouping.txt";
pub const LABELS_FILE: &str = "labels.csv";

/// Writes every subject, the atlas, its grouping table and the label CSV.
pub fn write_dataset(
    cfg: &PhantomConfig,
    dir: impl AsRef<Path>,
    format: VolumeFormat,
) -> Result<()> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_labels(&generate_atlas(cfg)?, dir.join(ATLAS_FILE))?;
    fs::write(
        dir.join(GROUPING_FILE),
        phantom_grouping(cfg.n_regions)?.to_text(),
    )?;
    let mut labels = BTreeMap::new();
    for (id, class, seed) in subject_roster(cfg) {
        let vol = generate_subject(cfg, class, seed)?;
        write_any(&vol, dir.join(format.file_name(&id)))?;
        labels.insert(id, class);
    }
    write_labels_csv(dir.join(LABELS_FILE), &labels)
}
