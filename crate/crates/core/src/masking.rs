//! Spatiotemporal mask generation.
//!
//! Three atlas-agnostic baselines (voxel-random, tube-random, window-random)
//! and atlas-guided tube masking over whole or partially subsampled regions.
//! All randomness comes from [`crate::rng::keyed_rng`] keyed by the strategy
//! seed and a fingerprint of its canonical description.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{region_voxels, GroupingTable, RegionName};
use crate::error::{Error, Result};
use crate::rng::{fingerprint, keyed_rng};
use crate::scalar::Scalar;
use crate::volume::{GridDims, LabelVolume, Mask3D, Mask4D, Volume4D};

pub const DEFAULT_FRAME_PROB: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum MaskKind {
    /// Independent voxels over the whole (x, y, z, t) grid.
    RandomRandom { ratio: f64 },
    /// Random spatial voxels, masked at every frame.
    RandomTube { ratio: f64 },
    /// Whole spatial blocks, each frame of a chosen block masked with
    /// probability `frame_prob`.
    WindowRandom {
        block: [usize; 3],
        ratio: f64,
        frame_prob: f64,
    },
    /// Atlas regions (∩ brain), optionally subsampled, masked at every frame.
    RoiTube {
        groups: Vec<RegionName>,
        fraction: f64,
    },
}

impl MaskKind {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |r: f64| r > 0.0 && r < 1.0;
        match self {
            MaskKind::RandomRandom { ratio } | MaskKind::RandomTube { ratio } => {
                if !unit_open(*ratio) {
                    return Err(Error::Mask(format!("ratio must be in (0, 1), got {ratio}")));
                }
            }
            MaskKind::WindowRandom {
                block,
                ratio,
                frame_prob,
            } => {
                if !unit_open(*ratio) {
                    return Err(Error::Mask(format!("ratio must be in (0, 1), got {ratio}")));
                }
                if block.contains(&0) {
                    return Err(Error::Mask(format!(
                        "block shape must be positive, got {block:?}"
                    )));
                }
                if !(*frame_prob > 0.0 && *frame_prob <= 1.0) {
                    return Err(Error::Mask(format!(
                        "frame probability must be in (0, 1], got {frame_prob}"
                    )));
                }
            }
            MaskKind::RoiTube { groups, fraction } => {
                if groups.is_empty() {
                    return Err(Error::Mask("ROI strategy needs at least one group".into()));
                }
                for (i, g) in groups.iter().enumerate() {
                    if groups[..i].contains(g) {
                        return Err(Error::Mask(format!("group {g} listed twice")));
                    }
                }
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return Err(Error::Mask(format!(
                        "fraction must be in (0, 1], got {fraction}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_tube(&self) -> bool {
        matches!(self, MaskKind::RandomTube { .. } | MaskKind::RoiTube { .. })
    }

    /// Whether two seeds can produce different masks.
    pub fn is_random(&self) -> bool {
        !matches!(self, MaskKind::RoiTube { fraction, .. } if *fraction >= 1.0)
    }

    /// Filesystem-friendly label.
    pub fn slug(&self) -> String {
        self.to_string()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

impl fmt::Display for MaskKind {
    /// Canonical spec string, e.g. `roi:limbic,cerebellum:0.5`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::RandomRandom { ratio } => write!(f, "random-random:{ratio}"),
            MaskKind::RandomTube { ratio } => write!(f, "random-tube:{ratio}"),
            MaskKind::WindowRandom {
                block,
                ratio,
                frame_prob,
            } => {
                write!(
                    f,
                    "window-random:{}x{}x{}:{ratio}",
                    block[0], block[1], block[2]
                )?;
                if *frame_prob != DEFAULT_FRAME_PROB {
                    write!(f, ":{frame_prob}")?;
                }
                Ok(())
            }
            MaskKind::RoiTube { groups, fraction } => {
                let names: Vec<&str> = groups.iter().map(|g| g.short()).collect();
                write!(f, "roi:{}:{fraction}", names.join(","))
            }
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = |m: &str| Error::Mask(format!("bad mask spec `{s}`: {m}"));
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| bad("expected a number"))
        };
        let kind = match parts.as_slice() {
            ["random-random", r] => MaskKind::RandomRandom { ratio: num(r)? },
            ["random-tube", r] => MaskKind::RandomTube { ratio: num(r)? },
            ["window-random", b, r] | ["window-random", b, r, _] => {
                let dims: Vec<usize> = b
                    .split('x')
                    .map(|v| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| bad("block must be AxBxC"))
                    })
                    .collect::<Result<_>>()?;
                let block: [usize; 3] = dims.try_into().map_err(|_| bad("block must be AxBxC"))?;
                let frame_prob = match parts.get(3) {
                    Some(p) => num(p)?,
                    None => DEFAULT_FRAME_PROB,
                };
                MaskKind::WindowRandom {
                    block,
                    ratio: num(r)?,
                    frame_prob,
                }
            }
            ["roi", g] | ["roi", g, _] => {
                let groups = g
                    .split(',')
                    .map(|n| n.trim().parse::<RegionName>())
                    .collect::<Result<Vec<_>>>()?;
                let fraction = match parts.get(2) {
                    Some(p) => num(p)?,
                    None => 1.0,
                };
                MaskKind::RoiTube { groups, fraction }
            }
            _ => return Err(bad("unknown strategy")),
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStrategy {
    pub kind: MaskKind,
    pub seed: u64,
}

impl MaskStrategy {
    pub fn new(kind: MaskKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(MaskStrategy { kind, seed })
    }

    pub fn parse(spec: &str, seed: u64) -> Result<Self> {
        Ok(MaskStrategy {
            kind: spec.parse()?,
            seed,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        MaskStrategy {
            kind: self.kind.clone(),
            seed,
        }
    }

    fn fingerprint(&self) -> u64 {
        fingerprint(self.kind.to_string().as_bytes())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        keyed_rng(self.seed, &[self.fingerprint()], stream)
    }
}

/// Inputs that a strategy may consult besides the grid shape.
#[derive(Debug, Clone, Copy)]
pub struct MaskContext<'a> {
    pub brain: &'a Mask3D,
    pub labels: Option<&'a LabelVolume>,
    pub grouping: Option<&'a GroupingTable>,
}

impl<'a> MaskContext<'a> {
    pub fn new(brain: &'a Mask3D) -> Self {
        MaskContext {
            brain,
            labels: None,
            grouping: None,
        }
    }

    pub fn with_atlas(
        brain: &'a Mask3D,
        labels: &'a LabelVolume,
        grouping: &'a GroupingTable,
    ) -> Self {
        MaskContext {
            brain,
            labels: Some(labels),
            grouping: Some(grouping),
        }
    }
}

fn round_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Chooses `k` of `candidates` uniformly without replacement by a partial
/// Fisher-Yates shuffle.
fn sample<T: Copy>(rng: &mut ChaCha8Rng, mut candidates: Vec<T>, k: usize) -> Result<Vec<T>> {
    if k > candidates.len() {
        return Err(Error::Mask(format!(
            "requested {k} voxels but only {} are available",
            candidates.len()
        )));
    }
    let (chosen, _) = candidates.partial_shuffle(rng, k);
    Ok(chosen.to_vec())
}

/// Axis-aligned spatial block; edge blocks are truncated to the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

impl Block {
    pub fn len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        [x, y, z]
            .iter()
            .zip(self.origin.iter().zip(&self.extent))
            .all(|(c, (o, e))| *c >= *o && *c < o + e)
    }

    fn spatial_indices(&self, dims: &GridDims) -> impl Iterator<Item = usize> + '_ {
        let dims = *dims;
        (0..self.extent[2]).flat_map(move |dz| {
            (0..self.extent[1]).flat_map(move |dy| {
                (0..self.extent[0]).map(move |dx| {
                    dims.index_unchecked(
                        self.origin[0] + dx,
                        self.origin[1] + dy,
                        self.origin[2] + dz,
                        0,
                    )
                })
            })
        })
    }
}

fn tile(dims: &GridDims, block: [usize; 3]) -> Vec<Block> {
    let ext = [dims.nx, dims.ny, dims.nz];
    let counts: Vec<usize> = (0..3).map(|a| ext[a].div_ceil(block[a])).collect();
    let mut out = Vec::with_capacity(counts.iter().product());
    for bz in 0..counts[2] {
        for by in 0..counts[1] {
            for bx in 0..counts[0] {
                let origin = [bx * block[0], by * block[1], bz * block[2]];
                let extent = [0, 1, 2].map(|a| block[a].min(ext[a] - origin[a]));
                out.push(Block { origin, extent });
            }
        }
    }
    out
}

/// Blocks chosen by a window-random strategy, in selection order: uniformly
/// without replacement until their total size first reaches
/// `round(ratio · n_spatial)`.
pub fn window_selection(strategy: &MaskStrategy, dims: GridDims) -> Result<Vec<Block>> {
    let MaskKind::WindowRandom { block, ratio, .. } = &strategy.kind else {
        return Err(Error::Mask("not a window-random strategy".into()));
    };
    let target = round_count(*ratio, dims.n_spatial());
    let mut blocks = tile(&dims, *block);
    let mut rng = strategy.rng(0);
    let mut covered = 0;
    let mut chosen = 0;
    while covered < target {
        let j = rng.random_range(chosen..blocks.len());
        blocks.swap(chosen, j);
        covered += blocks[chosen].len();
        chosen += 1;
    }
    blocks.truncate(chosen);
    Ok(blocks)
}

/// Spatial target count for one ROI group: `round(fraction · |region ∩ brain|)`.
pub fn roi_group_voxels(ctx: &MaskContext<'_>, group: RegionName) -> Result<Vec<usize>> {
    let (labels, grouping) = match (ctx.labels, ctx.grouping) {
        (Some(l), Some(g)) => (l, g),
        _ => {
            return Err(Error::Mask(
                "ROI masking needs an atlas and a grouping table".into(),
            ))
        }
    };
    let g = grouping
        .resolve(group)
        .map_err(|e| Error::Mask(e.to_string()))?;
    let region = region_voxels(labels, g).intersect(ctx.brain)?;
    if region.count() == 0 {
        return Err(Error::Mask(format!(
            "region {group} does not intersect the brain mask"
        )));
    }
    Ok(region.indices().collect())
}

/// Builds the mask described by `strategy` on `dims`.
pub fn generate_mask(
    strategy: &MaskStrategy,
    dims: GridDims,
    ctx: &MaskContext<'_>,
) -> Result<Mask4D> {
    strategy.kind.validate()?;
    if !ctx.brain.dims().same_space(&dims) {
        return Err(Error::dims(dims.to_spatial(), ctx.brain.dims()));
    }
    let n_spatial = dims.n_spatial();
    match &strategy.kind {
        MaskKind::RandomRandom { ratio } => {
            let n = dims.len();
            if n > u32::MAX as usize {
                return Err(Error::Mask("grid too large for voxel sampling".into()));
            }
            let k = round_count(*ratio, n);
            let chosen = sample(&mut strategy.rng(0), (0..n as u32).collect(), k)?;
            let mut bits = vec![false; n];
            for i in chosen {
                bits[i as usize] = true;
            }
            Mask4D::from_bits(dims, bits)
        }
        MaskKind::RandomTube { ratio } => {
            let k = round_count(*ratio, n_spatial);
            let chosen = sample(&mut strategy.rng(0), (0..n_spatial).collect(), k)?;
            let mut m = Mask3D::empty(dims);
            for i in chosen {
                m.set_index(i, true);
            }
            Ok(m.to_tube(dims.nt))
        }
        MaskKind::WindowRandom { frame_prob, .. } => {
            let blocks = window_selection(strategy, dims)?;
            let mut coin = strategy.rng(1);
            let mut bits = vec![false; dims.len()];
            for b in &blocks {
                for t in 0..dims.nt {
                    if coin.random_bool(*frame_prob) {
                        for i in b.spatial_indices(&dims) {
                            bits[t * n_spatial + i] = true;
                        }
                    }
                }
            }
            Mask4D::from_bits(dims, bits)
        }
        MaskKind::RoiTube { groups, fraction } => {
            if let Some(l) = ctx.labels {
                if !l.dims().same_space(&dims) {
                    return Err(Error::dims(dims.to_spatial(), l.dims()));
                }
            }
            let mut m = Mask3D::empty(dims);
            for (gi, &g) in groups.iter().enumerate() {
                let candidates = roi_group_voxels(ctx, g)?;
                let chosen = if *fraction >= 1.0 {
                    candidates
                } else {
                    let k = round_count(*fraction, candidates.len());
                    if k == 0 {
                        return Err(Error::Mask(format!(
                            "fraction {fraction} of region {g} selects no voxels"
                        )));
                    }
                    sample(&mut strategy.rng(gi as u64), candidates, k)?
                };
                for i in chosen {
                    m.set_index(i, true);
                }
            }
            Ok(m.to_tube(dims.nt))
        }
    }
}

/// Copy of `vol` with masked voxels replaced by `fill`.
pub fn apply_mask<T: Scalar>(vol: &Volume4D<T>, mask: &Mask4D, fill: T) -> Result<Volume4D<T>> {
    if vol.dims() != mask.dims() {
        return Err(Error::dims(vol.dims(), mask.dims()));
    }
    let mut out = vol.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.as_slice()) {
        if m {
            *v = fill;
        }
    }
    Ok(out)
}
