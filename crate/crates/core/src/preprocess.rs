//! Per-subject standardization: isotropic spatial resampling, centered
//! crop/pad, temporal resampling to a fixed TR, pooled z-scoring over brain
//! voxels and nearest-neighbour atlas alignment.

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};
use crate::volume::{Affine, GridDims, LabelVolume, Mask3D, Volume4D};

/// Which voxels count as non-background for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundRule {
    /// Nonzero at one or more frames.
    #[default]
    Intensity,
    /// Nonzero label in the aligned atlas.
    Atlas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing_mm: f64,
    pub target_shape: [usize; 3],
    pub target_tr_s: f64,
    pub zscore_epsilon: f64,
    pub background_rule: BackgroundRule,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: 2.0,
            target_shape: [96, 96, 96],
            target_tr_s: 0.8,
            zscore_epsilon: 1e-8,
            background_rule: BackgroundRule::Intensity,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_spacing_mm > 0.0 && self.target_spacing_mm.is_finite()) {
            return Err(Error::invalid("target spacing must be positive"));
        }
        if self.target_shape.contains(&0) {
            return Err(Error::invalid("target shape must be positive"));
        }
        if !(self.target_tr_s > 0.0 && self.target_tr_s.is_finite()) {
            return Err(Error::invalid("target TR must be positive"));
        }
        if !(self.zscore_epsilon > 0.0) {
            return Err(Error::invalid("z-score epsilon must be positive"));
        }
        Ok(())
    }
}

const SNAP: f64 = 1e-9;

/// Trilinear sample of one frame at continuous voxel coordinate `c`;
/// neighbours outside the grid read 0.
fn trilinear<T: Scalar>(frame: &[T], dims: &GridDims, c: [f64; 3]) -> f64 {
    let ext = [dims.nx, dims.ny, dims.nz];
    let mut base = [0i64; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let f = c[a].floor();
        let mut r = c[a] - f;
        let mut b = f as i64;
        if r > 1.0 - SNAP {
            b += 1;
            r = 0.0;
        } else if r < SNAP {
            r = 0.0;
        }
        base[a] = b;
        frac[a] = r;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            let wa = if hi { frac[a] } else { 1.0 - frac[a] };
            if wa == 0.0 {
                w = 0.0;
                break;
            }
            w *= wa;
            let p = base[a] + hi as i64;
            if p < 0 || p >= ext[a] as i64 {
                inside = false;
            } else {
                idx[a] = p as usize;
            }
        }
        if w == 0.0 || !inside {
            continue;
        }
        acc += w * frame[dims.index_unchecked(idx[0], idx[1], idx[2], 0)].as_f64();
    }
    acc
}

/// Resamples every frame onto an isotropic grid with `target_spacing_mm`.
///
/// Output voxel `i` along an axis sits at input voxel coordinate
/// `i · target / input_spacing`, so the world position of voxel 0 is kept.
pub fn resample_spatial<T: Scalar>(
    vol: &Volume4D<T>,
    target_spacing_mm: f64,
) -> Result<Volume4D<T>> {
    if !(target_spacing_mm > 0.0 && target_spacing_mm.is_finite()) {
        return Err(Error::invalid(format!(
            "target spacing must be positive, got {target_spacing_mm}"
        )));
    }
    let din = vol.dims();
    let sp = vol.spacing_mm();
    let ext_in = [din.nx, din.ny, din.nz];
    let mut ext_out = [0usize; 3];
    let mut step = [0f64; 3];
    for a in 0..3 {
        step[a] = target_spacing_mm / sp[a];
        ext_out[a] = ((ext_in[a] as f64 * sp[a] / target_spacing_mm) - SNAP)
            .ceil()
            .max(1.0) as usize;
    }
    let dout = GridDims::new(ext_out[0], ext_out[1], ext_out[2], din.nt)?;
    let n_out = dout.n_spatial();
    let mut data = vec![T::zero(); dout.len()];
    data.par_chunks_mut(n_out).enumerate().for_each(|(t, out)| {
        let frame = &vol.data()[t * din.n_spatial()..(t + 1) * din.n_spatial()];
        for (i, o) in out.iter_mut().enumerate() {
            let x = i % dout.nx;
            let y = (i / dout.nx) % dout.ny;
            let z = i / (dout.nx * dout.ny);
            let c = [x as f64 * step[0], y as f64 * step[1], z as f64 * step[2]];
            *o = T::from_f64_lossy(trilinear(frame, &din, c));
        }
    });
    let affine =
        vol.affine() * Affine::new_nonuniform_scaling(&Vector3::new(step[0], step[1], step[2]));
    Volume4D::with_metadata(dout, [target_spacing_mm; 3], vol.tr_s(), affine, data)
}

/// Per-axis shift such that output voxel `o` reads input voxel `o + shift`.
fn center_shift(n_in: usize, n_out: usize) -> i64 {
    if n_in >= n_out {
        ((n_in - n_out) / 2) as i64
    } else {
        -(((n_out - n_in) / 2) as i64)
    }
}

/// Centered crop or zero-pad of the spatial axes to `target_shape`.
pub fn crop_or_pad<T: Scalar>(vol: &Volume4D<T>, target_shape: [usize; 3]) -> Result<Volume4D<T>> {
    if target_shape.contains(&0) {
        return Err(Error::invalid(format!(
            "target shape must be positive, got {target_shape:?}"
        )));
    }
    let din = vol.dims();
    let dout = GridDims::new(target_shape[0], target_shape[1], target_shape[2], din.nt)?;
    let shift = [
        center_shift(din.nx, dout.nx),
        center_shift(din.ny, dout.ny),
        center_shift(din.nz, dout.nz),
    ];
    let mut data = vec![T::zero(); dout.len()];
    let n_out = dout.n_spatial();
    data.par_chunks_mut(n_out).enumerate().for_each(|(t, out)| {
        for z in 0..dout.nz {
            let zi = z as i64 + shift[2];
            if zi < 0 || zi >= din.nz as i64 {
                continue;
            }
            for y in 0..dout.ny {
                let yi = y as i64 + shift[1];
                if yi < 0 || yi >= din.ny as i64 {
                    continue;
                }
                for x in 0..dout.nx {
                    let xi = x as i64 + shift[0];
                    if xi < 0 || xi >= din.nx as i64 {
                        continue;
                    }
                    out[x + dout.nx * (y + dout.ny * z)] =
                        vol.data()[din.index_unchecked(xi as usize, yi as usize, zi as usize, t)];
                }
            }
        }
    });
    let translate = Affine::new_translation(&Vector3::new(
        shift[0] as f64,
        shift[1] as f64,
        shift[2] as f64,
    ));
    let affine = vol.affine() * translate;
    Volume4D::with_metadata(dout, vol.spacing_mm(), vol.tr_s(), affine, data)
}

/// Number of output frames when resampling `nt` frames from `tr_in` to `tr_out`.
pub fn resampled_frame_count(nt: usize, tr_in: f64, tr_out: f64) -> usize {
    (((nt - 1) as f64 * tr_in / tr_out) + SNAP).floor() as usize + 1
}

/// Linear interpolation in time onto a uniform grid with spacing `target_tr_s`.
pub fn resample_temporal<T: Scalar>(vol: &Volume4D<T>, target_tr_s: f64) -> Result<Volume4D<T>> {
    if !(target_tr_s > 0.0 && target_tr_s.is_finite()) {
        return Err(Error::invalid(format!(
            "target TR must be positive, got {target_tr_s}"
        )));
    }
    let din = vol.dims();
    if din.nt < 2 {
        return Err(Error::invalid(format!(
            "temporal resampling needs at least 2 frames, got {}",
            din.nt
        )));
    }
    let tr_in = vol.tr_s();
    let nt_out = resampled_frame_count(din.nt, tr_in, target_tr_s);
    let dout = din.with_frames(nt_out);
    let n = din.n_spatial();
    let mut data = vec![T::zero(); dout.len()];
    data.par_chunks_mut(n).enumerate().for_each(|(k, out)| {
        let mut p = k as f64 * target_tr_s / tr_in;
        if (p - p.round()).abs() < SNAP {
            p = p.round();
        }
        let i0 = (p.floor() as usize).min(din.nt - 1);
        let w = if i0 == din.nt - 1 { 0.0 } else { p - i0 as f64 };
        let f0 = &vol.data()[i0 * n..(i0 + 1) * n];
        if w == 0.0 {
            out.copy_from_slice(f0);
            return;
        }
        let f1 = &vol.data()[(i0 + 1) * n..(i0 + 2) * n];
        for ((o, a), b) in out.iter_mut().zip(f0).zip(f1) {
            *o = T::from_f64_lossy((1.0 - w) * a.as_f64() + w * b.as_f64());
        }
    });
    let mut out = vol.like(dout, data)?;
    out.set_tr(target_tr_s)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScoreStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Pooled mean and population standard deviation over all
/// (brain voxel, frame) pairs, using pairwise summation.
pub fn zscore_stats<T: Scalar>(vol: &Volume4D<T>, brain: &Mask3D) -> Result<ZScoreStats> {
    let dims = vol.dims();
    if !brain.dims().same_space(&dims) {
        return Err(Error::dims(dims.to_spatial(), brain.dims()));
    }
    let voxels: Vec<usize> = brain.indices().collect();
    if voxels.is_empty() {
        return Err(Error::invalid("volume has no non-background voxels"));
    }
    let nb = voxels.len();
    let n = dims.n_spatial();
    let count = nb * dims.nt;
    let data = vol.data();
    let value = |i: usize| data[(i / nb) * n + voxels[i % nb]].as_f64();
    let mean = pairwise_sum(count, value) / count as f64;
    let var = pairwise_sum(count, |i| {
        let d = value(i) - mean;
        d * d
    }) / count as f64;
    Ok(ZScoreStats {
        mean,
        std: var.sqrt(),
        count,
    })
}

/// `(v − μ) / (σ + ε)` on brain voxels, exact 0 elsewhere.
pub fn zscore_nonbackground<T: Scalar>(
    vol: &Volume4D<T>,
    brain: &Mask3D,
    epsilon: f64,
) -> Result<Volume4D<T>> {
    let stats = zscore_stats(vol, brain)?;
    let denom = stats.std + epsilon;
    let n = vol.dims().n_spatial();
    let mut data = vec![T::zero(); vol.data().len()];
    data.par_chunks_mut(n)
        .zip(vol.data().par_chunks(n))
        .for_each(|(out, frame)| {
            for ((o, v), &b) in out.iter_mut().zip(frame).zip(brain.as_slice()) {
                if b {
                    *o = T::from_f64_lossy((v.as_f64() - stats.mean) / denom);
                }
            }
        });
    vol.like(vol.dims(), data)
}

/// Nearest-neighbour resampling of `atlas` onto the grid of `reference`.
pub fn align_atlas<T: Scalar>(atlas: &LabelVolume, reference: &Volume4D<T>) -> Result<LabelVolume> {
    align_atlas_to_grid(
        atlas,
        reference.dims().to_spatial(),
        reference.spacing_mm(),
        reference.affine(),
    )
}

pub fn align_atlas_to_grid(
    atlas: &LabelVolume,
    dims: GridDims,
    spacing_mm: [f64; 3],
    affine: &Affine,
) -> Result<LabelVolume> {
    let inv = atlas
        .affine()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(Error::SingularAffine)?;
    let vox_to_atlas = inv * affine;
    let ad = atlas.dims();
    let ext = [ad.nx as i64, ad.ny as i64, ad.nz as i64];
    let dims = dims.to_spatial();
    let labels: Vec<u16> = (0..dims.n_spatial())
        .into_par_iter()
        .map(|i| {
            let x = i % dims.nx;
            let y = (i / dims.nx) % dims.ny;
            let z = i / (dims.nx * dims.ny);
            let p = vox_to_atlas * Vector4::new(x as f64, y as f64, z as f64, 1.0);
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let r = (p[a] + 0.5 + SNAP).floor() as i64;
                if r < 0 || r >= ext[a] {
                    return 0;
                }
                idx[a] = r as usize;
            }
            atlas.labels()[ad.index_unchecked(idx[0], idx[1], idx[2], 0)]
        })
        .collect();
    LabelVolume::with_metadata(dims, spacing_mm, *affine, labels)
}

/// The atlas resampled onto the grid that preprocessing would give a volume
/// sharing the atlas's own geometry.
pub fn atlas_on_preprocessed_grid(
    atlas: &LabelVolume,
    cfg: &PreprocessConfig,
) -> Result<LabelVolume> {
    cfg.validate()?;
    let carrier = Volume4D::<f32>::with_metadata(
        atlas.dims(),
        atlas.spacing_mm(),
        1.0,
        *atlas.affine(),
        vec![0.0; atlas.dims().len()],
    )?;
    let grid = crop_or_pad(
        &resample_spatial(&carrier, cfg.target_spacing_mm)?,
        cfg.target_shape,
    )?;
    align_atlas(atlas, &grid)
}

/// A subject after the full pipeline.
#[derive(Debug, Clone)]
pub struct Preprocessed<T> {
    pub volume: Volume4D<T>,
    pub atlas: Option<LabelVolume>,
    pub brain: Mask3D,
}

/// Spatial resample → crop/pad → temporal resample → atlas alignment → z-score.
pub fn preprocess_subject<T: Scalar>(
    vol: &Volume4D<T>,
    atlas: Option<&LabelVolume>,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed<T>> {
    cfg.validate()?;
    let v = resample_spatial(vol, cfg.target_spacing_mm)?;
    let v = crop_or_pad(&v, cfg.target_shape)?;
    let v = if v.dims().nt >= 2 {
        resample_temporal(&v, cfg.target_tr_s)?
    } else {
        v
    };
    let aligned = atlas.map(|a| align_atlas(a, &v)).transpose()?;
    let brain = match cfg.background_rule {
        BackgroundRule::Intensity => v.brain_mask(),
        BackgroundRule::Atlas => aligned
            .as_ref()
            .ok_or_else(|| Error::invalid("atlas background rule requires an atlas"))?
            .foreground(),
    };
    let volume = zscore_nonbackground(&v, &brain, cfg.zscore_epsilon)?;
    Ok(Preprocessed {
        volume,
        atlas: aligned,
        brain,
    })
}
