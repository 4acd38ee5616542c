//! Dense 4D scalar volumes, 3D label volumes and boolean voxel masks.
//!
//! All grids use the NIfTI on-disk order: x varies fastest, then y, z and
//! finally t.

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Affine = Matrix4<f64>;

/// Voxel counts along x, y, z and frame count along t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub nt: usize,
}

impl GridDims {
    pub fn new(nx: usize, ny: usize, nz: usize, nt: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 || nt == 0 {
            return Err(Error::invalid(format!(
                "grid dims must be positive, got {nx}x{ny}x{nz}x{nt}"
            )));
        }
        nx.checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .and_then(|v| v.checked_mul(nt))
            .ok_or_else(|| Error::invalid("grid too large to address"))?;
        Ok(GridDims { nx, ny, nz, nt })
    }

    pub fn spatial(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::new(nx, ny, nz, 1)
    }

    /// Same spatial grid with a single frame.
    pub fn to_spatial(self) -> Self {
        GridDims { nt: 1, ..self }
    }

    pub fn with_frames(self, nt: usize) -> Self {
        GridDims { nt, ..self }
    }

    pub fn n_spatial(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn len(&self) -> usize {
        self.n_spatial() * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.nx, self.ny, self.nz, self.nt]
    }

    pub fn same_space(&self, other: &GridDims) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.nz == other.nz
    }

    /// `x + nx·(y + ny·(z + nz·t))`, bounds-checked.
    pub fn linear_index(&self, x: usize, y: usize, z: usize, t: usize) -> Result<usize> {
        for (axis, value, extent) in [
            ("x", x, self.nx),
            ("y", y, self.ny),
            ("z", z, self.nz),
            ("t", t, self.nt),
        ] {
            if value >= extent {
                return Err(Error::OutOfBounds {
                    axis,
                    value,
                    extent,
                });
            }
        }
        Ok(self.index_unchecked(x, y, z, t))
    }

    #[inline]
    pub(crate) fn index_unchecked(&self, x: usize, y: usize, z: usize, t: usize) -> usize {
        x + self.nx * (y + self.ny * (z + self.nz * t))
    }

    /// Inverse of [`GridDims::linear_index`].
    pub fn coords(&self, index: usize) -> Result<(usize, usize, usize, usize)> {
        if index >= self.len() {
            return Err(Error::OutOfBounds {
                axis: "index",
                value: index,
                extent: self.len(),
            });
        }
        let x = index % self.nx;
        let rest = index / self.nx;
        let y = rest % self.ny;
        let rest = rest / self.ny;
        let z = rest % self.nz;
        Ok((x, y, z, rest / self.nz))
    }
}

fn check_spacing(spacing_mm: [f64; 3]) -> Result<()> {
    if spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "voxel spacing must be positive, got {spacing_mm:?}"
        )))
    }
}

fn check_affine(affine: &Affine) -> Result<()> {
    let last = affine.row(3);
    if last[0] == 0.0 && last[1] == 0.0 && last[2] == 0.0 && last[3] == 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("affine last row must be (0, 0, 0, 1)"))
    }
}

pub fn diagonal_affine(spacing_mm: [f64; 3]) -> Affine {
    Matrix4::new_nonuniform_scaling(&nalgebra::Vector3::new(
        spacing_mm[0],
        spacing_mm[1],
        spacing_mm[2],
    ))
}

/// A 4D scalar field with spacing, repetition time and voxel-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D<T> {
    dims: GridDims,
    spacing_mm: [f64; 3],
    tr_s: f64,
    affine: Affine,
    data: Vec<T>,
}

impl<T: Scalar> Volume4D<T> {
    /// Unit spacing, TR 1 s, diagonal affine.
    pub fn new(dims: GridDims, data: Vec<T>) -> Result<Self> {
        Self::with_metadata(dims, [1.0; 3], 1.0, diagonal_affine([1.0; 3]), data)
    }

    pub fn zeros(dims: GridDims) -> Self {
        Volume4D {
            dims,
            spacing_mm: [1.0; 3],
            tr_s: 1.0,
            affine: diagonal_affine([1.0; 3]),
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn with_metadata(
        dims: GridDims,
        spacing_mm: [f64; 3],
        tr_s: f64,
        affine: Affine,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::dims(dims.len(), data.len()));
        }
        check_spacing(spacing_mm)?;
        if !(tr_s.is_finite() && tr_s > 0.0) {
            return Err(Error::invalid(format!("TR must be positive, got {tr_s}")));
        }
        check_affine(&affine)?;
        Ok(Volume4D {
            dims,
            spacing_mm,
            tr_s,
            affine,
            data,
        })
    }

    /// Builds a volume on the same grid and metadata as `self` but with new data.
    pub fn like<U: Scalar>(&self, dims: GridDims, data: Vec<U>) -> Result<Volume4D<U>> {
        Volume4D::with_metadata(dims, self.spacing_mm, self.tr_s, self.affine, data)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn tr_s(&self) -> f64 {
        self.tr_s
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn set_tr(&mut self, tr_s: f64) -> Result<()> {
        if !(tr_s.is_finite() && tr_s > 0.0) {
            return Err(Error::invalid(format!("TR must be positive, got {tr_s}")));
        }
        self.tr_s = tr_s;
        Ok(())
    }

    pub fn set_spacing(&mut self, spacing_mm: [f64; 3]) -> Result<()> {
        check_spacing(spacing_mm)?;
        self.spacing_mm = spacing_mm;
        Ok(())
    }

    pub fn set_affine(&mut self, affine: Affine) -> Result<()> {
        check_affine(&affine)?;
        self.affine = affine;
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize, z: usize, t: usize) -> Result<T> {
        Ok(self.data[self.dims.linear_index(x, y, z, t)?])
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, t: usize, value: T) -> Result<()> {
        let i = self.dims.linear_index(x, y, z, t)?;
        self.data[i] = value;
        Ok(())
    }

    /// Samples of frame `t` as a contiguous slice.
    pub fn frame(&self, t: usize) -> Result<&[T]> {
        if t >= self.dims.nt {
            return Err(Error::OutOfBounds {
                axis: "t",
                value: t,
                extent: self.dims.nt,
            });
        }
        let n = self.dims.n_spatial();
        Ok(&self.data[t * n..(t + 1) * n])
    }

    /// Copy of frame `t` as a single-frame volume with the same metadata.
    pub fn extract_frame(&self, t: usize) -> Result<Volume4D<T>> {
        let data = self.frame(t)?.to_vec();
        self.like(self.dims.to_spatial(), data)
    }

    /// Spatial voxels that are nonzero in at least one frame.
    pub fn brain_mask(&self) -> Mask3D {
        let n = self.dims.n_spatial();
        let mut bits = vec![false; n];
        for frame in self.data.chunks_exact(n) {
            for (b, v) in bits.iter_mut().zip(frame) {
                if *v != T::zero() {
                    *b = true;
                }
            }
        }
        Mask3D::from_bits(self.dims.to_spatial(), bits).expect("length matches grid")
    }

    pub fn cast<U: Scalar>(&self) -> Volume4D<U> {
        Volume4D {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            tr_s: self.tr_s,
            affine: self.affine,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}

/// A 3D parcellation; label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: GridDims,
    spacing_mm: [f64; 3],
    affine: Affine,
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: GridDims, labels: Vec<u16>) -> Result<Self> {
        Self::with_metadata(dims, [1.0; 3], diagonal_affine([1.0; 3]), labels)
    }

    pub fn with_metadata(
        dims: GridDims,
        spacing_mm: [f64; 3],
        affine: Affine,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if dims.nt != 1 {
            return Err(Error::invalid("label volumes have a single frame"));
        }
        if labels.len() != dims.len() {
            return Err(Error::dims(dims.len(), labels.len()));
        }
        check_spacing(spacing_mm)?;
        check_affine(&affine)?;
        Ok(LabelVolume {
            dims,
            spacing_mm,
            affine,
            labels,
        })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Result<u16> {
        Ok(self.labels[self.dims.linear_index(x, y, z, 0)?])
    }

    /// Voxels with a nonzero label.
    pub fn foreground(&self) -> Mask3D {
        let bits = self.labels.iter().map(|&l| l != 0).collect();
        Mask3D::from_bits(self.dims, bits).expect("length matches grid")
    }

    /// Sorted distinct labels, including 0 when present.
    pub fn distinct_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }
}

/// Boolean occupancy with a cached population count.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Bits {
    bits: Vec<bool>,
    count: usize,
}

impl Bits {
    fn new(bits: Vec<bool>) -> Self {
        let count = bits.iter().filter(|b| **b).count();
        Bits { bits, count }
    }

    #[inline]
    fn set(&mut self, i: usize, value: bool) {
        let old = std::mem::replace(&mut self.bits[i], value);
        match (old, value) {
            (false, true) => self.count += 1,
            (true, false) => self.count -= 1,
            _ => {}
        }
    }
}

macro_rules! mask_common {
    ($name:ident) => {
        impl $name {
            pub fn from_bits(dims: GridDims, bits: Vec<bool>) -> Result<Self> {
                if bits.len() != Self::expected_len(&dims) {
                    return Err(Error::dims(Self::expected_len(&dims), bits.len()));
                }
                Ok($name {
                    dims,
                    bits: Bits::new(bits),
                })
            }

            pub fn dims(&self) -> GridDims {
                self.dims
            }

            pub fn len(&self) -> usize {
                self.bits.bits.len()
            }

            pub fn is_empty(&self) -> bool {
                self.bits.bits.is_empty()
            }

            /// Number of set voxels (cached).
            pub fn count(&self) -> usize {
                self.bits.count
            }

            /// Number of set voxels counted directly.
            pub fn recount(&self) -> usize {
                self.bits.bits.iter().filter(|b| **b).count()
            }

            #[inline]
            pub fn get_index(&self, i: usize) -> bool {
                self.bits.bits[i]
            }

            #[inline]
            pub fn set_index(&mut self, i: usize, value: bool) {
                self.bits.set(i, value)
            }

            pub fn as_slice(&self) -> &[bool] {
                &self.bits.bits
            }

            /// Linear indices of set voxels in ascending order.
            pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
                self.bits
                    .bits
                    .iter()
                    .enumerate()
                    .filter_map(|(i, b)| b.then_some(i))
            }

            pub fn union(&self, other: &Self) -> Result<Self> {
                self.zip_with(other, |a, b| a || b)
            }

            pub fn intersect(&self, other: &Self) -> Result<Self> {
                self.zip_with(other, |a, b| a && b)
            }

            fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
                if self.dims != other.dims {
                    return Err(Error::dims(self.dims, other.dims));
                }
                let bits = self
                    .bits
                    .bits
                    .iter()
                    .zip(&other.bits.bits)
                    .map(|(a, b)| f(*a, *b))
                    .collect();
                Ok($name {
                    dims: self.dims,
                    bits: Bits::new(bits),
                })
            }
        }
    };
}

/// Spatial mask, one bit per (x, y, z).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    dims: GridDims,
    bits: Bits,
}

/// Spatiotemporal mask, one bit per (x, y, z, t).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask4D {
    dims: GridDims,
    bits: Bits,
}

mask_common!(Mask3D);
mask_common!(Mask4D);

impl Mask3D {
    fn expected_len(dims: &GridDims) -> usize {
        dims.n_spatial()
    }

    pub fn empty(dims: GridDims) -> Self {
        let dims = dims.to_spatial();
        Mask3D {
            dims,
            bits: Bits::new(vec![false; dims.n_spatial()]),
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Result<bool> {
        Ok(self.bits.bits[self.dims.linear_index(x, y, z, 0)?])
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) -> Result<()> {
        let i = self.dims.linear_index(x, y, z, 0)?;
        self.bits.set(i, value);
        Ok(())
    }

    /// Extrudes the spatial mask along `nt` frames.
    pub fn to_tube(&self, nt: usize) -> Mask4D {
        let mut bits = Vec::with_capacity(self.len() * nt);
        for _ in 0..nt {
            bits.extend_from_slice(&self.bits.bits);
        }
        Mask4D {
            dims: self.dims.with_frames(nt),
            bits: Bits {
                bits,
                count: self.count() * nt,
            },
        }
    }
}

impl Mask4D {
    fn expected_len(dims: &GridDims) -> usize {
        dims.len()
    }

    pub fn empty(dims: GridDims) -> Self {
        Mask4D {
            dims,
            bits: Bits::new(vec![false; dims.len()]),
        }
    }

    pub fn full(dims: GridDims) -> Self {
        Mask4D {
            dims,
            bits: Bits::new(vec![true; dims.len()]),
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize, t: usize) -> Result<bool> {
        Ok(self.bits.bits[self.dims.linear_index(x, y, z, t)?])
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, t: usize, value: bool) -> Result<()> {
        let i = self.dims.linear_index(x, y, z, t)?;
        self.bits.set(i, value);
        Ok(())
    }

    /// Bits of frame `t`.
    pub fn frame(&self, t: usize) -> &[bool] {
        let n = self.dims.n_spatial();
        &self.bits.bits[t * n..(t + 1) * n]
    }

    /// Spatial voxels set in at least one frame.
    pub fn footprint(&self) -> Mask3D {
        let n = self.dims.n_spatial();
        let mut bits = vec![false; n];
        for frame in self.bits.bits.chunks_exact(n) {
            for (b, v) in bits.iter_mut().zip(frame) {
                *b |= *v;
            }
        }
        Mask3D {
            dims: self.dims.to_spatial(),
            bits: Bits::new(bits),
        }
    }

    /// True when every frame carries the same spatial pattern.
    pub fn is_tube(&self) -> bool {
        let first = self.frame(0);
        (1..self.dims.nt).all(|t| self.frame(t) == first)
    }
}
