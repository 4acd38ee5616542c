//! Single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
//!
//! Supported: rank 3 or 4, datatypes uint8, int16, uint16, float32 and
//! float64, either byte order, optional gzip. NIfTI-2, paired `.hdr/.img`
//! files and header extensions are rejected. The sform is authoritative; qform
//! quaternions are ignored.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::volume::{diagonal_affine, Affine, GridDims, LabelVolume, Volume4D};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIRED: &[u8; 4] = b"ni1\0";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NiftiError {
    #[error("file too short for a NIfTI-1 header: {len} bytes")]
    HeaderTruncated { len: usize },
    #[error("sizeof_hdr = {found}, expected 348")]
    BadSizeofHdr { found: i32 },
    #[error("NIfTI-2 headers are not supported (sizeof_hdr = 540)")]
    Nifti2Unsupported,
    #[error("magic = {found:?}, expected \"n+1\\0\"")]
    BadMagic { found: [u8; 4] },
    #[error("paired .hdr/.img files (magic \"ni1\\0\") are not supported")]
    PairedUnsupported,
    #[error("dim[0] = {dim0}: only rank 3 or 4 is supported")]
    UnsupportedRank { dim0: i16 },
    #[error("dim[{index}] = {value} must be positive")]
    BadDim { index: usize, value: i16 },
    #[error("datatype = {code} is not supported")]
    UnsupportedDatatype { code: i16 },
    #[error("vox_offset = {vox_offset} must be at least 352")]
    BadVoxOffset { vox_offset: f32 },
    #[error("header extensions are not supported (extension[0] = {flag})")]
    ExtensionsUnsupported { flag: u8 },
    #[error("data section truncated: need {expected} bytes, found {found}")]
    DataTruncated { expected: usize, found: usize },
    #[error("datatype = {code} is floating point; label volumes need an integer type")]
    FloatLabels { code: i16 },
    #[error("negative label value {value}")]
    NegativeLabel { value: i64 },
    #[error("label volume has {nt} frames, expected 1")]
    LabelFrames { nt: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    U16,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            16 => Datatype::F32,
            64 => Datatype::F64,
            512 => Datatype::U16,
            _ => return None,
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
            Datatype::U16 => 512,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 | Datatype::U16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Datatype::F32 | Datatype::F64)
    }
}

/// The NIfTI-1 header fields this crate reads or writes. Everything else is
/// written as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
}

impl NiftiHeader {
    /// Parses and validates the first 352 bytes of a single-file NIfTI-1.
    pub fn parse(bytes: &[u8]) -> Result<(NiftiHeader, Endian), NiftiError> {
        if bytes.len() < DATA_OFFSET {
            return Err(NiftiError::HeaderTruncated { len: bytes.len() });
        }
        let le_dim0 = LittleEndian::read_i16(&bytes[40..42]);
        let be_dim0 = BigEndian::read_i16(&bytes[40..42]);
        let endian = if (1..=7).contains(&le_dim0) {
            Endian::Little
        } else if (1..=7).contains(&be_dim0) {
            Endian::Big
        } else {
            let sizeof = LittleEndian::read_i32(&bytes[0..4]);
            if sizeof == 540 || sizeof.swap_bytes() == 540 {
                return Err(NiftiError::Nifti2Unsupported);
            }
            return Err(NiftiError::UnsupportedRank { dim0: le_dim0 });
        };
        match endian {
            Endian::Little => Self::parse_with::<LittleEndian>(bytes),
            Endian::Big => Self::parse_with::<BigEndian>(bytes),
        }
        .map(|h| (h, endian))
    }

    fn parse_with<E: ByteOrder>(b: &[u8]) -> Result<NiftiHeader, NiftiError> {
        let sizeof = E::read_i32(&b[0..4]);
        if sizeof == 540 {
            return Err(NiftiError::Nifti2Unsupported);
        }
        if sizeof != HEADER_SIZE as i32 {
            return Err(NiftiError::BadSizeofHdr { found: sizeof });
        }
        let magic: [u8; 4] = b[344..348].try_into().expect("4 bytes");
        if &magic == MAGIC_PAIRED {
            return Err(NiftiError::PairedUnsupported);
        }
        if &magic != MAGIC_SINGLE {
            return Err(NiftiError::BadMagic { found: magic });
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = E::read_i16(&b[40 + 2 * i..42 + 2 * i]);
        }
        if !(3..=4).contains(&dim[0]) {
            return Err(NiftiError::UnsupportedRank { dim0: dim[0] });
        }
        for (index, &value) in dim.iter().enumerate().take(dim[0] as usize + 1).skip(1) {
            if value < 1 {
                return Err(NiftiError::BadDim { index, value });
            }
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = E::read_f32(&b[76 + 4 * i..80 + 4 * i]);
        }
        let read4 = |off: usize| {
            [
                E::read_f32(&b[off..off + 4]),
                E::read_f32(&b[off + 4..off + 8]),
                E::read_f32(&b[off + 8..off + 12]),
                E::read_f32(&b[off + 12..off + 16]),
            ]
        };
        let header = NiftiHeader {
            dim,
            datatype: E::read_i16(&b[70..72]),
            bitpix: E::read_i16(&b[72..74]),
            pixdim,
            vox_offset: E::read_f32(&b[108..112]),
            scl_slope: E::read_f32(&b[112..116]),
            scl_inter: E::read_f32(&b[116..120]),
            xyzt_units: b[123],
            qform_code: E::read_i16(&b[252..254]),
            sform_code: E::read_i16(&b[254..256]),
            srow_x: read4(280),
            srow_y: read4(296),
            srow_z: read4(312),
        };
        if Datatype::from_code(header.datatype).is_none() {
            return Err(NiftiError::UnsupportedDatatype {
                code: header.datatype,
            });
        }
        if !(header.vox_offset >= DATA_OFFSET as f32) {
            return Err(NiftiError::BadVoxOffset {
                vox_offset: header.vox_offset,
            });
        }
        if b[348] != 0 {
            return Err(NiftiError::ExtensionsUnsupported { flag: b[348] });
        }
        Ok(header)
    }

    /// Little-endian 352-byte encoding (header + zero extension flag).
    pub fn to_bytes(&self) -> Vec<u8> {
        type E = LittleEndian;
        let mut b = vec![0u8; DATA_OFFSET];
        E::write_i32(&mut b[0..4], HEADER_SIZE as i32);
        for (i, d) in self.dim.iter().enumerate() {
            E::write_i16(&mut b[40 + 2 * i..42 + 2 * i], *d);
        }
        E::write_i16(&mut b[70..72], self.datatype);
        E::write_i16(&mut b[72..74], self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            E::write_f32(&mut b[76 + 4 * i..80 + 4 * i], *p);
        }
        E::write_f32(&mut b[108..112], self.vox_offset);
        E::write_f32(&mut b[112..116], self.scl_slope);
        E::write_f32(&mut b[116..120], self.scl_inter);
        b[123] = self.xyzt_units;
        E::write_i16(&mut b[252..254], self.qform_code);
        E::write_i16(&mut b[254..256], self.sform_code);
        for (off, row) in [
            (280, &self.srow_x),
            (296, &self.srow_y),
            (312, &self.srow_z),
        ] {
            for (i, v) in row.iter().enumerate() {
                E::write_f32(&mut b[off + 4 * i..off + 4 * i + 4], *v);
            }
        }
        b[344..348].copy_from_slice(MAGIC_SINGLE);
        b
    }

    pub fn datatype(&self) -> Datatype {
        Datatype::from_code(self.datatype).expect("validated at parse time")
    }

    pub fn grid(&self) -> GridDims {
        let d = |i: usize| self.dim[i].max(1) as usize;
        let nt = if self.dim[0] >= 4 { d(4) } else { 1 };
        GridDims {
            nx: d(1),
            ny: d(2),
            nz: d(3),
            nt,
        }
    }

    /// pixdim[1..=3]; non-positive entries fall back to 1 mm.
    pub fn spacing_mm(&self) -> [f64; 3] {
        let s = |i: usize| {
            let v = self.pixdim[i].abs() as f64;
            if v > 0.0 && v.is_finite() {
                v
            } else {
                1.0
            }
        };
        [s(1), s(2), s(3)]
    }

    /// pixdim[4] in seconds; 1.0 when unset.
    pub fn tr_s(&self) -> f64 {
        let tr = self.pixdim[4] as f64;
        if tr > 0.0 && tr.is_finite() {
            // xyzt_units time code: 16 = msec, 24 = usec
            match self.xyzt_units & 0x38 {
                16 => tr / 1e3,
                24 => tr / 1e6,
                _ => tr,
            }
        } else {
            1.0
        }
    }

    pub fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut a = Affine::identity();
            for (r, row) in [self.srow_x, self.srow_y, self.srow_z].iter().enumerate() {
                for c in 0..4 {
                    a[(r, c)] = row[c] as f64;
                }
            }
            a
        } else {
            diagonal_affine(self.spacing_mm())
        }
    }

    fn for_volume(
        dims: GridDims,
        spacing: [f64; 3],
        tr_s: f64,
        affine: &Affine,
        dt: Datatype,
    ) -> Self {
        let rank: i16 = if dims.nt > 1 { 4 } else { 3 };
        let mut dim = [1i16; 8];
        dim[0] = rank;
        dim[1] = dims.nx as i16;
        dim[2] = dims.ny as i16;
        dim[3] = dims.nz as i16;
        dim[4] = dims.nt as i16;
        let mut pixdim = [0f32; 8];
        pixdim[0] = 1.0;
        pixdim[1] = spacing[0] as f32;
        pixdim[2] = spacing[1] as f32;
        pixdim[3] = spacing[2] as f32;
        pixdim[4] = tr_s as f32;
        let row = |r: usize| {
            [
                affine[(r, 0)] as f32,
                affine[(r, 1)] as f32,
                affine[(r, 2)] as f32,
                affine[(r, 3)] as f32,
            ]
        };
        NiftiHeader {
            dim,
            datatype: dt.code(),
            bitpix: (dt.bytes() * 8) as i16,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // mm + sec
            xyzt_units: 2 | 8,
            qform_code: 0,
            sform_code: 1,
            srow_x: row(0),
            srow_y: row(1),
            srow_z: row(2),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1F && raw[1] == 0x8B {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    if gz {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Decoded raw samples as `f64`, before scaling.
fn decode_raw(header: &NiftiHeader, endian: Endian, bytes: &[u8]) -> Result<Vec<f64>, NiftiError> {
    let dt = header.datatype();
    let n = header.grid().len();
    let start = header.vox_offset as usize;
    let expected = start + n * dt.bytes();
    if bytes.len() < expected {
        return Err(NiftiError::DataTruncated {
            expected,
            found: bytes.len(),
        });
    }
    let body = &bytes[start..expected];
    Ok(match endian {
        Endian::Little => decode_with::<LittleEndian>(dt, body),
        Endian::Big => decode_with::<BigEndian>(dt, body),
    })
}

fn decode_with<E: ByteOrder>(dt: Datatype, body: &[u8]) -> Vec<f64> {
    let w = dt.bytes();
    body.chunks_exact(w)
        .map(|c| match dt {
            Datatype::U8 => c[0] as f64,
            Datatype::I16 => E::read_i16(c) as f64,
            Datatype::U16 => E::read_u16(c) as f64,
            Datatype::F32 => E::read_f32(c) as f64,
            Datatype::F64 => E::read_f64(c),
        })
        .collect()
}

/// Reads a NIfTI-1 volume, applying `scl_slope`/`scl_inter` when the slope is
/// nonzero.
pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume4D<T>> {
    let bytes = read_bytes(path.as_ref())?;
    let (header, endian) = NiftiHeader::parse(&bytes)?;
    let raw = decode_raw(&header, endian, &bytes)?;
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    // identity scaling is skipped so that -0.0 survives a round trip
    let scaled = slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0);
    let data = raw
        .into_iter()
        .map(|v| {
            if scaled {
                T::from_f64_lossy(slope * v + inter)
            } else {
                T::from_f64_lossy(v)
            }
        })
        .collect();
    Volume4D::with_metadata(
        header.grid(),
        header.spacing_mm(),
        header.tr_s(),
        header.affine(),
        data,
    )
}

/// Reads an integer-typed atlas. Scaling fields are ignored for labels.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let bytes = read_bytes(path.as_ref())?;
    let (header, endian) = NiftiHeader::parse(&bytes)?;
    let dt = header.datatype();
    if dt.is_float() {
        return Err(NiftiError::FloatLabels {
            code: header.datatype,
        }
        .into());
    }
    let grid = header.grid();
    if grid.nt != 1 {
        return Err(NiftiError::LabelFrames { nt: grid.nt }.into());
    }
    if header.scl_slope != 0.0 && (header.scl_slope != 1.0 || header.scl_inter != 0.0) {
        log::warn!(
            "{}: ignoring scl_slope={} scl_inter={} on label data",
            path.as_ref().display(),
            header.scl_slope,
            header.scl_inter
        );
    }
    let raw = decode_raw(&header, endian, &bytes)?;
    let mut labels = Vec::with_capacity(raw.len());
    for v in raw {
        if v < 0.0 {
            return Err(NiftiError::NegativeLabel { value: v as i64 }.into());
        }
        labels.push(v as u16);
    }
    LabelVolume::with_metadata(grid, header.spacing_mm(), header.affine(), labels)
}

/// Writes `vol` as little-endian float32 with unit scaling. A `.gz` suffix
/// selects gzip compression.
pub fn write_volume<T: Scalar>(vol: &Volume4D<T>, path: impl AsRef<Path>) -> Result<()> {
    let header = NiftiHeader::for_volume(
        vol.dims(),
        vol.spacing_mm(),
        vol.tr_s(),
        vol.affine(),
        Datatype::F32,
    );
    let mut bytes = header.to_bytes();
    bytes.reserve(vol.data().len() * 4);
    for v in vol.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Writes a label volume as uint16.
pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let header = NiftiHeader::for_volume(
        labels.dims(),
        labels.spacing_mm(),
        1.0,
        labels.affine(),
        Datatype::U16,
    );
    let mut bytes = header.to_bytes();
    for l in labels.labels() {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}
