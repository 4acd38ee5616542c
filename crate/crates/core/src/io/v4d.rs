//! Raw `.v4d` interchange format.
//!
//! A volume `name.v4d` is a little-endian float32 blob (x fastest, then y, z,
//! t) accompanied by a text sidecar `name.v4d.txt`:
//!
//! ```text
//! v4d 1
//! dims <nx> <ny> <nz> <nt>
//! spacing_mm <sx> <sy> <sz>
//! tr_s <tr>
//! affine <a00> <a01> <a02> <a03> <a10> ... <a33>
//! ```
//!
//! Lines appear in exactly this order; the affine is row-major.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Affine, GridDims, Volume4D};

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_v4d<T: Scalar>(vol: &Volume4D<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = vol.dims();
    let s = vol.spacing_mm();
    let a = vol.affine();
    let affine: Vec<String> = (0..4)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| a[(r, c)].to_string())
        .collect();
    let meta = format!(
        "v4d 1\ndims {} {} {} {}\nspacing_mm {} {} {}\ntr_s {}\naffine {}\n",
        d.nx,
        d.ny,
        d.nz,
        d.nt,
        s[0],
        s[1],
        s[2],
        vol.tr_s(),
        affine.join(" ")
    );
    let mut blob = Vec::with_capacity(vol.data().len() * 4);
    for v in vol.data() {
        blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, blob)?;
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

pub fn read_v4d<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume4D<T>> {
    let path = path.as_ref();
    let meta_path = sidecar_path(path);
    let meta = fs::read_to_string(&meta_path)?;
    let mut lines = meta.lines().filter(|l| !l.trim().is_empty());

    let mut field = |key: &str| -> Result<Vec<f64>> {
        let line = lines
            .next()
            .ok_or_else(|| format_err(&meta_path, format!("missing `{key}` line")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(format_err(
                &meta_path,
                format!("expected `{key}`, got `{line}`"),
            ));
        }
        parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| format_err(&meta_path, format!("bad number `{p}` in `{key}`")))
            })
            .collect()
    };
    let version = field("v4d")?;
    if version != [1.0] {
        return Err(format_err(&meta_path, "unsupported v4d version"));
    }
    let dims = field("dims")?;
    let spacing = field("spacing_mm")?;
    let tr = field("tr_s")?;
    let affine = field("affine")?;
    if dims.len() != 4 || spacing.len() != 3 || tr.len() != 1 || affine.len() != 16 {
        return Err(format_err(&meta_path, "wrong number of values"));
    }
    if dims.iter().any(|d| *d < 1.0 || d.fract() != 0.0) {
        return Err(format_err(&meta_path, "dims must be positive integers"));
    }
    let dims = GridDims::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
    )?;
    let affine = Affine::from_row_slice(&affine);

    let blob = fs::read(path)?;
    if blob.len() != dims.len() * 4 {
        return Err(format_err(
            path,
            format!("blob has {} bytes, expected {}", blob.len(), dims.len() * 4),
        ));
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Volume4D::with_metadata(
        dims,
        [spacing[0], spacing[1], spacing[2]],
        tr[0],
        affine,
        data,
    )
}
