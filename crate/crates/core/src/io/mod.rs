//! Volume, atlas and label-table input/output.

pub mod nifti;
pub mod v4d;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume4D;

pub use nifti::{read_labels, read_volume, write_labels, write_volume, NiftiError};
pub use v4d::{read_v4d, write_v4d};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    V4d,
}

impl VolumeFormat {
    pub fn of(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?;
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Some(VolumeFormat::Nifti)
        } else if name.ends_with(".v4d") {
            Some(VolumeFormat::V4d)
        } else {
            None
        }
    }

    /// File name for subject `id` in this format.
    pub fn file_name(self, id: &str) -> String {
        match self {
            VolumeFormat::Nifti => format!("{id}.nii"),
            VolumeFormat::V4d => format!("{id}.v4d"),
        }
    }
}

/// Strips `.nii`, `.nii.gz` or `.v4d` from a file name.
pub fn subject_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    ["nii.gz", "nii", "v4d"]
        .iter()
        .find_map(|ext| name.strip_suffix(&format!(".{ext}")))
        .map(str::to_owned)
}

pub fn read_any<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume4D<T>> {
    let path = path.as_ref();
    match VolumeFormat::of(path) {
        Some(VolumeFormat::Nifti) => read_volume(path),
        Some(VolumeFormat::V4d) => read_v4d(path),
        None => Err(Error::invalid(format!(
            "{}: unknown volume extension",
            path.display()
        ))),
    }
}

pub fn write_any<T: Scalar>(vol: &Volume4D<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::of(path) {
        Some(VolumeFormat::Nifti) => write_volume(vol, path),
        Some(VolumeFormat::V4d) => write_v4d(vol, path),
        None => Err(Error::invalid(format!(
            "{}: unknown volume extension",
            path.display()
        ))),
    }
}

/// Subject volumes in `dir`, sorted by subject id. Files whose names start
/// with `atlas` are skipped.
pub fn list_subjects(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        if !path.is_file() || VolumeFormat::of(&path).is_none() {
            continue;
        }
        let id = subject_id(&path).expect("extension checked");
        if id.starts_with("atlas") {
            continue;
        }
        out.push((id, path));
    }
    out.sort();
    Ok(out)
}

/// Reads a `subject_id,label` CSV with labels in {0, 1}.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, u8>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let bad = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let id = record
            .get(0)
            .ok_or_else(|| bad("missing subject_id".into()))?
            .to_owned();
        let label = match record.get(1) {
            Some("0") => 0u8,
            Some("1") => 1u8,
            other => return Err(bad(format!("label for {id} must be 0 or 1, got {other:?}"))),
        };
        if out.insert(id.clone(), label).is_some() {
            return Err(bad(format!("duplicate subject {id}")));
        }
    }
    Ok(out)
}

pub fn write_labels_csv(path: impl AsRef<Path>, labels: &BTreeMap<String, u8>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "label"])?;
    for (id, label) in labels {
        w.write_record([id.as_str(), &label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
