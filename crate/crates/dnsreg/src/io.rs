//! Format dispatch on file extension: `.nii` for NIfTI-1, `.json` for the
//! native container.

use std::path::Path;

use dnsreg_core::Volume;

use crate::container;
use crate::error::{Error, Result};
use crate::nifti;

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

/// Reads an intensity volume. NIfTI warnings go to stderr.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match extension(path) {
        Some("nii") => {
            let img = nifti::read_nifti(path)?;
            for w in &img.warnings {
                eprintln!("warning: {}: {w}", path.display());
            }
            Ok(img.volume)
        }
        Some("json") => container::load_volume(path),
        Some("gz") => Err(Error::Unsupported { path: path.into(), reason: "compressed NIfTI".into() }),
        _ => Err(Error::Unsupported { path: path.into(), reason: "expected a .nii or .json file".into() }),
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    match extension(path) {
        Some("nii") => nifti::write_nifti(path, v),
        Some("json") => container::save_volume(path, v),
        _ => Err(Error::Unsupported { path: path.into(), reason: "expected a .nii or .json file".into() }),
    }
}
