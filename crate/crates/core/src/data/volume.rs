//! NIfTI volume reading and writing. Volumes are indexed `[x, y, z]`; 2-D
//! slices are taken along `z`.

use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti { path: path.to_path_buf(), message: e.to_string() }
}

/// Reads a 3-D volume (a 4-D volume with a single frame is accepted).
pub fn read_volume(path: &Path) -> Result<Array3<f32>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let data = obj.into_volume().into_ndarray::<f32>().map_err(|e| nifti_err(path, e))?;
    let mut shape: Vec<usize> = data.shape().to_vec();
    while shape.len() > 3 && shape.last() == Some(&1) {
        shape.pop();
    }
    while shape.len() < 3 {
        shape.push(1);
    }
    let data = data
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(ndarray::IxDyn(&shape))
        .map_err(|e| nifti_err(path, e))?
        .into_dimensionality::<Ix3>()
        .map_err(|_| nifti_err(path, format!("expected a 3-D volume, got shape {shape:?}")))?;
    Ok(data)
}

/// Reads an integer label volume. Non-integral values are rejected.
pub fn read_label_volume(path: &Path) -> Result<Array3<i32>> {
    let raw = read_volume(path)?;
    let mut bad: Vec<i64> = Vec::new();
    let labels = raw.mapv(|v| {
        if v.fract() != 0.0 || !v.is_finite() {
            bad.push(v.floor() as i64);
        }
        v as i32
    });
    if !bad.is_empty() {
        return Err(nifti_err(path, format!("non-integer label values near {:?}", dedup(bad))));
    }
    Ok(labels)
}

pub(crate) fn dedup(mut v: Vec<i64>) -> Vec<i64> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Writes a gzip-compressed float volume. Output bytes depend only on the data.
pub fn write_volume(path: &Path, data: &Array3<f32>) -> Result<()> {
    WriterOptions::new(path).write_nifti(data).map_err(|e| nifti_err(path, e))
}

pub fn write_label_volume(path: &Path, data: &Array3<i32>) -> Result<()> {
    let bytes = data.mapv(|v| v as i16);
    WriterOptions::new(path).write_nifti(&bytes).map_err(|e| nifti_err(path, e))
}
