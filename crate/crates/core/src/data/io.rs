//! NIfTI reading and writing for images and label maps.
//!
//! Grids are stored `[d, h, w]` row-major; the file axes are `x = w`,
//! `y = h`, `z = d`, so the in-memory buffer is exactly the file's
//! column-major voxel order.

use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::metrics::{LabelVolume, Shape3};

/// A scalar volume read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    pub data: Vec<f64>,
    pub shape: Shape3,
    /// Voxel size along (d, h, w) in mm.
    pub spacing: [f64; 3],
}

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti { path: path.to_path_buf(), message: e.to_string() }
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    // millimetres
    h.xyzt_units = 2;
    h.sform_code = 1;
    h.srow_x = [spacing[2] as f32, 0.0, 0.0, 0.0];
    h.srow_y = [0.0, spacing[1] as f32, 0.0, 0.0];
    h.srow_z = [0.0, 0.0, spacing[0] as f32, 0.0];
    h
}

pub fn read_image(path: &Path) -> Result<ImageVolume> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let pix = obj.header().pixdim;
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    if arr.ndim() != 3 && !(arr.ndim() == 4 && arr.shape()[3] == 1) {
        return Err(nifti_err(path, format!("expected a 3-D volume, got shape {:?}", arr.shape())));
    }
    let (x, y, z) = (arr.shape()[0], arr.shape()[1], arr.shape()[2]);
    let four = arr.ndim() == 4;
    let mut data = Vec::with_capacity(x * y * z);
    for d in 0..z {
        for h in 0..y {
            for w in 0..x {
                data.push(if four { arr[&[w, h, d, 0][..]] } else { arr[&[w, h, d][..]] });
            }
        }
    }
    let sp = |v: f32| if v > 0.0 && v.is_finite() { v as f64 } else { 1.0 };
    Ok(ImageVolume { data, shape: [z, y, x], spacing: [sp(pix[3]), sp(pix[2]), sp(pix[1])] })
}

fn fortran_array<T: Clone>(data: Vec<T>, shape: Shape3, path: &Path) -> Result<Array3<T>> {
    Array3::from_shape_vec((shape[2], shape[1], shape[0]).f(), data).map_err(|e| nifti_err(path, e))
}

/// Images are written as 32-bit floats.
pub fn write_image(path: &Path, data: &[f64], shape: Shape3, spacing: [f64; 3]) -> Result<()> {
    let header = header_for(spacing);
    let arr = fortran_array(data.iter().map(|&v| v as f32).collect(), shape, path)?;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| nifti_err(path, e))
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let header = header_for(labels.spacing());
    let arr = fortran_array(labels.data().to_vec(), labels.shape(), path)?;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| nifti_err(path, e))
}

/// Read a label map; every voxel must be one of 0, 1, 2, 4.
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let img = read_image(path)?;
    let mut values = Vec::with_capacity(img.data.len());
    for (i, &v) in img.data.iter().enumerate() {
        if v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::InvalidLabel { value: v as i64, index: i });
        }
        values.push(v as i64);
    }
    LabelVolume::from_values(&values, img.shape, img.spacing)
}
