//! Multimodal cases: BraTS-layout loading and writing, intensity
//! normalization, augmentation and synthetic phantoms.

mod augment;
pub mod io;
mod phantom;

use std::path::{Path, PathBuf};

use crate::error::{shape_err, Error, Result};
use crate::metrics::{LabelVolume, Shape3};
use crate::modality::Modality;
use crate::tensor::Tensor;

pub use augment::{augment, crop, flip_axis, pad_to, AugmentationSpec};
pub use phantom::{synth_case, PhantomSpec};

/// Four co-registered scalar volumes and an optional label map.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    pub id: String,
    /// `[4, D, H, W]` in modality order.
    pub images: Tensor,
    pub labels: Option<LabelVolume>,
    /// Voxel size along (d, h, w) in mm.
    pub spacing: [f64; 3],
}

impl MultiModalVolume {
    pub fn new(id: impl Into<String>, images: Tensor, labels: Option<LabelVolume>, spacing: [f64; 3]) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != 4 || s[1..].contains(&0) {
            return shape_err(format!("images must be [4, D, H, W], got {s:?}"));
        }
        if let Some(l) = &labels {
            if l.shape() != [s[1], s[2], s[3]] {
                return shape_err(format!("labels {:?} do not match images {s:?}", l.shape()));
            }
        }
        Ok(Self { id: id.into(), images, labels, spacing })
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn modality(&self, m: Modality) -> &[f64] {
        let n = self.voxels();
        &self.images.data()[m.index() * n..(m.index() + 1) * n]
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut [f64] {
        let n = self.voxels();
        &mut self.images.data_mut()[m.index() * n..(m.index() + 1) * n]
    }

    /// `[1, 4, D, H, W]` network input.
    pub fn to_input(&self) -> Tensor {
        let [d, h, w] = self.shape();
        self.images.reshape(&[1, 4, d, h, w]).expect("same length")
    }
}

fn find_file(dir: &Path, id: &str, suffix: &str) -> Option<PathBuf> {
    for ext in ["nii.gz", "nii"] {
        let p = dir.join(format!("{id}_{suffix}.{ext}"));
        if p.is_file() {
            return Some(p);
        }
    }
    // tolerate a case id that differs from the directory name
    let entries = std::fs::read_dir(dir).ok()?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(&format!("_{suffix}.nii.gz")) || n.ends_with(&format!("_{suffix}.nii")))
        })
        .collect();
    found.sort();
    found.into_iter().next()
}

/// Load a case directory holding `<id>_t1`, `_t1ce`, `_t2`, `_flair` and
/// optionally `_seg` NIfTI files. The case id is the directory name.
pub fn load_case(dir: &Path) -> Result<MultiModalVolume> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad case directory {}", dir.display())))?
        .to_string();
    let mut data = Vec::new();
    let mut shape = None;
    let mut spacing = [1.0; 3];
    for m in Modality::ALL {
        let path = find_file(dir, &id, m.suffix()).ok_or_else(|| Error::MissingModality {
            dir: dir.to_path_buf(),
            modality: m.suffix().to_string(),
        })?;
        let img = io::read_image(&path)?;
        match shape {
            None => {
                shape = Some(img.shape);
                spacing = img.spacing;
            }
            Some(s) if s != img.shape => {
                return shape_err(format!("{} has shape {:?}, expected {s:?}", path.display(), img.shape));
            }
            _ => {}
        }
        data.extend(img.data);
    }
    let shape = shape.expect("four modalities read");
    let labels = match find_file(dir, &id, "seg") {
        Some(p) => {
            let l = io::read_labels(&p)?;
            if l.shape() != shape {
                return shape_err(format!("{} has shape {:?}, expected {shape:?}", p.display(), l.shape()));
            }
            Some(l)
        }
        None => None,
    };
    let images = Tensor::new(vec![4, shape[0], shape[1], shape[2]], data)?;
    MultiModalVolume::new(id, images, labels, spacing)
}

/// Load every case directory directly under `root`, sorted by name.
pub fn load_cases(root: &Path) -> Result<Vec<MultiModalVolume>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::InvalidArgument(format!("cannot list {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no case directories under {}", root.display())));
    }
    dirs.iter().map(|d| load_case(d)).collect()
}

/// Write `case` as `<parent>/<id>/<id>_<modality>.nii.gz`; returns the case
/// directory.
pub fn write_case(case: &MultiModalVolume, parent: &Path) -> Result<PathBuf> {
    let dir = parent.join(&case.id);
    std::fs::create_dir_all(&dir)?;
    for m in Modality::ALL {
        let p = dir.join(format!("{}_{}.nii.gz", case.id, m.suffix()));
        io::write_image(&p, case.modality(m), case.shape(), case.spacing)?;
    }
    if let Some(l) = &case.labels {
        io::write_labels(&dir.join(format!("{}_seg.nii.gz", case.id)), l)?;
    }
    Ok(dir)
}

/// Z-score every modality over its nonzero voxels; zeros stay zero.
pub fn normalize(v: &MultiModalVolume) -> Result<MultiModalVolume> {
    let mut out = v.clone();
    for m in Modality::ALL {
        let x = out.modality_mut(m);
        let (n, sum) = x.iter().filter(|&&a| a != 0.0).fold((0usize, 0.0), |(n, s), &a| (n + 1, s + a));
        if n == 0 {
            return Err(Error::EmptyModality { modality: m.suffix().to_string() });
        }
        let mean = sum / n as f64;
        let var = x.iter().filter(|&&a| a != 0.0).map(|&a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for a in x.iter_mut().filter(|a| **a != 0.0) {
            *a = (*a - mean) / std;
        }
    }
    Ok(out)
}
