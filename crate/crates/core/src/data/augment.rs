//! Geometric augmentation shared by all modalities and the label map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::resample_axis;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{LabelVolume, Shape3};
use crate::tensor::Tensor;

use super::MultiModalVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Isotropic scale factor drawn uniformly from this range.
    pub scale_range: [f64; 2],
    /// Probability of flipping each spatial axis.
    pub flip_prob: f64,
    pub crop: Shape3,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { scale_range: [0.9, 1.1], flip_prob: 0.5, crop: [128; 3] }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale range {:?} must satisfy 0 < lo <= hi", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.crop.contains(&0) {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Reverse one axis of a tensor.
pub fn flip_axis(t: &Tensor, axis: usize) -> Tensor {
    let shape = t.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..n {
            let s = (o * n + i) * inner;
            let d = (o * n + (n - 1 - i)) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

fn labels_tensor(l: &LabelVolume) -> Tensor {
    let [d, h, w] = l.shape();
    Tensor::new(vec![1, d, h, w], l.data().iter().map(|&v| v as f64).collect()).expect("sizes agree")
}

fn tensor_labels(t: &Tensor, spacing: [f64; 3]) -> Result<LabelVolume> {
    let s = t.shape();
    LabelVolume::with_spacing(t.data().iter().map(|&v| v as u8).collect(), [s[1], s[2], s[3]], spacing)
}

/// Nearest-neighbour resampling of the spatial axes of a `[C, D, H, W]` grid.
fn resample_nearest(t: &Tensor, out: Shape3) -> Tensor {
    let s = t.shape();
    let idx = |n_in: usize, n_out: usize| -> Vec<usize> {
        (0..n_out)
            .map(|i| (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1))
            .collect()
    };
    let (id, ih, iw) = (idx(s[1], out[0]), idx(s[2], out[1]), idx(s[3], out[2]));
    let mut data = Vec::with_capacity(s[0] * out.iter().product::<usize>());
    for c in 0..s[0] {
        for &d in &id {
            for &h in &ih {
                for &w in &iw {
                    data.push(t.data()[((c * s[1] + d) * s[2] + h) * s[3] + w]);
                }
            }
        }
    }
    Tensor::new(vec![s[0], out[0], out[1], out[2]], data).expect("sizes agree")
}

fn crop_tensor(t: &Tensor, origin: Shape3, size: Shape3) -> Result<Tensor> {
    let mut out = t.clone();
    for axis in 0..3 {
        out = out.narrow(axis + 1, origin[axis], size[axis])?;
    }
    Ok(out)
}

/// Extract the block `[origin, origin + size)` from a case.
pub fn crop(v: &MultiModalVolume, origin: Shape3, size: Shape3) -> Result<MultiModalVolume> {
    let shape = v.shape();
    if (0..3).any(|a| size[a] == 0 || origin[a] + size[a] > shape[a]) {
        return shape_err(format!("crop {size:?} at {origin:?} does not fit in {shape:?}"));
    }
    let images = crop_tensor(&v.images, origin, size)?;
    let labels = match &v.labels {
        Some(l) => Some(tensor_labels(&crop_tensor(&labels_tensor(l), origin, size)?, l.spacing())?),
        None => None,
    };
    MultiModalVolume::new(v.id.clone(), images, labels, v.spacing)
}

fn pad_tensor(t: &Tensor, before: Shape3, out: Shape3) -> Tensor {
    let s = t.shape();
    let mut data = vec![0.0; s[0] * out.iter().product::<usize>()];
    for c in 0..s[0] {
        for d in 0..s[1] {
            for h in 0..s[2] {
                let src = ((c * s[1] + d) * s[2] + h) * s[3];
                let dst = ((c * out[0] + d + before[0]) * out[1] + h + before[1]) * out[2] + before[2];
                data[dst..dst + s[3]].copy_from_slice(&t.data()[src..src + s[3]]);
            }
        }
    }
    Tensor::new(vec![s[0], out[0], out[1], out[2]], data).expect("sizes agree")
}

/// Zero-pad every axis shorter than `min` symmetrically (the odd voxel goes
/// after). Returns the padded case and the offset of the original grid.
pub fn pad_to(v: &MultiModalVolume, min: Shape3) -> Result<(MultiModalVolume, Shape3)> {
    let shape = v.shape();
    let out: Shape3 = std::array::from_fn(|a| shape[a].max(min[a]));
    let before: Shape3 = std::array::from_fn(|a| (out[a] - shape[a]) / 2);
    let images = pad_tensor(&v.images, before, out);
    let labels = match &v.labels {
        Some(l) => Some(tensor_labels(&pad_tensor(&labels_tensor(l), before, out), l.spacing())?),
        None => None,
    };
    Ok((MultiModalVolume::new(v.id.clone(), images, labels, v.spacing)?, before))
}

/// Random isotropic scaling (trilinear for images, nearest for labels),
/// independent per-axis flips and a random crop, all shared by the four
/// modalities and the labels.
pub fn augment<R: Rng + ?Sized>(v: &MultiModalVolume, spec: &AugmentationSpec, rng: &mut R) -> Result<MultiModalVolume> {
    spec.validate()?;
    let [lo, hi] = spec.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let shape = v.shape();
    let scaled: Shape3 = std::array::from_fn(|a| ((shape[a] as f64 * scale).round() as usize).max(1));
    if (0..3).any(|a| spec.crop[a] > scaled[a]) {
        return shape_err(format!("crop {:?} larger than scaled volume {scaled:?}", spec.crop));
    }
    let mut images = v.images.clone();
    let mut labels = v.labels.as_ref().map(labels_tensor);
    if scaled != shape {
        for a in 0..3 {
            images = resample_axis(&images, a + 1, scaled[a]);
        }
        labels = labels.map(|l| resample_nearest(&l, scaled));
    }
    for a in 0..3 {
        if rng.gen_bool(spec.flip_prob) {
            images = flip_axis(&images, a + 1);
            labels = labels.map(|l| flip_axis(&l, a + 1));
        }
    }
    let origin: Shape3 = std::array::from_fn(|a| rng.gen_range(0..=scaled[a] - spec.crop[a]));
    let spacing = v.labels.as_ref().map_or(v.spacing, |l| l.spacing());
    let images = crop_tensor(&images, origin, spec.crop)?;
    let labels = match labels {
        Some(l) => Some(tensor_labels(&crop_tensor(&l, origin, spec.crop)?, spacing)?),
        None => None,
    };
    MultiModalVolume::new(v.id.clone(), images, labels, v.spacing)
}
