//! Whole-volume prediction by averaging softmax outputs of overlapping
//! patches.

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::data::{crop, pad_to, MultiModalVolume};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{LabelVolume, Shape3};
use crate::network::{class_to_label, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingSpec {
    pub patch: Shape3,
    /// Fractional overlap of neighbouring patches along each axis.
    pub overlap: f64,
}

impl Default for SlidingSpec {
    fn default() -> Self {
        Self { patch: [128; 3], overlap: 0.75 }
    }
}

impl SlidingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if self.patch.contains(&0) {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self, axis: usize) -> usize {
        ((self.patch[axis] as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }
}

/// Origins along one axis: a regular grid with the last patch clamped to
/// end at the edge. Requires `patch <= extent`.
pub fn axis_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut pos = 0;
    while pos + patch < extent {
        pos = (pos + stride).min(extent - patch);
        out.push(pos);
    }
    out
}

/// Patch origins over a volume, in (d, h, w) raster order.
pub fn tile_positions(shape: Shape3, spec: &SlidingSpec) -> Result<Vec<Shape3>> {
    spec.validate()?;
    if (0..3).any(|a| spec.patch[a] > shape[a]) {
        return shape_err(format!("volume {shape:?} smaller than patch {:?}; pad first", spec.patch));
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_positions(shape[a], spec.patch[a], spec.stride(a))).collect();
    let mut out = Vec::new();
    for &d in &axes[0] {
        for &h in &axes[1] {
            for &w in &axes[2] {
                out.push([d, h, w]);
            }
        }
    }
    Ok(out)
}

/// Number of tiles covering each voxel.
pub fn coverage(shape: Shape3, patch: Shape3, origins: &[Shape3]) -> Vec<u32> {
    let mut c = vec![0u32; shape.iter().product()];
    for o in origins {
        for d in o[0]..o[0] + patch[0] {
            for h in o[1]..o[1] + patch[1] {
                for w in o[2]..o[2] + patch[2] {
                    c[(d * shape[1] + h) * shape[2] + w] += 1;
                }
            }
        }
    }
    c
}

/// Anything that maps a `[1, 4, d, h, w]` patch to per-class probabilities
/// `[1, C, d, h, w]`.
pub trait PatchModel {
    fn classes(&self) -> usize;
    fn predict(&self, patch: &Tensor) -> Result<Tensor>;
}

impl PatchModel for Model {
    fn classes(&self) -> usize {
        self.net.cfg.classes
    }

    fn predict(&self, patch: &Tensor) -> Result<Tensor> {
        no_grad(|| Ok(self.forward(&Var::constant(patch.clone()))?.logits.softmax(1)?.value().clone()))
    }
}

pub struct Prediction {
    /// Averaged probabilities, `[C, D, H, W]`.
    pub probs: Tensor,
    pub labels: LabelVolume,
}

/// Argmax over classes, mapped back to label values.
pub fn probs_to_labels(probs: &Tensor, spacing: [f64; 3]) -> Result<LabelVolume> {
    let s = probs.shape();
    let n: usize = s[1..].iter().product();
    let p = probs.data();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..s[0] {
                if p[c * n + i] > p[best * n + i] {
                    best = c;
                }
            }
            class_to_label(best)
        })
        .collect();
    LabelVolume::with_spacing(data, [s[1], s[2], s[3]], spacing)
}

/// Average the predictions of the patches at `origins`, visited in the
/// given order. The volume must already be at least one patch large.
pub fn accumulate_tiles<M: PatchModel + ?Sized>(
    v: &MultiModalVolume,
    model: &M,
    patch: Shape3,
    origins: &[Shape3],
) -> Result<Tensor> {
    let shape = v.shape();
    let c = model.classes();
    let n: usize = shape.iter().product();
    let mut sum = vec![0.0; c * n];
    let counts = coverage(shape, patch, origins);
    for &o in origins {
        let tile = crop(v, o, patch)?;
        let probs = model.predict(&tile.to_input())?;
        if probs.shape() != [1, c, patch[0], patch[1], patch[2]] {
            return shape_err(format!("model returned {:?} for a {patch:?} patch", probs.shape()));
        }
        let pd = probs.data();
        let pn: usize = patch.iter().product();
        for k in 0..c {
            for d in 0..patch[0] {
                for h in 0..patch[1] {
                    let src = k * pn + (d * patch[1] + h) * patch[2];
                    let dst = k * n + ((o[0] + d) * shape[1] + o[1] + h) * shape[2] + o[2];
                    for w in 0..patch[2] {
                        sum[dst + w] += pd[src + w];
                    }
                }
            }
        }
    }
    for k in 0..c {
        for (i, &cnt) in counts.iter().enumerate() {
            if cnt == 0 {
                return Err(Error::InvalidArgument(format!("voxel {i} is not covered by any tile")));
            }
            sum[k * n + i] /= cnt as f64;
        }
    }
    Tensor::new(vec![c, shape[0], shape[1], shape[2]], sum)
}

/// Sliding-window prediction of a whole case. Volumes smaller than the
/// patch are zero-padded symmetrically and the result cropped back.
pub fn sliding_window_infer<M: PatchModel + ?Sized>(v: &MultiModalVolume, model: &M, spec: &SlidingSpec) -> Result<Prediction> {
    spec.validate()?;
    let shape = v.shape();
    let (padded, before) = pad_to(v, spec.patch)?;
    let origins = tile_positions(padded.shape(), spec)?;
    let mut probs = accumulate_tiles(&padded, model, spec.patch, &origins)?;
    if padded.shape() != shape {
        for a in 0..3 {
            probs = probs.narrow(a + 1, before[a], shape[a])?;
        }
    }
    let labels = probs_to_labels(&probs, v.spacing)?;
    Ok(Prediction { probs, labels })
}
