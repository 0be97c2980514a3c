//! Synthetic multimodal brain phantoms with nested ellipsoidal tumors.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;

use super::MultiModalVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Edge length of the cubic grid.
    pub size: usize,
    /// Standard deviation of the additive noise inside the brain.
    pub noise: f64,
    /// Whole-tumor radius range as a fraction of the grid edge.
    pub tumor_radius: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { size: 32, noise: 0.05, tumor_radius: [0.16, 0.22] }
    }
}

/// Mean intensity per tissue: brain, edema, necrotic core, enhancing rim.
const CONTRAST: [[f64; 4]; 4] = [
    // T1
    [0.80, 0.60, 0.40, 0.70],
    // T1ce
    [0.80, 0.65, 0.30, 1.60],
    // T2
    [0.70, 1.40, 1.60, 1.10],
    // FLAIR
    [0.60, 1.60, 0.90, 1.20],
];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius; inside when < 1.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

/// A cubic phantom: an ellipsoidal brain containing an edema ellipsoid
/// (label 2) around a tumor core whose outer shell enhances (label 4) and
/// whose centre is necrotic (label 1). Intensities are stored at single
/// precision so the case survives a NIfTI round trip unchanged.
pub fn synth_case<R: Rng + ?Sized>(rng: &mut R, spec: &PhantomSpec, id: &str) -> Result<MultiModalVolume> {
    let s = spec.size;
    if s < 16 {
        return Err(Error::InvalidArgument(format!("phantom size must be at least 16, got {s}")));
    }
    let [rlo, rhi] = spec.tumor_radius;
    if !(0.0 < rlo && rlo <= rhi && rhi < 0.3) {
        return Err(Error::InvalidArgument(format!("tumor radius range {:?} must lie in (0, 0.3)", spec.tumor_radius)));
    }
    let n = s as f64;
    let c = (n - 1.0) / 2.0;
    let brain = Ellipsoid {
        center: std::array::from_fn(|_| c + rng.gen_range(-0.03..0.03) * n),
        radii: std::array::from_fn(|_| n * rng.gen_range(0.40..0.46)),
    };
    let wt_r: [f64; 3] = std::array::from_fn(|_| n * rng.gen_range(rlo..=rhi));
    let tumor_center: [f64; 3] = std::array::from_fn(|a| brain.center[a] + rng.gen_range(-0.08..0.08) * n);
    let wt = Ellipsoid { center: tumor_center, radii: wt_r };
    let tc = Ellipsoid {
        center: std::array::from_fn(|a| tumor_center[a] + rng.gen_range(-0.1..0.1) * wt_r[a]),
        radii: std::array::from_fn(|a| (wt_r[a] * rng.gen_range(0.55..0.7)).max(2.5)),
    };
    let core_fraction2 = rng.gen_range(0.45f64..0.6).powi(2);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let voxels = s * s * s;
    let mut labels = vec![0u8; voxels];
    let mut tissue = vec![None; voxels];
    for d in 0..s {
        for h in 0..s {
            for w in 0..s {
                let p = [d as f64, h as f64, w as f64];
                let i = (d * s + h) * s + w;
                if brain.rho2(p) >= 1.0 {
                    continue;
                }
                let t = tc.rho2(p);
                let (label, k) = if t < core_fraction2 {
                    (1, 2)
                } else if t < 1.0 {
                    (4, 3)
                } else if wt.rho2(p) < 1.0 {
                    (2, 1)
                } else {
                    (0, 0)
                };
                labels[i] = label;
                tissue[i] = Some(k);
            }
        }
    }
    let mut images = vec![0.0; 4 * voxels];
    for (m, contrast) in CONTRAST.iter().enumerate() {
        for (i, t) in tissue.iter().enumerate() {
            if let Some(k) = t {
                let v: f64 = contrast[*k] + noise.sample(rng);
                images[m * voxels + i] = (v.max(1e-3) as f32) as f64;
            }
        }
    }
    MultiModalVolume::new(
        id,
        Tensor::new(vec![4, s, s, s], images)?,
        Some(LabelVolume::new(labels, [s, s, s])?),
        [1.0; 3],
    )
}
