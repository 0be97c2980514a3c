//! BraTS region masks and the Dice / sensitivity / specificity / HD95 metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];

fn grid_len(shape: Shape3) -> usize {
    shape.iter().product()
}

/// Integer label grid with BraTS values {0, 1, 2, 4}, stored (D, H, W)
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    data: Vec<u8>,
    shape: Shape3,
    spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(data: Vec<u8>, shape: Shape3) -> Result<Self> {
        Self::with_spacing(data, shape, [1.0; 3])
    }

    pub fn with_spacing(data: Vec<u8>, shape: Shape3, spacing: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("label volume shape {shape:?} has an empty axis")));
        }
        if data.len() != grid_len(shape) {
            return Err(Error::Shape(format!(
                "label volume {shape:?} needs {} voxels, got {}",
                grid_len(shape),
                data.len()
            )));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| !matches!(v, 0 | 1 | 2 | 4)) {
            return Err(Error::InvalidLabel { value: v as i64, index });
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("voxel spacing {spacing:?} must be positive")));
        }
        Ok(Self { data, shape, spacing })
    }

    /// Build from arbitrary integers, rejecting anything outside {0,1,2,4}.
    pub fn from_values(values: &[i64], shape: Shape3, spacing: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len());
        for (index, &v) in values.iter().enumerate() {
            if !matches!(v, 0 | 1 | 2 | 4) {
                return Err(Error::InvalidLabel { value: v, index });
            }
            data.push(v as u8);
        }
        Self::with_spacing(data, shape, spacing)
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            data: vec![0; grid_len(shape)],
            shape,
            spacing: [1.0; 3],
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[(d * self.shape[1] + h) * self.shape[2] + w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    /// Whole tumor: labels {1, 2, 4}.
    WT,
    /// Tumor core: labels {1, 4}.
    TC,
    /// Enhancing tumor: label {4}.
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::WT => matches!(label, 1 | 2 | 4),
            Region::TC => matches!(label, 1 | 4),
            Region::ET => label == 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WT" => Ok(Region::WT),
            "TC" => Ok(Region::TC),
            "ET" => Ok(Region::ET),
            other => Err(Error::InvalidArgument(format!("unknown region code {other:?} (expected WT, TC or ET)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    data: Vec<bool>,
    shape: Shape3,
    spacing: [f64; 3],
    region: Option<Region>,
}

impl RegionMask {
    pub fn new(data: Vec<bool>, shape: Shape3) -> Result<Self> {
        if data.len() != grid_len(shape) || shape.contains(&0) {
            return Err(Error::Shape(format!("mask of {} voxels for shape {shape:?}", data.len())));
        }
        Ok(Self {
            data,
            shape,
            spacing: [1.0; 3],
            region: None,
        })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn region(&self) -> Option<Region> {
        self.region
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Voxels that are set and have at least one 6-neighbour that is unset or
    /// outside the grid.
    pub fn boundary(&self) -> Vec<Shape3> {
        let [nd, nh, nw] = self.shape;
        let at = |d: usize, h: usize, w: usize| self.data[(d * nh + h) * nw + w];
        let mut out = Vec::new();
        for d in 0..nd {
            for h in 0..nh {
                for w in 0..nw {
                    if !at(d, h, w) {
                        continue;
                    }
                    let edge = d == 0
                        || h == 0
                        || w == 0
                        || d + 1 == nd
                        || h + 1 == nh
                        || w + 1 == nw
                        || !at(d - 1, h, w)
                        || !at(d + 1, h, w)
                        || !at(d, h - 1, w)
                        || !at(d, h + 1, w)
                        || !at(d, h, w - 1)
                        || !at(d, h, w + 1);
                    if edge {
                        out.push([d, h, w]);
                    }
                }
            }
        }
        out
    }
}

/// Boolean mask of the voxels whose label belongs to `region`.
pub fn region_extract(labels: &LabelVolume, region: Region) -> RegionMask {
    RegionMask {
        data: labels.data.iter().map(|&l| region.contains(l)).collect(),
        shape: labels.shape,
        spacing: labels.spacing,
        region: Some(region),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &RegionMask, gt: &RegionMask) -> Result<ConfusionCounts> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!("prediction {:?} vs reference {:?}", pred.shape, gt.shape)));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FN + FP)`; 1.0 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp)
}

/// `TP / (TP + FN)`; 1.0 when the reference is empty.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// `TP / (TP + FP)`, the form the method's evaluation reports under the name
/// specificity (conventionally called precision). 1.0 when nothing is
/// predicted.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// Conventional specificity `TN / (TN + FP)`.
pub fn true_negative_rate(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

/// Result of a Hausdorff computation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Hausdorff {
    Distance(f64),
    /// Exactly one of the two masks is empty.
    Undefined,
}

impl Hausdorff {
    pub fn value(self) -> Option<f64> {
        match self {
            Hausdorff::Distance(d) => Some(d),
            Hausdorff::Undefined => None,
        }
    }

    /// The distance, or `worst` when undefined.
    pub fn value_or(self, worst: f64) -> f64 {
        self.value().unwrap_or(worst)
    }
}

impl fmt::Display for Hausdorff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hausdorff::Distance(d) => write!(f, "{d:.4}"),
            Hausdorff::Undefined => f.write_str("undefined"),
        }
    }
}

/// Percentile of `values` with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty list");
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// 1-D squared distance transform (lower envelope of parabolas) over samples
/// at positions `i * step`. `f` holds input costs, `+inf` where no seed.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let meet = |p: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
        let mut s = meet(v[k]);
        // z[0] is -inf, so this stops at k == 0 at the latest
        while s <= z[k] {
            k -= 1;
            s = meet(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest
/// seed voxel, honouring anisotropic spacing.
fn squared_distance_field(seeds: &[Shape3], shape: Shape3, spacing: [f64; 3]) -> Vec<f64> {
    let [nd, nh, nw] = shape;
    let mut field = vec![f64::INFINITY; nd * nh * nw];
    for &[d, h, w] in seeds {
        field[(d * nh + h) * nw + w] = 0.0;
    }
    let longest = nd.max(nh).max(nw);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let strides = [nh * nw, nw, 1];
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for t in 0..n {
                    line[t] = field[base + t * stride];
                }
                edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    field[base + t * stride] = out[t];
                }
            }
        }
    }
    field
}

fn directed_hd95(from: &[Shape3], to_field: &[f64], shape: Shape3) -> f64 {
    let [_, nh, nw] = shape;
    let mut dists: Vec<f64> = from
        .iter()
        .map(|&[d, h, w]| to_field[(d * nh + h) * nw + w].sqrt())
        .collect();
    percentile(&mut dists, 95.0)
}

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries, in
/// the units of the masks' voxel spacing (taken from `a`).
pub fn hausdorff95(a: &RegionMask, b: &RegionMask) -> Result<Hausdorff> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("hausdorff95 masks {:?} vs {:?}", a.shape, b.shape)));
    }
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(Hausdorff::Distance(0.0)),
        (true, false) | (false, true) => return Ok(Hausdorff::Undefined),
        _ => {}
    }
    let ba = a.boundary();
    let bb = b.boundary();
    let fa = squared_distance_field(&ba, a.shape, a.spacing);
    let fb = squared_distance_field(&bb, a.shape, a.spacing);
    let hab = directed_hd95(&ba, &fb, a.shape);
    let hba = directed_hd95(&bb, &fa, a.shape);
    Ok(Hausdorff::Distance(hab.max(hba)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: Region,
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub true_negative_rate: f64,
    pub hd95: Hausdorff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regions: Vec<RegionMetrics>,
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!("prediction {:?} vs reference {:?}", pred.shape, gt.shape)));
    }
    let regions = Region::ALL
        .iter()
        .map(|&region| {
            let p = region_extract(pred, region).with_spacing(gt.spacing);
            let g = region_extract(gt, region);
            let counts = confusion(&p, &g)?;
            Ok(RegionMetrics {
                region,
                counts,
                dice: dice(&counts),
                sensitivity: sensitivity(&counts),
                specificity: specificity(&counts),
                true_negative_rate: true_negative_rate(&counts),
                hd95: hausdorff95(&p, &g)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport { regions })
}

impl MetricsReport {
    pub fn get(&self, region: Region) -> Option<&RegionMetrics> {
        self.regions.iter().find(|r| r.region == region)
    }

    pub fn mean_dice(&self) -> f64 {
        self.regions.iter().map(|r| r.dice).sum::<f64>() / self.regions.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,dice,sensitivity,specificity,tnr,hd95,tp,fp,fn,tn\n");
        for r in &self.regions {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
                r.region,
                r.dice,
                r.sensitivity,
                r.specificity,
                r.true_negative_rate,
                r.hd95,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                r.counts.tn
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>8} {:>12} {:>12} {:>8} {:>10}\n",
            "region", "dice", "sensitivity", "specificity", "tnr", "hd95(mm)"
        );
        for r in &self.regions {
            s.push_str(&format!(
                "{:<6} {:>8.4} {:>12.4} {:>12.4} {:>8.4} {:>10}\n",
                r.region.name(),
                r.dice,
                r.sensitivity,
                r.specificity,
                r.true_negative_rate,
                r.hd95.to_string()
            ));
        }
        s
    }
}
