//! Component, pairing and layer-count ablations at desk scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::MultiModalVolume;
use crate::error::{Error, Result};
use crate::infer::{sliding_window_infer, SlidingSpec};
use crate::metrics::{evaluate, Region};
use crate::modality::Pairing;
use crate::network::NetworkConfig;

use super::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationGrid {
    /// Parallel encoders with SCFF on/off crossed with MFCI on/off.
    ScffMfci,
    /// The four parallel cells plus the single-encoder baseline.
    Components,
    /// MFC and MFI switched independently inside the bottleneck.
    Mfci,
    /// The three ways of pairing modalities for fusion.
    Pairing,
    /// Single-modal (L1) and interaction (L2) layer counts.
    Layers,
}

impl AblationGrid {
    pub const ALL: [AblationGrid; 5] =
        [AblationGrid::ScffMfci, AblationGrid::Components, AblationGrid::Mfci, AblationGrid::Pairing, AblationGrid::Layers];

    /// (L1, L2) rows of the layer grid.
    pub const LAYER_ROWS: [(usize, usize); 7] = [(6, 2), (6, 4), (4, 12), (4, 16), (2, 2), (4, 4), (6, 6)];

    pub fn name(self) -> &'static str {
        match self {
            AblationGrid::ScffMfci => "scff-mfci",
            AblationGrid::Components => "components",
            AblationGrid::Mfci => "mfci",
            AblationGrid::Pairing => "pairing",
            AblationGrid::Layers => "layers",
        }
    }

    /// Network configurations of every row, derived from `base`.
    pub fn cells(self, base: &NetworkConfig) -> Vec<AblationCell> {
        let cell = |name: String, f: &dyn Fn(&mut NetworkConfig)| {
            let mut network = base.clone();
            network.parallel = true;
            f(&mut network);
            AblationCell { name, network }
        };
        let switches = |scff: bool, mfci: bool| {
            move |n: &mut NetworkConfig| {
                n.scff = scff;
                n.use_mfci = mfci;
                n.mfci.mfc = true;
                n.mfci.mfi = true;
            }
        };
        match self {
            AblationGrid::ScffMfci => [(false, false), (false, true), (true, false), (true, true)]
                .into_iter()
                .map(|(s, m)| cell(format!("scff={} mfci={}", on(s), on(m)), &switches(s, m)))
                .collect(),
            AblationGrid::Components => vec![
                cell("baseline".into(), &|n| {
                    n.parallel = false;
                    n.scff = false;
                    n.use_mfci = false;
                }),
                cell("baseline(P)".into(), &switches(false, false)),
                cell("baseline(P)+MFCI".into(), &switches(false, true)),
                cell("baseline(P)+SCFF".into(), &switches(true, false)),
                cell("full".into(), &switches(true, true)),
            ],
            AblationGrid::Mfci => vec![
                cell("baseline".into(), &switches(true, false)),
                cell("baseline+MFC".into(), &|n| {
                    switches(true, true)(n);
                    n.mfci.mfi = false;
                }),
                cell("baseline+MFI".into(), &|n| {
                    switches(true, true)(n);
                    n.mfci.mfc = false;
                }),
                cell("full".into(), &switches(true, true)),
            ],
            AblationGrid::Pairing => Pairing::ALL
                .into_iter()
                .map(|p| {
                    cell(p.label().to_string(), &move |n: &mut NetworkConfig| {
                        switches(true, true)(n);
                        n.pairing = p;
                    })
                })
                .collect(),
            AblationGrid::Layers => Self::LAYER_ROWS
                .into_iter()
                .map(|(l1, l2)| {
                    cell(format!("L1={l1} L2={l2}"), &move |n: &mut NetworkConfig| {
                        switches(true, true)(n);
                        n.mfci.l1 = l1;
                        n.mfci.l2 = l2;
                    })
                })
                .collect(),
        }
    }
}

fn on(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl fmt::Display for AblationGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation grid {s:?} (expected one of scff-mfci, components, mfci, pairing, layers)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub network: NetworkConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub final_loss: f64,
    /// Mean Dice over the evaluation cases (ET, WT, TC).
    pub dice: [f64; 3],
    /// Mean HD95 in mm (ET, WT, TC); an undefined distance counts as the
    /// volume diagonal.
    pub hd95: [f64; 3],
}

impl AblationRow {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }

    pub fn mean_hd95(&self) -> f64 {
        self.hd95.iter().sum::<f64>() / 3.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: AblationGrid,
    pub rows: Vec<AblationRow>,
}

/// Quote a CSV field when it holds a separator, quote or line break.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const COLUMNS: [&str; 11] =
    ["method", "params", "loss", "dice_et", "dice_wt", "dice_tc", "dice_avg", "hd95_et", "hd95_wt", "hd95_tc", "hd95_avg"];

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = COLUMNS.join(",") + "\n";
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.4},{:.4},{:.4},{:.4},{:.3},{:.3},{:.3},{:.3}\n",
                csv_field(&r.name),
                r.params,
                r.final_loss,
                r.dice[0],
                r.dice[1],
                r.dice[2],
                r.mean_dice(),
                r.hd95[0],
                r.hd95[1],
                r.hd95[2],
                r.mean_hd95()
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        let mut s = format!("ablation grid: {}\n", self.grid);
        s.push_str(&format!(
            "{:<width$} {:>10} {:>8} | {:>6} {:>6} {:>6} {:>6} | {:>7} {:>7} {:>7} {:>7}\n",
            "method", "params", "loss", "ET", "WT", "TC", "avg", "ET", "WT", "TC", "avg"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$} {:>10} {:>8.4} | {:>6.2} {:>6.2} {:>6.2} {:>6.2} | {:>7.3} {:>7.3} {:>7.3} {:>7.3}\n",
                r.name,
                r.params,
                r.final_loss,
                100.0 * r.dice[0],
                100.0 * r.dice[1],
                100.0 * r.dice[2],
                100.0 * r.mean_dice(),
                r.hd95[0],
                r.hd95[1],
                r.hd95[2],
                r.mean_hd95()
            ));
        }
        s
    }
}

/// Train every cell of `grid` from scratch with `train_cfg` and score it on
/// `eval_cases` (the training cases when empty).
pub fn ablation_run(
    grid: AblationGrid,
    base: &NetworkConfig,
    train_cfg: &TrainConfig,
    train_cases: &[MultiModalVolume],
    eval_cases: &[MultiModalVolume],
    spec: &SlidingSpec,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let eval_cases = if eval_cases.is_empty() { train_cases } else { eval_cases };
    let mut rows = Vec::new();
    for cell in grid.cells(base) {
        let out = train(&cell.network, train_cfg, train_cases, &[], spec, None, None)?;
        let mut dice = [0.0; 3];
        let mut hd = [0.0; 3];
        for c in eval_cases {
            let c = if train_cfg.normalize { crate::data::normalize(c)? } else { c.clone() };
            let gt = c.labels.as_ref().ok_or_else(|| Error::InvalidArgument(format!("case {} has no labels", c.id)))?;
            let report = evaluate(&sliding_window_infer(&c, &out.model, spec)?.labels, gt)?;
            let diag = c.shape().iter().zip(c.spacing).map(|(&n, s)| (n as f64 * s).powi(2)).sum::<f64>().sqrt();
            for (k, r) in [Region::ET, Region::WT, Region::TC].into_iter().enumerate() {
                let m = report.get(r).expect("all regions reported");
                dice[k] += m.dice / eval_cases.len() as f64;
                hd[k] += m.hd95.value_or(diag) / eval_cases.len() as f64;
            }
        }
        let row = AblationRow {
            name: cell.name,
            params: out.model.param_count(),
            final_loss: out.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            dice,
            hd95: hd,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationTable { grid, rows })
}
