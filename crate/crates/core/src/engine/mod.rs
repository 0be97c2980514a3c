//! Training: Dice loss, AdamW, the epoch loop with logging and
//! checkpointing, and the ablation runner.

mod ablation;
mod checkpoint;
mod loss;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Var};
use crate::data::{augment, normalize, AugmentationSpec, MultiModalVolume};
use crate::error::{Error, Result};
use crate::infer::{probs_to_labels, sliding_window_infer, SlidingSpec};
use crate::metrics::{confusion, dice, region_extract, LabelVolume, Region};
use crate::network::{Model, NetworkConfig};
use crate::tensor::Tensor;

pub use ablation::{ablation_run, AblationCell, AblationGrid, AblationRow, AblationTable};
pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC};
pub use loss::{dice_loss, one_hot, soft_dice_loss, DICE_EPS};
pub use optim::{cosine_lr, AdamW, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds data order and augmentation; the network has its own seed.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Apply random scaling, flips and cropping; otherwise whole cases are
    /// used as they are.
    pub augment: bool,
    pub augmentation: AugmentationSpec,
    /// Z-score every case before training.
    pub normalize: bool,
    /// Validate (and consider a new best checkpoint) every this many epochs.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            augment: true,
            augmentation: AugmentationSpec::default(),
            normalize: true,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("batch_size and val_every must be positive".into()));
        }
        self.optimizer.validate()?;
        self.augmentation.validate()
    }

    pub fn steps_per_epoch(&self, cases: usize) -> usize {
        cases.div_ceil(self.batch_size)
    }
}

/// Hard Dice per region in `Region::ALL` order (WT, TC, ET).
pub fn region_dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (k, r) in Region::ALL.into_iter().enumerate() {
        out[k] = dice(&confusion(&region_extract(pred, r), &region_extract(gt, r))?);
    }
    Ok(out)
}

fn mean3(rows: &[[f64; 3]]) -> [f64; 3] {
    let n = rows.len().max(1) as f64;
    std::array::from_fn(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Training Dice of the batch prediction (WT, TC, ET).
    pub dice: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_dice: [f64; 3],
    pub val_dice: Option<[f64; 3]>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Model, optimizer and sampling state of one training run.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Length of the cosine schedule.
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(net: &NetworkConfig, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(net)?;
        let opt = AdamW::new(cfg.optimizer.clone(), &model.params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { model, opt, cfg, rng, epoch: 0, step: 0, total_steps })
    }

    /// Continue a run saved by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        let cfg = h.train.clone().ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let (Some((m, v)), Some(opt_step), Some(rng)) = (&ck.moments, h.optimizer_step, &h.rng) else {
            return Err(Error::Checkpoint("checkpoint has no optimizer or rng state".into()));
        };
        let model = ck.to_model()?;
        let opt = AdamW { cfg: cfg.optimizer.clone(), step: opt_step, m: m.clone(), v: v.clone() };
        Ok(Self { model, opt, cfg, rng: rng.clone(), epoch: h.epoch, step: h.step, total_steps: h.total_steps })
    }

    pub fn checkpoint(&self, best_metric: Option<f64>) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model).with_optimizer(&self.opt);
        ck.header.train = Some(self.cfg.clone());
        ck.header.epoch = self.epoch;
        ck.header.step = self.step;
        ck.header.total_steps = self.total_steps;
        ck.header.best_metric = best_metric;
        ck.header.rng = Some(self.rng.clone());
        ck
    }

    pub fn lr(&self) -> f64 {
        let o = &self.cfg.optimizer;
        cosine_lr(o.lr, o.min_lr_ratio, self.step, self.total_steps)
    }

    /// One optimizer step on a batch of equally shaped, labelled cases.
    pub fn train_step(&mut self, batch: &[MultiModalVolume]) -> Result<StepRecord> {
        let labels: Vec<&LabelVolume> = batch
            .iter()
            .map(|c| c.labels.as_ref().ok_or_else(|| Error::InvalidArgument(format!("case {} has no labels", c.id))))
            .collect::<Result<_>>()?;
        let inputs: Vec<Tensor> = batch.iter().map(|c| c.to_input()).collect();
        let input = Tensor::concat(&inputs.iter().collect::<Vec<_>>(), 0)?;
        let target = one_hot(&labels, self.model.net.cfg.classes)?;
        let lr = self.lr();

        let bound = self.model.params.bind();
        let out = self.model.net.forward(&bound, &Var::constant(input))?;
        let loss = dice_loss(&out.logits, &target)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, value });
        }
        let mut grads = backward(&loss);
        let grads = bound.collect(&mut grads);
        let logits = out.logits.value().clone();
        drop((loss, out, bound));

        let dice_rows: Vec<[f64; 3]> = labels
            .iter()
            .enumerate()
            .map(|(b, gt)| {
                let one = logits.narrow(0, b, 1)?;
                let probs = one.reshape(&one.shape()[1..])?;
                region_dice(&probs_to_labels(&probs, gt.spacing())?, gt)
            })
            .collect::<Result<_>>()?;
        self.opt.update(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepRecord { step: self.step, epoch: self.epoch + 1, loss: value, lr, dice: mean3(&dice_rows) })
    }

    fn sample(&mut self, case: &MultiModalVolume) -> Result<MultiModalVolume> {
        if self.cfg.augment {
            augment(case, &self.cfg.augmentation, &mut self.rng)
        } else {
            Ok(case.clone())
        }
    }

    /// One shuffled pass over `cases`; calls `on_step` after every step.
    pub fn run_epoch(
        &mut self,
        cases: &[MultiModalVolume],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<(Vec<StepRecord>, f64)> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = chunk.iter().map(|&i| self.sample(&cases[i])).collect::<Result<Vec<_>>>()?;
            let rec = self.train_step(&batch)?;
            on_step(&rec)?;
            records.push(rec);
        }
        self.epoch += 1;
        Ok((records, start.elapsed().as_secs_f64()))
    }
}

/// Mean validation Dice (WT, TC, ET) with sliding-window inference.
pub fn validate(model: &Model, cases: &[MultiModalVolume], spec: &SlidingSpec) -> Result<[f64; 3]> {
    let mut rows = Vec::new();
    for c in cases {
        let gt = c.labels.as_ref().ok_or_else(|| Error::InvalidArgument(format!("case {} has no labels", c.id)))?;
        let pred = sliding_window_infer(c, model, spec)?;
        rows.push(region_dice(&pred.labels, gt)?);
    }
    Ok(mean3(&rows))
}

/// Result of [`train`]; the model holds the final weights.
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub best_metric: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

struct LogFiles {
    text: File,
    steps: File,
    epochs: File,
}

impl LogFiles {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> Result<File> {
            let path = dir.join(name);
            let new = fresh || !path.exists();
            let mut f = OpenOptions::new().create(true).append(!new).write(true).truncate(new).open(path)?;
            if new && !header.is_empty() {
                writeln!(f, "{header}")?;
            }
            Ok(f)
        };
        Ok(Self {
            text: open("train.log", "")?,
            steps: open("steps.csv", "step,epoch,loss,lr,dice_wt,dice_tc,dice_et")?,
            epochs: open("epochs.csv", "epoch,mean_loss,train_wt,train_tc,train_et,val_wt,val_tc,val_et,seconds")?,
        })
    }
}

fn fmt_dice(d: &[f64; 3]) -> String {
    format!("WT {:.4} TC {:.4} ET {:.4}", d[0], d[1], d[2])
}

/// Train on `train_cases`, validating on `val_cases` (falling back to the
/// training Dice when there are none). With `out_dir`, writes `train.log`,
/// `steps.csv`, `epochs.csv`, `last.ckpt` and `best.ckpt` there. A trainer
/// passed in `resume` continues from its saved epoch.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    train_cases: &[MultiModalVolume],
    val_cases: &[MultiModalVolume],
    spec: &SlidingSpec,
    out_dir: Option<&Path>,
    resume: Option<Trainer>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if train_cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    let prep = |cases: &[MultiModalVolume]| -> Result<Vec<MultiModalVolume>> {
        if cfg.normalize {
            cases.iter().map(normalize).collect()
        } else {
            Ok(cases.to_vec())
        }
    };
    let train_cases = prep(train_cases)?;
    let val_cases = prep(val_cases)?;
    let total = cfg.epochs * cfg.steps_per_epoch(train_cases.len());
    let fresh = resume.is_none();
    let mut trainer = match resume {
        Some(t) => t,
        None => Trainer::new(net, cfg.clone(), total)?,
    };
    let mut logs = out_dir.map(|d| LogFiles::open(d, fresh)).transpose()?;
    let mut log = TrainLog::default();
    let mut best: Option<f64> = None;
    let mut best_path = None;
    let mut last_path = None;

    while trainer.epoch < cfg.epochs {
        let (steps, seconds) = trainer.run_epoch(&train_cases, |r| {
            if let Some(l) = logs.as_mut() {
                writeln!(l.steps, "{},{},{:.10},{:.6e},{:.6},{:.6},{:.6}", r.step, r.epoch, r.loss, r.lr, r.dice[0], r.dice[1], r.dice[2])?;
            }
            Ok(())
        })?;
        let epoch = trainer.epoch;
        let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
        let train_dice = mean3(&steps.iter().map(|s| s.dice).collect::<Vec<_>>());
        let val_dice = if !val_cases.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs) {
            Some(validate(&trainer.model, &val_cases, spec)?)
        } else {
            None
        };
        let rec = EpochRecord { epoch, mean_loss, train_dice, val_dice, seconds };
        let score_src = if val_cases.is_empty() { Some(train_dice) } else { val_dice };
        let improved = match score_src.map(|d| d.iter().sum::<f64>() / 3.0) {
            Some(s) if best.is_none_or(|b| s > b) => {
                best = Some(s);
                true
            }
            _ => false,
        };
        if let (Some(l), Some(dir)) = (logs.as_mut(), out_dir) {
            let v = val_dice.map_or(",,".to_string(), |d| format!("{:.6},{:.6},{:.6}", d[0], d[1], d[2]));
            writeln!(
                l.epochs,
                "{epoch},{mean_loss:.10},{:.6},{:.6},{:.6},{v},{seconds:.3}",
                train_dice[0], train_dice[1], train_dice[2]
            )?;
            writeln!(
                l.text,
                "epoch {epoch}/{} loss {mean_loss:.6} train [{}]{} {seconds:.1}s{}",
                cfg.epochs,
                fmt_dice(&train_dice),
                val_dice.map_or(String::new(), |d| format!(" val [{}]", fmt_dice(&d))),
                if improved { " *" } else { "" }
            )?;
            let ck = trainer.checkpoint(best);
            let last = dir.join("last.ckpt");
            ck.save(&last)?;
            last_path = Some(last);
            if improved {
                let p = dir.join("best.ckpt");
                ck.save(&p)?;
                best_path = Some(p);
            }
        }
        log.steps.extend(steps);
        log.epochs.push(rec);
    }
    Ok(TrainOutcome { model: trainer.model, log, best_metric: best, last_checkpoint: last_path, best_checkpoint: best_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_case, PhantomSpec};
    use crate::mfci::MfciConfig;

    pub(crate) fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            base_width: 4,
            depth: 2,
            norm_groups: 2,
            mfci: MfciConfig { l1: 1, l2: 1, heads: 1, embed_dim: 4, token_grid: 4, ..Default::default() },
            ..Default::default()
        }
    }

    fn phantoms(n: usize, size: usize, seed: u64) -> Vec<MultiModalVolume> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| synth_case(&mut rng, &PhantomSpec { size, ..Default::default() }, &format!("p{i}")).unwrap())
            .collect()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            optimizer: OptimizerConfig { lr: 3e-3, ..Default::default() },
            augmentation: AugmentationSpec { scale_range: [1.0, 1.2], crop: [16; 3], ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cases = phantoms(2, 16, 1);
        let spec = SlidingSpec { patch: [16; 3], overlap: 0.5 };
        let out = train(&tiny_net(), &quick_cfg(1), &cases[..1], &cases[1..], &spec, Some(dir.path()), None).unwrap();
        assert_eq!(out.log.steps.len(), 1);
        assert!(out.log.steps[0].loss.is_finite());
        assert!(out.log.epochs[0].val_dice.is_some());
        for f in ["train.log", "steps.csv", "epochs.csv", "last.ckpt", "best.ckpt"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let ck = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(ck.header.epoch, 1);
        assert_eq!(ck.header.step, 1);
        assert_eq!(ck.params.len(), out.model.params.len());
        let csv = std::fs::read_to_string(dir.path().join("steps.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn same_seed_same_losses_and_resume_matches() {
        let cases = phantoms(2, 16, 2);
        let spec = SlidingSpec { patch: [16; 3], overlap: 0.5 };
        let cfg = quick_cfg(2);
        let a = train(&tiny_net(), &cfg, &cases, &[], &spec, None, None).unwrap();
        let b = train(&tiny_net(), &cfg, &cases, &[], &spec, None, None).unwrap();
        assert_eq!(a.log.losses(), b.log.losses());

        // stop after one epoch, save, resume for the second
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&tiny_net(), cfg.clone(), a.log.steps.len()).unwrap();
        let normed: Vec<_> = cases.iter().map(|c| normalize(c).unwrap()).collect();
        t.run_epoch(&normed, |_| Ok(())).unwrap();
        let path = dir.path().join("mid.ckpt");
        t.checkpoint(None).save(&path).unwrap();
        let resumed = Trainer::resume(&Checkpoint::load(&path).unwrap()).unwrap();
        let c = train(&tiny_net(), &cfg, &cases, &[], &spec, None, Some(resumed)).unwrap();
        assert_eq!(c.log.losses(), a.log.losses()[a.log.steps.len() / 2..]);
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let mut cases = phantoms(1, 16, 3);
        cases[0].images.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { normalize: false, augment: false, ..quick_cfg(1) };
        let err = train(&tiny_net(), &cfg, &cases, &[], &SlidingSpec::default(), None, None).err().unwrap();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }), "{err}");
        assert!(err.to_string().contains("step 1"));
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }
}
