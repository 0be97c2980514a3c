use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfci::data::{io, load_case, load_cases, normalize, synth_case, write_case, PhantomSpec};
use cfci::engine::{ablation_run, train, AblationGrid, Checkpoint, Trainer};
use cfci::infer::sliding_window_infer;
use cfci::metrics::evaluate;
use cfci::{selfcheck, Error, ExperimentConfig, MultiModalVolume, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cfci", version, about = "Multimodal brain-tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on case directories or synthetic phantoms.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of training cases; phantoms are generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of validation cases.
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Output directory for logs and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment one case directory.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Case directory holding the four modality volumes.
        #[arg(long)]
        case: PathBuf,
        /// Output label map (.nii or .nii.gz).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted label map with a reference.
    Evaluate {
        prediction: PathBuf,
        reference: PathBuf,
        /// Print CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Write synthetic phantom cases.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an ablation grid and print the comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of scff-mfci, components, mfci, pairing, layers, or all.
        #[arg(long, default_value = "components")]
        grid: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Also write `<grid>.csv` files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selfcheck,
}

fn phantoms(cfg: &ExperimentConfig, count: usize, offset: u64) -> Result<Vec<MultiModalVolume>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.seed.wrapping_add(offset));
    (0..count).map(|i| synth_case(&mut rng, &cfg.synth.phantom, &format!("phantom_{offset}_{i:03}"))).collect()
}

fn datasets(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    val: Option<&Path>,
) -> Result<(Vec<MultiModalVolume>, Vec<MultiModalVolume>)> {
    let train = match data {
        Some(d) => load_cases(d)?,
        None => phantoms(cfg, cfg.synth.train_cases, 0)?,
    };
    let val = match (val, data) {
        (Some(v), _) => load_cases(v)?,
        (None, None) => phantoms(cfg, cfg.synth.val_cases, 1)?,
        (None, Some(_)) => Vec::new(),
    };
    Ok((train, val))
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{flag}: no such file {}", path.display())))
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { cfg, data, val_data, out, resume } => {
            let cfg = cfg.load()?;
            let (train_cases, val_cases) = datasets(&cfg, data.as_deref(), val_data.as_deref())?;
            let resume = match resume {
                Some(p) => {
                    require_file(&p, "--resume")?;
                    Some(Trainer::resume(&Checkpoint::load(&p)?)?)
                }
                None => None,
            };
            println!(
                "training on {} cases ({} validation), {} epochs",
                train_cases.len(),
                val_cases.len(),
                cfg.train.epochs
            );
            let outcome = train(&cfg.network, &cfg.train, &train_cases, &val_cases, &cfg.infer, Some(&out), resume)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            if let Some(e) = outcome.log.epochs.last() {
                println!("final epoch {} mean loss {:.6}", e.epoch, e.mean_loss);
            }
            if let Some(b) = outcome.best_metric {
                println!("best mean Dice {b:.4}");
            }
            println!("logs and checkpoints in {}", out.display());
            Ok(true)
        }
        Command::Infer { cfg, checkpoint, case, out } => {
            require_file(&checkpoint, "--checkpoint")?;
            let cfg = cfg.load()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.to_model()?;
            let m = model.net.cfg.size_multiple();
            if cfg.infer.patch.iter().any(|p| p % m != 0) {
                return Err(Error::Config(format!("inference patch {:?} must be a multiple of {m}", cfg.infer.patch)));
            }
            let v = normalize(&load_case(&case)?)?;
            let pred = sliding_window_infer(&v, &model, &cfg.infer)?;
            io::write_labels(&out, &pred.labels)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Evaluate { prediction, reference, csv } => {
            let report = evaluate(&io::read_labels(&prediction)?, &io::read_labels(&reference)?)?;
            print!("{}", if csv { report.to_csv() } else { report.to_table() });
            Ok(true)
        }
        Command::Synth { out, count, size, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = PhantomSpec { size, ..Default::default() };
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let dir = write_case(&synth_case(&mut rng, &spec, &format!("phantom_{i:03}"))?, &out)?;
                println!("{}", dir.display());
            }
            Ok(true)
        }
        Command::Ablate { cfg, grid, data, val_data, out } => {
            let cfg = cfg.load()?;
            let grids = if grid == "all" { AblationGrid::ALL.to_vec() } else { vec![grid.parse()?] };
            let (train_cases, val_cases) = datasets(&cfg, data.as_deref(), val_data.as_deref())?;
            for g in grids {
                let table = ablation_run(g, &cfg.network, &cfg.train, &train_cases, &val_cases, &cfg.infer, |r| {
                    eprintln!("  {}: loss {:.4}, mean Dice {:.4}", r.name, r.final_loss, r.mean_dice());
                })?;
                println!("{}", table.to_table());
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join(format!("{g}.csv")), table.to_csv())?;
                }
            }
            Ok(true)
        }
        Command::Selfcheck => {
            let results = selfcheck::run_all();
            for r in &results {
                println!("[{}] {} ({:.2}s): {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} checks passed", results.len() - failed, results.len());
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
