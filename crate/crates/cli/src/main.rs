use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scoregan_core::checkpoint::{evaluator_checkpoint, restore_evaluator, restore_generator, Checkpoint};
use scoregan_core::gradcheck;
use scoregan_core::io::{ppm_grid, write_atomic};
use scoregan_core::networks::preset;
use scoregan_core::run::{probe_overfit, resume_training, run_training, Materials, RunConfig, RunMode};
use scoregan_core::training::{eval_sample_count, evaluate_samples, pretrain_evaluator, real_feature_stats, sample_generator};
use scoregan_core::Error;

#[derive(Parser)]
#[command(name = "scoregan", version, about = "Score-guided GAN training on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator; writes the resolved config, metrics.csv and checkpoints to OUT.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score and Fréchet distance of a checkpoint's generator as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config; defaults to config.json of the run holding the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metric evaluator; defaults to the config's, then the run's evaluators/metric.
        #[arg(long)]
        evaluator: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PPM grid of samples, one column per class.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples.ppm")]
        out: PathBuf,
    },
    /// Train a classifier on the configured data and store it as an evaluator.
    PretrainEvaluator {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        /// Print the per-case report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score-only objective against the full objective.
    ProbeOverfit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Core(Error),
    Io(PathBuf, std::io::Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Divergence(_) | Error::Numerical(_)) => 3,
            Failure::Core(
                Error::Io(_) | Error::Checkpoint(_) | Error::ChecksumMismatch(_) | Error::Format(_) | Error::Json(_),
            ) => 4,
            Failure::Io(..) => 4,
            Failure::Core(_) | Failure::Check(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Io(p, e) => write!(f, "{}: {e}", p.display()),
            Failure::Check(s) => f.write_str(s),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default().resolve()?),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Io(p.into(), e))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

/// `run/checkpoints/<name>` → `run`.
fn run_dir_of(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent()?.parent().map(Path::to_path_buf)
}

fn eval(checkpoint: &Path, config: Option<PathBuf>, evaluator: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let run = run_dir_of(checkpoint);
    let config = config.or_else(|| run.as_ref().map(|r| r.join("config.json")));
    let cfg = load_config(config.as_deref())?;
    let ev_path = evaluator
        .or_else(|| cfg.evaluators.metric_path.clone())
        .or_else(|| run.as_ref().map(|r| r.join("evaluators").join("metric")))
        .ok_or_else(|| Failure::Core(Error::Config("no metric evaluator given".into())))?;
    let e = restore_evaluator(Checkpoint::load(&ev_path)?)?;
    let g = restore_generator(Checkpoint::load(checkpoint)?)?;
    let data = cfg.data.load()?;
    let real = real_feature_stats(&e, &data, cfg.eval.fid_samples)?;
    let (x, _) = sample_generator(&g, eval_sample_count(&cfg.eval), data.classes, cfg.train.seed)?;
    let r = evaluate_samples(&x, &e, &real, &cfg.eval)?;
    let csv = format!("metric,value,std\ntoy_is,{},{}\ntoy_fid,{},\n", r.score.mean, r.score.std, r.fid);
    match out {
        Some(p) => write_atomic(&p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn generate(checkpoint: &Path, per_class: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let g = restore_generator(Checkpoint::load(checkpoint)?)?;
    let classes = g.spec.classes;
    if per_class == 0 {
        return Err(Error::Config("--per-class must be ≥ 1".into()).into());
    }
    // labels cycle over classes, so row r of the grid holds samples r·C .. r·C + C − 1
    let (x, _) = sample_generator(&g, per_class * classes, classes, seed)?;
    write_atomic(out, &ppm_grid(&x, per_class, classes)?)?;
    println!("wrote {} ({per_class} rows × {classes} classes)", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, out, resume } => {
            let cfg = load_config(config.as_deref())?;
            if cfg.mode == RunMode::ProbeOverfit {
                return Err(Error::Config("mode probe-overfit runs through the probe-overfit subcommand".into()).into());
            }
            let m = Materials::prepare(&cfg, Some(&out))?;
            let (state, _) = match resume {
                Some(ck) => resume_training(&cfg, &m, &ck, Some(&out))?,
                None => run_training(&cfg, &m, Some(&out))?,
            };
            if let Some(last) = state.history.last() {
                println!(
                    "{} finished at iteration {}: toy score {:.4} ± {:.4}, toy FID {:.4}",
                    cfg.train.mode_name(),
                    state.iteration,
                    last.toy_is_mean,
                    last.toy_is_std,
                    last.toy_fid
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint, config, evaluator, out } => eval(&checkpoint, config, evaluator, out),
        Command::Generate { checkpoint, per_class, seed, out } => generate(&checkpoint, per_class, seed, &out),
        Command::PretrainEvaluator { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = cfg.data.load()?;
            let specs = preset(&cfg.networks, data.classes)?;
            let e = pretrain_evaluator(specs.classifier, &data, seed, &cfg.evaluators.pretrain)?;
            evaluator_checkpoint(&e)?.save(&out)?;
            println!(
                "evaluator seed {seed}: held-out accuracy {:.4}, checksum {}",
                e.provenance.held_out_accuracy,
                e.checksum()
            );
            Ok(())
        }
        Command::Gradcheck { json } => {
            let report = gradcheck::run_suite()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            } else {
                for c in &report.cases {
                    println!(
                        "{:<28} {:>4} coords {:>3} skipped  max rel {:.3e}  max abs {:.3e}  {}",
                        c.name,
                        c.coordinates,
                        c.skipped,
                        c.max_rel,
                        c.max_abs,
                        if c.passed() { "ok" } else { "FAIL" }
                    );
                }
                println!(
                    "max relative error {:.3e} over {} cases in {:.1?}",
                    report.max_rel(),
                    report.cases.len(),
                    report.elapsed
                );
            }
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
                Err(Failure::Check(format!("gradient check failed for {}", names.join(", "))))
            }
        }
        Command::ProbeOverfit { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let m = Materials::prepare(&cfg, Some(&out))?;
            let r = probe_overfit(&cfg, &m, Some(&out))?;
            println!("real-data score: training evaluator {:.4}, held-out evaluator {:.4}", r.real_train_score, r.real_held_out_score);
            for run in ["score-only", "scoregan"] {
                if let Some(row) = r.last(run) {
                    println!(
                        "{run:<10} iteration {}: training-evaluator score {:.4}, held-out score {:.4}, toy FID {:.4}, clamp engaged {} times",
                        row.iteration, row.train_score, row.held_out_score, row.toy_fid, row.ris_real_branch
                    );
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
