//! `ieor`: generate data, train, evaluate and run the whole experiment.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ieor::dataio::{load_checkpoint, load_dataset, save_checkpoint, Split};
use ieor::eval::{self, bias_analysis, evaluate, report, EvalConfig, Predictor, PredictorKind, ReportRow};
use ieor::experiment::{files, run_all, ExperimentConfig};
use ieor::models::{IENet, IEORPipeline, NormMode, ORNet};
use ieor::synthgen::build_dataset;
use ieor::train::{pretrain_or, train_ie_end2end, train_ie_regression, EpochRecord, TrainLog};
use ieor::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "ieor", version, about = "Illuminant estimation trained through object recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic classification dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
        classes: u64,
        #[arg(long, default_value_t = 4000, value_parser = clap::value_parser!(u64).range(1..))]
        train_n: u64,
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        test_n: u64,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Experiment config supplying scene and jitter parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Phase 1: train OR alone on clean images.
    PretrainOr(TrainArgs),
    /// Phase 2: train IE through a frozen, pre-trained OR.
    TrainIe {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, required = true)]
        or_checkpoint: PathBuf,
    },
    /// Baseline: train IE by direct regression onto the jitter.
    TrainRegression(TrainArgs),
    /// Evaluate an illuminant predictor on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        predictor: PredictorArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = NormArg::None)]
        norm: NormArg,
        #[arg(long)]
        gamma: Option<f64>,
        /// Directory for report.csv and errors.csv.
        #[arg(long)]
        report_out: Option<PathBuf>,
        /// Ignore masks.csv.
        #[arg(long)]
        no_masks: bool,
    },
    /// Oracle mean-shift analysis of exported predictions.
    BiasReport {
        #[arg(long)]
        errors_csv: PathBuf,
        /// Take ground truth from this dataset's test split instead of the CSV.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate data, train everything and evaluate, from one config file.
    RunAll {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Unchanged,
    Grayworld,
    Ie,
    Regression,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    Global,
    Channel,
}

impl From<NormArg> for NormMode {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::None => NormMode::None,
            NormArg::Global => NormMode::Global,
            NormArg::Channel => NormMode::Channel,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_epoch(r: &EpochRecord) {
    let acc = r.accuracy.map(|a| format!(" acc {a:.3}")).unwrap_or_default();
    let ang = r.mean_angular_error.map(|a| format!(" angle {a:.2}°")).unwrap_or_default();
    eprintln!("{} epoch {} loss {:.4}{acc}{ang} ({:.1}s)", r.phase, r.epoch, r.loss, r.seconds);
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_log(dir: &Path, name: &str, log: &TrainLog) -> Result<(), Error> {
    log.write_csv(dir.join(name))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData {
            out,
            classes,
            train_n,
            test_n,
            size,
            seed,
            config,
        } => {
            let mut cfg = load_config(config.as_deref(), Some(seed))?;
            cfg.classes = classes as usize;
            cfg.train_n = train_n as usize;
            cfg.test_n = test_n as usize;
            cfg.scene.image_size = size;
            cfg.validate()?;
            let m = build_dataset(&cfg.dataset_plan(), &out)?;
            println!(
                "wrote {}: {} classes, {} train / {} test images, {}×{}, seed {}",
                out.display(),
                cfg.classes,
                m.splits[&Split::Train],
                m.splits[&Split::Test],
                size,
                size,
                m.seed
            );
            Ok(())
        }
        Command::PretrainOr(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            let train = load_dataset(&a.data, Split::Train)?;
            let k = train
                .manifest
                .n_classes
                .ok_or_else(|| Error::Dataset("manifest does not state n_classes".into()))?;
            let (or_net, meta, log) = pretrain_or(ORNet::new(k, cfg.seed)?, &train, &cfg.phase1(), Some(&mut print_epoch))?;
            create_dir(&a.out)?;
            save_checkpoint(a.out.join(files::OR_CHECKPOINT), &or_net.to_checkpoint(meta))?;
            write_log(&a.out, files::OR_LOG, &log)?;
            println!("wrote {}", a.out.join(files::OR_CHECKPOINT).display());
            Ok(())
        }
        Command::TrainIe { args: a, or_checkpoint } => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            let train = load_dataset(&a.data, Split::Train)?;
            let or_net = ORNet::from_checkpoint(&load_checkpoint(&or_checkpoint)?)?;
            let pipeline = IEORPipeline::new(IENet::new(cfg.seed), or_net);
            let (pipeline, meta, log) = train_ie_end2end(pipeline, &train, &cfg.phase2(), Some(&mut print_epoch))?;
            create_dir(&a.out)?;
            save_checkpoint(a.out.join(files::IE_CHECKPOINT), &pipeline.ie.to_checkpoint(meta))?;
            write_log(&a.out, files::IE_LOG, &log)?;
            println!("wrote {}", a.out.join(files::IE_CHECKPOINT).display());
            Ok(())
        }
        Command::TrainRegression(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            let train = load_dataset(&a.data, Split::Train)?;
            let (ie, meta, log) = train_ie_regression(IENet::new(cfg.seed), &train, &cfg.regression(), Some(&mut print_epoch))?;
            create_dir(&a.out)?;
            save_checkpoint(a.out.join(files::REGRESSION_CHECKPOINT), &ie.to_checkpoint(meta))?;
            write_log(&a.out, files::REGRESSION_LOG, &log)?;
            println!("wrote {}", a.out.join(files::REGRESSION_CHECKPOINT).display());
            Ok(())
        }
        Command::Eval {
            data,
            predictor,
            checkpoint,
            norm,
            gamma,
            report_out,
            no_masks,
        } => {
            let kind = match predictor {
                PredictorArg::Unchanged => PredictorKind::Unchanged,
                PredictorArg::Grayworld => PredictorKind::Grayworld,
                PredictorArg::Ie => PredictorKind::IeCheckpoint,
                PredictorArg::Regression => PredictorKind::RegressionCheckpoint,
            };
            let predictor = match (kind, &checkpoint) {
                (PredictorKind::Unchanged, _) => Predictor::Unchanged,
                (PredictorKind::Grayworld, _) => Predictor::Grayworld,
                (_, None) => return Err(usage(format!("--predictor {} needs --checkpoint", kind.as_str()))),
                (PredictorKind::IeCheckpoint, Some(p)) => Predictor::Ie(IENet::from_checkpoint(&load_checkpoint(p)?)?),
                (PredictorKind::RegressionCheckpoint, Some(p)) => {
                    Predictor::Regression(IENet::from_checkpoint(&load_checkpoint(p)?)?)
                }
            };
            let test = load_dataset(&data, Split::Test)?;
            eval::check_gamma(&test, gamma).map_err(|e| usage(e.to_string()))?;
            let norm: NormMode = norm.into();
            let cfg = EvalConfig {
                norm,
                gamma,
                mask_handling: !no_masks,
            };
            let ev = evaluate(&test, &cfg, &predictor)?;
            let mut rows = vec![ReportRow {
                dataset: data.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()),
                method: ieor::experiment::method_label(kind.as_str(), norm),
                stats: ev.stats,
            }];
            for (g, s) in &ev.groups {
                rows.push(ReportRow {
                    dataset: format!("group {g}"),
                    method: rows[0].method.clone(),
                    stats: *s,
                });
            }
            if let Some(avg) = ev.group_average() {
                rows.push(ReportRow {
                    dataset: "group average".into(),
                    method: rows[0].method.clone(),
                    stats: avg,
                });
            }
            let rep = report(&rows)?;
            print!("{}", rep.text);
            if let Some(dir) = report_out {
                create_dir(&dir)?;
                let p = dir.join("report.csv");
                std::fs::write(&p, &rep.csv).map_err(|e| Error::Io { path: p, source: e })?;
                eval::write_errors_csv(dir.join("errors.csv"), &ev.per_image)?;
            }
            Ok(())
        }
        Command::BiasReport { errors_csv, data } => {
            let text = std::fs::read_to_string(&errors_csv).map_err(|e| Error::Io {
                path: errors_csv.clone(),
                source: e,
            })?;
            if text.lines().skip(1).all(|l| l.trim().is_empty()) {
                return Err(usage(format!("{} contains no predictions", errors_csv.display())));
            }
            let rows = eval::parse_errors_csv(&text)?;
            let preds: Vec<_> = rows.iter().map(|r| r.predicted).collect();
            let gts = match data {
                None => rows.iter().map(|r| r.ground_truth).collect(),
                Some(dir) => {
                    let test = load_dataset(&dir, Split::Test)?;
                    rows.iter()
                        .map(|r| {
                            test.items
                                .iter()
                                .find(|it| it.filename == r.filename)
                                .and_then(|it| it.illuminant)
                                .ok_or_else(|| Error::Dataset(format!("no ground truth for {}", r.filename)))
                        })
                        .collect::<Result<Vec<_>, _>>()?
                }
            };
            let (before, after) = bias_analysis(&preds, &gts)?;
            let rep = report(&[
                ReportRow {
                    dataset: "predictions".into(),
                    method: "as predicted".into(),
                    stats: before,
                },
                ReportRow {
                    dataset: "predictions".into(),
                    method: "mean-shifted".into(),
                    stats: after,
                },
            ])?;
            print!("{}", rep.text);
            println!("Mean error change: {:+.2}°", after.mean - before.mean);
            println!("{}", eval::BIAS_REFERENCE_NOTE);
            Ok(())
        }
        Command::RunAll { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let s = run_all(&cfg, &out, &mut |l| eprintln!("{l}"))?;
            let report_txt = out.join(files::REPORT_TXT);
            print!("{}", std::fs::read_to_string(&report_txt).map_err(|e| Error::Io { path: report_txt, source: e })?);
            println!(
                "OR accuracy: clean {:.1}%, jittered {:.1}%, IE-corrected {:.1}%",
                100.0 * s.or_accuracy_clean,
                100.0 * s.or_accuracy_jittered,
                100.0 * s.or_accuracy_corrected
            );
            println!("IE bias shift: mean {:.2}° -> {:.2}°", s.bias_before.mean, s.bias_after.mean);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
