//! Experiment configuration and the full pipeline in one call.
//!
//! Config files hold one `key = value` pair per line. `#` starts a comment,
//! blank lines are ignored, and unknown or repeated keys are errors. Every
//! key is optional; see [`ExperimentConfig::KEYS`] for the list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::SgdConfig;
use crate::dataio::{load_checkpoint, load_dataset, save_checkpoint, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    bias_analysis, evaluate, or_accuracy, report, write_errors_csv, ErrorStats, EvalConfig, OrView, Predictor, ReportRow,
};
use crate::models::{IENet, IEORPipeline, NormMode, ORNet};
use crate::synthgen::{build_dataset, DatasetPlan, JitterConfig, SceneSpec};
use crate::train::{pretrain_or, train_ie_end2end, train_ie_regression, EpochRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub classes: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub scene: SceneSpec,
    pub jitter: JitterConfig,
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_epochs: usize,
    pub phase2_lr: f64,
    pub regression_epochs: usize,
    pub regression_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub gamma: Option<f64>,
    pub mask_handling: bool,
    /// Dataset directory; defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Defaults sized so a full run fits in about 13 minutes on one core. Phase 2
/// runs fewer epochs at a lower rate than [`TrainConfig::phase2`]; at 0.001
/// the IE oscillated from epoch to epoch against the frozen OR.
impl Default for ExperimentConfig {
    fn default() -> Self {
        let p1 = TrainConfig::phase1(0);
        ExperimentConfig {
            seed: 7,
            classes: 8,
            train_n: 4000,
            test_n: 1000,
            scene: SceneSpec::default(),
            jitter: JitterConfig::default(),
            phase1_epochs: p1.epochs,
            phase1_lr: p1.sgd.learning_rate,
            phase2_epochs: 25,
            phase2_lr: 0.0005,
            regression_epochs: 8,
            regression_lr: 0.01,
            momentum: p1.sgd.momentum,
            batch_size: p1.sgd.batch_size,
            eval_every: p1.eval_every,
            gamma: None,
            mask_handling: true,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "classes",
        "train_n",
        "test_n",
        "image_size",
        "shapes_min",
        "shapes_max",
        "background_chroma_noise",
        "background_luma_noise",
        "background_level_jitter",
        "background_tint",
        "lightness_jitter",
        "jitter_mean",
        "jitter_std",
        "jitter_floor",
        "phase1_epochs",
        "phase1_lr",
        "phase2_epochs",
        "phase2_lr",
        "regression_epochs",
        "regression_lr",
        "momentum",
        "batch_size",
        "eval_every",
        "gamma",
        "mask_handling",
        "data_dir",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "train_n" => self.train_n = parse_num(key, v)?,
            "test_n" => self.test_n = parse_num(key, v)?,
            "image_size" => self.scene.image_size = parse_num(key, v)?,
            "shapes_min" => self.scene.n_shapes.0 = parse_num(key, v)?,
            "shapes_max" => self.scene.n_shapes.1 = parse_num(key, v)?,
            "background_chroma_noise" => self.scene.background_chroma_noise = parse_num(key, v)?,
            "background_luma_noise" => self.scene.background_luma_noise = parse_num(key, v)?,
            "background_level_jitter" => self.scene.background_level_jitter = parse_num(key, v)?,
            "background_tint" => self.scene.background_tint = parse_num(key, v)?,
            "lightness_jitter" => self.scene.lightness_jitter = parse_num(key, v)?,
            "jitter_mean" => self.jitter.mean = parse_num(key, v)?,
            "jitter_std" => self.jitter.std = parse_num(key, v)?,
            "jitter_floor" => self.jitter.floor = parse_num(key, v)?,
            "phase1_epochs" => self.phase1_epochs = parse_num(key, v)?,
            "phase1_lr" => self.phase1_lr = parse_num(key, v)?,
            "phase2_epochs" => self.phase2_epochs = parse_num(key, v)?,
            "phase2_lr" => self.phase2_lr = parse_num(key, v)?,
            "regression_epochs" => self.regression_epochs = parse_num(key, v)?,
            "regression_lr" => self.regression_lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "gamma" => self.gamma = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "mask_handling" => self.mask_handling = parse_bool(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies the pairs in `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(Error::Config(format!("line {}: {k} already set on line {prev}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes every key, so `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("classes", self.classes.to_string()),
            ("train_n", self.train_n.to_string()),
            ("test_n", self.test_n.to_string()),
            ("image_size", self.scene.image_size.to_string()),
            ("shapes_min", self.scene.n_shapes.0.to_string()),
            ("shapes_max", self.scene.n_shapes.1.to_string()),
            ("background_chroma_noise", self.scene.background_chroma_noise.to_string()),
            ("background_luma_noise", self.scene.background_luma_noise.to_string()),
            ("background_level_jitter", self.scene.background_level_jitter.to_string()),
            ("background_tint", self.scene.background_tint.to_string()),
            ("lightness_jitter", self.scene.lightness_jitter.to_string()),
            ("jitter_mean", self.jitter.mean.to_string()),
            ("jitter_std", self.jitter.std.to_string()),
            ("jitter_floor", self.jitter.floor.to_string()),
            ("phase1_epochs", self.phase1_epochs.to_string()),
            ("phase1_lr", self.phase1_lr.to_string()),
            ("phase2_epochs", self.phase2_epochs.to_string()),
            ("phase2_lr", self.phase2_lr.to_string()),
            ("regression_epochs", self.regression_epochs.to_string()),
            ("regression_lr", self.regression_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("gamma", self.gamma.map(|g| g.to_string()).unwrap_or_else(|| "none".into())),
            ("mask_handling", self.mask_handling.to_string()),
        ];
        if let Some(p) = opt_path(&self.data_dir) {
            pairs.push(("data_dir", p));
        }
        if let Some(p) = opt_path(&self.out_dir) {
            pairs.push(("out_dir", p));
        }
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be at least 2, got {}", self.classes)));
        }
        if self.train_n == 0 || self.test_n == 0 {
            return Err(Error::Config("train_n and test_n must be positive".into()));
        }
        if self.scene.image_size % 4 != 0 {
            return Err(Error::Config(format!("image_size {} must be a multiple of 4", self.scene.image_size)));
        }
        self.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        for t in [self.phase1(), self.phase2(), self.regression()] {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn train_config(&self, epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            sgd: SgdConfig {
                learning_rate: lr,
                momentum: self.momentum,
                batch_size: self.batch_size,
            },
            jitter: self.jitter,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }

    pub fn phase1(&self) -> TrainConfig {
        self.train_config(self.phase1_epochs, self.phase1_lr)
    }

    pub fn phase2(&self) -> TrainConfig {
        self.train_config(self.phase2_epochs, self.phase2_lr)
    }

    pub fn regression(&self) -> TrainConfig {
        self.train_config(self.regression_epochs, self.regression_lr)
    }

    pub fn dataset_plan(&self) -> DatasetPlan {
        DatasetPlan {
            n_train: self.train_n,
            n_test: self.test_n,
            n_classes: self.classes,
            scene: self.scene.clone(),
            test_jitter: self.jitter,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self, norm: NormMode) -> EvalConfig {
        EvalConfig {
            norm,
            gamma: self.gamma,
            mask_handling: self.mask_handling,
        }
    }
}

/// File names used inside the output directory.
pub mod files {
    pub const OR_CHECKPOINT: &str = "or.ckpt";
    pub const IE_CHECKPOINT: &str = "ie.ckpt";
    pub const REGRESSION_CHECKPOINT: &str = "regression.ckpt";
    pub const OR_LOG: &str = "or_log.csv";
    pub const IE_LOG: &str = "ie_log.csv";
    pub const REGRESSION_LOG: &str = "regression_log.csv";
    pub const REPORT_TXT: &str = "report.txt";
    pub const REPORT_CSV: &str = "report.csv";
    pub const SUMMARY: &str = "summary.json";
    pub const CONFIG: &str = "config.txt";
}

#[derive(Clone, Debug, Serialize)]
pub struct StatsSummary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub max: f64,
}

impl From<ErrorStats> for StatsSummary {
    fn from(s: ErrorStats) -> Self {
        StatsSummary {
            mean: s.mean,
            median: s.median,
            std: s.std,
            max: s.max,
        }
    }
}

/// Headline numbers of one `run_all` invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub or_accuracy_clean: f64,
    pub or_accuracy_jittered: f64,
    pub or_accuracy_corrected: f64,
    pub or_train_accuracy: f64,
    /// Mean angular error per method, keyed by report label.
    pub methods: BTreeMap<String, StatsSummary>,
    pub bias_before: StatsSummary,
    pub bias_after: StatsSummary,
    pub or_checkpoint_unchanged: bool,
    pub seconds: f64,
}

impl RunSummary {
    pub fn mean_error(&self, method: &str) -> Option<f64> {
        self.methods.get(method).map(|s| s.mean)
    }
}

pub const METHOD_UNCHANGED: &str = "Unchanged";
pub const METHOD_GRAYWORLD: &str = "Gray-world";
pub const METHOD_IE: &str = "IE";
pub const METHOD_REGRESSION: &str = "Regression";

pub fn method_label(base: &str, norm: NormMode) -> String {
    match norm {
        NormMode::None => base.to_string(),
        n => format!("{base} ({n})"),
    }
}

/// Generates the dataset, runs both training phases and the regression
/// baseline, evaluates every predictor and writes all artifacts under
/// `out_dir`. `progress` receives one human-readable line per step.
pub fn run_all(cfg: &ExperimentConfig, out_dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join(files::CONFIG), cfg.to_text()).map_err(|e| Error::io(out_dir, e))?;
    let data_dir = cfg.data_dir.clone().unwrap_or_else(|| out_dir.join("data"));
    progress(&format!("generating dataset in {}", data_dir.display()));
    build_dataset(&cfg.dataset_plan(), &data_dir)?;
    let train = load_dataset(&data_dir, Split::Train)?;
    let test = load_dataset(&data_dir, Split::Test)?;

    let mut epoch_line = |r: &EpochRecord| {
        let acc = r.accuracy.map(|a| format!(" acc {:.3}", a)).unwrap_or_default();
        let ang = r.mean_angular_error.map(|a| format!(" angle {:.2}°", a)).unwrap_or_default();
        progress(&format!("{} epoch {} loss {:.4}{acc}{ang} ({:.1}s)", r.phase, r.epoch, r.loss, r.seconds));
    };

    let or_path = out_dir.join(files::OR_CHECKPOINT);
    let (or_net, meta, log) = pretrain_or(ORNet::new(cfg.classes, cfg.seed)?, &train, &cfg.phase1(), Some(&mut epoch_line))?;
    save_checkpoint(&or_path, &or_net.to_checkpoint(meta))?;
    log.write_csv(out_dir.join(files::OR_LOG))?;
    let or_train_accuracy = log.last().and_then(|r| r.accuracy).unwrap_or(0.0);
    let or_bytes = std::fs::read(&or_path).map_err(|e| Error::io(&or_path, e))?;

    let or_net = ORNet::from_checkpoint(&load_checkpoint(&or_path)?)?;
    let pipeline = IEORPipeline::new(IENet::new(cfg.seed), or_net);
    let (pipeline, meta, log) = train_ie_end2end(pipeline, &train, &cfg.phase2(), Some(&mut epoch_line))?;
    save_checkpoint(out_dir.join(files::IE_CHECKPOINT), &pipeline.ie.to_checkpoint(meta))?;
    log.write_csv(out_dir.join(files::IE_LOG))?;
    let or_checkpoint_unchanged = std::fs::read(&or_path).map_err(|e| Error::io(&or_path, e))? == or_bytes
        && pipeline.or_net.to_checkpoint(load_checkpoint(&or_path)?.meta).to_bytes()? == or_bytes;

    let (reg, meta, log) = train_ie_regression(IENet::new(cfg.seed), &train, &cfg.regression(), Some(&mut epoch_line))?;
    save_checkpoint(out_dir.join(files::REGRESSION_CHECKPOINT), &reg.to_checkpoint(meta))?;
    log.write_csv(out_dir.join(files::REGRESSION_LOG))?;

    progress("evaluating");
    let summary = evaluate_all(cfg, &test, &pipeline, &reg, out_dir)?;
    let summary = RunSummary {
        seed: cfg.seed,
        or_train_accuracy,
        or_checkpoint_unchanged,
        seconds: start.elapsed().as_secs_f64(),
        ..summary
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(out_dir.join(files::SUMMARY), json + "\n").map_err(|e| Error::io(out_dir, e))?;
    progress(&format!("done in {:.1}s", summary.seconds));
    Ok(summary)
}

fn evaluate_all(cfg: &ExperimentConfig, test: &Dataset, pipeline: &IEORPipeline, reg: &IENet, out_dir: &Path) -> Result<RunSummary> {
    let mut rows = Vec::new();
    let mut methods = BTreeMap::new();
    let mut ie_errors = None;
    let dataset_label = "synthetic";
    let mut run = |label: String, predictor: &Predictor, norm: NormMode| -> Result<Vec<crate::eval::ImageError>> {
        let ev = evaluate(test, &cfg.eval_config(norm), predictor)?;
        let slug: String = label
            .to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect::<String>()
            .split('_')
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("_");
        write_errors_csv(out_dir.join(format!("errors_{slug}.csv")), &ev.per_image)?;
        rows.push(ReportRow {
            dataset: dataset_label.to_string(),
            method: label.clone(),
            stats: ev.stats,
        });
        methods.insert(label, ev.stats.into());
        Ok(ev.per_image)
    };
    run(METHOD_UNCHANGED.to_string(), &Predictor::Unchanged, NormMode::None)?;
    run(METHOD_GRAYWORLD.to_string(), &Predictor::Grayworld, NormMode::None)?;
    let ie = Predictor::Ie(pipeline.ie.clone());
    let regp = Predictor::Regression(reg.clone());
    for norm in [NormMode::None, NormMode::Global, NormMode::Channel] {
        let errs = run(method_label(METHOD_IE, norm), &ie, norm)?;
        if norm == NormMode::None {
            ie_errors = Some(errs);
        }
        run(method_label(METHOD_REGRESSION, norm), &regp, norm)?;
    }
    let rep = report(&rows)?;
    std::fs::write(out_dir.join(files::REPORT_TXT), &rep.text).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join(files::REPORT_CSV), &rep.csv).map_err(|e| Error::io(out_dir, e))?;

    let ie_errors = ie_errors.expect("IE evaluated");
    let preds: Vec<_> = ie_errors.iter().map(|e| e.predicted).collect();
    let gts: Vec<_> = ie_errors.iter().map(|e| e.ground_truth).collect();
    let (before, after) = bias_analysis(&preds, &gts)?;

    Ok(RunSummary {
        seed: cfg.seed,
        or_accuracy_clean: or_accuracy(&pipeline.or_net, test, OrView::Clean)?,
        or_accuracy_jittered: or_accuracy(&pipeline.or_net, test, OrView::Observed)?,
        or_accuracy_corrected: or_accuracy(&pipeline.or_net, test, OrView::Corrected(&pipeline.ie))?,
        or_train_accuracy: 0.0,
        methods,
        bias_before: before.into(),
        bias_after: after.into(),
        or_checkpoint_unchanged: false,
        seconds: 0.0,
    })
}
