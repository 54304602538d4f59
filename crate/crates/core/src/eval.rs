//! Error statistics, predictors, baselines, bias analysis and reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::colorops::{angular_error, bias_shift, correct, grayworld, mean_illuminant, ColorSpace, Illuminant, Image};
use crate::dataio::{apply_mask, Dataset};
use crate::error::{Error, Result};
use crate::models::{predict_illuminant, IENet, NormMode, ORNet};

/// Aggregate angular errors in degrees. `std` is the population standard
/// deviation and the median of an even-length list is the midpoint of the
/// two central values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("statistics of an empty error list"));
        }
        if let Some(e) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::invalid(format!("invalid angular error {e}")));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        Ok(ErrorStats {
            mean,
            median,
            std: var.sqrt(),
            max: sorted[sorted.len() - 1],
        })
    }

    /// Field-wise unweighted mean, used for per-group averaging.
    pub fn average(items: &[ErrorStats]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("average of no statistics"));
        }
        let n = items.len() as f64;
        let f = |g: fn(&ErrorStats) -> f64| items.iter().map(g).sum::<f64>() / n;
        Ok(ErrorStats {
            mean: f(|s| s.mean),
            median: f(|s| s.median),
            std: f(|s| s.std),
            max: f(|s| s.max),
        })
    }
}

/// Which illuminant predictor an evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Unchanged,
    Grayworld,
    IeCheckpoint,
    RegressionCheckpoint,
}

impl PredictorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictorKind::Unchanged => "unchanged",
            PredictorKind::Grayworld => "grayworld",
            PredictorKind::IeCheckpoint => "ie",
            PredictorKind::RegressionCheckpoint => "regression",
        }
    }

    pub fn needs_checkpoint(&self) -> bool {
        matches!(self, PredictorKind::IeCheckpoint | PredictorKind::RegressionCheckpoint)
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unchanged" => Ok(PredictorKind::Unchanged),
            "grayworld" => Ok(PredictorKind::Grayworld),
            "ie" => Ok(PredictorKind::IeCheckpoint),
            "regression" => Ok(PredictorKind::RegressionCheckpoint),
            _ => Err(Error::invalid(format!(
                "unknown predictor {s:?} (expected unchanged, grayworld, ie or regression)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Predictor {
    Unchanged,
    Grayworld,
    Ie(IENet),
    Regression(IENet),
}

impl Predictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Unchanged => PredictorKind::Unchanged,
            Predictor::Grayworld => PredictorKind::Grayworld,
            Predictor::Ie(_) => PredictorKind::IeCheckpoint,
            Predictor::Regression(_) => PredictorKind::RegressionCheckpoint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub norm: NormMode,
    /// Required exactly when the dataset is linear.
    pub gamma: Option<f64>,
    /// Zero-fill masked regions and exclude them from image statistics.
    pub mask_handling: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            norm: NormMode::None,
            gamma: None,
            mask_handling: true,
        }
    }
}

/// The no-correction predictor.
pub fn baseline_unchanged(_img: &Image) -> Illuminant {
    Illuminant::NEUTRAL
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageError {
    pub filename: String,
    pub error_degrees: f64,
    pub predicted: Illuminant,
    pub ground_truth: Illuminant,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub stats: ErrorStats,
    pub per_image: Vec<ImageError>,
    /// Statistics per manifest group, when the dataset defines groups.
    pub groups: BTreeMap<String, ErrorStats>,
}

impl Evaluation {
    /// Unweighted average over groups, if any.
    pub fn group_average(&self) -> Option<ErrorStats> {
        let all: Vec<ErrorStats> = self.groups.values().copied().collect();
        ErrorStats::average(&all).ok()
    }
}

/// Baselines read the image in its native space and ignore the normalization
/// mode; checkpoint predictors go through [`predict_illuminant`].
pub fn predict(predictor: &Predictor, img: &Image, cfg: &EvalConfig, mask: Option<&crate::colorops::MaskRect>) -> Result<Illuminant> {
    match predictor {
        Predictor::Unchanged => Ok(baseline_unchanged(img)),
        Predictor::Grayworld => grayworld(img, mask),
        Predictor::Ie(ie) | Predictor::Regression(ie) => predict_illuminant(ie, img, cfg.norm, cfg.gamma, mask),
    }
}

pub fn check_gamma(ds: &Dataset, gamma: Option<f64>) -> Result<()> {
    match (ds.manifest.color_space, gamma) {
        (ColorSpace::Linear, None) => Err(Error::invalid("dataset is linear; a gamma is required")),
        (ColorSpace::GammaEncoded, Some(_)) => Err(Error::invalid("dataset is already gamma encoded; --gamma would encode twice")),
        _ => Ok(()),
    }
}

pub fn evaluate(ds: &Dataset, cfg: &EvalConfig, predictor: &Predictor) -> Result<Evaluation> {
    check_gamma(ds, cfg.gamma)?;
    if ds.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut per_image = Vec::with_capacity(ds.len());
    for (i, item) in ds.items.iter().enumerate() {
        let gt = item
            .illuminant
            .ok_or_else(|| Error::Dataset(format!("{} has no ground-truth illuminant", item.filename)))?;
        let observed = ds.observed(i);
        let mask = if cfg.mask_handling { item.mask } else { None };
        let img = match &mask {
            Some(m) => apply_mask(&observed, m)?,
            None => observed,
        };
        let predicted = predict(predictor, &img, cfg, mask.as_ref())?;
        per_image.push(ImageError {
            filename: item.filename.clone(),
            error_degrees: angular_error(&predicted, &gt),
            predicted: predicted.green_normalized(),
            ground_truth: gt,
        });
    }
    let errors: Vec<f64> = per_image.iter().map(|e| e.error_degrees).collect();
    let stats = ErrorStats::from_errors(&errors)?;
    let mut groups = BTreeMap::new();
    if let Some(defs) = &ds.manifest.groups {
        let by_name: HashMap<&str, f64> = per_image.iter().map(|e| (e.filename.as_str(), e.error_degrees)).collect();
        for (name, files) in defs {
            let errs = files
                .iter()
                .map(|f| {
                    by_name
                        .get(f.as_str())
                        .copied()
                        .ok_or_else(|| Error::Dataset(format!("group {name} lists unknown test image {f}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            groups.insert(name.clone(), ErrorStats::from_errors(&errs)?);
        }
    }
    Ok(Evaluation { stats, per_image, groups })
}

/// Statistics before and after shifting the predictions' mean onto the
/// ground-truth mean.
pub fn bias_analysis(predictions: &[Illuminant], ground_truths: &[Illuminant]) -> Result<(ErrorStats, ErrorStats)> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let gt_mean = mean_illuminant(ground_truths)?;
    let shifted = bias_shift(predictions, &gt_mean)?;
    let errs = |ps: &[Illuminant]| -> Vec<f64> { ps.iter().zip(ground_truths).map(|(p, g)| angular_error(p, g)).collect() };
    Ok((ErrorStats::from_errors(&errs(predictions))?, ErrorStats::from_errors(&errs(&shifted))?))
}

/// Literature reference point for the bias analysis.
pub const BIAS_REFERENCE_NOTE: &str = "Reference point: on Shi-Gehler the oracle mean shift moved the mean error from 4.84° to 4.60°.";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub stats: ErrorStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

pub const REPORT_FOOTER: &str = "Std is the population standard deviation (divide by N).";

/// Renders rows as an aligned text table in degrees with two decimals, plus
/// a CSV twin with the same numbers.
pub fn report(rows: &[ReportRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::invalid("report needs at least one row"));
    }
    let deg = |v: f64| format!("{v:.2}°");
    let dw = rows.iter().map(|r| r.dataset.chars().count()).max().unwrap_or(0).max("Dataset".len());
    let mw = rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(0).max("Method".len());
    let cols = ["Mean", "Median", "Std", "Max"];
    let nw = rows
        .iter()
        .flat_map(|r| [r.stats.mean, r.stats.median, r.stats.std, r.stats.max])
        .map(|v| deg(v).chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
    let lpad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w.saturating_sub(s.chars().count())));
    let mut text = String::new();
    let _ = write!(text, "{}  {}", pad("Dataset", dw), pad("Method", mw));
    for c in cols {
        let _ = write!(text, "  {}", lpad(c, nw));
    }
    text.push('\n');
    let mut csv = String::from("dataset,method,mean,median,std,max\n");
    for r in rows {
        let s = &r.stats;
        let _ = write!(text, "{}  {}", pad(&r.dataset, dw), pad(&r.method, mw));
        for v in [s.mean, s.median, s.std, s.max] {
            let _ = write!(text, "  {}", lpad(&deg(v), nw));
        }
        text.push('\n');
        let _ = writeln!(csv, "{},{},{:.2},{:.2},{:.2},{:.2}", r.dataset, r.method, s.mean, s.median, s.std, s.max);
    }
    let _ = writeln!(text, "{REPORT_FOOTER}");
    Ok(Report { text, csv })
}

/// Parses a report CSV back into rows.
pub fn parse_report_csv(csv: &str) -> Result<Vec<ReportRow>> {
    let mut lines = csv.lines();
    if lines.next() != Some("dataset,method,mean,median,std,max") {
        return Err(Error::invalid("report CSV header mismatch"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::invalid(format!("report CSV row has {} fields: {l}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad number {s:?}")));
            Ok(ReportRow {
                dataset: f[0].to_string(),
                method: f[1].to_string(),
                stats: ErrorStats {
                    mean: num(f[2])?,
                    median: num(f[3])?,
                    std: num(f[4])?,
                    max: num(f[5])?,
                },
            })
        })
        .collect()
}

pub const ERRORS_HEADER: &str = "filename,error_degrees,pred_r,pred_g,pred_b,gt_r,gt_g,gt_b";

pub fn errors_to_csv(rows: &[ImageError]) -> String {
    let mut s = format!("{ERRORS_HEADER}\n");
    for r in rows {
        let [pr, pg, pb] = r.predicted.rgb();
        let [gr, gg, gb] = r.ground_truth.rgb();
        let _ = writeln!(s, "{},{},{pr},{pg},{pb},{gr},{gg},{gb}", r.filename, r.error_degrees);
    }
    s
}

pub fn write_errors_csv(path: impl AsRef<Path>, rows: &[ImageError]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, errors_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parses an `errors.csv`; an empty list is an error.
pub fn parse_errors_csv(text: &str) -> Result<Vec<ImageError>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ERRORS_HEADER => {}
        _ => return Err(Error::invalid(format!("errors CSV must start with header {ERRORS_HEADER}"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::invalid(format!("errors CSV line {}: {what}", n + 1));
        if f.len() != 8 {
            return Err(bad(&format!("expected 8 fields, found {}", f.len())));
        }
        let nums = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(ImageError {
            filename: f[0].to_string(),
            error_degrees: nums[0],
            predicted: Illuminant::new(nums[1], nums[2], nums[3]).map_err(|e| bad(&e.to_string()))?,
            ground_truth: Illuminant::new(nums[4], nums[5], nums[6]).map_err(|e| bad(&e.to_string()))?,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid("errors CSV has no rows"));
    }
    Ok(out)
}

pub fn read_errors_csv(path: impl AsRef<Path>) -> Result<Vec<ImageError>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_errors_csv(&text)
}

/// How OR sees each test image in [`or_accuracy`].
#[derive(Clone, Copy, Debug)]
pub enum OrView<'a> {
    /// The stored clean scene.
    Clean,
    /// The scene under its test illuminant, clipped.
    Observed,
    /// The observed image corrected by IE's estimate and clipped.
    Corrected(&'a IENet),
}

/// Top-1 accuracy of OR on a labeled split.
pub fn or_accuracy(or_net: &ORNet, ds: &Dataset, view: OrView) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Dataset("accuracy of an empty split".into()));
    }
    let labels = ds.labels()?;
    let mut hits = 0usize;
    for (i, item) in ds.items.iter().enumerate() {
        let img = match view {
            OrView::Clean => item.image.clone(),
            OrView::Observed => ds.observed(i),
            OrView::Corrected(ie) => {
                let obs = ds.observed(i);
                correct(&obs, &ie.predict(&obs)?).clipped()
            }
        };
        hits += (or_net.classify(&img)? == labels[i]) as usize;
    }
    Ok(hits as f64 / ds.len() as f64)
}
