//! Series ingest, robust normalisation, sliding windows, priors and dataset
//! files.
//!
//! A window with origin `o` covers context `values[o..o+C]` and target
//! `values[o+C..o+C+H]`. Context, prior and target are all normalised with
//! the median and MAD of the context, so nothing about the target leaks into
//! the conditioning signal.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::Triplet;
use crate::error::{Error, Result};
use crate::parallel::{self, Exec};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Context length paired with a horizon by default: 21 for short horizons,
/// 252 (one trading year) otherwise.
pub fn default_context(horizon: usize) -> usize {
    if horizon <= 10 {
        21
    } else {
        252
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub asset: String,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl RawSeries {
    pub fn new(asset: impl Into<String>, dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::Data(format!(
                "{} dates but {} values",
                dates.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {i}")));
        }
        if let Some(i) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "dates not strictly increasing at row {}: {} after {}",
                i + 1,
                dates[i + 1],
                dates[i]
            )));
        }
        Ok(Self {
            asset: asset.into(),
            dates,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Read a `date,value` CSV. Errors carry the offending line number.
    pub fn read_csv(path: &Path, asset: impl Into<String>) -> Result<Self> {
        let mut rdr = open_csv(path)?;
        let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.len() != 2 || &headers[0] != "date" || &headers[1] != "value" {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!(
                    "expected header `date,value`, found `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut dates: Vec<NaiveDate> = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = record_line(&rec);
            let parse_err = |msg: String| Error::Parse {
                path: path.into(),
                line,
                msg,
            };
            let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
                .map_err(|e| parse_err(format!("bad date `{}`: {e}", &rec[0])))?;
            let value: f64 = rec[1]
                .parse()
                .map_err(|_| parse_err(format!("bad value `{}`", &rec[1])))?;
            if !value.is_finite() {
                return Err(parse_err(format!("non-finite value `{}`", &rec[1])));
            }
            if let Some(prev) = dates.last() {
                if date <= *prev {
                    return Err(parse_err(format!("date {date} does not follow {prev}")));
                }
            }
            dates.push(date);
            values.push(value);
        }
        if values.is_empty() {
            return Err(Error::Data(format!("{}: no rows", path.display())));
        }
        Ok(Self {
            asset: asset.into(),
            dates,
            values,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create_csv(path)?;
        let werr = |e| csv_error(path, e);
        w.write_record(["date", "value"]).map_err(werr)?;
        for (d, v) in self.dates.iter().zip(&self.values) {
            w.write_record([d.format("%Y-%m-%d").to_string(), v.to_string()])
                .map_err(werr)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// What is forecast: the level itself (default), first differences, or log
/// returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    #[default]
    Level,
    Diff,
    LogReturn,
}

impl Transform {
    pub fn apply(self, values: &[f64]) -> Result<Vec<f64>> {
        match self {
            Transform::Level => Ok(values.to_vec()),
            Transform::Diff => Ok(values.windows(2).map(|w| w[1] - w[0]).collect()),
            Transform::LogReturn => {
                if let Some(i) = values.iter().position(|&v| v <= 0.0) {
                    return Err(Error::Data(format!(
                        "log returns need positive values, row {i} is {}",
                        values[i]
                    )));
                }
                Ok(values.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
            }
        }
    }
}

/// Where normalisation statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    /// Each sample uses its own context window.
    #[default]
    PerWindow,
    /// One set of statistics from the training region of the series.
    PerSeries,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub median: f64,
    pub mad: f64,
    pub eps: f64,
}

impl NormStats {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.median) / (self.mad + self.eps)
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * (self.mad + self.eps) + self.median
    }

    pub fn normalize_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.normalize(x)).collect()
    }

    pub fn denormalize_all(&self, zs: &[f64]) -> Vec<f64> {
        zs.iter().map(|&z| self.denormalize(z)).collect()
    }
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median and median absolute deviation (no consistency factor).
pub fn robust_stats(window: &[f64], eps: f64) -> Result<NormStats> {
    if window.is_empty() {
        return Err(Error::invalid("robust_normalize", "empty window"));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid(
            "robust_normalize",
            format!("eps must be > 0, got {eps}"),
        ));
    }
    let median = median_of(window.to_vec());
    let mad = median_of(window.iter().map(|x| (x - median).abs()).collect());
    Ok(NormStats { median, mad, eps })
}

pub fn robust_normalize(window: &[f64], eps: f64) -> Result<(Vec<f64>, NormStats)> {
    let stats = robust_stats(window, eps)?;
    Ok((stats.normalize_all(window), stats))
}

/// Constant forecast at the context mean.
pub fn prior_mean_of_context(context: &[f64], horizon: usize) -> Vec<f64> {
    let mean = context.iter().sum::<f64>() / context.len() as f64;
    vec![mean; horizon]
}

/// Constant forecast at the last observed value.
pub fn prior_last_value(context: &[f64], horizon: usize) -> Vec<f64> {
    vec![context.last().copied().unwrap_or(0.0); horizon]
}

/// Source of the coarse forecast `x_T`, in the raw (un-normalised) scale of
/// the windowed series.
pub trait PriorProvider: Sync {
    fn name(&self) -> String;
    fn forecast(&self, origin: usize, context: &[f64], horizon: usize) -> Result<Vec<f64>>;
}

pub struct MeanPrior;

impl PriorProvider for MeanPrior {
    fn name(&self) -> String {
        "mean".into()
    }

    fn forecast(&self, _origin: usize, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        Ok(prior_mean_of_context(context, horizon))
    }
}

pub struct LastValuePrior;

impl PriorProvider for LastValuePrior {
    fn name(&self) -> String {
        "last".into()
    }

    fn forecast(&self, _origin: usize, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        Ok(prior_last_value(context, horizon))
    }
}

/// Forecasts produced elsewhere, keyed by origin index.
#[derive(Debug, Clone, PartialEq)]
pub struct FilePrior {
    source: PathBuf,
    horizon: usize,
    forecasts: BTreeMap<usize, Vec<f64>>,
}

impl FilePrior {
    /// Read an `origin_index,h1,...,hH` CSV.
    pub fn from_csv(path: &Path, horizon: usize) -> Result<Self> {
        let rows = read_forecast_csv(path, horizon, false)?;
        let mut forecasts = BTreeMap::new();
        for row in rows {
            if forecasts.insert(row.origin_index, row.values).is_some() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: row.line,
                    msg: format!("duplicate origin_index {}", row.origin_index),
                });
            }
        }
        Ok(Self {
            source: path.into(),
            horizon,
            forecasts,
        })
    }

    pub fn len(&self) -> usize {
        self.forecasts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forecasts.is_empty()
    }

    pub fn write_csv(path: &Path, horizon: usize, rows: &[(usize, Vec<f64>)]) -> Result<()> {
        let mut w = create_csv(path)?;
        let werr = |e| csv_error(path, e);
        let mut header = vec!["origin_index".to_string()];
        header.extend((1..=horizon).map(|k| format!("h{k}")));
        w.write_record(&header).map_err(werr)?;
        for (origin, values) in rows {
            let mut rec = vec![origin.to_string()];
            rec.extend(values.iter().map(f64::to_string));
            w.write_record(&rec).map_err(werr)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl PriorProvider for FilePrior {
    fn name(&self) -> String {
        format!("file:{}", self.source.display())
    }

    fn forecast(&self, origin: usize, _context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        if horizon != self.horizon {
            return Err(Error::Data(format!(
                "prior file has horizon {}, dataset wants {horizon}",
                self.horizon
            )));
        }
        self.forecasts
            .get(&origin)
            .cloned()
            .ok_or(Error::MissingPrior(origin))
    }
}

/// Prior selection as written on the command line or in a config file:
/// `mean`, `last`, or `file:PATH`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PriorKind {
    Mean,
    Last,
    File(PathBuf),
}

impl PriorKind {
    pub fn provider(&self, horizon: usize) -> Result<Box<dyn PriorProvider>> {
        Ok(match self {
            PriorKind::Mean => Box::new(MeanPrior),
            PriorKind::Last => Box::new(LastValuePrior),
            PriorKind::File(p) => Box::new(FilePrior::from_csv(p, horizon)?),
        })
    }
}

impl FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(PriorKind::Mean),
            "last" => Ok(PriorKind::Last),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(PriorKind::File(p.into())),
                _ => Err(format!(
                    "unknown prior `{s}` (expected mean, last or file:PATH)"
                )),
            },
        }
    }
}

impl TryFrom<String> for PriorKind {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<PriorKind> for String {
    fn from(p: PriorKind) -> String {
        p.to_string()
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorKind::Mean => f.write_str("mean"),
            PriorKind::Last => f.write_str("last"),
            PriorKind::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, f) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if !(0.0..=1.0).contains(&f) {
                errs.push(format!("split.{name} must lie in [0, 1], got {f}"));
            }
        }
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            errs.push(format!("split fractions must sum to 1, got {total}"));
        }
        errs
    }

    /// Series indices where the validation and test regions begin.
    pub fn boundaries(&self, len: usize) -> (usize, usize) {
        let b1 = (len as f64 * self.train).round() as usize;
        let b2 = (len as f64 * (self.train + self.val)).round() as usize;
        (b1.min(len), b2.clamp(b1, len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub context: usize,
    pub horizon: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub normalization: NormScope,
    #[serde(default)]
    pub transform: Transform,
    #[serde(default)]
    pub split: SplitSpec,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl DatasetConfig {
    pub fn new(context: usize, horizon: usize) -> Self {
        Self {
            context,
            horizon,
            eps: DEFAULT_EPS,
            normalization: NormScope::default(),
            transform: Transform::default(),
            split: SplitSpec::default(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.context == 0 {
            errs.push("data.context must be >= 1".into());
        }
        if self.horizon == 0 {
            errs.push("data.horizon must be >= 1".into());
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            errs.push(format!("data.eps must be > 0, got {}", self.eps));
        }
        errs.extend(self.split.validate());
        errs
    }
}

/// One normalised `{context, prior, target}` triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub origin_index: usize,
    pub context: Vec<f64>,
    pub prior: Vec<f64>,
    pub target: Vec<f64>,
    pub stats: NormStats,
}

impl Sample {
    pub fn as_triplet(&self) -> Triplet<'_> {
        Triplet {
            context: &self.context,
            prior: &self.prior,
            target: &self.target,
        }
    }
}

pub fn triplets(samples: &[Sample]) -> Vec<Triplet<'_>> {
    samples.iter().map(Sample::as_triplet).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// Length of the windowed (post-transform) series.
    pub length: usize,
    /// Number of windows before splitting, `L − C − H + 1`.
    pub windows: usize,
    /// Windows whose target straddles a split boundary.
    pub dropped: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Raw-scale prior of every window, by origin.
    pub priors: Vec<(usize, Vec<f64>)>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Which split a window belongs to, judged on its target region. A test
/// window must also not reach back into the training targets with its
/// context.
fn assign_split(origin: usize, cfg: &DatasetConfig, b1: usize, b2: usize) -> Option<Split> {
    let start = origin + cfg.context;
    let end = start + cfg.horizon;
    if end <= b1 {
        Some(Split::Train)
    } else if start >= b2 && origin >= b1 {
        Some(Split::Test)
    } else if start >= b1 && end <= b2 {
        Some(Split::Val)
    } else {
        None
    }
}

/// Slide a step-1 window over the series and split the windows in time order.
pub fn make_samples(
    series: &RawSeries,
    cfg: &DatasetConfig,
    prior: &dyn PriorProvider,
    exec: Exec,
) -> Result<Dataset> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let values = cfg.transform.apply(&series.values)?;
    let (c, h) = (cfg.context, cfg.horizon);
    let len = values.len();
    if len < c + h {
        return Err(Error::Data(format!(
            "series of length {len} is shorter than context + horizon = {}",
            c + h
        )));
    }
    let windows = len - c - h + 1;
    let (b1, b2) = cfg.split.boundaries(len);
    let series_stats = match cfg.normalization {
        NormScope::PerWindow => None,
        NormScope::PerSeries => {
            if b1 == 0 {
                return Err(Error::Data(
                    "per-series normalisation needs a non-empty training region".into(),
                ));
            }
            Some(robust_stats(&values[..b1], cfg.eps)?)
        }
    };

    let built = parallel::map_range(exec, windows, |o| -> Result<(Sample, Vec<f64>)> {
        let context = &values[o..o + c];
        let target = &values[o + c..o + c + h];
        let raw_prior = prior.forecast(o, context, h)?;
        if raw_prior.len() != h {
            return Err(Error::Data(format!(
                "prior for origin {o} has length {}, expected {h}",
                raw_prior.len()
            )));
        }
        if raw_prior.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("prior for origin {o} is not finite")));
        }
        let stats = match series_stats {
            Some(s) => s,
            None => robust_stats(context, cfg.eps)?,
        };
        let sample = Sample {
            origin_index: o,
            context: stats.normalize_all(context),
            prior: stats.normalize_all(&raw_prior),
            target: stats.normalize_all(target),
            stats,
        };
        Ok((sample, raw_prior))
    });

    let mut ds = Dataset {
        config: cfg.clone(),
        length: len,
        windows,
        dropped: 0,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        priors: Vec::with_capacity(windows),
    };
    for item in built {
        let (sample, raw_prior) = item?;
        ds.priors.push((sample.origin_index, raw_prior));
        match assign_split(sample.origin_index, cfg, b1, b2) {
            Some(split) => ds.split_mut(split).push(sample),
            None => ds.dropped += 1,
        }
    }
    Ok(ds)
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PRIORS_FILE: &str = "priors.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub dropped: usize,
}

/// Small TOML record written next to the sample files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub asset: String,
    pub source: Option<String>,
    pub source_sha256: Option<String>,
    pub prior: String,
    pub length: usize,
    pub windows: usize,
    pub boundaries: [usize; 2],
    pub counts: SplitCounts,
    /// The MAD is used as-is, without the Gaussian consistency factor.
    pub mad_consistency_factor: bool,
    /// SHA-256 over the train, val and test sample files, in that order.
    pub dataset_sha256: String,
    pub config: DatasetConfig,
}

/// Where a dataset came from, for the manifest.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub asset: String,
    pub source: Option<PathBuf>,
    pub prior: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sample_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.csv"))
}

fn write_samples(path: &Path, cfg: &DatasetConfig, samples: &[Sample]) -> Result<()> {
    let mut w = create_csv(path)?;
    let werr = |e| csv_error(path, e);
    let mut header = vec!["origin_index".to_string(), "median".into(), "mad".into()];
    header.extend((1..=cfg.context).map(|k| format!("c{k}")));
    header.extend((1..=cfg.horizon).map(|k| format!("p{k}")));
    header.extend((1..=cfg.horizon).map(|k| format!("y{k}")));
    w.write_record(&header).map_err(werr)?;
    for s in samples {
        let mut rec = vec![
            s.origin_index.to_string(),
            s.stats.median.to_string(),
            s.stats.mad.to_string(),
        ];
        rec.extend(
            s.context
                .iter()
                .chain(&s.prior)
                .chain(&s.target)
                .map(f64::to_string),
        );
        w.write_record(&rec).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_samples(path: &Path, cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    let (c, h) = (cfg.context, cfg.horizon);
    let mut rdr = open_csv(path)?;
    let width = rdr.headers().map_err(|e| csv_error(path, e))?.len();
    if width != 3 + c + 2 * h {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!(
                "expected {} columns for C={c}, H={h}, found {width}",
                3 + c + 2 * h
            ),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        let origin_index = parse_field::<usize>(path, line, &rec[0])?;
        let nums = rec
            .iter()
            .skip(1)
            .map(|f| parse_finite(path, line, f))
            .collect::<Result<Vec<f64>>>()?;
        out.push(Sample {
            origin_index,
            stats: NormStats {
                median: nums[0],
                mad: nums[1],
                eps: cfg.eps,
            },
            context: nums[2..2 + c].to_vec(),
            prior: nums[2 + c..2 + c + h].to_vec(),
            target: nums[2 + c + h..].to_vec(),
        });
    }
    Ok(out)
}

/// Write sample files, the raw priors and the manifest into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset, provenance: &Provenance) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hasher = Sha256::new();
    for split in Split::ALL {
        let path = sample_file(dir, split);
        write_samples(&path, &ds.config, ds.split(split))?;
        hasher.update(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    FilePrior::write_csv(&dir.join(PRIORS_FILE), ds.config.horizon, &ds.priors)?;
    let source_sha256 = provenance.source.as_deref().map(sha256_file).transpose()?;
    let (b1, b2) = ds.config.split.boundaries(ds.length);
    let manifest = Manifest {
        asset: provenance.asset.clone(),
        source: provenance.source.as_ref().map(|p| p.display().to_string()),
        source_sha256,
        prior: provenance.prior.clone(),
        length: ds.length,
        windows: ds.windows,
        boundaries: [b1, b2],
        counts: SplitCounts {
            train: ds.train.len(),
            val: ds.val.len(),
            test: ds.test.len(),
            dropped: ds.dropped,
        },
        mad_consistency_factor: false,
        dataset_sha256: hex::encode(hasher.finalize()),
        config: ds.config.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Load a prepared dataset. The split counts and content hash are checked
/// against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = load_manifest(dir)?;
    let cfg = manifest.config.clone();
    let mut hasher = Sha256::new();
    let mut ds = Dataset {
        config: cfg.clone(),
        length: manifest.length,
        windows: manifest.windows,
        dropped: manifest.counts.dropped,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        priors: Vec::new(),
    };
    for split in Split::ALL {
        let path = sample_file(dir, split);
        hasher.update(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
        *ds.split_mut(split) = read_samples(&path, &cfg)?;
    }
    let digest = hex::encode(hasher.finalize());
    if digest != manifest.dataset_sha256 {
        return Err(Error::Data(format!(
            "{}: sample files do not match the manifest hash",
            dir.display()
        )));
    }
    let counts = (ds.train.len(), ds.val.len(), ds.test.len());
    if counts
        != (
            manifest.counts.train,
            manifest.counts.val,
            manifest.counts.test,
        )
    {
        return Err(Error::Data(format!(
            "{}: split sizes differ from the manifest",
            dir.display()
        )));
    }
    let priors_path = dir.join(PRIORS_FILE);
    if priors_path.exists() {
        ds.priors = read_forecast_csv(&priors_path, cfg.horizon, false)?
            .into_iter()
            .map(|r| (r.origin_index, r.values))
            .collect();
    }
    Ok((ds, manifest))
}

/// One row of a forecast CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub line: usize,
    pub origin_index: usize,
    /// Run id; 0 when the file has no `run` column.
    pub run: usize,
    pub values: Vec<f64>,
}

/// Read `origin_index[,run],h1..hH`. The `run` column is optional.
pub fn read_forecasts(path: &Path, horizon: usize) -> Result<Vec<ForecastRow>> {
    read_forecast_csv(path, horizon, true)
}

/// Write `origin_index,run,h1..hH`.
pub fn write_forecasts(path: &Path, horizon: usize, rows: &[ForecastRow]) -> Result<()> {
    let mut w = create_csv(path)?;
    let werr = |e| csv_error(path, e);
    let mut header = vec!["origin_index".to_string(), "run".into()];
    header.extend((1..=horizon).map(|k| format!("h{k}")));
    w.write_record(&header).map_err(werr)?;
    for r in rows {
        let mut rec = vec![r.origin_index.to_string(), r.run.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        w.write_record(&rec).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_forecast_csv(path: &Path, horizon: usize, allow_run: bool) -> Result<Vec<ForecastRow>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let has_run = allow_run && headers.get(1) == Some("run");
    let lead = 1 + usize::from(has_run);
    if headers.get(0) != Some("origin_index") {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: "first column must be `origin_index`".into(),
        });
    }
    if headers.len() != lead + horizon {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!(
                "wrong column count: expected {} (origin_index{}, h1..h{horizon}), found {}",
                lead + horizon,
                if has_run { ", run" } else { "" },
                headers.len()
            ),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        let origin_index = parse_field::<usize>(path, line, &rec[0])?;
        let run = if has_run {
            parse_field::<usize>(path, line, &rec[1])?
        } else {
            0
        };
        let values = rec
            .iter()
            .skip(lead)
            .map(|f| parse_finite(path, line, f))
            .collect::<Result<Vec<f64>>>()?;
        out.push(ForecastRow {
            line,
            origin_index,
            run,
            values,
        });
    }
    Ok(out)
}

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

pub(crate) fn create_csv(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => Error::Parse {
            path: path.into(),
            line,
            msg: format!("wrong column count: expected {expected_len}, found {len}"),
        },
        other => Error::Parse {
            path: path.into(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn parse_field<T: FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("cannot parse `{field}`"),
    })
}

pub(crate) fn parse_finite(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = parse_field(path, line, field)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("non-finite value `{field}`"),
        })
    }
}
