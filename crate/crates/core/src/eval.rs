//! Metrics, run aggregation, prior-versus-refined comparison and plot export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{create_csv, csv_error, NormStats};
use crate::error::{Error, Result};
use crate::parallel::{self, Exec};

fn check_aligned<P: AsRef<[f64]>, T: AsRef<[f64]>>(pred: &[P], truth: &[T]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "metric",
            axis: "samples",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("metric", "no samples"));
    }
    let mut n = 0;
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != t.len() {
            return Err(Error::Shape {
                op: "metric",
                axis: "horizon",
                expected: t.len(),
                got: p.len(),
            });
        }
        n += t.len();
    }
    Ok(n)
}

fn mean_error<P, T>(pred: &[P], truth: &[T], f: impl Fn(f64) -> f64) -> Result<f64>
where
    P: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    let n = check_aligned(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .flat_map(|(p, t)| p.as_ref().iter().zip(t.as_ref()).map(|(a, b)| f(a - b)))
        .sum();
    Ok(sum / n as f64)
}

/// Mean squared error over every sample and horizon position.
pub fn mse<P: AsRef<[f64]>, T: AsRef<[f64]>>(pred: &[P], truth: &[T]) -> Result<f64> {
    mean_error(pred, truth, |d| d * d)
}

/// Mean absolute error over every sample and horizon position.
pub fn mae<P: AsRef<[f64]>, T: AsRef<[f64]>>(pred: &[P], truth: &[T]) -> Result<f64> {
    mean_error(pred, truth, f64::abs)
}

/// Space the metrics are computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSpace {
    /// The per-sample normalised space the model is trained in.
    #[default]
    Normalized,
    /// Original units, recovered through each sample's stored statistics.
    Raw,
}

impl MetricSpace {
    pub fn project(self, values: &[f64], stats: &NormStats) -> Vec<f64> {
        match self {
            MetricSpace::Normalized => values.to_vec(),
            MetricSpace::Raw => stats.denormalize_all(values),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub asset: String,
    pub horizon: usize,
    /// `prior`, `refined-ODE` or `refined-SDE`.
    pub method: String,
    pub mse: f64,
    pub mae: f64,
    pub runs: usize,
    pub per_run: Vec<RunMetrics>,
}

impl EvalReport {
    /// Arithmetic mean over runs.
    pub fn from_runs(
        asset: &str,
        horizon: usize,
        method: &str,
        per_run: Vec<RunMetrics>,
    ) -> Result<Self> {
        if per_run.is_empty() {
            return Err(Error::invalid("eval", "at least one run is required"));
        }
        let k = per_run.len() as f64;
        Ok(Self {
            asset: asset.into(),
            horizon,
            method: method.into(),
            mse: per_run.iter().map(|r| r.mse).sum::<f64>() / k,
            mae: per_run.iter().map(|r| r.mae).sum::<f64>() / k,
            runs: per_run.len(),
            per_run,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    /// `1 − refined / prior`; `None` when the prior error is zero.
    pub mse: Option<f64>,
    pub mae: Option<f64>,
}

impl Improvement {
    pub fn between(prior: &EvalReport, refined: &EvalReport) -> Self {
        let ratio = |p: f64, r: f64| (p > 0.0).then(|| 1.0 - r / p);
        Self {
            mse: ratio(prior.mse, refined.mse),
            mae: ratio(prior.mae, refined.mae),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub prior: EvalReport,
    pub refined: EvalReport,
    pub improvement: Improvement,
    /// The truth has zero variance, so relative numbers are not meaningful.
    pub degenerate_truth: bool,
}

/// Score a prior and `k` refinement runs against the same truth.
pub fn compare<P, R, T>(
    asset: &str,
    horizon: usize,
    method: &str,
    prior: &[P],
    refined_runs: &[Vec<R>],
    truth: &[T],
    exec: Exec,
) -> Result<Comparison>
where
    P: AsRef<[f64]>,
    R: AsRef<[f64]> + Sync,
    T: AsRef<[f64]> + Sync,
{
    let prior_run = RunMetrics {
        mse: mse(prior, truth)?,
        mae: mae(prior, truth)?,
    };
    let per_run = parallel::map(exec, refined_runs, |run| -> Result<RunMetrics> {
        Ok(RunMetrics {
            mse: mse(run, truth)?,
            mae: mae(run, truth)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let prior = EvalReport::from_runs(asset, horizon, "prior", vec![prior_run])?;
    let refined = EvalReport::from_runs(asset, horizon, method, per_run)?;

    let values: Vec<f64> = truth
        .iter()
        .flat_map(|t| t.as_ref().iter().copied())
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let degenerate_truth = values.iter().all(|v| *v == mean);
    Ok(Comparison {
        improvement: Improvement::between(&prior, &refined),
        prior,
        refined,
        degenerate_truth,
    })
}

/// One row per run and a `mean` row per report: `asset,H,method,run,mse,mae`.
pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = create_csv(path)?;
    let werr = |e| csv_error(path, e);
    w.write_record(["asset", "H", "method", "run", "mse", "mae"])
        .map_err(werr)?;
    for r in reports {
        let h = r.horizon.to_string();
        for (i, m) in r.per_run.iter().enumerate() {
            w.write_record([
                &r.asset,
                &h,
                &r.method,
                &i.to_string(),
                &m.mse.to_string(),
                &m.mae.to_string(),
            ])
            .map_err(werr)?;
        }
        w.write_record([
            &r.asset,
            &h,
            &r.method,
            "mean",
            &r.mse.to_string(),
            &r.mae.to_string(),
        ])
        .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Series for one sample, ready for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSample {
    pub origin_index: usize,
    pub context_tail: Vec<f64>,
    pub prior: Vec<f64>,
    pub refined: Vec<f64>,
    pub truth: Vec<f64>,
}

impl PlotSample {
    /// `(name, offset, values)`; context offsets are negative, the horizon
    /// starts at 0.
    fn series(&self) -> [(&'static str, i64, &[f64]); 4] {
        [
            (
                "context",
                -(self.context_tail.len() as i64),
                &self.context_tail,
            ),
            ("prior", 0, &self.prior),
            ("refined", 0, &self.refined),
            ("truth", 0, &self.truth),
        ]
    }
}

/// Long-format plot data: `origin_index,series,offset,value`.
pub fn write_plot_csv(path: &Path, samples: &[PlotSample]) -> Result<()> {
    let mut w = create_csv(path)?;
    let werr = |e| csv_error(path, e);
    w.write_record(["origin_index", "series", "offset", "value"])
        .map_err(werr)?;
    for s in samples {
        let origin = s.origin_index.to_string();
        for (name, start, values) in s.series() {
            for (k, v) in values.iter().enumerate() {
                w.write_record([
                    origin.as_str(),
                    name,
                    &(start + k as i64).to_string(),
                    &v.to_string(),
                ])
                .map_err(werr)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A static SVG line chart of one sample.
pub fn render_svg(sample: &PlotSample) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let series = sample.series();
    let first = series[0].1.min(0);
    let last = series
        .iter()
        .map(|(_, s, v)| s + v.len() as i64 - 1)
        .max()
        .unwrap_or(1);
    let all = series.iter().flat_map(|(_, _, v)| v.iter().copied());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let span_x = (last - first).max(1) as f64;
    let px = |k: i64| PAD + (k - first) as f64 / span_x * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<line x1="{x}" y1="{PAD}" x2="{x}" y2="{y}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
        x = px(0),
        y = H - PAD
    );
    let colours = ["#555555", "#1f77b4", "#d62728", "#2ca02c"];
    for (i, ((name, start, values), colour)) in series.iter().zip(colours).enumerate() {
        if values.is_empty() {
            continue;
        }
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| format!("{:.2},{:.2}", px(start + k as i64), py(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{colour}">{name}</text>"#,
            PAD + 80.0 * i as f64,
            PAD / 2.0
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11" fill="#333">origin {}</text>"##,
        H - PAD / 4.0,
        sample.origin_index
    );
    svg.push_str("</svg>\n");
    svg
}
