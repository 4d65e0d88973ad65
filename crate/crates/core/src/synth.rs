//! Two-regime Markov-switching mean-reverting benchmark series.
//!
//! `x_{k+1} = x_k + κ(μ_r − x_k) + σ_r ε_k`, where the regime `r` flips with
//! probability `p` before each step.

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::RawSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub length: usize,
    pub kappa: f64,
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub switch_prob: f64,
    /// Starting value; defaults to the mean of the initial regime.
    pub x0: Option<f64>,
    pub initial_regime: usize,
    /// First date; later rows advance over business days.
    pub start_date: NaiveDate,
    pub asset: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 4000,
            kappa: 0.05,
            mu: [0.0, 0.5],
            sigma: [0.02, 0.08],
            switch_prob: 0.01,
            x0: None,
            initial_regime: 0,
            start_date: NaiveDate::from_ymd_opt(2005, 1, 3).expect("valid date"),
            asset: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.length == 0 {
            errs.push("synth.length must be >= 1".into());
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            errs.push(format!(
                "synth.kappa must lie in (0, 1), got {}",
                self.kappa
            ));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            errs.push(format!(
                "synth.switch_prob must lie in [0, 1], got {}",
                self.switch_prob
            ));
        }
        for (i, s) in self.sigma.iter().enumerate() {
            if !(s.is_finite() && *s >= 0.0) {
                errs.push(format!("synth.sigma[{i}] must be finite and >= 0, got {s}"));
            }
        }
        if self.mu.iter().chain(self.x0.iter()).any(|v| !v.is_finite()) {
            errs.push("synth.mu and synth.x0 must be finite".into());
        }
        if self.initial_regime > 1 {
            errs.push(format!(
                "synth.initial_regime must be 0 or 1, got {}",
                self.initial_regime
            ));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub series: RawSeries,
    /// Regime in force at each row.
    pub regimes: Vec<u8>,
    pub switches: usize,
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = spec.initial_regime;
    let mut x = spec.x0.unwrap_or(spec.mu[r]);
    let mut values = Vec::with_capacity(spec.length);
    let mut regimes = Vec::with_capacity(spec.length);
    let mut switches = 0;
    values.push(x);
    regimes.push(r as u8);
    for _ in 1..spec.length {
        if rng.random::<f64>() < spec.switch_prob {
            r = 1 - r;
            switches += 1;
        }
        let eps: f64 = rng.sample(StandardNormal);
        x += spec.kappa * (spec.mu[r] - x) + spec.sigma[r] * eps;
        values.push(x);
        regimes.push(r as u8);
    }
    let series = RawSeries::new(
        spec.asset.clone(),
        business_days(spec.start_date, spec.length),
        values,
    )?;
    Ok(SynthOutput {
        series,
        regimes,
        switches,
    })
}
