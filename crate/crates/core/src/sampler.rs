//! First-order prior-to-target refinement.
//!
//! Both samplers start from the prior at `t = 1` and walk a uniform grid down
//! to `t = 0`. The ODE step is deterministic; the SDE step injects Gaussian
//! noise with variance scaled by `1 / τ`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::RefineBridgeModel;
use crate::parallel::{self, Exec};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ode,
    Sde,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ode" => Ok(Self::Ode),
            "sde" => Ok(Self::Sde),
            other => Err(Error::invalid(
                "sampler",
                format!("unknown sampler {other:?}"),
            )),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ode => "ode",
            Self::Sde => "sde",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub record_trajectory: bool,
    /// First grid time. `1.0` starts exactly at the prior; values slightly
    /// below one give the offset-grid variant.
    #[serde(default = "default_start")]
    pub start: f64,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_start() -> f64 {
    1.0
}

impl RefinementConfig {
    pub fn ode(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ode,
            steps,
            temperature: 1.0,
            seed: None,
            record_trajectory: false,
            start: 1.0,
        }
    }

    pub fn sde(steps: usize, temperature: f64, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Sde,
            steps,
            temperature,
            seed: Some(seed),
            record_trajectory: false,
            start: 1.0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push("sampler.steps must be ≥ 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(format!(
                "sampler.temperature must be > 0, got {}",
                self.temperature
            ));
        }
        if !(self.start > 0.0 && self.start <= 1.0) {
            errs.push(format!(
                "sampler.start must lie in (0, 1], got {}",
                self.start
            ));
        }
        errs
    }

    /// Advisory notes when the step count or sampler kind falls outside the
    /// regime that usually works best for this horizon. Never an error.
    pub fn regime_warnings(&self, horizon: usize) -> Vec<String> {
        let mut notes = Vec::new();
        if horizon <= 10 {
            if self.kind == SamplerKind::Sde {
                notes.push(format!(
                    "horizon {horizon}: the ODE sampler is usually better for short horizons"
                ));
            }
            if self.steps > 10 {
                notes.push(format!(
                    "horizon {horizon}: 1-10 steps are usually enough, got {}",
                    self.steps
                ));
            }
        } else if horizon >= 21 {
            if self.kind == SamplerKind::Ode {
                notes.push(format!(
                    "horizon {horizon}: the SDE sampler is usually better for long horizons"
                ));
            }
            if self.steps < 10 || self.steps > 1000 {
                notes.push(format!(
                    "horizon {horizon}: 10-1000 steps are typical, got {}",
                    self.steps
                ));
            }
            if self.kind == SamplerKind::Sde && !(0.01..=2.0).contains(&self.temperature) {
                notes.push(format!(
                    "temperature {} is outside the usual [0.01, 2.0] range",
                    self.temperature
                ));
            }
        }
        notes
    }
}

/// Grid `t_k = start · (N − k) / N` for `k = 0..=N`; the last entry is exactly 0.
pub fn time_grid(steps: usize, start: f64) -> Vec<f64> {
    (0..=steps)
        .map(|k| {
            let frac = (steps - k) as f64 / steps as f64;
            if start == 1.0 {
                frac
            } else {
                start * frac
            }
        })
        .collect()
}

fn check_times(s: f64, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&s) || !(t < s) {
        return Err(Error::invalid(
            "sampler step",
            format!("need 0 ≤ t < s ≤ 1, got s={s} t={t}"),
        ));
    }
    Ok(())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "sampler step",
            axis: "horizon",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Coefficients `(a, b, c)` of the ODE step `x_t = a·x_s + b·x_T + c·x̂`.
///
/// For `s < 1`:
///   a = σ_t σ̄_t / (σ_s σ̄_s)
///   b = (σ_t² − σ_s σ_t σ̄_t / σ̄_s) / σ_1²
///   c = (σ̄_t² − σ̄_s σ_t σ̄_t / σ_s) / σ_1²
///
/// At `s = 1`, σ̄_s = 0 and `a`, `b` diverge with opposite signs. Since
/// `x_s = x_T` there, only `a + b` matters; substituting σ_s = σ_1 the
/// divergent parts cancel exactly, leaving `a + b = σ_t² / σ_1²` and
/// `c = σ̄_t² / σ_1²`. The limit is returned as `(0, σ_t²/σ_1², σ̄_t²/σ_1²)`.
pub fn ode_coefficients(s: f64, t: f64, schedule: &Schedule) -> Result<(f64, f64, f64)> {
    check_times(s, t)?;
    if s == 0.0 {
        return Err(Error::invalid("ode_step", "s = 0 divides by σ_s"));
    }
    let total = schedule.sigma2_total();
    let (st2, sbt2) = (schedule.sigma2(t)?, schedule.sigma_bar2(t)?);
    if s == 1.0 {
        return Ok((0.0, st2 / total, sbt2 / total));
    }
    let (ss2, sbs2) = (schedule.sigma2(s)?, schedule.sigma_bar2(s)?);
    let (st, sbt, ss, sbs) = (st2.sqrt(), sbt2.sqrt(), ss2.sqrt(), sbs2.sqrt());
    let a = st * sbt / (ss * sbs);
    let b = (st2 - ss * st * sbt / sbs) / total;
    let c = (sbt2 - sbs * st * sbt / ss) / total;
    Ok((a, b, c))
}

/// One deterministic Euler step from `s` to `t < s`.
pub fn ode_step(
    x_s: &[f64],
    s: f64,
    t: f64,
    x_prior: &[f64],
    x_hat: &[f64],
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    check_len(x_s, x_prior)?;
    check_len(x_s, x_hat)?;
    let (a, b, c) = ode_coefficients(s, t, schedule)?;
    if t == 0.0 {
        return Ok(x_hat.to_vec());
    }
    Ok(x_s
        .iter()
        .zip(x_prior)
        .zip(x_hat)
        .map(|((xs, xp), xh)| a * xs + b * xp + c * xh)
        .collect())
}

/// Standard deviation of the noise term of an SDE step at temperature τ.
pub fn sde_noise_std(s: f64, t: f64, schedule: &Schedule, temperature: f64) -> Result<f64> {
    check_times(s, t)?;
    if s == 0.0 {
        return Err(Error::invalid("sde_step", "s = 0 divides by σ_s"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(
            "sde_step",
            format!("temperature must be > 0, got {temperature}"),
        ));
    }
    let ratio = schedule.sigma2(t)? / schedule.sigma2(s)?;
    Ok(schedule.sigma2(t)?.sqrt() * (1.0 - ratio).sqrt() / temperature.sqrt())
}

/// One stochastic Euler step: `ρ x_s + (1 − ρ) x̂ + σ_t √(1 − ρ) ε_τ` with
/// `ρ = σ_t² / σ_s²` and `ε_τ ~ N(0, τ⁻¹ I)`, fresh per coordinate.
pub fn sde_step<R: Rng + ?Sized>(
    x_s: &[f64],
    s: f64,
    t: f64,
    x_hat: &[f64],
    schedule: &Schedule,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_len(x_s, x_hat)?;
    let std = sde_noise_std(s, t, schedule, temperature)?;
    if t == 0.0 {
        return Ok(x_hat.to_vec());
    }
    let rho = schedule.sigma2(t)? / schedule.sigma2(s)?;
    Ok(x_s
        .iter()
        .zip(x_hat)
        .map(|(xs, xh)| {
            let eps: f64 = rng.sample(StandardNormal);
            rho * xs + (1.0 - rho) * xh + std * eps
        })
        .collect())
}

/// States visited by a refinement run, from `t = 1` to `t = 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<(f64, Vec<f64>)>,
}

impl Trajectory {
    /// CSV with header `t,h1..hH`, one row per grid time.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let horizon = self.points.first().map_or(0, |p| p.1.len());
        let mut out = String::from("t");
        for h in 1..=horizon {
            out.push_str(&format!(",h{h}"));
        }
        out.push('\n');
        for (t, state) in &self.points {
            out.push_str(&t.to_string());
            for v in state {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub output: Vec<f64>,
    pub trajectory: Option<Trajectory>,
}

/// Refine `x_prior` with an arbitrary denoiser `x̂ = denoise(x_s, s)`.
pub fn refine_with<F>(
    x_prior: &[f64],
    schedule: &Schedule,
    config: &RefinementConfig,
    denoise: F,
) -> Result<Refinement>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let mut rng = match config.seed {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed),
        None => ChaCha8Rng::from_os_rng(),
    };
    refine_with_rng(x_prior, schedule, config, &mut rng, denoise)
}

fn refine_with_rng<F>(
    x_prior: &[f64],
    schedule: &Schedule,
    config: &RefinementConfig,
    rng: &mut ChaCha8Rng,
    mut denoise: F,
) -> Result<Refinement>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let grid = time_grid(config.steps, config.start);
    let mut state = x_prior.to_vec();
    let mut trajectory = config.record_trajectory.then(|| Trajectory {
        points: vec![(grid[0], state.clone())],
    });
    for w in grid.windows(2) {
        let (s, t) = (w[0], w[1]);
        let x_hat = denoise(&state, s)?;
        check_len(x_prior, &x_hat)?;
        state = match config.kind {
            SamplerKind::Ode => ode_step(&state, s, t, x_prior, &x_hat, schedule)?,
            SamplerKind::Sde => sde_step(&state, s, t, &x_hat, schedule, config.temperature, rng)?,
        };
        if let Some(tr) = trajectory.as_mut() {
            tr.points.push((t, state.clone()));
        }
    }
    Ok(Refinement {
        output: state,
        trajectory,
    })
}

/// Refine one prior with a trained model. The context is encoded once.
pub fn refine(
    model: &RefineBridgeModel,
    context: &[f64],
    x_prior: &[f64],
    schedule: &Schedule,
    config: &RefinementConfig,
) -> Result<Refinement> {
    let z_c = model.encode(context)?;
    refine_with(x_prior, schedule, config, |x, s| {
        model.denoise(x, s, x_prior, &z_c)
    })
}

/// Refine many `(context, prior)` pairs. Example `i` draws SDE noise from
/// stream `i` of the configured seed, so results do not depend on `exec`.
pub fn refine_batch(
    model: &RefineBridgeModel,
    items: &[(&[f64], &[f64])],
    schedule: &Schedule,
    config: &RefinementConfig,
    exec: Exec,
) -> Result<Vec<Refinement>> {
    let seed = config.seed.unwrap_or_else(rand::random);
    parallel::map_range(exec, items.len(), |i| {
        let (context, prior) = items[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z_c = model.encode(context)?;
        refine_with_rng(prior, schedule, config, &mut rng, |x, s| {
            model.denoise(x, s, prior, &z_c)
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Schedule = Schedule::SHORT_HORIZON;

    #[test]
    fn grid_is_uniform_and_exact_at_ends() {
        let g = time_grid(4, 1.0);
        assert_eq!(g, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(*time_grid(7, 1.0).last().unwrap(), 0.0);
        assert_eq!(time_grid(1, 1.0), vec![1.0, 0.0]);
    }

    #[test]
    fn coefficients_sum_to_one() {
        for (s, t) in [(0.9, 0.5), (0.5, 0.1), (0.3, 0.29), (1.0, 0.4), (0.2, 0.0)] {
            let (a, b, c) = ode_coefficients(s, t, &S).unwrap();
            assert!((a + b + c - 1.0).abs() < 1e-12, "s={s} t={t}");
        }
    }

    #[test]
    fn ode_fixed_point_and_endpoint() {
        let xp = vec![0.3, -1.2, 2.0];
        let y = ode_step(&xp, 0.7, 0.4, &xp, &xp, &S).unwrap();
        for (a, b) in y.iter().zip(&xp) {
            assert!((a - b).abs() < 1e-12);
        }
        let xh = vec![5.0, 6.0, 7.0];
        assert_eq!(ode_step(&xp, 0.3, 0.0, &xp, &xh, &S).unwrap(), xh);
    }

    #[test]
    fn ode_scalar_step_matches_hand_coefficients() {
        // At s = 1 the x_s coefficient is folded into x_T (x_s = x_T there),
        // so the x_s value does not enter.
        let (st2, sbt2, total) = (6.25375, 18.75125, 25.005);
        let y = ode_step(&[2.0], 1.0, 0.5, &[1.0], &[0.0], &S).unwrap();
        assert!((y[0] - st2 / total * 1.0 - sbt2 / total * 0.0).abs() < 1e-12);
        // Interior step s = 0.75 → t = 0.5, coefficient by coefficient.
        let ss2 = S.sigma2(0.75).unwrap();
        let sbs2 = total - ss2;
        let (st, sbt, ss, sbs) = (st2.sqrt(), sbt2.sqrt(), ss2.sqrt(), sbs2.sqrt());
        let a = st * sbt / (ss * sbs);
        let b = (st2 - ss * st * sbt / sbs) / total;
        let c = (sbt2 - sbs * st * sbt / ss) / total;
        let want = a * 2.0 + b * 1.0 + c * 0.0;
        let y = ode_step(&[2.0], 0.75, 0.5, &[1.0], &[0.0], &S).unwrap();
        assert!((y[0] - want).abs() < 1e-12);
    }

    #[test]
    fn s_one_limit_agrees_with_perturbed_start() {
        let xp = vec![1.0, -0.5];
        let xh = vec![0.2, 0.7];
        for sched in [Schedule::SHORT_HORIZON, Schedule::LONG_HORIZON] {
            for t in [0.9, 0.5, 0.1] {
                let lim = ode_step(&xp, 1.0, t, &xp, &xh, &sched).unwrap();
                let near = ode_step(&xp, 1.0 - 1e-9, t, &xp, &xh, &sched).unwrap();
                for (a, b) in lim.iter().zip(&near) {
                    assert!((a - b).abs() < 1e-4, "t={t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn step_errors() {
        assert!(ode_step(&[0.0], 0.0, 0.0, &[0.0], &[0.0], &S).is_err());
        assert!(ode_step(&[0.0], 0.5, 0.6, &[0.0], &[0.0], &S).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sde_step(&[0.0], 0.5, 0.2, &[0.0], &S, 0.0, &mut rng).is_err());
        assert!(sde_step(&[0.0], 0.0, 0.0, &[0.0], &S, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sde_endpoint_and_cold_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xh = vec![1.0, 2.0];
        assert_eq!(
            sde_step(&[9.0, 9.0], 0.4, 0.0, &xh, &S, 1.0, &mut rng).unwrap(),
            xh
        );
        let rho = S.sigma2(0.5).unwrap() / S.sigma2(1.0).unwrap();
        let y = sde_step(&[4.0, 4.0], 1.0, 0.5, &xh, &S, 1e30, &mut rng).unwrap();
        for (v, h) in y.iter().zip(&xh) {
            assert!((v - (rho * 4.0 + (1.0 - rho) * h)).abs() < 1e-9);
        }
    }

    #[test]
    fn sde_noise_std_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let want = (6.25375f64 * (1.0 - 6.25375 / 25.005)).sqrt();
        assert!((sde_noise_std(1.0, 0.5, &S, 1.0).unwrap() - want).abs() < 1e-12);
        let draws: Vec<f64> = (0..n)
            .map(|_| sde_step(&[0.0], 1.0, 0.5, &[0.0], &S, 1.0, &mut rng).unwrap()[0])
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        // Standard error of a sample std is about σ / √(2n).
        assert!((sd - want).abs() < 4.0 * want / (2.0 * n as f64).sqrt());
    }

    #[test]
    fn oracle_denoiser_recovers_target() {
        let x0 = vec![0.5, -1.0, 2.0];
        let xp = vec![3.0, 3.0, 3.0];
        for n in [1, 5, 50] {
            let r = refine_with(&xp, &S, &RefinementConfig::ode(n), |_, _| Ok(x0.clone())).unwrap();
            assert_eq!(r.output, x0);
            let r = refine_with(&xp, &S, &RefinementConfig::sde(n, 1.0, 4), |_, _| {
                Ok(x0.clone())
            })
            .unwrap();
            assert_eq!(r.output, x0);
        }
    }

    #[test]
    fn identity_oracle_keeps_prior_along_trajectory() {
        let xp = vec![0.1, 0.2, -0.3, 4.0];
        for sched in [Schedule::SHORT_HORIZON, Schedule::LONG_HORIZON] {
            let mut cfg = RefinementConfig::ode(20);
            cfg.record_trajectory = true;
            let r = refine_with(&xp, &sched, &cfg, |_, _| Ok(xp.clone())).unwrap();
            let tr = r.trajectory.unwrap();
            assert_eq!(tr.points.len(), 21);
            assert_eq!(tr.points[0].0, 1.0);
            assert_eq!(tr.points[20].0, 0.0);
            assert!(tr.points.windows(2).all(|w| w[1].0 < w[0].0));
            for (_, state) in &tr.points {
                for (a, b) in state.iter().zip(&xp) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_step_is_one_denoiser_call() {
        let xp = vec![1.0, 2.0];
        let mut calls = Vec::new();
        let r = refine_with(&xp, &S, &RefinementConfig::ode(1), |x, s| {
            calls.push((x.to_vec(), s));
            Ok(vec![x[0] * 2.0, -x[1]])
        })
        .unwrap();
        assert_eq!(calls, vec![(xp.clone(), 1.0)]);
        assert_eq!(r.output, vec![2.0, -2.0]);
    }

    #[test]
    fn offset_grid_close_to_limit_grid() {
        let xp = vec![1.0, 0.0, -1.0];
        let den = |x: &[f64], s: f64| Ok(x.iter().map(|v| 0.5 * v + s).collect());
        let a = refine_with(&xp, &S, &RefinementConfig::ode(10), den).unwrap();
        let mut cfg = RefinementConfig::ode(10);
        cfg.start = 1.0 - 1e-6;
        let b = refine_with(&xp, &S, &cfg, den).unwrap();
        for (p, q) in a.output.iter().zip(&b.output) {
            assert!((p - q).abs() < 1e-3, "{p} vs {q}");
        }
    }

    #[test]
    fn config_validation_and_warnings() {
        assert!(!RefinementConfig::ode(0).validate().is_empty());
        assert!(!RefinementConfig::sde(5, -1.0, 0).validate().is_empty());
        assert!(RefinementConfig::ode(5).regime_warnings(5).is_empty());
        assert!(!RefinementConfig::ode(5).regime_warnings(63).is_empty());
        assert!(RefinementConfig::sde(100, 0.5, 0)
            .regime_warnings(63)
            .is_empty());
        assert_eq!("SDE".parse::<SamplerKind>().unwrap(), SamplerKind::Sde);
        assert!("heun".parse::<SamplerKind>().is_err());
    }
}
