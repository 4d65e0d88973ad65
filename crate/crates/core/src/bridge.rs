//! Gaussian bridge marginal between a target `x_0` (t = 0) and a prior
//! forecast `x_T` (t = 1), and the conditional denoising loss built on it.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::networks::RefineBridgeModel;
use crate::parallel::{self, Exec};
use crate::params::ParamGrads;
use crate::schedule::Schedule;

/// One training example viewed as borrowed slices.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub context: &'a [f64],
    pub prior: &'a [f64],
    pub target: &'a [f64],
}

/// An intermediate bridge state drawn for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgePoint {
    pub t: f64,
    pub x_t: Vec<f64>,
}

fn check_lengths(x_0: &[f64], x_prior: &[f64]) -> Result<()> {
    if x_0.len() != x_prior.len() {
        return Err(Error::Shape {
            op: "bridge",
            axis: "horizon",
            expected: x_0.len(),
            got: x_prior.len(),
        });
    }
    Ok(())
}

/// Mean and isotropic variance of `p_t(x_t | x_0, x_T)`:
///
/// mean = (σ̄_t² x_0 + σ_t² x_T) / σ_1², variance = σ_t² σ̄_t² / σ_1².
///
/// The endpoints are exact: at `t = 0` the mean is `x_0` and at `t = 1` it
/// is `x_T`, both with zero variance.
pub fn marginal_params(
    x_0: &[f64],
    x_prior: &[f64],
    t: f64,
    schedule: &Schedule,
) -> Result<(Vec<f64>, f64)> {
    check_lengths(x_0, x_prior)?;
    let s2 = schedule.sigma2(t)?;
    let sb2 = schedule.sigma_bar2(t)?;
    if t == 0.0 {
        return Ok((x_0.to_vec(), 0.0));
    }
    if t == 1.0 {
        return Ok((x_prior.to_vec(), 0.0));
    }
    let total = schedule.sigma2_total();
    let (w_0, w_prior) = (sb2 / total, s2 / total);
    let mean = x_0
        .iter()
        .zip(x_prior)
        .map(|(a, b)| w_0 * a + w_prior * b)
        .collect();
    Ok((mean, s2 * sb2 / total))
}

/// Draw `x_t` from the bridge marginal.
pub fn sample_xt<R: Rng + ?Sized>(
    x_0: &[f64],
    x_prior: &[f64],
    t: f64,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (mut mean, var) = marginal_params(x_0, x_prior, t, schedule)?;
    if var > 0.0 {
        let std = var.sqrt();
        for m in &mut mean {
            let eps: f64 = rng.sample(StandardNormal);
            *m += std * eps;
        }
    }
    Ok(mean)
}

/// Draw `t ~ U[0, 1]` and `x_t` for every example, sequentially from `rng`.
pub fn draw_points<R: Rng + ?Sized>(
    batch: &[Triplet<'_>],
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Vec<BridgePoint>> {
    batch
        .iter()
        .map(|item| {
            let t: f64 = rng.random_range(0.0..=1.0);
            let x_t = sample_xt(item.target, item.prior, t, schedule, rng)?;
            Ok(BridgePoint { t, x_t })
        })
        .collect()
}

/// Batch-mean denoising loss for an arbitrary predictor `x_θ(item, x_t, t)`.
pub fn denoising_loss_with<R, F>(
    batch: &[Triplet<'_>],
    schedule: &Schedule,
    rng: &mut R,
    predict: F,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&Triplet<'_>, &[f64], f64) -> Result<Vec<f64>>,
{
    if batch.is_empty() {
        return Err(Error::invalid("denoising_loss", "empty batch"));
    }
    let points = draw_points(batch, schedule, rng)?;
    let mut total = 0.0;
    for (item, point) in batch.iter().zip(&points) {
        let pred = predict(item, &point.x_t, point.t)?;
        check_lengths(item.target, &pred)?;
        total += pred
            .iter()
            .zip(item.target)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>();
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: "loss".into(),
        });
    }
    Ok(loss)
}

/// Number of examples whose gradients are summed together before the
/// cross-chunk reduction. Depends only on the batch size.
fn chunk_len(batch: usize) -> usize {
    batch.div_ceil(16).max(1)
}

/// Batch-mean denoising loss of `model` and its gradient with respect to
/// every encoder and denoiser parameter.
///
/// Random draws happen up front in example order; per-example passes may then
/// run in parallel, and partial gradients are summed in chunk order, so the
/// result is identical for any thread count.
pub fn model_loss_and_grad<R: Rng + ?Sized>(
    model: &RefineBridgeModel,
    batch: &[Triplet<'_>],
    schedule: &Schedule,
    rng: &mut R,
    exec: Exec,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("denoising_loss", "empty batch"));
    }
    let points = draw_points(batch, schedule, rng)?;
    let scale = 1.0 / batch.len() as f64;
    let chunk = chunk_len(batch.len());
    let n_chunks = batch.len().div_ceil(chunk);
    let partials = parallel::map_range(exec, n_chunks, |c| -> Result<(f64, ParamGrads)> {
        let mut grads = ParamGrads::zeros_like(model.params());
        let mut loss = 0.0;
        let range = c * chunk..((c + 1) * chunk).min(batch.len());
        for (item, point) in batch[range.clone()].iter().zip(&points[range]) {
            loss += model.loss_and_grad(item, &point.x_t, point.t, scale, &mut grads)?;
        }
        Ok((loss, grads))
    });
    let mut total = 0.0;
    let mut grads = ParamGrads::zeros_like(model.params());
    for part in partials {
        let (loss, g) = part?;
        total += loss;
        grads.add_assign(&g);
    }
    let loss = total * scale;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            layer: "loss".into(),
        });
    }
    Ok((loss, grads))
}
