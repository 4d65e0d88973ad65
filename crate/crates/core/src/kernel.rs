//! Forward and backward kernels for the layer types used by the networks.
//!
//! Every kernel works on a single example: 1-D signals are `[channels, length]`
//! and vectors are `[n]`. The public forward functions validate shapes and
//! reject non-finite outputs; the `*_backward` functions are used by
//! [`crate::tape`] and assume the shapes were validated on the way forward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape {
            op,
            axis: "rank",
            expected: rank,
            got: t.rank(),
        });
    }
    Ok(())
}

fn expect_dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            op,
            axis,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: op.to_string(),
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Geometry of a replicate-padded 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub stride: usize,
}

impl ConvGeom {
    fn source(&self, j: usize, tap: usize) -> usize {
        let pad = (self.kernel / 2) as isize;
        let pos = (j * self.stride) as isize - pad + tap as isize;
        pos.clamp(0, self.len_in as isize - 1) as usize
    }
}

pub(crate) fn conv_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv1d";
    expect_rank(OP, input, 2)?;
    expect_rank(OP, weight, 3)?;
    expect_rank(OP, bias, 1)?;
    let (cin, len_in) = (input.shape()[0], input.shape()[1]);
    let (cout, wcin, kernel) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    expect_dim(OP, "input channels", wcin, cin)?;
    expect_dim(OP, "bias", cout, bias.shape()[0])?;
    if kernel % 2 == 0 {
        return Err(Error::invalid(
            OP,
            format!("kernel size {kernel} must be odd"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    Ok(ConvGeom {
        cin,
        cout,
        kernel,
        len_in,
        len_out: len_in.div_ceil(stride),
        stride,
    })
}

/// Unfold `input` into `[len_out, cin * kernel]` rows, replicate-padding edges.
pub(crate) fn im2col(geom: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let width = geom.cin * geom.kernel;
    let mut cols = vec![0.0; geom.len_out * width];
    for j in 0..geom.len_out {
        let row = &mut cols[j * width..(j + 1) * width];
        for i in 0..geom.cin {
            let channel = &input[i * geom.len_in..(i + 1) * geom.len_in];
            for tap in 0..geom.kernel {
                row[i * geom.kernel + tap] = channel[geom.source(j, tap)];
            }
        }
    }
    cols
}

pub(crate) fn conv1d_cols(geom: &ConvGeom, cols: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let width = geom.cin * geom.kernel;
    let mut out = vec![0.0; geom.cout * geom.len_out];
    for o in 0..geom.cout {
        let w = &weight[o * width..(o + 1) * width];
        let row = &mut out[o * geom.len_out..(o + 1) * geom.len_out];
        for (j, y) in row.iter_mut().enumerate() {
            *y = bias[o] + dot(w, &cols[j * width..(j + 1) * width]);
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)` given the upstream gradient.
pub(crate) fn conv1d_backward(
    geom: &ConvGeom,
    cols: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let width = geom.cin * geom.kernel;
    let mut d_weight = vec![0.0; geom.cout * width];
    let mut d_bias = vec![0.0; geom.cout];
    let mut d_cols = vec![0.0; geom.len_out * width];
    for o in 0..geom.cout {
        let g = &grad_out[o * geom.len_out..(o + 1) * geom.len_out];
        let w = &weight[o * width..(o + 1) * width];
        let dw = &mut d_weight[o * width..(o + 1) * width];
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            axpy(gj, &cols[j * width..(j + 1) * width], dw);
            axpy(gj, w, &mut d_cols[j * width..(j + 1) * width]);
        }
        d_bias[o] = g.iter().sum();
    }
    let mut d_input = vec![0.0; geom.cin * geom.len_in];
    for j in 0..geom.len_out {
        let row = &d_cols[j * width..(j + 1) * width];
        for i in 0..geom.cin {
            for tap in 0..geom.kernel {
                d_input[i * geom.len_in + geom.source(j, tap)] += row[i * geom.kernel + tap];
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// 1-D convolution with "same" replicate padding.
///
/// `input` is `[cin, len]`, `weight` is `[cout, cin, kernel]` with an odd
/// kernel, `bias` is `[cout]`. With `stride == 1` the output length equals the
/// input length; with stride `s` it is `ceil(len / s)`.
pub fn conv1d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let geom = conv_geom(input, weight, bias, stride)?;
    let cols = im2col(&geom, input.data());
    let out = conv1d_cols(&geom, &cols, weight.data(), bias.data());
    let out = Tensor::new(vec![geom.cout, geom.len_out], out)?;
    ensure_finite("conv1d", &out)?;
    Ok(out)
}

pub(crate) fn linear_check(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize)> {
    const OP: &str = "linear";
    expect_rank(OP, input, 1)?;
    expect_rank(OP, weight, 2)?;
    expect_rank(OP, bias, 1)?;
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    expect_dim(OP, "input features", n, input.shape()[0])?;
    expect_dim(OP, "bias", m, bias.shape()[0])?;
    Ok((m, n))
}

pub(crate) fn linear_raw(x: &[f64], weight: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(r, b)| b + dot(&weight[r * n..(r + 1) * n], x))
        .collect()
}

/// `weight · input + bias` for a `[m, n]` weight.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = linear_check(input, weight, bias)?;
    let out = Tensor::vector(linear_raw(input.data(), weight.data(), bias.data(), n));
    ensure_finite("linear", &out)?;
    Ok(out)
}

pub(crate) fn linear_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut d_x = vec![0.0; n];
    let mut d_w = vec![0.0; grad_out.len() * n];
    for (r, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        axpy(g, &weight[r * n..(r + 1) * n], &mut d_x);
        axpy(g, x, &mut d_w[r * n..(r + 1) * n]);
    }
    (d_x, d_w)
}

/// Saved statistics from a group-norm forward pass.
#[derive(Debug, Clone)]
pub(crate) struct GroupNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub groups: usize,
    pub channels: usize,
    pub len: usize,
}

pub(crate) fn group_norm_raw(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Vec<f64>, GroupNormCache)> {
    const OP: &str = "group_norm";
    expect_rank(OP, input, 2)?;
    let (channels, len) = (input.shape()[0], input.shape()[1]);
    expect_dim(OP, "gamma", channels, gamma.numel())?;
    expect_dim(OP, "beta", channels, beta.numel())?;
    if groups == 0 || channels % groups != 0 {
        return Err(Error::invalid(
            OP,
            format!("{channels} channels not divisible into {groups} groups"),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(OP, "eps must be positive"));
    }
    let per_group = channels / groups * len;
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for (g, slot) in inv_std.iter_mut().enumerate() {
        let range = g * per_group..(g + 1) * per_group;
        let block = &x[range.clone()];
        let mean = block.iter().sum::<f64>() / per_group as f64;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let inv = 1.0 / (var + eps).sqrt();
        *slot = inv;
        for (h, v) in xhat[range].iter_mut().zip(block) {
            *h = (v - mean) * inv;
        }
    }
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let (gm, bt) = (gamma.data()[c], beta.data()[c]);
        for l in 0..len {
            out[c * len + l] = gm * xhat[c * len + l] + bt;
        }
    }
    Ok((
        out,
        GroupNormCache {
            xhat,
            inv_std,
            groups,
            channels,
            len,
        },
    ))
}

/// Group normalization over `[channels, len]` with per-channel affine.
pub fn group_norm(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (out, _) = group_norm_raw(input, groups, gamma, beta, eps)?;
    let out = Tensor::new(input.shape().to_vec(), out)?;
    ensure_finite("group_norm", &out)?;
    Ok(out)
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let GroupNormCache {
        xhat,
        inv_std,
        groups,
        channels,
        len,
    } = cache;
    let (groups, channels, len) = (*groups, *channels, *len);
    let mut d_gamma = vec![0.0; channels];
    let mut d_beta = vec![0.0; channels];
    let mut d_xhat = vec![0.0; grad_out.len()];
    for c in 0..channels {
        for l in 0..len {
            let i = c * len + l;
            d_gamma[c] += grad_out[i] * xhat[i];
            d_beta[c] += grad_out[i];
            d_xhat[i] = grad_out[i] * gamma[c];
        }
    }
    let per_group = channels / groups * len;
    let n = per_group as f64;
    let mut d_input = vec![0.0; grad_out.len()];
    for (g, &istd) in inv_std.iter().enumerate() {
        let range = g * per_group..(g + 1) * per_group;
        let dxh = &d_xhat[range.clone()];
        let xh = &xhat[range.clone()];
        let sum_d: f64 = dxh.iter().sum();
        let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let scale = istd / n;
        for ((d, a), b) in d_input[range].iter_mut().zip(dxh).zip(xh) {
            *d = scale * (n * a - sum_d - b * sum_dx);
        }
    }
    (d_input, d_gamma, d_beta)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `x · sigmoid(x)`.
pub fn silu(input: &Tensor) -> Result<Tensor> {
    let data = input.data().iter().map(|&x| x * sigmoid(x)).collect();
    let out = Tensor::new(input.shape().to_vec(), data)?;
    ensure_finite("silu", &out)?;
    Ok(out)
}

pub(crate) fn silu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(vec![2, 4], vec![1.0, -2.0, 3.5, 0.25, 7.0, 8.0, -9.0, 1e-3]);
        let mut w = Tensor::zeros(vec![2, 2, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let y = conv1d(&x, &w, &Tensor::zeros(vec![2]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let x = t(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = Tensor::zeros(vec![3, 1, 3]);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let y = conv1d(&x, &w, &b, 1).unwrap();
        for (c, &bc) in b.data().iter().enumerate() {
            assert!(y.data()[c * 5..(c + 1) * 5].iter().all(|&v| v == bc));
        }
    }

    #[test]
    fn conv_averaging_with_replicate_edges() {
        // Hand convolution: [3,3,6,9,9] padded, window means 4, 6, 8.
        let x = t(vec![1, 3], vec![3.0, 6.0, 9.0]);
        let w = t(vec![1, 1, 3], vec![1.0 / 3.0; 3]);
        let y = conv1d(&x, &w, &Tensor::zeros(vec![1]), 1).unwrap();
        for (got, want) in y.data().iter().zip([4.0, 6.0, 8.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn conv_stride_two_halves_length() {
        let x = t(vec![1, 6], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = t(vec![1, 1, 3], vec![0.0, 1.0, 0.0]);
        let y = conv1d(&x, &w, &Tensor::zeros(vec![1]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert_eq!(y.data(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let x = Tensor::zeros(vec![2, 4]);
        let w = Tensor::zeros(vec![1, 3, 3]);
        let err = conv1d(&x, &w, &Tensor::zeros(vec![1]), 1).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Shape {
                    axis: "input channels",
                    ..
                }
            ),
            "{err}"
        );
        let w = Tensor::zeros(vec![1, 2, 2]);
        assert!(conv1d(&x, &w, &Tensor::zeros(vec![1]), 1).is_err());
    }

    #[test]
    fn conv_is_linear_in_input() {
        let x = t(
            vec![2, 5],
            (0..10).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let y = t(
            vec![2, 5],
            (0..10).map(|i| (i as f64 * 1.3).cos()).collect(),
        );
        let w = t(
            vec![3, 2, 3],
            (0..18).map(|i| (i as f64 * 0.71).sin()).collect(),
        );
        let b = Tensor::zeros(vec![3]);
        let (a, c) = (1.7, -0.4);
        let combo = t(
            vec![2, 5],
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| a * p + c * q)
                .collect(),
        );
        let lhs = conv1d(&combo, &w, &b, 1).unwrap();
        let cx = conv1d(&x, &w, &b, 1).unwrap();
        let cy = conv1d(&y, &w, &b, 1).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + c * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_examples() {
        let w = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = linear(&Tensor::vector(vec![1.0, 1.0]), &w, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);

        let eye = t(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let x = Tensor::vector(vec![0.1, -2.0, 5.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(vec![3])).unwrap(), x);

        let b = Tensor::vector(vec![4.0, 5.0]);
        let y = linear(&x, &Tensor::zeros(vec![2, 3]), &b).unwrap();
        assert_eq!(y, b);

        assert!(linear(&Tensor::vector(vec![1.0]), &w, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn group_norm_examples() {
        let ones = Tensor::full(vec![1], 1.0);
        let zero = Tensor::zeros(vec![1]);
        let y = group_norm(&t(vec![1, 4], vec![3.0; 4]), 1, &ones, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = group_norm(&t(vec![1, 2], vec![-1.0, 1.0]), 1, &ones, &zero, 1e-15).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

        let beta = Tensor::vector(vec![0.5, -2.0]);
        let x = t(vec![2, 3], vec![1.0, 5.0, -3.0, 2.0, 2.5, 9.0]);
        let y = group_norm(&x, 2, &Tensor::zeros(vec![2]), &beta, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, -2.0, -2.0, -2.0]);

        assert!(group_norm(&x, 4, &Tensor::zeros(vec![2]), &beta, 1e-5).is_err());
    }

    #[test]
    fn group_norm_standardizes_groups() {
        let x = t(
            vec![4, 6],
            (0..24)
                .map(|i| (i as f64 * 0.9).sin() * 3.0 + 1.0)
                .collect(),
        );
        let y = group_norm(
            &x,
            2,
            &Tensor::full(vec![4], 1.0),
            &Tensor::zeros(vec![4]),
            1e-5,
        )
        .unwrap();
        for g in 0..2 {
            let block = &y.data()[g * 12..(g + 1) * 12];
            let mean = block.iter().sum::<f64>() / 12.0;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn silu_values() {
        let y = silu(&Tensor::vector(vec![0.0, 1.0, 40.0, -40.0])).unwrap();
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - oracle).abs() < 1e-15);
        assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((y.data()[2] - 40.0).abs() < 1e-12);
        assert!(y.data()[3].abs() < 1e-12);
    }
}
