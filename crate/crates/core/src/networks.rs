//! Context encoder and conditional 1-D U-Net denoiser.
//!
//! The encoder is a DLinear map: the context is split into a moving-average
//! trend and the residual seasonal part, each mapped linearly to an `H × d`
//! embedding. The denoiser takes `[x_t, x_T, z_c]` stacked as `d + 2`
//! channels over the horizon axis and predicts the clean target.
//!
//! U-Net layout (channel widths `w`, `2w`, `4w`, length `L` = horizon padded
//! up to a multiple of four):
//!
//! ```text
//! in_conv ─ enc0(w) ──────────────────────────── cat ─ dec0(w) ─ head
//!            │ down0 (L/2)                         │ up0
//!            enc1(2w) ──────────────── cat ─ dec1(2w)
//!             │ down1 (L/4)             │ up1
//!             mid0(4w) ─ mid1(4w) ──────┘
//! ```
//!
//! Every residual block receives the time embedding through a learned
//! per-channel scale and shift. The head also sees the raw input channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::Triplet;
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: usize,
    pub context: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::base_channels")]
    pub base_channels: usize,
    #[serde(default = "defaults::time_embed_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "defaults::time_hidden")]
    pub time_hidden: usize,
    #[serde(default = "defaults::kernel_size")]
    pub kernel_size: usize,
    /// Moving-average window of the trend filter; `None` picks
    /// `min(25, largest odd ≤ context)`.
    #[serde(default)]
    pub ma_kernel: Option<usize>,
}

mod defaults {
    pub fn embed_dim() -> usize {
        8
    }
    pub fn base_channels() -> usize {
        32
    }
    pub fn time_embed_dim() -> usize {
        64
    }
    pub fn time_hidden() -> usize {
        128
    }
    pub fn kernel_size() -> usize {
        3
    }
}

impl ModelConfig {
    /// Default architecture for a horizon/context pair.
    pub fn new(horizon: usize, context: usize) -> Self {
        Self {
            horizon,
            context,
            embed_dim: defaults::embed_dim(),
            base_channels: defaults::base_channels(),
            time_embed_dim: defaults::time_embed_dim(),
            time_hidden: defaults::time_hidden(),
            kernel_size: defaults::kernel_size(),
            ma_kernel: None,
        }
    }

    /// Full-size configuration for the longest supported setting.
    pub fn full_size() -> Self {
        Self::new(126, 252)
    }

    pub fn moving_average_kernel(&self) -> usize {
        self.ma_kernel.unwrap_or_else(|| {
            let odd = if self.context % 2 == 1 {
                self.context
            } else {
                self.context.saturating_sub(1)
            };
            odd.min(25)
        })
    }

    /// Horizon padded to a multiple of four for the two stride-2 levels.
    pub fn padded_len(&self) -> usize {
        self.horizon.div_ceil(4) * 4
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.horizon == 0 {
            errs.push("model.horizon must be ≥ 1".into());
        }
        if self.context == 0 {
            errs.push("model.context must be ≥ 1".into());
        }
        if self.embed_dim == 0 {
            errs.push("model.embed_dim must be ≥ 1".into());
        }
        if self.base_channels == 0 {
            errs.push("model.base_channels must be ≥ 1".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            errs.push("model.time_embed_dim must be a positive even number".into());
        }
        if self.time_hidden == 0 {
            errs.push("model.time_hidden must be ≥ 1".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            errs.push("model.kernel_size must be odd".into());
        }
        let k = self.moving_average_kernel();
        if k == 0 || k.is_multiple_of(2) || k > self.context {
            errs.push(format!(
                "model.ma_kernel must be odd and ≤ context ({}), got {k}",
                self.context
            ));
        }
        errs
    }
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Moving-average trend and residual seasonal part of `context`.
///
/// The window is centred and edges are replicate-padded. Each trend value is
/// computed as the centre value plus the mean deviation from it, so a
/// constant context has a trend equal to itself and a zero seasonal part.
pub fn decompose(context: &[f64], kernel: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if context.is_empty() {
        return Err(Error::invalid("decompose", "empty context"));
    }
    if kernel == 0 || kernel.is_multiple_of(2) || kernel > context.len() {
        return Err(Error::invalid(
            "decompose",
            format!(
                "moving-average kernel {kernel} must be odd and ≤ {}",
                context.len()
            ),
        ));
    }
    let half = (kernel / 2) as isize;
    let last = context.len() as isize - 1;
    let trend: Vec<f64> = (0..context.len())
        .map(|i| {
            let centre = context[i];
            let dev: f64 = (-half..=half)
                .map(|o| context[(i as isize + o).clamp(0, last) as usize] - centre)
                .sum();
            centre + dev / kernel as f64
        })
        .collect();
    let seasonal = context.iter().zip(&trend).map(|(c, t)| c - t).collect();
    Ok((trend, seasonal))
}

/// Sinusoidal embedding of diffusion time `t ∈ [0, 1]`: `dim / 2` sines
/// followed by `dim / 2` cosines over a geometric frequency ladder.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pos = 1000.0 * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (pos * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    name: String,
    out: usize,
    norm1: Norm,
    conv1: Conv,
    film: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_trend: ParamId,
    enc_seasonal: ParamId,
    enc_bias: ParamId,
    time1: Dense,
    time2: Dense,
    in_conv: Conv,
    enc0: ResBlock,
    down0: Conv,
    enc1: ResBlock,
    down1: Conv,
    mid0: ResBlock,
    mid1: ResBlock,
    up1: Conv,
    dec1: ResBlock,
    up0: Conv,
    dec0: ResBlock,
    head_norm: Norm,
    head: Conv,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// Zero-mean uniform in ±1/√fan_in, rounded to f32 precision so a fresh
    /// model survives the f32 checkpoint payload unchanged.
    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| f64::from(self.rng.random_range(-bound..bound) as f32))
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize) -> Dense {
        let w = self.uniform(vec![out, inp], inp);
        Dense {
            w: self.store.insert(format!("{name}.weight"), w),
            b: self
                .store
                .insert(format!("{name}.bias"), Tensor::zeros(vec![out])),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> Conv {
        let w = self.uniform(vec![cout, cin, kernel], cin * kernel);
        Conv {
            w: self.store.insert(format!("{name}.weight"), w),
            b: self
                .store
                .insert(format!("{name}.bias"), Tensor::zeros(vec![cout])),
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            gamma: self
                .store
                .insert(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: self
                .store
                .insert(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            groups: norm_groups(channels),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, cfg: &ModelConfig) -> ResBlock {
        let k = cfg.kernel_size;
        ResBlock {
            name: name.to_string(),
            out: cout,
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, k),
            film: self.dense(&format!("{name}.time"), cfg.time_hidden, 2 * cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, k),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1)),
        }
    }
}

/// The refinement network: DLinear context encoder plus 1-D U-Net denoiser.
#[derive(Debug, Clone)]
pub struct RefineBridgeModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl RefineBridgeModel {
    /// Build a freshly initialised model. The output head starts at zero, so
    /// the untrained model predicts zero everywhere.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (h, c, d) = (config.horizon, config.context, config.embed_dim);
        let (w0, w1, w2) = (
            config.base_channels,
            2 * config.base_channels,
            4 * config.base_channels,
        );
        let k = config.kernel_size;
        let enc_trend = b.uniform(vec![h * d, c], c);
        let enc_trend = b.store.insert("encoder.trend_weight", enc_trend);
        let enc_seasonal = b.uniform(vec![h * d, c], c);
        let enc_seasonal = b.store.insert("encoder.seasonal_weight", enc_seasonal);
        let enc_bias = b.store.insert("encoder.bias", Tensor::zeros(vec![h * d]));
        let time1 = b.dense("time.fc1", config.time_embed_dim, config.time_hidden);
        let time2 = b.dense("time.fc2", config.time_hidden, config.time_hidden);
        let in_conv = b.conv("unet.in_conv", d + 2, w0, k);
        let enc0 = b.res("unet.enc0", w0, w0, &config);
        let down0 = b.conv("unet.down0", w0, w0, k);
        let enc1 = b.res("unet.enc1", w0, w1, &config);
        let down1 = b.conv("unet.down1", w1, w1, k);
        let mid0 = b.res("unet.mid0", w1, w2, &config);
        let mid1 = b.res("unet.mid1", w2, w2, &config);
        let up1 = b.conv("unet.up1", w2, w2, k);
        let dec1 = b.res("unet.dec1", w2 + w1, w1, &config);
        let up0 = b.conv("unet.up0", w1, w1, k);
        let dec0 = b.res("unet.dec0", w1 + w0, w0, &config);
        let head_norm = b.norm("unet.head_norm", w0);
        let head = Conv {
            w: b.store
                .insert("unet.head.weight", Tensor::zeros(vec![1, w0 + d + 2, k])),
            b: b.store.insert("unet.head.bias", Tensor::zeros(vec![1])),
        };
        let params = b.store;
        Ok(Self {
            config,
            params,
            layout: Layout {
                enc_trend,
                enc_seasonal,
                enc_bias,
                time1,
                time2,
                in_conv,
                enc0,
                down0,
                enc1,
                down1,
                mid0,
                mid1,
                up1,
                dec1,
                up0,
                dec0,
                head_norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Whether a parameter belongs to the context encoder.
    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("encoder.")
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.config.context {
            return Err(Error::Shape {
                op: "encode",
                axis: "context length",
                expected: self.config.context,
                got: context.len(),
            });
        }
        Ok(())
    }

    fn check_horizon(&self, axis: &'static str, len: usize) -> Result<()> {
        if len != self.config.horizon {
            return Err(Error::Shape {
                op: "denoise",
                axis,
                expected: self.config.horizon,
                got: len,
            });
        }
        Ok(())
    }

    /// Context encoding `z_c` as an `[H, d]` tensor.
    pub fn encode(&self, context: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let z = self.encode_on(&mut tape, context)?;
        Ok(tape.value(z).clone())
    }

    fn encode_on(&self, tape: &mut Tape<'_>, context: &[f64]) -> Result<Var> {
        self.check_context(context)?;
        let (trend, seasonal) = decompose(context, self.config.moving_average_kernel())?;
        let l = &self.layout;
        let trend = tape.leaf(Tensor::vector(trend))?;
        let seasonal = tape.leaf(Tensor::vector(seasonal))?;
        let no_bias = tape.leaf(Tensor::zeros(vec![
            self.config.horizon * self.config.embed_dim,
        ]))?;
        let (wt, ws, b) = (
            tape.param(l.enc_trend),
            tape.param(l.enc_seasonal),
            tape.param(l.enc_bias),
        );
        let zt = tape.linear(trend, wt, b)?;
        let zs = tape.linear(seasonal, ws, no_bias)?;
        let z = tape.add(zt, zs).map_err(|e| e.in_layer("encoder"))?;
        tape.reshape(z, vec![self.config.horizon, self.config.embed_dim])
    }

    fn dense_on(tape: &mut Tape<'_>, layer: &Dense, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(layer.w), tape.param(layer.b));
        tape.linear(x, w, b)
    }

    fn conv_on(tape: &mut Tape<'_>, layer: &Conv, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (tape.param(layer.w), tape.param(layer.b));
        tape.conv1d(x, w, b, stride)
    }

    fn norm_on(tape: &mut Tape<'_>, layer: &Norm, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(layer.gamma), tape.param(layer.beta));
        tape.group_norm(x, layer.groups, g, b, NORM_EPS)
    }

    fn res_on(tape: &mut Tape<'_>, block: &ResBlock, x: Var, temb: Var) -> Result<Var> {
        let run = |tape: &mut Tape<'_>| -> Result<Var> {
            let h = Self::norm_on(tape, &block.norm1, x)?;
            let h = tape.silu(h)?;
            let h = Self::conv_on(tape, &block.conv1, h, 1)?;
            let film = Self::dense_on(tape, &block.film, temb)?;
            let scale = tape.slice(film, 0, block.out)?;
            let shift = tape.slice(film, block.out, block.out)?;
            let h = tape.channel_affine(h, scale, shift)?;
            let h = Self::norm_on(tape, &block.norm2, h)?;
            let h = tape.silu(h)?;
            let h = Self::conv_on(tape, &block.conv2, h, 1)?;
            let skip = match &block.skip {
                Some(conv) => Self::conv_on(tape, conv, x, 1)?,
                None => x,
            };
            tape.add(h, skip)
        };
        run(tape).map_err(|e| e.in_layer(&block.name))
    }

    /// Records the denoiser pass on `tape` and returns the `[1, H]` output.
    fn denoise_on(
        &self,
        tape: &mut Tape<'_>,
        x_t: Var,
        t: f64,
        prior: Var,
        z_c: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let l = &self.layout;
        let (h, len) = (cfg.horizon, cfg.padded_len());

        let temb = tape.leaf(Tensor::vector(time_embedding(t, cfg.time_embed_dim)))?;
        let temb = Self::dense_on(tape, &l.time1, temb)?;
        let temb = tape.silu(temb)?;
        let temb = Self::dense_on(tape, &l.time2, temb)?;
        let temb = tape.silu(temb).map_err(|e| e.in_layer("time"))?;

        let x_t = tape.reshape(x_t, vec![1, h])?;
        let prior = tape.reshape(prior, vec![1, h])?;
        let z_c = tape.transpose(z_c)?;
        let input = tape.concat(&[x_t, prior, z_c])?;
        let input = tape.pad_right(input, len)?;

        let h0 =
            Self::conv_on(tape, &l.in_conv, input, 1).map_err(|e| e.in_layer("unet.in_conv"))?;
        let skip0 = Self::res_on(tape, &l.enc0, h0, temb)?;
        let h1 = Self::conv_on(tape, &l.down0, skip0, 2).map_err(|e| e.in_layer("unet.down0"))?;
        let skip1 = Self::res_on(tape, &l.enc1, h1, temb)?;
        let h2 = Self::conv_on(tape, &l.down1, skip1, 2).map_err(|e| e.in_layer("unet.down1"))?;
        let m = Self::res_on(tape, &l.mid0, h2, temb)?;
        let m = Self::res_on(tape, &l.mid1, m, temb)?;

        let u1 = tape.upsample2(m)?;
        let u1 = Self::conv_on(tape, &l.up1, u1, 1).map_err(|e| e.in_layer("unet.up1"))?;
        let u1 = tape.concat(&[u1, skip1])?;
        let u1 = Self::res_on(tape, &l.dec1, u1, temb)?;
        let u0 = tape.upsample2(u1)?;
        let u0 = Self::conv_on(tape, &l.up0, u0, 1).map_err(|e| e.in_layer("unet.up0"))?;
        let u0 = tape.concat(&[u0, skip0])?;
        let u0 = Self::res_on(tape, &l.dec0, u0, temb)?;

        let out = Self::norm_on(tape, &l.head_norm, u0)?;
        let out = tape.silu(out)?;
        let out = tape.concat(&[out, input])?;
        let out = Self::conv_on(tape, &l.head, out, 1).map_err(|e| e.in_layer("unet.head"))?;
        tape.crop_right(out, h)
    }

    /// Predict the clean target from `(x_t, t, x_T, z_c)`.
    pub fn denoise(&self, x_t: &[f64], t: f64, prior: &[f64], z_c: &Tensor) -> Result<Vec<f64>> {
        self.check_horizon("x_t length", x_t.len())?;
        self.check_horizon("prior length", prior.len())?;
        if z_c.shape() != [self.config.horizon, self.config.embed_dim] {
            return Err(Error::Shape {
                op: "denoise",
                axis: "z_c",
                expected: self.config.horizon * self.config.embed_dim,
                got: z_c.numel(),
            });
        }
        let mut tape = Tape::with_params(&self.params);
        let x = tape.leaf(Tensor::vector(x_t.to_vec()))?;
        let p = tape.leaf(Tensor::vector(prior.to_vec()))?;
        let z = tape.leaf(z_c.clone())?;
        let out = self.denoise_on(&mut tape, x, t, p, z)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Squared error `‖x_θ(x_t, t, x_T, E(c)) − x_0‖²` for one example, with
    /// `scale ·` its parameter gradient added into `grads`. Encoder and
    /// denoiser run on one tape, so gradients reach both.
    pub fn loss_and_grad(
        &self,
        item: &Triplet<'_>,
        x_t: &[f64],
        t: f64,
        scale: f64,
        grads: &mut ParamGrads,
    ) -> Result<f64> {
        self.check_horizon("x_t length", x_t.len())?;
        self.check_horizon("prior length", item.prior.len())?;
        self.check_horizon("target length", item.target.len())?;
        let mut tape = Tape::with_params(&self.params);
        let z = self.encode_on(&mut tape, item.context)?;
        let x = tape.leaf(Tensor::vector(x_t.to_vec()))?;
        let p = tape.leaf(Tensor::vector(item.prior.to_vec()))?;
        let out = self.denoise_on(&mut tape, x, t, p, z)?;
        let loss = tape.squared_error(out, item.target)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?.accumulate(grads, scale);
        Ok(value)
    }

    /// Gradient of `‖denoise(x_t, …)‖²` with respect to `x_t`.
    pub fn output_norm_grad_wrt_xt(
        &self,
        x_t: &[f64],
        t: f64,
        prior: &[f64],
        context: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params);
        let z = self.encode_on(&mut tape, context)?;
        let x = tape.leaf(Tensor::vector(x_t.to_vec()))?;
        let p = tape.leaf(Tensor::vector(prior.to_vec()))?;
        let out = self.denoise_on(&mut tape, x, t, p, z)?;
        let loss = tape.squared_error(out, &vec![0.0; self.config.horizon])?;
        let grads = tape.backward(loss)?;
        Ok(grads
            .wrt(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x_t.len()]))
    }

    /// Re-draw every parameter (including the zero-initialised head) from a
    /// uniform distribution. Used to exercise gradients through all layers.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params.tensors_mut() {
            let fan_in = if t.rank() > 1 {
                t.shape()[1..].iter().product()
            } else {
                t.numel()
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = f64::from(rng.random_range(-bound..bound) as f32);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            base_channels: 8,
            time_embed_dim: 16,
            time_hidden: 16,
            ..ModelConfig::new(8, 16)
        }
    }

    #[test]
    fn decomposition_identities() {
        let (trend, seasonal) = decompose(&[2.5; 9], 5).unwrap();
        assert!(trend.iter().all(|&v| v == 2.5));
        assert!(seasonal.iter().all(|&v| v == 0.0));

        let c: Vec<f64> = (1..=21).map(f64::from).collect();
        let (trend, seasonal) = decompose(&c, 7).unwrap();
        for i in 0..c.len() {
            assert!((trend[i] + seasonal[i] - c[i]).abs() < 1e-12);
        }
        // Interior of a linear ramp: centred mean equals the value itself.
        assert!((trend[10] - 11.0).abs() < 1e-12);
        // Left edge: mean of [1,1,1,1,2,3,4].
        assert!((trend[0] - 13.0 / 7.0).abs() < 1e-12);

        assert!(decompose(&c, 4).is_err());
        assert!(decompose(&c, 23).is_err());
    }

    #[test]
    fn moving_average_default_kernel() {
        assert_eq!(ModelConfig::new(5, 21).moving_average_kernel(), 21);
        assert_eq!(ModelConfig::new(8, 16).moving_average_kernel(), 15);
        assert_eq!(ModelConfig::new(21, 252).moving_average_kernel(), 25);
    }

    #[test]
    fn time_embedding_properties() {
        let e0 = time_embedding(0.0, 32);
        assert!(e0[..16].iter().all(|&v| v == 0.0));
        assert!(e0[16..].iter().all(|&v| v == 1.0));
        let grid: Vec<Vec<f64>> = (0..=1000)
            .map(|k| time_embedding(k as f64 / 1000.0, 32))
            .collect();
        for e in &grid {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for w in grid.windows(2) {
            let maxdiff = w[0]
                .iter()
                .zip(&w[1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(maxdiff > 1e-6);
        }
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(10), 5);
        assert_eq!(norm_groups(7), 7);
        assert_eq!(norm_groups(96), 8);
    }

    #[test]
    fn fresh_model_is_finite_and_zero_for_all_horizons() {
        for h in [5, 10, 21, 63, 126] {
            let c = if h <= 10 { 21 } else { 252 };
            let cfg = ModelConfig {
                base_channels: 8,
                ..ModelConfig::new(h, c)
            };
            let mut model = RefineBridgeModel::new(cfg, 3).unwrap();
            let ctx: Vec<f64> = (0..c).map(|i| (i as f64 * 0.1).sin()).collect();
            let prior = vec![0.3; h];
            let z = model.encode(&ctx).unwrap();
            assert_eq!(z.shape(), &[h, 8]);
            let out = model.denoise(&prior, 0.4, &prior, &z).unwrap();
            assert_eq!(out.len(), h);
            assert!(
                out.iter().all(|&v| v == 0.0),
                "zero head must give zero output"
            );
            model.randomize(9);
            let z = model.encode(&ctx).unwrap();
            let out = model.denoise(&prior, 0.4, &prior, &z).unwrap();
            assert_eq!(out.len(), h);
            assert!(out.iter().all(|v| v.is_finite()));
            assert!(out.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn wrong_lengths_are_rejected() {
        let model = RefineBridgeModel::new(toy(), 0).unwrap();
        assert!(matches!(model.encode(&[0.0; 5]), Err(Error::Shape { .. })));
        let z = model.encode(&[0.0; 16]).unwrap();
        assert!(model.denoise(&[0.0; 7], 0.5, &[0.0; 8], &z).is_err());
    }

    #[test]
    fn parameter_budget_at_default_size() {
        let model = RefineBridgeModel::new(ModelConfig::full_size(), 0).unwrap();
        let n = model.param_count();
        assert!(n <= 2_600_000, "{n} parameters");
    }

    #[test]
    fn xt_gradient_matches_finite_differences() {
        let mut model = RefineBridgeModel::new(toy(), 1).unwrap();
        model.randomize(2);
        let ctx: Vec<f64> = (0..16).map(|i| (i as f64 * 0.4).cos()).collect();
        let prior: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin()).collect();
        let g = model
            .output_norm_grad_wrt_xt(&x, 0.3, &prior, &ctx)
            .unwrap();
        let z = model.encode(&ctx).unwrap();
        let f = |x: &[f64]| -> f64 {
            model
                .denoise(x, 0.3, &prior, &z)
                .unwrap()
                .iter()
                .map(|v| v * v)
                .sum()
        };
        let h = 1e-5;
        for i in 0..8 {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[i] += h;
            dn[i] -= h;
            let num = (f(&up) - f(&dn)) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {i}: {} vs {num}", g[i]);
        }
    }
}
