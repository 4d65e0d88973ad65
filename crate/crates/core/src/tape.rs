//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records each operation of one forward pass as a node. Parameter
//! leaves borrow their values from a [`ParamStore`] so a forward pass never
//! copies the weights. [`Tape::backward`] walks the nodes in reverse and
//! returns one gradient per node; [`Gradients::accumulate`] folds the
//! parameter-leaf gradients into a [`ParamGrads`] buffer.
//!
//! Only the operations the networks need are supported. There is no control
//! flow differentiation and no higher-order gradient.

use crate::error::{Error, Result};
use crate::kernel::{self, ConvGeom, GroupNormCache};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        n: usize,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: GroupNormCache,
    },
    Silu(Var),
    Add(Var, Var),
    /// `x · (1 + scale[c]) + shift[c]` over `[channels, len]`.
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Vec<Var>),
    Upsample2(Var),
    PadRight(Var),
    CropRight(Var),
    Transpose(Var),
    Reshape(Var),
    Slice {
        input: Var,
        start: usize,
    },
    Sum(Var),
    SquaredError {
        input: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("parameter leaf on a tape without a store")
                .get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        kernel::ensure_finite(name, &value)?;
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    /// A leaf bound to a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(
            self.params.is_some(),
            "Tape::param requires Tape::with_params"
        );
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = kernel::conv_geom(x, w, b, stride)?;
        let cols = kernel::im2col(&geom, x.data());
        let out = kernel::conv1d_cols(&geom, &cols, w.data(), b.data());
        let out = Tensor::new(vec![geom.cout, geom.len_out], out)?;
        self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            "conv1d",
        )
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (_, n) = kernel::linear_check(x, w, b)?;
        let out = Tensor::vector(kernel::linear_raw(x.data(), w.data(), b.data(), n));
        self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
                n,
            },
            "linear",
        )
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let (out, cache) =
            kernel::group_norm_raw(x, groups, self.value(gamma), self.value(beta), eps)?;
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                cache,
            },
            "group_norm",
        )
    }

    pub fn silu(&mut self, input: Var) -> Result<Var> {
        let out = kernel::silu(self.value(input))?;
        self.push(out, Op::Silu(input), "silu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "add",
                axis: "numel",
                expected: x.numel(),
                got: y.numel(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::Shape {
                op: "channel_affine",
                axis: "rank",
                expected: 2,
                got: x.rank(),
            });
        }
        let (c, l) = (x.shape()[0], x.shape()[1]);
        let (s, h) = (self.value(scale), self.value(shift));
        for (axis, t) in [("scale", s), ("shift", h)] {
            if t.numel() != c {
                return Err(Error::Shape {
                    op: "channel_affine",
                    axis,
                    expected: c,
                    got: t.numel(),
                });
            }
        }
        let mut data = x.data().to_vec();
        for ch in 0..c {
            let (sc, sh) = (1.0 + s.data()[ch], h.data()[ch]);
            for v in &mut data[ch * l..(ch + 1) * l] {
                *v = *v * sc + sh;
            }
        }
        let out = Tensor::new(vec![c, l], data)?;
        self.push(
            out,
            Op::ChannelAffine {
                input,
                scale,
                shift,
            },
            "channel_affine",
        )
    }

    /// Concatenate `[c_i, len]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let len = first.shape()[1];
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != len {
                return Err(Error::Shape {
                    op: "concat",
                    axis: "length",
                    expected: len,
                    got: *t.shape().last().unwrap_or(&0),
                });
            }
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![channels, len], data)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Nearest-neighbour upsampling by two along the length axis.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, l) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(c * l * 2);
        for ch in 0..c {
            for &v in &x.data()[ch * l..(ch + 1) * l] {
                data.push(v);
                data.push(v);
            }
        }
        let out = Tensor::new(vec![c, 2 * l], data)?;
        self.push(out, Op::Upsample2(input), "upsample2")
    }

    /// Extend the length axis to `len` by repeating the last column.
    pub fn pad_right(&mut self, input: Var, len: usize) -> Result<Var> {
        let x = self.value(input);
        let (c, l) = (x.shape()[0], x.shape()[1]);
        if len < l {
            return Err(Error::invalid(
                "pad_right",
                format!("target length {len} < {l}"),
            ));
        }
        let mut data = Vec::with_capacity(c * len);
        for ch in 0..c {
            let row = &x.data()[ch * l..(ch + 1) * l];
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(row[l - 1], len - l));
        }
        let out = Tensor::new(vec![c, len], data)?;
        self.push(out, Op::PadRight(input), "pad_right")
    }

    /// Keep the first `len` columns.
    pub fn crop_right(&mut self, input: Var, len: usize) -> Result<Var> {
        let x = self.value(input);
        let (c, l) = (x.shape()[0], x.shape()[1]);
        if len > l || len == 0 {
            return Err(Error::invalid(
                "crop_right",
                format!("cannot crop {l} to {len}"),
            ));
        }
        let mut data = Vec::with_capacity(c * len);
        for ch in 0..c {
            data.extend_from_slice(&x.data()[ch * l..ch * l + len]);
        }
        let out = Tensor::new(vec![c, len], data)?;
        self.push(out, Op::CropRight(input), "crop_right")
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                axis: "rank",
                expected: 2,
                got: x.rank(),
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        self.push(out, Op::Transpose(input), "transpose")
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push(out, Op::Reshape(input), "reshape")
    }

    /// Contiguous range `[start, start + len)` of the flattened input, as a vector.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if start + len > x.numel() || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                axis: "numel",
                expected: start + len,
                got: x.numel(),
            });
        }
        let out = Tensor::vector(x.data()[start..start + len].to_vec());
        self.push(out, Op::Slice { input, start }, "slice")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::vector(vec![self.value(input).sum()]);
        self.push(out, Op::Sum(input), "sum")
    }

    /// `Σ (input − target)²` as a scalar.
    pub fn squared_error(&mut self, input: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != target.len() {
            return Err(Error::Shape {
                op: "squared_error",
                axis: "numel",
                expected: x.numel(),
                got: target.len(),
            });
        }
        let loss = x
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(
            Tensor::vector(vec![loss]),
            Op::SquaredError {
                input,
                target: target.to_vec(),
            },
            "squared_error",
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                axis: "loss numel",
                expected: 1,
                got: seed.numel(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient so callers can read it.
                    grads[idx] = Some(g);
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let w = self.value(*weight).data();
                    let (dx, dw, db) = kernel::conv1d_backward(geom, cols, w, &g);
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *weight, dw);
                    acc(&mut grads, *bias, db);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    n,
                } => {
                    let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                    let (dx, dw) = kernel::linear_backward(x, w, &g, *n);
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *weight, dw);
                    acc(&mut grads, *bias, g.clone());
                }
                Op::GroupNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) =
                        kernel::group_norm_backward(cache, self.value(*gamma).data(), &g);
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Silu(input) => {
                    let dx = kernel::silu_backward(self.value(*input).data(), &g);
                    acc(&mut grads, *input, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::ChannelAffine {
                    input,
                    scale,
                    shift,
                } => {
                    let x = self.value(*input);
                    let l = x.shape()[1];
                    let s = self.value(*scale).data();
                    let mut dx = vec![0.0; g.len()];
                    let mut ds = vec![0.0; s.len()];
                    let mut dh = vec![0.0; s.len()];
                    for ch in 0..s.len() {
                        for j in ch * l..(ch + 1) * l {
                            dx[j] = g[j] * (1.0 + s[ch]);
                            ds[ch] += g[j] * x.data()[j];
                            dh[ch] += g[j];
                        }
                    }
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *scale, ds);
                    acc(&mut grads, *shift, dh);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        acc(&mut grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Upsample2(input) => {
                    let dx = g.chunks_exact(2).map(|p| p[0] + p[1]).collect();
                    acc(&mut grads, *input, dx);
                }
                Op::PadRight(input) => {
                    let x = self.value(*input);
                    let (c, l) = (x.shape()[0], x.shape()[1]);
                    let len = g.len() / c;
                    let mut dx = vec![0.0; c * l];
                    for ch in 0..c {
                        for j in 0..len {
                            dx[ch * l + j.min(l - 1)] += g[ch * len + j];
                        }
                    }
                    acc(&mut grads, *input, dx);
                }
                Op::CropRight(input) => {
                    let x = self.value(*input);
                    let (c, l) = (x.shape()[0], x.shape()[1]);
                    let len = g.len() / c;
                    let mut dx = vec![0.0; c * l];
                    for ch in 0..c {
                        dx[ch * l..ch * l + len].copy_from_slice(&g[ch * len..(ch + 1) * len]);
                    }
                    acc(&mut grads, *input, dx);
                }
                Op::Transpose(input) => {
                    let x = self.value(*input);
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    acc(&mut grads, *input, dx);
                }
                Op::Reshape(input) => acc(&mut grads, *input, g),
                Op::Slice { input, start } => {
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    dx[*start..*start + g.len()].copy_from_slice(&g);
                    acc(&mut grads, *input, dx);
                }
                Op::Sum(input) => {
                    let n = self.value(*input).numel();
                    acc(&mut grads, *input, vec![g[0]; n]);
                }
                Op::SquaredError { input, target } => {
                    let dx = self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(a, b)| 2.0 * (a - b) * g[0])
                        .collect();
                    acc(&mut grads, *input, dx);
                }
            }
        }

        Ok(Gradients {
            grads,
            param_of: self
                .nodes
                .iter()
                .map(|n| match n.value {
                    Value::Param(id) => Some(id),
                    Value::Owned(_) => None,
                })
                .collect(),
        })
    }
}

/// Per-node gradients from one reverse pass. Only leaves retain a gradient.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_of: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Add `scale ·` every parameter-leaf gradient into `out`.
    pub fn accumulate(&self, out: &mut ParamGrads, scale: f64) {
        for (g, id) in self.grads.iter().zip(&self.param_of) {
            if let (Some(g), Some(id)) = (g, id) {
                for (o, v) in out.get_mut(*id).iter_mut().zip(g) {
                    *o += scale * v;
                }
            }
        }
    }
}
