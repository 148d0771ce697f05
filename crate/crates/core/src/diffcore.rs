//! Small dense-network substrate with hand-written reverse passes.
//!
//! Every primitive comes as a forward function plus a matching backward
//! function that maps an output cotangent to input (and parameter)
//! cotangents. Graphs are fixed per architecture, so instead of a general
//! tape each caller stores the forward intermediates it needs and replays
//! the backward functions in reverse order. Gradients are available with
//! respect to inputs as well as parameters.
//!
//! Tensors are row-major `f64` buffers. Batched data uses the leading axis
//! for the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [c] => Ok((1, c)),
            [r, c] => Ok((r, c)),
            _ => Err(Error::DimensionMismatch(format!(
                "expected a vector or matrix, got shape {:?}",
                self.shape
            ))),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            name: "operand".into(),
            expected: a.shape.clone(),
            found: b.shape.clone(),
        });
    }
    Ok(())
}

/// `C <- alpha * op(A) op(B) + beta * C` for row-major buffers, where `op`
/// optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    // row-major A is m x k; transposed storage is k x m
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the m x k, k x n and m x n index ranges
    // described by the strides above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Affine map `x W + b` for `x` of shape `[batch, in]` (or `[in]`), `W` of
/// shape `[in, out]` and `b` of shape `[out]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, fan_in) = input.rows_cols()?;
    let (w_in, fan_out) = weights.rows_cols()?;
    if weights.shape.len() != 2 || w_in != fan_in || bias.shape != [fan_out] {
        return Err(Error::DimensionMismatch(format!(
            "dense: input {:?}, weights {:?}, bias {:?}",
            input.shape, weights.shape, bias.shape
        )));
    }
    let mut out = Vec::with_capacity(batch * fan_out);
    for _ in 0..batch {
        out.extend_from_slice(&bias.data);
    }
    gemm(batch, fan_in, fan_out, &input.data, false, &weights.data, false, 1.0, &mut out);
    let shape = if input.shape.len() == 1 {
        vec![fan_out]
    } else {
        vec![batch, fan_out]
    };
    Ok(Tensor { shape, data: out })
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Reverse pass of [`dense`] given the output cotangent.
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<DenseGrads> {
    let (batch, fan_in) = input.rows_cols()?;
    let (_, fan_out) = weights.rows_cols()?;
    let (gb, go) = grad_out.rows_cols()?;
    if gb != batch || go != fan_out {
        return Err(Error::DimensionMismatch(format!(
            "dense_backward: grad {:?} for input {:?} and weights {:?}",
            grad_out.shape, input.shape, weights.shape
        )));
    }
    let mut grad_input = vec![0.0; batch * fan_in];
    gemm(batch, fan_out, fan_in, &grad_out.data, false, &weights.data, true, 0.0, &mut grad_input);
    let mut grad_weights = vec![0.0; fan_in * fan_out];
    gemm(fan_in, batch, fan_out, &input.data, true, &grad_out.data, false, 0.0, &mut grad_weights);
    let mut grad_bias = vec![0.0; fan_out];
    for row in grad_out.data.chunks_exact(fan_out) {
        for (acc, g) in grad_bias.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor {
            shape: input.shape.clone(),
            data: grad_input,
        },
        weights: Tensor {
            shape: weights.shape.clone(),
            data: grad_weights,
        },
        bias: Tensor {
            shape: vec![fan_out],
            data: grad_bias,
        },
    })
}

fn dense_input_grad(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (batch, fan_in) = input.rows_cols()?;
    let (_, fan_out) = weights.rows_cols()?;
    let (gb, go) = grad_out.rows_cols()?;
    if gb != batch || go != fan_out {
        return Err(Error::DimensionMismatch(format!(
            "dense_backward: grad {:?} for input {:?} and weights {:?}",
            grad_out.shape, input.shape, weights.shape
        )));
    }
    let mut grad_input = vec![0.0; batch * fan_in];
    gemm(batch, fan_out, fan_in, &grad_out.data, false, &weights.data, true, 0.0, &mut grad_input);
    Ok(Tensor {
        shape: input.shape.clone(),
        data: grad_input,
    })
}

pub fn tanh(t: &Tensor) -> Tensor {
    t.map(f64::tanh)
}

/// Backward of [`tanh`] in terms of its output `y`.
pub fn tanh_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |y, g| g * (1.0 - y * y))
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Backward of [`sigmoid`] in terms of its output `y`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |y, g| g * y * (1.0 - y))
}

/// Iterates over the 1-D lanes of `shape` along `axis`, yielding the start
/// offset of each lane; consecutive lane entries are `stride` apart.
fn lanes(shape: &[usize], axis: usize) -> (impl Iterator<Item = usize>, usize, usize) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let starts = (0..outer).flat_map(move |o| (0..stride).map(move |inner| o * len * stride + inner));
    (starts, len, stride)
}

/// Softmax along `axis`, stabilized by subtracting the lane maximum.
pub fn softmax_over_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.shape.len() {
        return Err(Error::DimensionMismatch(format!(
            "softmax axis {axis} for shape {:?}",
            t.shape
        )));
    }
    let mut out = t.data.clone();
    let (starts, len, stride) = lanes(&t.shape, axis);
    for start in starts {
        let idx = |k: usize| start + k * stride;
        let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..len {
            let e = (out[idx(k)] - max).exp();
            out[idx(k)] = e;
            total += e;
        }
        for k in 0..len {
            out[idx(k)] /= total;
        }
    }
    Ok(Tensor {
        shape: t.shape.clone(),
        data: out,
    })
}

/// Backward of [`softmax_over_axis`] in terms of its output `y`:
/// `dx = y * (dy - sum(dy * y))` per lane.
pub fn softmax_backward(output: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    same_shape(output, grad_out)?;
    let mut out = vec![0.0; output.len()];
    let (starts, len, stride) = lanes(&output.shape, axis);
    for start in starts {
        let idx = |k: usize| start + k * stride;
        let dot: f64 = (0..len).map(|k| output.data[idx(k)] * grad_out.data[idx(k)]).sum();
        for k in 0..len {
            out[idx(k)] = output.data[idx(k)] * (grad_out.data[idx(k)] - dot);
        }
    }
    Ok(Tensor {
        shape: output.shape.clone(),
        data: out,
    })
}

pub fn elementwise_min(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, f64::min)
}

/// Routes each output cotangent to the smaller argument; ties go to `a`.
pub fn elementwise_min_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape(a, b)?;
    same_shape(a, grad_out)?;
    let mut ga = Tensor::zeros(&a.shape);
    let mut gb = Tensor::zeros(&a.shape);
    for k in 0..a.len() {
        if a.data[k] <= b.data[k] {
            ga.data[k] = grad_out.data[k];
        } else {
            gb.data[k] = grad_out.data[k];
        }
    }
    Ok((ga, gb))
}

/// Uniform Glorot initialization on `[-sqrt(6 / (in + out)), +sqrt(...)]`,
/// shaped `[fan_in, fan_out]`.
pub fn glorot_uniform_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidConfig("glorot init needs positive fan-in and fan-out".into()));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Ok(Tensor {
        shape: vec![fan_in, fan_out],
        data,
    })
}

/// Ordered, uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|k| &self.entries[k].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |k| &mut self.entries[k].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn check_same_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} tensors against {}",
                self.len(),
                other.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in self.entries.iter().zip(&other.entries) {
            if n1 != n2 || t1.shape != t2.shape {
                return Err(Error::ShapeMismatch {
                    name: n1.clone(),
                    expected: t1.shape.clone(),
                    found: t2.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Flattens every value in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrites every value from a flat buffer produced by [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.size()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &Tensor) {
        let t = self.get_mut(name).expect("gradient for unknown parameter");
        for (x, y) in t.data.iter_mut().zip(&grad.data) {
            *x += y;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParameterSet,
    pub second_moment: ParameterSet,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    params.check_same_layout(grads)?;
    params.check_same_layout(&state.first_moment)?;
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let correction1 = 1.0 - beta1.powi(state.step as i32);
    let correction2 = 1.0 - beta2.powi(state.step as i32);
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut().zip(state.second_moment.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
            v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m.data[k] / correction1;
            let v_hat = v.data[k] / correction2;
            p.data[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Central finite-difference step used by [`grad_check`] by default.
pub const FD_STEP: f64 = 1e-4;

/// Relative-error denominators are floored at this value so that
/// components whose true derivative vanishes are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares an analytic gradient against central differences.
///
/// `f` returns the value and its recorded gradient at a point. The result
/// is the largest component-wise relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(f: impl Fn(&[f64]) -> (f64, Vec<f64>), point: &[f64], step: f64) -> f64 {
    let (_, analytic) = f(point);
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..point.len() {
        x[k] = point[k] + step;
        let plus = f(&x).0;
        x[k] = point[k] - step;
        let minus = f(&x).0;
        x[k] = point[k];
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[k].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    worst
}

/// Fully connected network with `tanh` hidden layers and a linear head.
///
/// Parameters live in a [`ParameterSet`] under `{prefix}.{layer}.weight`
/// and `{prefix}.{layer}.bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
}

/// Intermediates saved by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Tensor>,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes in order.
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Self {
        Mlp {
            prefix: prefix.into(),
            widths,
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix)
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            params.insert(self.weight_name(l), glorot_uniform_init(fan_in, fan_out, rng)?)?;
            params.insert(self.bias_name(l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        (0..self.layers())
            .flat_map(|l| {
                [
                    (self.weight_name(l), vec![self.widths[l], self.widths[l + 1]]),
                    (self.bias_name(l), vec![self.widths[l + 1]]),
                ]
            })
            .collect()
    }

    fn param<'a>(&self, params: &'a ParameterSet, name: &str) -> Result<&'a Tensor> {
        params
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    }

    pub fn forward(&self, params: &ParameterSet, input: Tensor) -> Result<(Tensor, MlpTrace)> {
        let mut inputs = Vec::with_capacity(self.layers());
        let mut x = input;
        for l in 0..self.layers() {
            let w = self.param(params, &self.weight_name(l))?;
            let b = self.param(params, &self.bias_name(l))?;
            let z = dense(&x, w, b)?;
            inputs.push(x);
            x = if l + 1 < self.layers() { tanh(&z) } else { z };
        }
        Ok((x, MlpTrace { inputs }))
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(
        &self,
        params: &ParameterSet,
        trace: &MlpTrace,
        grad_out: Tensor,
        grads: &mut ParameterSet,
    ) -> Result<Tensor> {
        self.backward_inner(params, trace, grad_out, Some(grads))
    }

    /// Input gradient only, skipping the weight-gradient products.
    pub fn input_gradient(&self, params: &ParameterSet, trace: &MlpTrace, grad_out: Tensor) -> Result<Tensor> {
        self.backward_inner(params, trace, grad_out, None)
    }

    fn backward_inner(
        &self,
        params: &ParameterSet,
        trace: &MlpTrace,
        grad_out: Tensor,
        mut grads: Option<&mut ParameterSet>,
    ) -> Result<Tensor> {
        let mut g = grad_out;
        for l in (0..self.layers()).rev() {
            let w = self.param(params, &self.weight_name(l))?;
            let d_input = match grads.as_deref_mut() {
                Some(grads) => {
                    let d = dense_backward(&trace.inputs[l], w, &g)?;
                    grads.accumulate(&self.weight_name(l), &d.weights);
                    grads.accumulate(&self.bias_name(l), &d.bias);
                    d.input
                }
                None => dense_input_grad(&trace.inputs[l], w, &g)?,
            };
            g = if l > 0 {
                // inputs[l] is tanh output of layer l-1
                tanh_backward(&trace.inputs[l], &d_input)?
            } else {
                d_input
            };
        }
        Ok(g)
    }
}
