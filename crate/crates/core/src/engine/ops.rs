//! Layer kernels and their gradients.
//!
//! All spatial ops take NCHW tensors. Convolutions use same padding
//! (`p = (k-1)/2`, odd kernels) and stride 1 or 2; max-pool shares the
//! same padding rule so the four SPP scales preserve spatial size.

use super::{Aux, EngineError, Result, TapeOp};
use crate::tensor::Tensor;

/// EMA factor for batch-norm running statistics:
/// `new = (1 - m) * old + m * batch`.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.03;

fn shape_err(op: &'static str, detail: String) -> EngineError {
    EngineError::ShapeMismatch { op, detail }
}

fn arg_err(op: &'static str, detail: String) -> EngineError {
    EngineError::InvalidArg { op, detail }
}

fn require4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    t.dims4().ok_or_else(|| shape_err(op, format!("expected NCHW tensor, got {:?}", t.shape)))
}

pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (input + 2 * pad - k) / stride + 1
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution, no bias, same padding. Inputs: `(x[N,Ci,H,W], w[Co,Ci,K,K])`.
pub struct Conv2d {
    pub stride: usize,
}

impl Conv2d {
    fn check(&self, inputs: &[&Tensor]) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let [x, w] = inputs else {
            return Err(arg_err("conv2d", format!("expected 2 inputs, got {}", inputs.len())));
        };
        let (n, ci, h, wd) = require4("conv2d", x)?;
        let (co, wci, k, k2) = require4("conv2d", w)?;
        if k != k2 || k % 2 == 0 {
            return Err(arg_err("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if wci != ci {
            return Err(shape_err(
                "conv2d",
                format!("weight expects {wci} input channels, tensor has {ci}"),
            ));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(arg_err("conv2d", format!("stride must be 1 or 2, got {}", self.stride)));
        }
        Ok((n, ci, h, wd, co, k))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_kernel(
    x: &[f64],
    w: &[f64],
    y: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
) {
    let pad = (k - 1) / 2;
    let ho = conv_out_extent(h, k, stride);
    let wo = conv_out_extent(wd, k, stride);
    for img in 0..n {
        for o in 0..co {
            let y_base = (img * co + o) * ho * wo;
            for c in 0..ci {
                let x_base = (img * ci + c) * h * wd;
                let w_base = (o * ci + c) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w[w_base + kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let x_row = x_base + ih as usize * wd;
                            let y_row = y_base + oh * wo;
                            // valid ow range so that 0 <= ow*stride + kw - pad < wd
                            let lo_num = pad as isize - kw as isize;
                            let ow_lo = if lo_num <= 0 {
                                0
                            } else {
                                ((lo_num as usize) + stride - 1) / stride
                            };
                            let hi_num = wd as isize - 1 + pad as isize - kw as isize;
                            if hi_num < 0 {
                                continue;
                            }
                            let ow_hi = ((hi_num as usize) / stride).min(wo - 1);
                            if ow_lo > ow_hi {
                                continue;
                            }
                            let iw0 = (ow_lo * stride + kw) as isize - pad as isize;
                            let iw0 = iw0 as usize;
                            if stride == 1 {
                                let len = ow_hi - ow_lo + 1;
                                let xs = &x[x_row + iw0..x_row + iw0 + len];
                                let ys = &mut y[y_row + ow_lo..y_row + ow_lo + len];
                                for (yv, xv) in ys.iter_mut().zip(xs) {
                                    *yv += wv * xv;
                                }
                            } else {
                                let mut iw = iw0;
                                for ow in ow_lo..=ow_hi {
                                    y[y_row + ow] += wv * x[x_row + iw];
                                    iw += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_kernel(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dx: Option<&mut Vec<f64>>,
    dw: Option<&mut Vec<f64>>,
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
) {
    let pad = (k - 1) / 2;
    let ho = conv_out_extent(h, k, stride);
    let wo = conv_out_extent(wd, k, stride);
    let mut dx_buf = dx;
    let mut dw_buf = dw;
    for img in 0..n {
        for o in 0..co {
            let g_base = (img * co + o) * ho * wo;
            for c in 0..ci {
                let x_base = (img * ci + c) * h * wd;
                let w_base = (o * ci + c) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w[w_base + kh * k + kw];
                        let mut wacc = 0.0;
                        for oh in 0..ho {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let x_row = x_base + ih as usize * wd;
                            let g_row = g_base + oh * wo;
                            let lo_num = pad as isize - kw as isize;
                            let ow_lo = if lo_num <= 0 {
                                0
                            } else {
                                ((lo_num as usize) + stride - 1) / stride
                            };
                            let hi_num = wd as isize - 1 + pad as isize - kw as isize;
                            if hi_num < 0 {
                                continue;
                            }
                            let ow_hi = ((hi_num as usize) / stride).min(wo - 1);
                            if ow_lo > ow_hi {
                                continue;
                            }
                            let iw0 = ((ow_lo * stride + kw) as isize - pad as isize) as usize;
                            let len = ow_hi - ow_lo + 1;
                            if stride == 1 {
                                let gs = &g[g_row + ow_lo..g_row + ow_lo + len];
                                if let Some(dxv) = dx_buf.as_deref_mut() {
                                    let dxs = &mut dxv[x_row + iw0..x_row + iw0 + len];
                                    for (dv, gv) in dxs.iter_mut().zip(gs) {
                                        *dv += wv * gv;
                                    }
                                }
                                if dw_buf.is_some() {
                                    let xs = &x[x_row + iw0..x_row + iw0 + len];
                                    for (xv, gv) in xs.iter().zip(gs) {
                                        wacc += xv * gv;
                                    }
                                }
                            } else {
                                let mut iw = iw0;
                                for ow in ow_lo..=ow_hi {
                                    let gv = g[g_row + ow];
                                    if let Some(dxv) = dx_buf.as_deref_mut() {
                                        dxv[x_row + iw] += wv * gv;
                                    }
                                    wacc += x[x_row + iw] * gv;
                                    iw += stride;
                                }
                            }
                        }
                        if let Some(dwv) = dw_buf.as_deref_mut() {
                            dwv[w_base + kh * k + kw] += wacc;
                        }
                    }
                }
            }
        }
    }
}

impl TapeOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let (n, ci, h, wd, co, k) = self.check(inputs)?;
        let ho = conv_out_extent(h, k, self.stride);
        let wo = conv_out_extent(wd, k, self.stride);
        let mut y = Tensor::zeros(vec![n, co, ho, wo]);
        conv_forward_kernel(
            &inputs[0].data,
            &inputs[1].data,
            &mut y.data,
            n,
            ci,
            h,
            wd,
            co,
            k,
            self.stride,
        );
        Ok((y, Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, ci, h, wd, co, k) = self.check(inputs).expect("checked in forward");
        let (dx, dw) = match input_grads {
            [a, b] => (a.as_mut(), b.as_mut()),
            _ => unreachable!(),
        };
        conv_backward_kernel(
            &inputs[0].data,
            &inputs[1].data,
            out_grad,
            dx,
            dw,
            n,
            ci,
            h,
            wd,
            co,
            k,
            self.stride,
        );
    }
}

/// Convolution with a per-output-channel bias, used by the detection-head
/// convs that are not followed by batch norm. Inputs: `(x, w, b[Co])`.
pub struct Conv2dBias {
    pub stride: usize,
}

impl TapeOp for Conv2dBias {
    fn name(&self) -> &'static str {
        "conv2d_bias"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let [x, w, b] = inputs else {
            return Err(arg_err("conv2d_bias", format!("expected 3 inputs, got {}", inputs.len())));
        };
        let inner = Conv2d { stride: self.stride };
        let (mut y, _) = inner.forward(&[x, w])?;
        let (_, co, ho, wo) = y.dims4().unwrap();
        if b.data.len() != co {
            return Err(shape_err(
                "conv2d_bias",
                format!("bias length {} != out channels {co}", b.data.len()),
            ));
        }
        let plane = ho * wo;
        for chunk in y.data.chunks_mut(co * plane) {
            for (o, bv) in b.data.iter().enumerate() {
                for v in &mut chunk[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
        Ok((y, Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let inner = Conv2d { stride: self.stride };
        let (head, tail) = input_grads.split_at_mut(2);
        inner.backward(&inputs[..2], output, aux, out_grad, head);
        if let Some(db) = tail[0].as_mut() {
            let (_, co, ho, wo) = output.dims4().unwrap();
            let plane = ho * wo;
            for chunk in out_grad.chunks(co * plane) {
                for (o, dbv) in db.iter_mut().enumerate() {
                    *dbv += chunk[o * plane..(o + 1) * plane].iter().sum::<f64>();
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Owned batch-norm parameter block for the direct (non-tape) API.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    pub fn identity(channels: usize, eps: f64) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

fn bn_check(op: &'static str, x: &Tensor, c_params: usize, eps: f64) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = require4(op, x)?;
    if c != c_params {
        return Err(shape_err(op, format!("input has {c} channels, params have {c_params}")));
    }
    if n * h * w == 0 {
        return Err(arg_err(op, "zero-element channel".to_string()));
    }
    if eps <= 0.0 {
        return Err(arg_err(op, format!("eps must be positive, got {eps}")));
    }
    Ok((n, c, h, w))
}

fn bn_batch_stats(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            mean[ch] += x[base..base + plane].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let mu = mean[ch];
            var[ch] += x[base..base + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

fn bn_normalize(
    x: &[f64],
    y: &mut [f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    plane: usize,
) {
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let g = gamma[ch];
            let b = beta[ch];
            let mu = mean[ch];
            for (yv, xv) in y[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *yv = g * (xv - mu) * inv + b;
            }
        }
    }
}

/// Training-mode batch norm: normalizes with batch statistics.
/// Inputs: `(x, gamma[C], beta[C])`; aux saves `[mean, var]`.
pub struct BatchNormTrain {
    pub eps: f64,
}

impl TapeOp for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batchnorm_train"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let [x, gamma, beta] = inputs else {
            return Err(arg_err("batchnorm_train", format!("expected 3 inputs, got {}", inputs.len())));
        };
        let (n, c, h, w) = bn_check("batchnorm_train", x, gamma.data.len(), self.eps)?;
        if beta.data.len() != c {
            return Err(shape_err("batchnorm_train", "beta length mismatch".to_string()));
        }
        if n * h * w < 2 {
            return Err(arg_err(
                "batchnorm_train",
                format!("need at least 2 elements per channel for batch stats, got {}", n * h * w),
            ));
        }
        let plane = h * w;
        let (mean, var) = bn_batch_stats(&x.data, n, c, plane);
        let mut y = Tensor::zeros(x.shape.clone());
        bn_normalize(&x.data, &mut y.data, &gamma.data, &beta.data, &mean, &var, self.eps, n, c, plane);
        Ok((y, Aux::Floats(vec![mean, var])))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let x = inputs[0];
        let gamma = &inputs[1].data;
        let (n, c, h, w) = x.dims4().unwrap();
        let plane = h * w;
        let m = (n * plane) as f64;
        let Aux::Floats(stats) = aux else { unreachable!() };
        let (mean, var) = (&stats[0], &stats[1]);

        for ch in 0..c {
            let mu = mean[ch];
            let inv = 1.0 / (var[ch] + self.eps).sqrt();
            // Per-channel reductions over batch and space.
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0; // sum of g * xhat
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    let g = out_grad[base + i];
                    sum_g += g;
                    sum_gx += g * (x.data[base + i] - mu) * inv;
                }
            }
            if let Some(dg) = input_grads[1].as_mut() {
                dg[ch] += sum_gx;
            }
            if let Some(db) = input_grads[2].as_mut() {
                db[ch] += sum_g;
            }
            if let Some(dx) = input_grads[0].as_mut() {
                let scale = gamma[ch] * inv;
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for i in 0..plane {
                        let g = out_grad[base + i];
                        let xhat = (x.data[base + i] - mu) * inv;
                        dx[base + i] += scale * (g - sum_g / m - xhat * sum_gx / m);
                    }
                }
            }
        }
    }
}

/// Eval-mode batch norm: per-channel affine map using running statistics.
/// Inputs: `(x, gamma, beta, running_mean, running_var)`.
pub struct BatchNormEval {
    pub eps: f64,
}

impl TapeOp for BatchNormEval {
    fn name(&self) -> &'static str {
        "batchnorm_eval"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let [x, gamma, beta, mean, var] = inputs else {
            return Err(arg_err("batchnorm_eval", format!("expected 5 inputs, got {}", inputs.len())));
        };
        let (n, c, h, w) = bn_check("batchnorm_eval", x, gamma.data.len(), self.eps)?;
        for (name, t) in [("beta", beta), ("running_mean", mean), ("running_var", var)] {
            if t.data.len() != c {
                return Err(shape_err("batchnorm_eval", format!("{name} length mismatch")));
            }
        }
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape.clone());
        bn_normalize(
            &x.data, &mut y.data, &gamma.data, &beta.data, &mean.data, &var.data, self.eps, n, c,
            plane,
        );
        Ok((y, Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let x = inputs[0];
        let gamma = &inputs[1].data;
        let mean = &inputs[3].data;
        let var = &inputs[4].data;
        let (n, c, h, w) = x.dims4().unwrap();
        let plane = h * w;
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + self.eps).sqrt();
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    let g = out_grad[base + i];
                    sum_g += g;
                    sum_gx += g * (x.data[base + i] - mean[ch]) * inv;
                }
            }
            if let Some(dg) = input_grads[1].as_mut() {
                dg[ch] += sum_gx;
            }
            if let Some(db) = input_grads[2].as_mut() {
                db[ch] += sum_g;
            }
            if let Some(dx) = input_grads[0].as_mut() {
                let scale = gamma[ch] * inv;
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for g in 0..plane {
                        dx[base + g] += scale * out_grad[base + g];
                    }
                }
            }
        }
    }
}

/// Direct batch-norm forward matching the engine contract: training mode
/// normalizes with batch statistics and updates running stats in place by
/// EMA ([`RUNNING_STAT_MOMENTUM`]); eval mode uses the stored statistics.
pub fn batchnorm_forward(x: &Tensor, params: &mut BnParams, training: bool) -> Result<Tensor> {
    let c = params.channels();
    let op_name = if training { "batchnorm_train" } else { "batchnorm_eval" };
    let (n, _, h, w) = bn_check(op_name, x, c, params.eps)?;
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape.clone());
    if training {
        if n * plane < 2 {
            return Err(arg_err(op_name, "need at least 2 elements per channel".to_string()));
        }
        let (mean, var) = bn_batch_stats(&x.data, n, c, plane);
        bn_normalize(&x.data, &mut y.data, &params.gamma, &params.beta, &mean, &var, params.eps, n, c, plane);
        let m = RUNNING_STAT_MOMENTUM;
        for ch in 0..c {
            params.running_mean[ch] = (1.0 - m) * params.running_mean[ch] + m * mean[ch];
            params.running_var[ch] = (1.0 - m) * params.running_var[ch] + m * var[ch];
        }
    } else {
        bn_normalize(
            &x.data,
            &mut y.data,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
            params.eps,
            n,
            c,
            plane,
        );
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    // overflow guard: softplus(x) ~ x for large x, ~ e^x for very negative x
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}


/// `x * tanh(softplus(x))`.
pub struct Mish;

impl TapeOp for Mish {
    fn name(&self) -> &'static str {
        "mish"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let x = inputs[0];
        let data = x.data.iter().map(|&v| v * softplus(v).tanh()).collect();
        Ok((Tensor::new(x.shape.clone(), data), Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        if let Some(dx) = input_grads[0].as_mut() {
            for ((dv, &xv), &gv) in dx.iter_mut().zip(&inputs[0].data).zip(out_grad) {
                let t = softplus(xv).tanh();
                let d = t + xv * (1.0 - t * t) * sigmoid(xv);
                *dv += gv * d;
            }
        }
    }
}

/// `max(x, slope * x)` with the conventional 0.1 slope for CBL blocks.
pub struct LeakyRelu {
    pub slope: f64,
}

impl TapeOp for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let x = inputs[0];
        let s = self.slope;
        let data = x.data.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect();
        Ok((Tensor::new(x.shape.clone(), data), Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        if let Some(dx) = input_grads[0].as_mut() {
            for ((dv, &xv), &gv) in dx.iter_mut().zip(&inputs[0].data).zip(out_grad) {
                *dv += gv * if xv > 0.0 { 1.0 } else { self.slope };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

/// Elementwise residual add of two identically shaped tensors.
pub struct Add;

impl TapeOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let [a, b] = inputs else {
            return Err(arg_err("add", format!("expected 2 inputs, got {}", inputs.len())));
        };
        if a.shape != b.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Ok((Tensor::new(a.shape.clone(), data), Aux::None))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        for slot in input_grads.iter_mut() {
            if let Some(d) = slot.as_mut() {
                for (dv, gv) in d.iter_mut().zip(out_grad) {
                    *dv += gv;
                }
            }
        }
    }
}

/// Concatenate NCHW tensors along the channel axis.
pub struct ConcatChannels;

impl TapeOp for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        if inputs.is_empty() {
            return Err(arg_err("concat", "needs at least one input".to_string()));
        }
        let (n, _, h, w) = require4("concat", inputs[0])?;
        let mut c_total = 0;
        for t in inputs {
            let (tn, tc, th, tw) = require4("concat", t)?;
            if tn != n || th != h || tw != w {
                return Err(shape_err(
                    "concat",
                    format!("spatial/batch mismatch: {:?} vs {:?}", inputs[0].shape, t.shape),
                ));
            }
            c_total += tc;
        }
        let plane = h * w;
        let mut y = Tensor::zeros(vec![n, c_total, h, w]);
        for img in 0..n {
            let mut c_off = 0;
            for t in inputs {
                let tc = t.shape[1];
                let src = (img * tc) * plane;
                let dst = (img * c_total + c_off) * plane;
                y.data[dst..dst + tc * plane].copy_from_slice(&t.data[src..src + tc * plane]);
                c_off += tc;
            }
        }
        Ok((y, Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, c_total, h, w) = output.dims4().unwrap();
        let plane = h * w;
        for img in 0..n {
            let mut c_off = 0;
            for (t, slot) in inputs.iter().zip(input_grads.iter_mut()) {
                let tc = t.shape[1];
                if let Some(d) = slot.as_mut() {
                    let dst = (img * tc) * plane;
                    let src = (img * c_total + c_off) * plane;
                    for (dv, gv) in
                        d[dst..dst + tc * plane].iter_mut().zip(&out_grad[src..src + tc * plane])
                    {
                        *dv += gv;
                    }
                }
                c_off += tc;
            }
        }
    }
}

/// Nearest-neighbor upsampling by an integer factor.
pub struct UpsampleNearest {
    pub factor: usize,
}

impl TapeOp for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let (n, c, h, w) = require4("upsample", inputs[0])?;
        if self.factor == 0 {
            return Err(arg_err("upsample", "factor must be positive".to_string()));
        }
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let mut y = Tensor::zeros(vec![n, c, ho, wo]);
        let x = &inputs[0].data;
        for nc in 0..n * c {
            let xb = nc * h * w;
            let yb = nc * ho * wo;
            for oh in 0..ho {
                let ih = oh / f;
                for ow in 0..wo {
                    y.data[yb + oh * wo + ow] = x[xb + ih * w + ow / f];
                }
            }
        }
        Ok((y, Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let Some(dx) = input_grads[0].as_mut() else { return };
        let (n, c, h, w) = inputs[0].dims4().unwrap();
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        for nc in 0..n * c {
            let xb = nc * h * w;
            let yb = nc * ho * wo;
            for oh in 0..ho {
                let ih = oh / f;
                for ow in 0..wo {
                    dx[xb + ih * w + ow / f] += out_grad[yb + oh * wo + ow];
                }
            }
        }
    }
}

/// Max pooling with same padding (odd kernels). Padded positions are never
/// selected because every window covers at least one valid pixel.
pub struct MaxPool {
    pub k: usize,
    pub stride: usize,
}

impl TapeOp for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        let (n, c, h, w) = require4("maxpool", inputs[0])?;
        if self.k % 2 == 0 || self.k == 0 {
            return Err(arg_err("maxpool", format!("kernel must be odd, got {}", self.k)));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(arg_err("maxpool", format!("stride must be 1 or 2, got {}", self.stride)));
        }
        let pad = (self.k - 1) / 2;
        let ho = conv_out_extent(h, self.k, self.stride);
        let wo = conv_out_extent(w, self.k, self.stride);
        let x = &inputs[0].data;
        let mut y = Tensor::zeros(vec![n, c, ho, wo]);
        let mut idx = vec![0usize; y.data.len()];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let yb = nc * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for kh in 0..self.k {
                        let ih = (oh * self.stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..self.k {
                            let iw = (ow * self.stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let i = xb + ih as usize * w + iw as usize;
                            // first-max tie break keeps argmax deterministic
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    y.data[yb + oh * wo + ow] = best;
                    idx[yb + oh * wo + ow] = best_i;
                }
            }
        }
        Ok((y, Aux::Indices(idx)))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let Some(dx) = input_grads[0].as_mut() else { return };
        let Aux::Indices(idx) = aux else { unreachable!() };
        for (&i, &g) in idx.iter().zip(out_grad) {
            dx[i] += g;
        }
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Sum of all elements, producing a scalar.
pub struct SumAll;

impl TapeOp for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        Ok((Tensor::scalar(inputs[0].data.iter().sum()), Aux::None))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        if let Some(dx) = input_grads[0].as_mut() {
            for dv in dx.iter_mut() {
                *dv += out_grad[0];
            }
        }
    }
}

/// Weighted sum of scalar inputs; assembles composite losses.
pub struct WeightedSum {
    pub weights: Vec<f64>,
}

impl TapeOp for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
        if inputs.len() != self.weights.len() {
            return Err(arg_err(
                "weighted_sum",
                format!("{} inputs vs {} weights", inputs.len(), self.weights.len()),
            ));
        }
        let mut acc = 0.0;
        for (t, w) in inputs.iter().zip(&self.weights) {
            if !t.is_scalar() {
                return Err(shape_err("weighted_sum", format!("non-scalar input {:?}", t.shape)));
            }
            acc += w * t.item();
        }
        Ok((Tensor::scalar(acc), Aux::None))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        for (slot, w) in input_grads.iter_mut().zip(&self.weights) {
            if let Some(d) = slot.as_mut() {
                d[0] += w * out_grad[0];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, c, h, w], data)
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 3, 3, (1..=9).map(f64::from).collect()));
        let w = tape.constant(t4(1, 1, 1, 1, vec![1.0]));
        let y = tape.apply(Conv2d { stride: 1 }, &[x, w]).unwrap();
        assert_eq!(tape.value(y).data, tape.value(x).data);
    }

    #[test]
    fn conv_stride2_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(vec![5, 3, 3, 3]));
        let y = tape.apply(Conv2d { stride: 2 }, &[x, w]).unwrap();
        assert_eq!(tape.value(y).shape, vec![1, 5, 4, 4]);
    }

    #[test]
    fn bn_constant_channel_outputs_beta() {
        let x = t4(1, 1, 2, 2, vec![3.7; 4]);
        let mut params = BnParams::identity(1, 1e-5);
        params.gamma[0] = 2.5;
        params.beta[0] = 0.5;
        let y = batchnorm_forward(&x, &mut params, true).unwrap();
        for v in &y.data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_two_point_channel() {
        // values [1,3]: mu=2, var=1 -> xhat=[-1,1]; gamma=2, beta=0.5 -> [-1.5, 2.5]
        let x = t4(1, 1, 1, 2, vec![1.0, 3.0]);
        let mut params = BnParams::identity(1, 1e-12);
        params.gamma[0] = 2.0;
        params.beta[0] = 0.5;
        let y = batchnorm_forward(&x, &mut params, true).unwrap();
        assert!((y.data[0] + 1.5).abs() < 1e-9);
        assert!((y.data[1] - 2.5).abs() < 1e-9);
    }

    #[test]
    fn bn_identity_on_normalized_input() {
        let x = t4(1, 1, 1, 2, vec![-1.0, 1.0]);
        let mut params = BnParams::identity(1, 1e-8);
        let y = batchnorm_forward(&x, &mut params, true).unwrap();
        assert!((y.data[0] + 1.0).abs() < 1e-6);
        assert!((y.data[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bn_running_stats_update() {
        let x = t4(1, 1, 1, 2, vec![1.0, 3.0]);
        let mut params = BnParams::identity(1, 1e-5);
        batchnorm_forward(&x, &mut params, true).unwrap();
        let m = RUNNING_STAT_MOMENTUM;
        assert!((params.running_mean[0] - m * 2.0).abs() < 1e-12);
        assert!((params.running_var[0] - ((1.0 - m) + m)).abs() < 1e-12);
    }

    #[test]
    fn bn_eval_is_affine() {
        // f(a*x + b) relationships compose exactly in eval mode
        let mut params = BnParams::identity(1, 1e-3);
        params.gamma[0] = 1.7;
        params.beta[0] = -0.3;
        params.running_mean[0] = 0.4;
        params.running_var[0] = 2.0;
        let x = t4(1, 1, 1, 3, vec![0.1, -1.0, 2.0]);
        let y = batchnorm_forward(&x, &mut params, false).unwrap();
        let scale = params.gamma[0] / (params.running_var[0] + params.eps).sqrt();
        for (xv, yv) in x.data.iter().zip(&y.data) {
            let expect = scale * (xv - params.running_mean[0]) + params.beta[0];
            assert!((yv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_rejects_channel_mismatch() {
        let x = t4(1, 2, 1, 2, vec![0.0; 4]);
        let mut params = BnParams::identity(3, 1e-5);
        assert!(batchnorm_forward(&x, &mut params, true).is_err());
    }

    #[test]
    fn bn_rejects_zero_element_channel() {
        let x = Tensor::zeros(vec![1, 2, 0, 4]);
        let mut params = BnParams::identity(2, 1e-5);
        assert!(batchnorm_forward(&x, &mut params, false).is_err());
    }

    #[test]
    fn activation_point_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.apply(LeakyRelu { slope: 0.1 }, &[x]).unwrap();
        let yv = &tape.value(y).data;
        assert!((yv[0] + 0.1).abs() < 1e-15);
        assert_eq!(yv[1], 0.0);
        assert_eq!(yv[2], 2.0);

        let z = tape.apply(Mish, &[x]).unwrap();
        let zv = &tape.value(z).data;
        assert_eq!(zv[1], 0.0); // mish(0) = 0
        assert!((zv[2] - 2.0 * softplus(2.0).tanh()).abs() < 1e-15);
    }

    #[test]
    fn mish_guard_extremes_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![500.0, -500.0]));
        let y = tape.apply(Mish, &[x]).unwrap();
        assert!((tape.value(y).data[0] - 500.0).abs() < 1e-9);
        assert!(tape.value(y).data[1].abs() < 1e-9);
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 1, 1, vec![1.0]));
        let y = tape.apply(UpsampleNearest { factor: 2 }, &[x]).unwrap();
        assert_eq!(tape.value(y).shape, vec![1, 1, 2, 2]);
        assert_eq!(tape.value(y).data, vec![1.0; 4]);
    }

    #[test]
    fn add_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros(vec![1, 3, 2, 2]));
        assert!(tape.apply(Add, &[a, b]).is_err());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        assert!(tape.apply(ConcatChannels, &[a, b]).is_err());
    }

    #[test]
    fn concat_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(t4(2, 1, 1, 2, vec![1.0, 2.0, 5.0, 6.0]));
        let b = tape.constant(t4(2, 1, 1, 2, vec![3.0, 4.0, 7.0, 8.0]));
        let y = tape.apply(ConcatChannels, &[a, b]).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn spp_pools_preserve_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()));
        for k in [5, 9, 13] {
            let y = tape.apply(MaxPool { k, stride: 1 }, &[x]).unwrap();
            assert_eq!(tape.value(y).shape, vec![1, 1, 3, 3]);
            // max element dominates every window at k >= 5 on a 3x3 input
            assert!(tape.value(y).data.iter().all(|&v| v == 9.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(t4(1, 2, 4, 4, (0..32).map(|i| (i as f64).sin()).collect()));
            let w = tape.constant(t4(3, 2, 3, 3, (0..54).map(|i| (i as f64 * 0.7).cos()).collect()));
            let c = tape.apply(Conv2d { stride: 1 }, &[x, w]).unwrap();
            let m = tape.apply(Mish, &[c]).unwrap();
            tape.value(m).data.clone()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
