//! Raw numerical kernels shared by the differentiation tape and by
//! tape-free inference.
//!
//! Hot kernels parallelize across disjoint output regions, with every
//! floating-point reduction running in a fixed order inside exactly one
//! task. Results are therefore bit-identical to sequential execution and
//! across repeated runs.

use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// 2x2 convolution with replicate padding of one row/column at the
/// bottom/right edge, so the spatial size is preserved.
///
/// out[b, co, i, j] = bias[co]
///     + sum over ci, di, dj of kernel[co, ci, di, dj] * in_pad[b, ci, i+di, j+dj]
pub fn conv2x2_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (bsz, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin || kh != 2 || kw != 2 {
        return Err(contract(format!(
            "conv kernel shape {:?} incompatible with input channels {cin} (want [C',{cin},2,2])",
            kernel.shape()
        )));
    }
    if bias.dims1()? != cout {
        return Err(contract(format!(
            "conv bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    if h < 2 || w < 2 {
        return Err(contract(format!("conv input spatial size {h}x{w} must be at least 2x2")));
    }

    let mut out = Tensor::zeros(&[bsz, cout, h, w]);
    let plane = h * w;
    let idata = input.data();
    let kdata = kernel.data();
    let bdata = bias.data();

    out.data_mut()
        .par_chunks_mut(cout * plane)
        .enumerate()
        .for_each(|(b, sample)| {
            for co in 0..cout {
                let o = &mut sample[co * plane..][..plane];
                o.fill(bdata[co]);
                for ci in 0..cin {
                    let inp = &idata[(b * cin + ci) * plane..][..plane];
                    let k = &kdata[(co * cin + ci) * 4..][..4];
                    let (k00, k01, k10, k11) = (k[0], k[1], k[2], k[3]);
                    for i in 0..h {
                        let r0 = &inp[i * w..][..w];
                        let r1 = if i + 1 < h { &inp[(i + 1) * w..][..w] } else { r0 };
                        let orow = &mut o[i * w..][..w];
                        for j in 0..w - 1 {
                            orow[j] += k00 * r0[j] + k01 * r0[j + 1] + k10 * r1[j] + k11 * r1[j + 1];
                        }
                        // replicate the right edge column
                        orow[w - 1] += (k00 + k01) * r0[w - 1] + (k10 + k11) * r1[w - 1];
                    }
                }
            }
        });
    Ok(out)
}

/// Padded-input lookup: replicate padding clamps indices to the valid range.
#[inline]
fn clamp_idx(i: usize, max: usize) -> usize {
    if i < max {
        i
    } else {
        max - 1
    }
}

/// Per-row contribution of one gradient/input plane pair to the four
/// kernel taps, with the replicated right edge folded in.
#[inline]
fn kernel_row_acc(g: &[f64], r0: &[f64], r1: &[f64], w: usize, acc: &mut [f64; 4]) {
    let mut s00 = 0.0;
    let mut s01 = 0.0;
    let mut s10 = 0.0;
    let mut s11 = 0.0;
    for j in 0..w - 1 {
        let gv = g[j];
        s00 += gv * r0[j];
        s01 += gv * r0[j + 1];
        s10 += gv * r1[j];
        s11 += gv * r1[j + 1];
    }
    let gv = g[w - 1];
    s00 += gv * r0[w - 1];
    s01 += gv * r0[w - 1];
    s10 += gv * r1[w - 1];
    s11 += gv * r1[w - 1];
    acc[0] += s00;
    acc[1] += s01;
    acc[2] += s10;
    acc[3] += s11;
}

/// Backward pass of `conv2x2_forward`. Returns gradients w.r.t.
/// (input, kernel, bias); the input gradient is skipped when not needed.
pub fn conv2x2_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (bsz, cin, h, w) = input.dims4()?;
    let (cout, _, _, _) = kernel.dims4()?;
    let plane = h * w;
    let idata = input.data();
    let kdata = kernel.data();
    let gdata = grad_out.data();

    // one task per output channel
    let mut grad_bias = Tensor::zeros(&[cout]);
    grad_bias
        .data_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(co, gb)| {
            let mut s = 0.0;
            for b in 0..bsz {
                s += gdata[(b * cout + co) * plane..][..plane].iter().sum::<f64>();
            }
            *gb = s;
        });

    // one task per (co, ci) tap group
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    grad_kernel
        .data_mut()
        .par_chunks_mut(4)
        .enumerate()
        .for_each(|(pair, kg)| {
            let co = pair / cin;
            let ci = pair % cin;
            let mut acc = [0.0f64; 4];
            for b in 0..bsz {
                let g = &gdata[(b * cout + co) * plane..][..plane];
                let inp = &idata[(b * cin + ci) * plane..][..plane];
                for i in 0..h {
                    let i1 = clamp_idx(i + 1, h);
                    kernel_row_acc(&g[i * w..][..w], &inp[i * w..][..w], &inp[i1 * w..][..w], w, &mut acc);
                }
            }
            kg.copy_from_slice(&acc);
        });

    // one task per sample
    let grad_input = if need_input_grad {
        let mut gi = Tensor::zeros(input.shape());
        gi.data_mut()
            .par_chunks_mut(cin * plane)
            .enumerate()
            .for_each(|(b, gsample)| {
                for co in 0..cout {
                    let g = &gdata[(b * cout + co) * plane..][..plane];
                    for ci in 0..cin {
                        let k = &kdata[(co * cin + ci) * 4..][..4];
                        let gin = &mut gsample[ci * plane..][..plane];
                        for i in 0..h {
                            let i1 = clamp_idx(i + 1, h);
                            for j in 0..w {
                                let j1 = clamp_idx(j + 1, w);
                                let gv = g[i * w + j];
                                gin[i * w + j] += k[0] * gv;
                                gin[i * w + j1] += k[1] * gv;
                                gin[i1 * w + j] += k[2] * gv;
                                gin[i1 * w + j1] += k[3] * gv;
                            }
                        }
                    }
                }
            });
        Some(gi)
    } else {
        None
    };

    Ok((grad_input, grad_kernel, grad_bias))
}

/// 2x2 max pooling with stride 2. Requires even spatial extents.
/// Returns the pooled tensor and the flat within-plane index of each
/// window's maximum (ties resolved to the first cell in row-major order).
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (bsz, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(contract(format!("maxpool2x2 needs even spatial extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[bsz, c, oh, ow]);
    let mut argmax = vec![0u32; bsz * c * oh * ow];
    let idata = input.data();
    let odata = out.data_mut();
    let iplane = h * w;
    let oplane = oh * ow;

    for p in 0..bsz * c {
        let inp = &idata[p * iplane..][..iplane];
        let o = &mut odata[p * oplane..][..oplane];
        let am = &mut argmax[p * oplane..][..oplane];
        for oi in 0..oh {
            for oj in 0..ow {
                let base = (2 * oi) * w + 2 * oj;
                // row-major window order; strict > keeps the first of ties
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                let mut bestv = inp[cand[0]];
                for &ix in &cand[1..] {
                    if inp[ix] > bestv {
                        bestv = inp[ix];
                        best = ix;
                    }
                }
                o[oi * ow + oj] = bestv;
                am[oi * ow + oj] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Tensor {
    let mut gi = Tensor::zeros(input_shape);
    let (h, w) = (input_shape[2], input_shape[3]);
    let iplane = h * w;
    let oplane = (h / 2) * (w / 2);
    let g = grad_out.data();
    let gid = gi.data_mut();
    for p in 0..input_shape[0] * input_shape[1] {
        let go = &g[p * oplane..][..oplane];
        let am = &argmax[p * oplane..][..oplane];
        let gin = &mut gid[p * iplane..][..iplane];
        for t in 0..oplane {
            gin[am[t] as usize] += go[t];
        }
    }
    gi
}

/// Affine map: out[b, j] = bias[j] + sum_i weight[j, i] * input[b, i].
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (bsz, din) = input.dims2()?;
    let (dout, wdin) = weight.dims2()?;
    if wdin != din {
        return Err(contract(format!(
            "dense weight shape {:?} incompatible with input width {din}",
            weight.shape()
        )));
    }
    if bias.dims1()? != dout {
        return Err(contract(format!(
            "dense bias shape {:?} does not match {dout} outputs",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[bsz, dout]);
    let idata = input.data();
    let wdata = weight.data();
    let bdata = bias.data();
    let odata = out.data_mut();
    for b in 0..bsz {
        let row = &idata[b * din..][..din];
        let orow = &mut odata[b * dout..][..dout];
        for j in 0..dout {
            let wrow = &wdata[j * din..][..din];
            let mut s = bdata[j];
            for i in 0..din {
                s += wrow[i] * row[i];
            }
            orow[j] = s;
        }
    }
    Ok(out)
}

pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
    need_weight_grad: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (bsz, din) = input.dims2().expect("checked in forward");
    let (dout, _) = weight.dims2().expect("checked in forward");
    let idata = input.data();
    let wdata = weight.data();
    let gdata = grad_out.data();

    let mut grad_bias = Tensor::zeros(&[dout]);
    {
        let gb = grad_bias.data_mut();
        for b in 0..bsz {
            let g = &gdata[b * dout..][..dout];
            for j in 0..dout {
                gb[j] += g[j];
            }
        }
    }

    let grad_weight = if need_weight_grad {
        let mut gw = Tensor::zeros(&[dout, din]);
        let gwd = gw.data_mut();
        for b in 0..bsz {
            let g = &gdata[b * dout..][..dout];
            let row = &idata[b * din..][..din];
            for j in 0..dout {
                let gv = g[j];
                let dst = &mut gwd[j * din..][..din];
                for i in 0..din {
                    dst[i] += gv * row[i];
                }
            }
        }
        Some(gw)
    } else {
        None
    };

    let grad_input = if need_input_grad {
        let mut gi = Tensor::zeros(&[bsz, din]);
        let gid = gi.data_mut();
        for b in 0..bsz {
            let g = &gdata[b * dout..][..dout];
            let dst = &mut gid[b * din..][..din];
            for j in 0..dout {
                let gv = g[j];
                let wrow = &wdata[j * din..][..din];
                for i in 0..din {
                    dst[i] += gv * wrow[i];
                }
            }
        }
        Some(gi)
    } else {
        None
    };

    (grad_input, grad_weight, grad_bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

pub fn activation_forward(input: &Tensor, f: Activation) -> Tensor {
    let mut out = input.clone();
    match f {
        Activation::Relu => {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Tanh => {
            for v in out.data_mut() {
                *v = v.tanh();
            }
        }
        Activation::Sigmoid => {
            for v in out.data_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
        }
    }
    out
}

/// Derivative expressed through input x and output y = f(x).
/// The relu derivative at exactly 0 is defined as 0.
pub fn activation_backward(input: &Tensor, output: &Tensor, grad_out: &Tensor, f: Activation) -> Tensor {
    let mut gi = Tensor::zeros(input.shape());
    let x = input.data();
    let y = output.data();
    let g = grad_out.data();
    let gd = gi.data_mut();
    match f {
        Activation::Relu => {
            for t in 0..x.len() {
                gd[t] = if x[t] > 0.0 { g[t] } else { 0.0 };
            }
        }
        Activation::Tanh => {
            for t in 0..x.len() {
                gd[t] = g[t] * (1.0 - y[t] * y[t]);
            }
        }
        Activation::Sigmoid => {
            for t in 0..x.len() {
                gd[t] = g[t] * y[t] * (1.0 - y[t]);
            }
        }
    }
    gi
}

/// Mean over the spatial cells of each channel: [B,C,H,W] -> [B,C].
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, w) = input.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[bsz, c]);
    let idata = input.data();
    let odata = out.data_mut();
    let inv = 1.0 / plane as f64;
    for p in 0..bsz * c {
        odata[p] = idata[p * plane..][..plane].iter().sum::<f64>() * inv;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let inv = 1.0 / plane as f64;
    let mut gi = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let gid = gi.data_mut();
    for p in 0..input_shape[0] * input_shape[1] {
        let gv = g[p] * inv;
        for v in &mut gid[p * plane..][..plane] {
            *v = gv;
        }
    }
    gi
}

/// Row-wise softmax followed by total cross-entropy against one-hot targets,
/// computed in log-sum-exp form. Returns (loss, softmax probabilities).
///
/// loss = -sum over rows b and classes m of targets[b,m] * log softmax(logits)[b,m]
pub fn softmax_xent_forward(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (bsz, m) = logits.dims2()?;
    let (tb, tm) = targets.dims2()?;
    if (tb, tm) != (bsz, m) {
        return Err(contract(format!(
            "targets shape {:?} does not match logits shape {:?}",
            targets.shape(),
            logits.shape()
        )));
    }
    if m < 2 {
        return Err(contract(format!("need at least 2 classes, got {m}")));
    }
    let tdata = targets.data();
    for b in 0..bsz {
        let row = &tdata[b * m..][..m];
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(contract(format!("target row {b} is not a distribution: {row:?}")));
        }
    }

    let mut probs = Tensor::zeros(&[bsz, m]);
    let ldata = logits.data();
    let pdata = probs.data_mut();
    let mut loss = 0.0;
    for b in 0..bsz {
        let row = &ldata[b * m..][..m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let lse = max + denom.ln();
        let prow = &mut pdata[b * m..][..m];
        let trow = &tdata[b * m..][..m];
        for j in 0..m {
            prow[j] = (row[j] - lse).exp();
            loss += trow[j] * (lse - row[j]);
        }
    }
    Ok((loss, probs))
}

pub fn softmax_xent_backward(probs: &Tensor, targets: &Tensor, seed: f64) -> Tensor {
    let mut gi = Tensor::zeros(probs.shape());
    let p = probs.data();
    let t = targets.data();
    let g = gi.data_mut();
    for i in 0..p.len() {
        g[i] = seed * (p[i] - t[i]);
    }
    gi
}

/// Row-wise softmax (inference only).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (bsz, m) = logits.dims2()?;
    let mut out = Tensor::zeros(&[bsz, m]);
    let ldata = logits.data();
    let odata = out.data_mut();
    for b in 0..bsz {
        let row = &ldata[b * m..][..m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let orow = &mut odata[b * m..][..m];
        for j in 0..m {
            orow[j] = (row[j] - max).exp();
            denom += orow[j];
        }
        for v in orow {
            *v /= denom;
        }
    }
    Ok(out)
}
