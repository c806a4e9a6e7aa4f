//! Differentiable primitives: elementwise arithmetic, matmul, conv2d,
//! softmax, reductions, normalization layers, resampling, and the token
//! reshuffles used by the attention student.

use super::gemm::{gemm, gemm_accumulate, transpose};
use super::Tensor;
use crate::error::{Error, Result};

// Elementwise binaries accept equal shapes, a single-element operand, or a
// smaller operand whose shape is a trailing suffix of the larger one; the
// smaller side cycles through the flat data.
fn binary_plan(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(sa.to_vec());
    }
    let (big, small) = if a.len() >= b.len() { (sa, sb) } else { (sb, sa) };
    let suffix_ok = small.len() == 1 && small[0] == 1
        || (small.len() <= big.len() && &big[big.len() - small.len()..] == small);
    if !suffix_ok {
        return Err(Error::ShapeMismatch(format!(
            "cannot broadcast {:?} with {:?}",
            sa, sb
        )));
    }
    Ok(big.to_vec())
}

/// Adds `src` cycled gradients into an accumulator of length `n`.
fn cycled_add(acc: &mut [f64], idx: impl Iterator<Item = f64>) {
    let n = acc.len();
    for (i, v) in idx.enumerate() {
        acc[i % n] += v;
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_plan(self, other)?;
        let (an, bn) = (self.len(), other.len());
        let n = shape.iter().product::<usize>();
        let (ad, bd) = (self.data(), other.data());
        let out: Vec<f64> = (0..n).map(|i| ad[i % an] + bd[i % bn]).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, out, &[self, other], move |g| {
            a.accumulate_grad_with(|acc| cycled_add(acc, g.iter().copied()));
            b.accumulate_grad_with(|acc| cycled_add(acc, g.iter().copied()));
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_plan(self, other)?;
        let (an, bn) = (self.len(), other.len());
        let n = shape.iter().product::<usize>();
        let (ad, bd) = (self.data(), other.data());
        let out: Vec<f64> = (0..n).map(|i| ad[i % an] - bd[i % bn]).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, out, &[self, other], move |g| {
            a.accumulate_grad_with(|acc| cycled_add(acc, g.iter().copied()));
            b.accumulate_grad_with(|acc| cycled_add(acc, g.iter().map(|v| -v)));
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_plan(self, other)?;
        let (an, bn) = (self.len(), other.len());
        let n = shape.iter().product::<usize>();
        let (ad, bd) = (self.data(), other.data());
        let out: Vec<f64> = (0..n).map(|i| ad[i % an] * bd[i % bn]).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, out, &[self, other], move |g| {
            a.accumulate_grad_with(|acc| {
                cycled_add(acc, g.iter().enumerate().map(|(i, v)| v * b.data()[i % bn]));
            });
            b.accumulate_grad_with(|acc| {
                cycled_add(acc, g.iter().enumerate().map(|(i, v)| v * a.data()[i % an]));
            });
        }))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_plan(self, other)?;
        let (an, bn) = (self.len(), other.len());
        let n = shape.iter().product::<usize>();
        let (ad, bd) = (self.data(), other.data());
        let out: Vec<f64> = (0..n).map(|i| ad[i % an] / bd[i % bn]).collect();
        let (a, b) = (self.clone(), other.clone());
        let out_copy = out.clone();
        Ok(Tensor::from_op(shape, out, &[self, other], move |g| {
            a.accumulate_grad_with(|acc| {
                cycled_add(acc, g.iter().enumerate().map(|(i, v)| v / b.data()[i % bn]));
            });
            b.accumulate_grad_with(|acc| {
                cycled_add(
                    acc,
                    g.iter()
                        .enumerate()
                        .map(|(i, v)| -v * out_copy[i] / b.data()[i % bn]),
                );
            });
        }))
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| mul * v + add).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += mul * v;
                }
            });
        })
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let x = self.clone();
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for i in 0..g.len() {
                    acc[i] += g[i] * y[i];
                }
            });
        })
    }

    /// Natural logarithm. Errors on any non-positive element; clamp first
    /// (`clamp_min`) when zeros are possible.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "log of non-positive value {v}; clamp_min first"
            )));
        }
        let out: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        let x = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for i in 0..g.len() {
                    acc[i] += g[i] / x.data()[i];
                }
            });
        }))
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for i in 0..g.len() {
                    if x.data()[i] > 0.0 {
                        acc[i] += g[i];
                    }
                }
            });
        })
    }

    /// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
            .collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for i in 0..g.len() {
                    let v = x.data()[i];
                    let t = (C * (v + A * v * v * v)).tanh();
                    let sech2 = 1.0 - t * t;
                    let d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * C * (1.0 + 3.0 * A * v * v);
                    acc[i] += g[i] * d;
                }
            });
        })
    }

    /// y = max(x, min). Gradient passes where x >= min and is zero on the
    /// clamped region.
    pub fn clamp_min(&self, min: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(min)).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for i in 0..g.len() {
                    if x.data()[i] >= min {
                        acc[i] += g[i];
                    }
                }
            });
        })
    }

    /// Elementwise square root. Errors on negative input; note the gradient
    /// 0.5/sqrt(x) diverges at exactly zero, so clamp first when needed.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidArgument(format!("sqrt of negative value {v}")));
        }
        let out: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        let x = self.clone();
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for i in 0..g.len() {
                    acc[i] += g[i] * 0.5 / y[i];
                }
            });
        }))
    }

    /// 2-D matrix product: (m x k) * (k x n) -> (m x n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims disagree: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(m, k, n, self.data(), other.data());
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(vec![m, n], out, &[self, other], move |g| {
            if a.requires_grad() {
                // dA = G * B^T
                let bt = transpose(k, n, b.data());
                a.accumulate_grad_with(|acc| gemm_accumulate(m, n, k, g, &bt, acc));
            }
            if b.requires_grad() {
                // dB = A^T * G
                let at = transpose(m, k, a.data());
                b.accumulate_grad_with(|acc| gemm_accumulate(k, m, n, &at, g, acc));
            }
        }))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose2d expects a 2-D tensor, got {:?}",
                s
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose(r, c, self.data());
        let x = self.clone();
        Ok(Tensor::from_op(vec![c, r], out, &[self], move |g| {
            let gt = transpose(c, r, g);
            x.accumulate_grad(&gt);
        }))
    }

    /// View with a new shape over the same row-major data.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape(),
                self.len(),
                shape
            )));
        }
        let x = self.clone();
        Ok(Tensor::from_op(shape, self.data().to_vec(), &[self], move |g| {
            x.accumulate_grad(g);
        }))
    }

    /// Numerically stabilized softmax along `axis`; lanes sum to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, lane, inner) = self.lane_dims(axis)?;
        let xd = self.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(xd[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (xd[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let x = self.clone();
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dot += g[idx] * y[idx];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            acc[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }))
    }

    fn lane_dims(&self, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {:?}",
                s
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let lane = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        Ok((outer, lane, inner))
    }

    /// Sum over one axis (axis removed) or over everything (`None`, scalar).
    pub fn reduce_sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(axis, false)
    }

    /// Mean over one axis or over everything; backward distributes 1/n.
    pub fn reduce_mean(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(axis, true)
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        match axis {
            None => {
                let n = self.len() as f64;
                let mut sum = 0.0;
                for v in self.data() {
                    sum += v;
                }
                let scale = if mean { 1.0 / n } else { 1.0 };
                let x = self.clone();
                Ok(Tensor::from_op(vec![1], vec![sum * scale], &[self], move |g| {
                    let gv = g[0] * scale;
                    x.accumulate_grad_with(|acc| {
                        for a in acc.iter_mut() {
                            *a += gv;
                        }
                    });
                }))
            }
            Some(axis) => {
                let (outer, lane, inner) = self.lane_dims(axis)?;
                let mut shape = self.shape().to_vec();
                shape.remove(axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                let scale = if mean { 1.0 / lane as f64 } else { 1.0 };
                let xd = self.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..lane {
                        let base = (o * lane + l) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            out[obase + i] += xd[base + i];
                        }
                    }
                }
                if mean {
                    for v in out.iter_mut() {
                        *v *= scale;
                    }
                }
                let x = self.clone();
                Ok(Tensor::from_op(shape, out, &[self], move |g| {
                    x.accumulate_grad_with(|acc| {
                        for o in 0..outer {
                            for l in 0..lane {
                                let base = (o * lane + l) * inner;
                                let obase = o * inner;
                                for i in 0..inner {
                                    acc[base + i] += g[obase + i] * scale;
                                }
                            }
                        }
                    });
                }))
            }
        }
    }

    /// Cross-correlation with zero padding on NCHW input and OCkk kernels.
    /// Output spatial size floor((H + 2p - k)/stride) + 1; differentiable in
    /// both the input and the kernel (im2col + GEMM inside).
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects NCHW input and OCkk weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input {c} vs kernel {wc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidArgument(format!(
                "conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}, pad {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let rows = c * kh * kw;
        let ohw = oh * ow;

        let cols_all: Vec<Vec<f64>> = (0..n)
            .map(|s| im2col(&self.data()[s * c * h * w..], c, h, w, kh, kw, stride, pad, oh, ow))
            .collect();
        let mut out = vec![0.0; n * o * ohw];
        for s in 0..n {
            gemm_accumulate(
                o,
                rows,
                ohw,
                weight.data(),
                &cols_all[s],
                &mut out[s * o * ohw..(s + 1) * o * ohw],
            );
        }

        let x = self.clone();
        let wt = weight.clone();
        Ok(Tensor::from_op(
            vec![n, o, oh, ow],
            out,
            &[self, weight],
            move |g| {
                if wt.requires_grad() {
                    wt.accumulate_grad_with(|acc| {
                        for s in 0..n {
                            // dW += G_s * cols_s^T
                            let colst = transpose(rows, ohw, &cols_all[s]);
                            gemm_accumulate(o, ohw, rows, &g[s * o * ohw..(s + 1) * o * ohw], &colst, acc);
                        }
                    });
                }
                if x.requires_grad() {
                    let wt_t = transpose(o, rows, wt.data());
                    x.accumulate_grad_with(|acc| {
                        for s in 0..n {
                            // dcols = W^T * G_s, then scatter back to the image.
                            let dcols = gemm(rows, o, ohw, &wt_t, &g[s * o * ohw..(s + 1) * o * ohw]);
                            col2im_add(
                                &dcols,
                                &mut acc[s * c * h * w..(s + 1) * c * h * w],
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                pad,
                                oh,
                                ow,
                            );
                        }
                    });
                }
            },
        ))
    }

    /// y[n,c,:,:] = x[n,c,:,:] + b[c].
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 || bias.shape().len() != 1 || bias.len() != xs[1] {
            return Err(Error::ShapeMismatch(format!(
                "add_channel_bias expects NCHW and [C], got {:?} and {:?}",
                xs,
                bias.shape()
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let mut out = self.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let b = bias.data()[ch];
                for v in &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    *v += b;
                }
            }
        }
        let x = self.clone();
        let bt = bias.clone();
        Ok(Tensor::from_op(xs.to_vec(), out, &[self, bias], move |g| {
            x.accumulate_grad(g);
            bt.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for v in &g[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                            sum += v;
                        }
                        acc[ch] += sum;
                    }
                }
            });
        }))
    }

    /// y[r,:] = x[r,:] + b, for 2-D x and bias of length columns.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 || bias.shape().len() != 1 || bias.len() != xs[1] {
            return Err(Error::ShapeMismatch(format!(
                "add_row_bias expects 2-D and [D], got {:?} and {:?}",
                xs,
                bias.shape()
            )));
        }
        let (r, d) = (xs[0], xs[1]);
        let mut out = self.data().to_vec();
        for i in 0..r {
            for j in 0..d {
                out[i * d + j] += bias.data()[j];
            }
        }
        let x = self.clone();
        let bt = bias.clone();
        Ok(Tensor::from_op(xs.to_vec(), out, &[self, bias], move |g| {
            x.accumulate_grad(g);
            bt.accumulate_grad_with(|acc| {
                for i in 0..r {
                    for j in 0..d {
                        acc[j] += g[i * d + j];
                    }
                }
            });
        }))
    }

    /// Training-mode batch normalization over (N, H, W) per channel with
    /// biased variance. Returns the normalized tensor plus the batch mean
    /// and variance for running-estimate updates.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm expects NCHW, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if gamma.len() != c || beta.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm affine params must have length {c}"
            )));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                for v in &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    sum += v;
                }
            }
            mean[ch] = sum / m;
            let mut sq = 0.0;
            for s in 0..n {
                for v in &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    let d = v - mean[ch];
                    sq += d * d;
                }
            }
            var[ch] = sq / m;
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    let xh = (xd[base + i] - mean[ch]) * inv[ch];
                    xhat[base + i] = xh;
                    out[base + i] = gamma.data()[ch] * xh + beta.data()[ch];
                }
            }
        }
        let x = self.clone();
        let ga = gamma.clone();
        let be = beta.clone();
        let inv_c = inv.clone();
        let t = Tensor::from_op(xs.to_vec(), out, &[self, gamma, beta], move |g| {
            // Per channel: sums of g and g*xhat feed both the affine grads and
            // the input grad through the batch statistics.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for i in 0..hw {
                        sum_g[ch] += g[base + i];
                        sum_gx[ch] += g[base + i] * xhat[base + i];
                    }
                }
            }
            ga.accumulate_grad_with(|acc| {
                for ch in 0..c {
                    acc[ch] += sum_gx[ch];
                }
            });
            be.accumulate_grad_with(|acc| {
                for ch in 0..c {
                    acc[ch] += sum_g[ch];
                }
            });
            x.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for ch in 0..c {
                        let coeff = ga.data()[ch] * inv_c[ch];
                        let mg = sum_g[ch] / m;
                        let mgx = sum_gx[ch] / m;
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            acc[base + i] += coeff * (g[base + i] - mg - xhat[base + i] * mgx);
                        }
                    }
                }
            });
        });
        Ok((t, mean, var))
    }

    /// Eval-mode batch normalization against fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm expects NCHW, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c
        {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm_eval stats must have length {c}"
            )));
        }
        let hw = h * w;
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.data();
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    let xh = (xd[base + i] - running_mean[ch]) * inv[ch];
                    xhat[base + i] = xh;
                    out[base + i] = gamma.data()[ch] * xh + beta.data()[ch];
                }
            }
        }
        let x = self.clone();
        let ga = gamma.clone();
        let be = beta.clone();
        Ok(Tensor::from_op(xs.to_vec(), out, &[self, gamma, beta], move |g| {
            x.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for ch in 0..c {
                        let coeff = ga.data()[ch] * inv[ch];
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            acc[base + i] += g[base + i] * coeff;
                        }
                    }
                }
            });
            ga.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            acc[ch] += g[base + i] * xhat[base + i];
                        }
                    }
                }
            });
            be.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            acc[ch] += g[base + i];
                        }
                    }
                }
            });
        }))
    }

    /// Per-row layer normalization on a 2-D (rows x features) tensor.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm expects 2-D, got {:?}",
                xs
            )));
        }
        let (r, d) = (xs[0], xs[1]);
        if gamma.len() != d || beta.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm affine params must have length {d}"
            )));
        }
        let xd = self.data();
        let df = d as f64;
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / df;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
            inv[i] = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * inv[i];
                xhat[i * d + j] = xh;
                out[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
            }
        }
        let x = self.clone();
        let ga = gamma.clone();
        let be = beta.clone();
        Ok(Tensor::from_op(xs.to_vec(), out, &[self, gamma, beta], move |g| {
            ga.accumulate_grad_with(|acc| {
                for i in 0..r {
                    for j in 0..d {
                        acc[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            });
            be.accumulate_grad_with(|acc| {
                for i in 0..r {
                    for j in 0..d {
                        acc[j] += g[i * d + j];
                    }
                }
            });
            x.accumulate_grad_with(|acc| {
                for i in 0..r {
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..d {
                        let gg = g[i * d + j] * ga.data()[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat[i * d + j];
                    }
                    mean_gg /= df;
                    mean_ggx /= df;
                    for j in 0..d {
                        let gg = g[i * d + j] * ga.data()[j];
                        acc[i * d + j] += inv[i] * (gg - mean_gg - xhat[i * d + j] * mean_ggx);
                    }
                }
            });
        }))
    }

    /// Align-corners-false bilinear interpolation to a larger spatial size.
    /// Source coordinate for output index i is max(0, (i + 0.5) * in/out - 0.5),
    /// corners clamped to the valid range.
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "bilinear_upsample expects NCHW, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if out_h < h || out_w < w {
            return Err(Error::InvalidArgument(format!(
                "bilinear_upsample target {out_h}x{out_w} smaller than input {h}x{w}"
            )));
        }
        let rows = axis_lerp(h, out_h);
        let cols = axis_lerp(w, out_w);
        let xd = self.data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oi, &(i0, i1, ti)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, tj)) in cols.iter().enumerate() {
                    let v = (1.0 - ti) * (1.0 - tj) * src[i0 * w + j0]
                        + (1.0 - ti) * tj * src[i0 * w + j1]
                        + ti * (1.0 - tj) * src[i1 * w + j0]
                        + ti * tj * src[i1 * w + j1];
                    dst[oi * out_w + oj] = v;
                }
            }
        }
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, out_h, out_w],
            out,
            &[self],
            move |g| {
                x.accumulate_grad_with(|acc| {
                    for plane in 0..n * c {
                        let src = &mut acc[plane * h * w..(plane + 1) * h * w];
                        let gd = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                        for (oi, &(i0, i1, ti)) in rows.iter().enumerate() {
                            for (oj, &(j0, j1, tj)) in cols.iter().enumerate() {
                                let gv = gd[oi * out_w + oj];
                                src[i0 * w + j0] += (1.0 - ti) * (1.0 - tj) * gv;
                                src[i0 * w + j1] += (1.0 - ti) * tj * gv;
                                src[i1 * w + j0] += ti * (1.0 - tj) * gv;
                                src[i1 * w + j1] += ti * tj * gv;
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Non-overlapping p x p patches of an NCHW image, flattened row-major to
    /// (N * T, C*p*p) with tokens ordered sample-major then grid row-major.
    pub fn extract_patches(&self, p: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "extract_patches expects NCHW, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {p} must divide spatial dims {h}x{w}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let d = c * p * p;
        let xd = self.data();
        let mut out = vec![0.0; n * t * d];
        for s in 0..n {
            for pr in 0..gh {
                for pc in 0..gw {
                    let row = (s * t + pr * gw + pc) * d;
                    for ch in 0..c {
                        for di in 0..p {
                            for dj in 0..p {
                                out[row + (ch * p + di) * p + dj] =
                                    xd[((s * c + ch) * h + pr * p + di) * w + pc * p + dj];
                            }
                        }
                    }
                }
            }
        }
        let x = self.clone();
        Ok(Tensor::from_op(vec![n * t, d], out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for pr in 0..gh {
                        for pc in 0..gw {
                            let row = (s * t + pr * gw + pc) * d;
                            for ch in 0..c {
                                for di in 0..p {
                                    for dj in 0..p {
                                        acc[((s * c + ch) * h + pr * p + di) * w + pc * p + dj] +=
                                            g[row + (ch * p + di) * p + dj];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }))
    }

    /// 2x2 token merging on a sample-major (N*T, D) token matrix laid out on
    /// an (gh x gw) grid per sample: output rows hold the concatenated
    /// [top-left, top-right, bottom-left, bottom-right] source tokens.
    pub fn merge_tokens_2x2(&self, n: usize, gh: usize, gw: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 || xs[0] != n * gh * gw {
            return Err(Error::ShapeMismatch(format!(
                "merge_tokens_2x2 expects ({} x D) tokens, got {:?}",
                n * gh * gw,
                xs
            )));
        }
        if gh % 2 != 0 || gw % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "token grid {gh}x{gw} must be even for 2x2 merging"
            )));
        }
        let d = xs[1];
        let (oh, ow) = (gh / 2, gw / 2);
        let t_in = gh * gw;
        let t_out = oh * ow;
        let xd = self.data();
        let mut out = vec![0.0; n * t_out * 4 * d];
        for s in 0..n {
            for r in 0..oh {
                for cc in 0..ow {
                    let orow = (s * t_out + r * ow + cc) * 4 * d;
                    for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let irow = (s * t_in + (2 * r + dr) * gw + 2 * cc + dc) * d;
                        out[orow + q * d..orow + (q + 1) * d]
                            .copy_from_slice(&xd[irow..irow + d]);
                    }
                }
            }
        }
        let x = self.clone();
        Ok(Tensor::from_op(vec![n * t_out, 4 * d], out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for r in 0..oh {
                        for cc in 0..ow {
                            let orow = (s * t_out + r * ow + cc) * 4 * d;
                            for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                            {
                                let irow = (s * t_in + (2 * r + dr) * gw + 2 * cc + dc) * d;
                                for j in 0..d {
                                    acc[irow + j] += g[orow + q * d + j];
                                }
                            }
                        }
                    }
                }
            });
        }))
    }

    /// Sample-major (N*T, D) tokens on an (gh x gw) grid -> (N, D, gh, gw) map.
    pub fn tokens_to_map(&self, n: usize, gh: usize, gw: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 || xs[0] != n * gh * gw {
            return Err(Error::ShapeMismatch(format!(
                "tokens_to_map expects ({} x D) tokens, got {:?}",
                n * gh * gw,
                xs
            )));
        }
        let d = xs[1];
        let t = gh * gw;
        let xd = self.data();
        let mut out = vec![0.0; n * d * t];
        for s in 0..n {
            for tok in 0..t {
                for j in 0..d {
                    out[(s * d + j) * t + tok] = xd[(s * t + tok) * d + j];
                }
            }
        }
        let x = self.clone();
        Ok(Tensor::from_op(vec![n, d, gh, gw], out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for s in 0..n {
                    for tok in 0..t {
                        for j in 0..d {
                            acc[(s * t + tok) * d + j] += g[(s * d + j) * t + tok];
                        }
                    }
                }
            });
        }))
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 || start + count > xs[0] {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows [{start}, {start}+{count}) out of bounds for {:?}",
                xs
            )));
        }
        let d = xs[1];
        let out = self.data()[start * d..(start + count) * d].to_vec();
        let x = self.clone();
        Ok(Tensor::from_op(vec![count, d], out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for (i, v) in g.iter().enumerate() {
                    acc[start * d + i] += v;
                }
            });
        }))
    }

    /// Contiguous column slice of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, count: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 || start + count > xs[1] {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols [{start}, {start}+{count}) out of bounds for {:?}",
                xs
            )));
        }
        let (r, d) = (xs[0], xs[1]);
        let mut out = vec![0.0; r * count];
        for i in 0..r {
            out[i * count..(i + 1) * count]
                .copy_from_slice(&self.data()[i * d + start..i * d + start + count]);
        }
        let x = self.clone();
        Ok(Tensor::from_op(vec![r, count], out, &[self], move |g| {
            x.accumulate_grad_with(|acc| {
                for i in 0..r {
                    for j in 0..count {
                        acc[i * d + start + j] += g[i * count + j];
                    }
                }
            });
        }))
    }

    /// Row-wise concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let d = parts[0].shape()[1];
        let mut rows = 0;
        for p in parts {
            if p.shape().len() != 2 || p.shape()[1] != d {
                return Err(Error::ShapeMismatch(
                    "concat_rows requires matching column counts".into(),
                ));
            }
            rows += p.shape()[0];
        }
        let mut out = Vec::with_capacity(rows * d);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let handles: Vec<Tensor> = parts.to_vec();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::from_op(vec![rows, d], out, &refs, move |g| {
            let mut off = 0;
            for p in &handles {
                let len = p.len();
                p.accumulate_grad(&g[off..off + len]);
                off += len;
            }
        }))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let r = parts[0].shape()[0];
        let mut cols = 0;
        for p in parts {
            if p.shape().len() != 2 || p.shape()[0] != r {
                return Err(Error::ShapeMismatch(
                    "concat_cols requires matching row counts".into(),
                ));
            }
            cols += p.shape()[1];
        }
        let mut out = vec![0.0; r * cols];
        let mut off = 0;
        for p in parts {
            let d = p.shape()[1];
            for i in 0..r {
                out[i * cols + off..i * cols + off + d]
                    .copy_from_slice(&p.data()[i * d..(i + 1) * d]);
            }
            off += d;
        }
        let handles: Vec<Tensor> = parts.to_vec();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::from_op(vec![r, cols], out, &refs, move |g| {
            let mut off = 0;
            for p in &handles {
                let d = p.shape()[1];
                p.accumulate_grad_with(|acc| {
                    for i in 0..r {
                        for j in 0..d {
                            acc[i * d + j] += g[i * cols + off + j];
                        }
                    }
                });
                off += d;
            }
        }))
    }

    /// Channel-axis concatenation of NCHW tensors with matching N, H, W.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels expects matching NCHW apart from C, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (n, c1, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let c2 = sb[1];
        let hw = h * w;
        let mut out = vec![0.0; n * (c1 + c2) * hw];
        for s in 0..n {
            let dst = &mut out[s * (c1 + c2) * hw..];
            dst[..c1 * hw].copy_from_slice(&self.data()[s * c1 * hw..(s + 1) * c1 * hw]);
            dst[c1 * hw..(c1 + c2) * hw]
                .copy_from_slice(&other.data()[s * c2 * hw..(s + 1) * c2 * hw]);
        }
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            vec![n, c1 + c2, h, w],
            out,
            &[self, other],
            move |g| {
                a.accumulate_grad_with(|acc| {
                    for s in 0..n {
                        let gs = &g[s * (c1 + c2) * hw..];
                        for i in 0..c1 * hw {
                            acc[s * c1 * hw + i] += gs[i];
                        }
                    }
                });
                b.accumulate_grad_with(|acc| {
                    for s in 0..n {
                        let gs = &g[s * (c1 + c2) * hw + c1 * hw..];
                        for i in 0..c2 * hw {
                            acc[s * c2 * hw + i] += gs[i];
                        }
                    }
                });
            },
        ))
    }
}

/// Per-axis bilinear source indices and fractional weights.
fn axis_lerp(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = (ch * h + ih as usize) * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[base + oi * ow + oj] = x[src_row + iw as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    x: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = (ch * h + ih as usize) * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        x[dst_row + iw as usize] += cols[base + oi * ow + oj];
                    }
                }
            }
        }
    }
}
