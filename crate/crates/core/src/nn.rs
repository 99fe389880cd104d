//! Layer primitives with explicit backward passes.
//!
//! Convolutions run as im2col followed by a dense matrix product. Every
//! backward function *accumulates* into the gradient buffers it is handed, so
//! a parameter used on several paths (the residual main layers feed both the
//! segmentation head and the projector) sums its contributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `c = a' * b' + beta * c` for row-major operands, where `'` is an optional
/// transpose. `a'` is `m x k`, `b'` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides can reach.
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

/// Standard normal draw via Box-Muller.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Anything that owns named parameter buffers.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.extend_from_slice(p));
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, p| p.iter_mut().for_each(|v| *v = value));
    }

    /// Logical shape of every buffer, in `visit` order.
    fn visit_shapes(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>)) {
        self.visit(prefix, &mut |name, p| f(name, vec![p.len()]));
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// 2D convolution over NHWC maps. Weights are stored as a
/// `(kernel * kernel * in_ch) x out_ch` matrix in `[ky][kx][ci]` row order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-initialised convolution with "same"-style padding
    /// `dilation * (kernel - 1) / 2`.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = (0..fan_in * out_ch).map(|_| normal(rng) * std).collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn pointwise<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, 1, 1, 1, rng)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding - span) / self.stride + 1;
        let ow = (w + 2 * self.padding - span) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.in_ch {
            return shape_err(format!("conv expects {} channels, got {}", self.in_ch, x.c));
        }
        let span = self.dilation * (self.kernel - 1) + 1;
        if x.h + 2 * self.padding < span || x.w + 2 * self.padding < span {
            return shape_err(format!("input {}x{} smaller than kernel span {span}", x.h, x.w));
        }
        Ok(())
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let cols = k * k * x.c;
        let mut col = vec![0.0; x.n * oh * ow * cols];
        let pad = self.padding as isize;
        for b in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * cols;
                    for ky in 0..k {
                        let iy = (oy * self.stride) as isize - pad + (ky * self.dilation) as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix =
                                (ox * self.stride) as isize - pad + (kx * self.dilation) as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let dst = row + (ky * k + kx) * x.c;
                            col[dst..dst + x.c].copy_from_slice(x.pixel(b, iy as usize, ix as usize));
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], dx: &mut Tensor, oh: usize, ow: usize) {
        let k = self.kernel;
        let c = dx.c;
        let cols = k * k * c;
        let pad = self.padding as isize;
        for b in 0..dx.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * cols;
                    for ky in 0..k {
                        let iy = (oy * self.stride) as isize - pad + (ky * self.dilation) as isize;
                        if iy < 0 || iy >= dx.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix =
                                (ox * self.stride) as isize - pad + (kx * self.dilation) as isize;
                            if ix < 0 || ix >= dx.w as isize {
                                continue;
                            }
                            let src = row + (ky * k + kx) * c;
                            let dst = dx.offset(b, iy as usize, ix as usize);
                            for ch in 0..c {
                                dx.data[dst + ch] += col[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.h, x.w);
        let rows = x.n * oh * ow;
        let mut out = Tensor::zeros(x.n, oh, ow, self.out_ch);
        for row in out.data.chunks_exact_mut(self.out_ch) {
            row.copy_from_slice(&self.bias);
        }
        let kdim = self.kernel * self.kernel * self.in_ch;
        if self.is_pointwise() {
            gemm(rows, kdim, self.out_ch, &x.data, false, &self.weight, false, 1.0, &mut out.data);
        } else {
            let col = self.im2col(x, oh, ow);
            gemm(rows, kdim, self.out_ch, &col, false, &self.weight, false, 1.0, &mut out.data);
        }
        Ok(out)
    }

    /// Backpropagates `dout` through the layer evaluated at input `x`.
    ///
    /// Parameter gradients are accumulated into `grad` when given; the input
    /// gradient is only materialised when `want_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        dout: &Tensor,
        grad: Option<&mut Conv2d>,
        want_dx: bool,
    ) -> Result<Option<Tensor>> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.h, x.w);
        if dout.shape() != [x.n, oh, ow, self.out_ch] {
            return shape_err(format!(
                "conv backward: dout {:?}, expected {:?}",
                dout.shape(),
                [x.n, oh, ow, self.out_ch]
            ));
        }
        let rows = x.n * oh * ow;
        let kdim = self.kernel * self.kernel * self.in_ch;
        let pointwise = self.is_pointwise();
        let col_owned;
        let col: &[f64] = if pointwise {
            &x.data
        } else if grad.is_some() {
            col_owned = self.im2col(x, oh, ow);
            &col_owned
        } else {
            &[]
        };
        if let Some(g) = grad {
            gemm(kdim, rows, self.out_ch, col, true, &dout.data, false, 1.0, &mut g.weight);
            for row in dout.rows() {
                for (gb, d) in g.bias.iter_mut().zip(row) {
                    *gb += d;
                }
            }
        }
        if !want_dx {
            return Ok(None);
        }
        let mut dcol = vec![0.0; rows * kdim];
        gemm(rows, self.out_ch, kdim, &dout.data, false, &self.weight, true, 0.0, &mut dcol);
        if pointwise {
            return Ok(Some(Tensor::from_vec(x.n, x.h, x.w, x.c, dcol)?));
        }
        let mut dx = Tensor::zeros(x.n, x.h, x.w, x.c);
        self.col2im(&dcol, &mut dx, oh, ow);
        Ok(Some(dx))
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn visit_shapes(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>)) {
        f(join(prefix, "weight"), vec![self.kernel, self.kernel, self.in_ch, self.out_ch]);
        f(join(prefix, "bias"), vec![self.out_ch]);
    }
}

pub fn relu(mut x: Tensor) -> Tensor {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient of ReLU given its *output* `y`.
pub fn relu_backward(y: &Tensor, mut dout: Tensor) -> Tensor {
    dout.data.iter_mut().zip(&y.data).for_each(|(d, &v)| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dout
}

/// Per-axis interpolation table for half-pixel-centre bilinear resizing.
fn axis_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
/// Interpolation weights at each output position sum to one.
pub fn upsample_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    if x.h == oh && x.w == ow {
        return x.clone();
    }
    let ty = axis_table(x.h, oh);
    let tx = axis_table(x.w, ow);
    let mut out = Tensor::zeros(x.n, oh, ow, x.c);
    for b in 0..x.n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let w00 = (1.0 - ly) * (1.0 - lx);
                let w01 = (1.0 - ly) * lx;
                let w10 = ly * (1.0 - lx);
                let w11 = ly * lx;
                let (p00, p01, p10, p11) =
                    (x.offset(b, y0, x0), x.offset(b, y0, x1), x.offset(b, y1, x0), x.offset(b, y1, x1));
                let dst = out.offset(b, oy, ox);
                for ch in 0..x.c {
                    out.data[dst + ch] = w00 * x.data[p00 + ch]
                        + w01 * x.data[p01 + ch]
                        + w10 * x.data[p10 + ch]
                        + w11 * x.data[p11 + ch];
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(dout: &Tensor, ih: usize, iw: usize) -> Tensor {
    if dout.h == ih && dout.w == iw {
        return dout.clone();
    }
    let ty = axis_table(ih, dout.h);
    let tx = axis_table(iw, dout.w);
    let mut dx = Tensor::zeros(dout.n, ih, iw, dout.c);
    for b in 0..dout.n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let w = [
                    ((1.0 - ly) * (1.0 - lx), dx.offset(b, y0, x0)),
                    ((1.0 - ly) * lx, dx.offset(b, y0, x1)),
                    (ly * (1.0 - lx), dx.offset(b, y1, x0)),
                    (ly * lx, dx.offset(b, y1, x1)),
                ];
                let src = dout.offset(b, oy, ox);
                for (wt, dst) in w {
                    for ch in 0..dout.c {
                        dx.data[dst + ch] += wt * dout.data[src + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Batch normalisation over rows of an `[rows x channels]` map using batch
/// statistics. Only used inside the optional two-layer projector, which is
/// discarded after training, so no running statistics are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Saved forward state for [`BatchNorm::backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self { gamma: vec![1.0; channels], beta: vec![0.0; channels], eps: 1e-5 }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: vec![0.0; self.gamma.len()], beta: vec![0.0; self.beta.len()], eps: self.eps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BatchNormCache)> {
        let c = self.gamma.len();
        if x.c != c {
            return shape_err(format!("batch norm over {c} channels, got {}", x.c));
        }
        let m = x.pixels() as f64;
        let mut mean = vec![0.0; c];
        for row in x.rows() {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; c];
        for row in x.rows() {
            for ch in 0..c {
                var[ch] += (row[ch] - mean[ch]).powi(2);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m + self.eps).sqrt()).collect();
        let mut normalized = x.clone();
        let mut out = x.clone();
        for (nrow, orow) in normalized.data.chunks_exact_mut(c).zip(out.data.chunks_exact_mut(c)) {
            for ch in 0..c {
                let xh = (nrow[ch] - mean[ch]) * inv_std[ch];
                nrow[ch] = xh;
                orow[ch] = self.gamma[ch] * xh + self.beta[ch];
            }
        }
        Ok((out, BatchNormCache { normalized, inv_std }))
    }

    pub fn backward(&self, cache: &BatchNormCache, dout: &Tensor, grad: Option<&mut BatchNorm>) -> Tensor {
        let c = self.gamma.len();
        let m = dout.pixels() as f64;
        let mut sum_d = vec![0.0; c];
        let mut sum_dx = vec![0.0; c];
        for (drow, nrow) in dout.rows().zip(cache.normalized.rows()) {
            for ch in 0..c {
                sum_d[ch] += drow[ch];
                sum_dx[ch] += drow[ch] * nrow[ch];
            }
        }
        if let Some(g) = grad {
            for ch in 0..c {
                g.gamma[ch] += sum_dx[ch];
                g.beta[ch] += sum_d[ch];
            }
        }
        let mut dx = dout.clone();
        for (drow, nrow) in dx.data.chunks_exact_mut(c).zip(cache.normalized.rows()) {
            for ch in 0..c {
                drow[ch] = self.gamma[ch] * cache.inv_std[ch] / m
                    * (m * drow[ch] - sum_d[ch] - nrow[ch] * sum_dx[ch]);
            }
        }
        dx
    }
}

impl ParamSet for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Row-wise L2 normalisation. Returns the normalised map and the row norms.
pub fn l2_normalize(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.pixels());
    for row in out.data.chunks_exact_mut(x.c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    (out, norms)
}

/// Gradient of row-wise L2 normalisation: `(d - u (u . d)) / |x|`.
pub fn l2_normalize_backward(unit: &Tensor, norms: &[f64], dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    for ((drow, urow), norm) in dx.data.chunks_exact_mut(unit.c).zip(unit.rows()).zip(norms) {
        let dot: f64 = drow.iter().zip(urow).map(|(d, u)| d * u).sum();
        for (d, u) in drow.iter_mut().zip(urow) {
            *d = (*d - u * dot) / norm;
        }
    }
    dx
}
