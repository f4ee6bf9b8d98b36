//! Forward and backward kernels on raw tensors. The tape in [`crate::tape`]
//! records calls into these and replays the matching backward kernel.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, strides, Tensor};

/// Output geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        pad: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 4 {
            return Err(TensorError::shape(
                OP,
                format!("input must be [N,C,A,B], got {input:?}"),
            ));
        }
        if kernel.len() != 4 {
            return Err(TensorError::shape(
                OP,
                format!("kernel must be [C_out,C_in,kA,kB], got {kernel:?}"),
            ));
        }
        if kernel[1] != input[1] {
            return Err(TensorError::shape(
                OP,
                format!(
                    "input channel dimension is {} but kernel expects {}",
                    input[1], kernel[1]
                ),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::invalid(OP, "strides must be >= 1"));
        }
        let (h, w) = (input[2], input[3]);
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh > h + 2 * pad.0 {
            return Err(TensorError::shape(
                OP,
                format!(
                    "kernel height {kh} exceeds padded input height {}",
                    h + 2 * pad.0
                ),
            ));
        }
        if kw > w + 2 * pad.1 {
            return Err(TensorError::shape(
                OP,
                format!(
                    "kernel width {kw} exceeds padded input width {}",
                    w + 2 * pad.1
                ),
            ));
        }
        Ok(ConvGeom {
            n: input[0],
            c_in: input[1],
            h,
            w,
            c_out: kernel[0],
            kh,
            kw,
            ph: pad.0,
            pw: pad.1,
            sh: stride.0,
            sw: stride.1,
            oh: (h + 2 * pad.0 - kh) / stride.0 + 1,
            ow: (w + 2 * pad.1 - kw) / stride.1 + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output positions `o` along one axis for which
    /// `o * stride + k - pad` lies inside `[0, extent)`.
    fn valid_range(
        out: usize,
        stride: usize,
        k: usize,
        pad: usize,
        extent: usize,
    ) -> (usize, usize) {
        // smallest o with o*stride + k >= pad
        let lo = if k >= pad {
            0
        } else {
            (pad - k).div_ceil(stride)
        };
        // largest o with o*stride + k - pad <= extent - 1
        let hi = if k > extent - 1 + pad {
            0
        } else {
            ((extent - 1 + pad - k) / stride + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

/// Unfold one sample `[C_in,H,W]` into `cols[C_in*kh*kw, oh*ow]`.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = ConvGeom::valid_range(g.oh, g.sh, ki, g.ph, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = ConvGeom::valid_range(g.ow, g.sw, kj, g.pw, g.w);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        line.fill(S::zero());
                        continue;
                    }
                    let iy = oy * g.sh + ki - g.ph;
                    line[..ox_lo].fill(S::zero());
                    line[ox_hi..].fill(S::zero());
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    if g.sw == 1 {
                        let ix0 = ox_lo + kj - g.pw;
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * g.sw + kj - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Fold `cols` back onto one sample, accumulating into `dx[C_in,H,W]`.
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = ConvGeom::valid_range(g.oh, g.sh, ki, g.ph, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = ConvGeom::valid_range(g.ow, g.sw, kj, g.pw, g.w);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.sh + ki - g.ph;
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.sw + kj - g.pw] += line[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation `out[n,o,y,x] = b[o] + sum_{c,i,j} in[n,c,y*s+i-p, x*s+j-p] * k[o,c,i,j]`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    pad: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<S>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), pad, stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "bias shape {:?} does not match output channels {}",
                    b.shape(),
                    g.c_out
                ),
            ));
        }
    }
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![S::zero(); g.n * g.c_out * plane];
    let mut cols = vec![S::zero(); patch * plane];
    let in_len = g.c_in * g.h * g.w;
    for n in 0..g.n {
        im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, &mut cols);
        let dst = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let beta = if bias.is_some() { S::one() } else { S::zero() };
        gemm(
            g.c_out,
            patch,
            plane,
            S::one(),
            kernel.data(),
            false,
            &cols,
            false,
            beta,
            dst,
        );
    }
    Tensor::from_vec(vec![g.n, g.c_out, g.oh, g.ow], out)
}

fn conv2d_gemm_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    g: &ConvGeom,
    mut dx: Option<&mut [S]>,
    mut dk: Option<&mut [S]>,
) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![S::zero(); patch * plane];
    let mut dcols = vec![S::zero(); patch * plane];
    for n in 0..g.n {
        let go = &grad_out.data()[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let Some(dk) = dk.as_deref_mut() {
            im2col(&input.data()[n * in_len..(n + 1) * in_len], g, &mut cols);
            // dk[o, p] += go[o, q] * cols[p, q]
            gemm(
                g.c_out,
                plane,
                patch,
                S::one(),
                go,
                false,
                &cols,
                true,
                S::one(),
                dk,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[p, q] = k[o, p]^T go[o, q]
            gemm(
                patch,
                g.c_out,
                plane,
                S::one(),
                kernel.data(),
                true,
                go,
                false,
                S::zero(),
                &mut dcols,
            );
            col2im(&dcols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

pub struct ConvGrads<S> {
    pub input: Option<Tensor<S>>,
    pub kernel: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    pad: (usize, usize),
    stride: (usize, usize),
    need: (bool, bool, bool),
) -> Result<ConvGrads<S>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), pad, stride)?;
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let mut dk = need.1.then(|| vec![S::zero(); g.c_out * patch]);
    let mut dx = need.0.then(|| vec![S::zero(); g.n * in_len]);
    conv2d_gemm_backward(
        input,
        kernel,
        grad_out,
        &g,
        dx.as_deref_mut(),
        dk.as_deref_mut(),
    );
    let db = need.2.then(|| {
        let mut db = vec![S::zero(); g.c_out];
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let base = (n * g.c_out + o) * plane;
                *acc += grad_out.data()[base..base + plane]
                    .iter()
                    .copied()
                    .sum::<S>();
            }
        }
        db
    });
    Ok(ConvGrads {
        input: dx
            .map(|d| Tensor::from_vec(input.shape().to_vec(), d))
            .transpose()?,
        kernel: dk
            .map(|d| Tensor::from_vec(kernel.shape().to_vec(), d))
            .transpose()?,
        bias: db.map(|d| Tensor::from_vec(vec![g.c_out], d)).transpose()?,
    })
}

/// Window max over the last two axes. Returns the output and, per output
/// element, the flat input index of the first maximum.
pub fn maxpool2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<S>, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    if input.rank() != 4 {
        return Err(TensorError::shape(
            OP,
            format!("input must be [N,C,A,B], got {:?}", input.shape()),
        ));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(TensorError::invalid(
            OP,
            "kernel and stride extents must be >= 1",
        ));
    }
    if kernel.0 > h || kernel.1 > w {
        return Err(TensorError::shape(
            OP,
            format!("kernel {kernel:?} larger than input plane {h}x{w}"),
        ));
    }
    let oh = (h - kernel.0) / stride.0 + 1;
    let ow = (w - kernel.1) / stride.1 + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * stride.0 * w + ox * stride.1;
                let mut best = x[best_i];
                for i in 0..kernel.0 {
                    let row = base + (oy * stride.0 + i) * w + ox * stride.1;
                    for j in 0..kernel.1 {
                        if x[row + j] > best {
                            best = x[row + j];
                            best_i = row + j;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, oh, ow], out)?, arg))
}

/// Scatter `grad_out` to the recorded argmax positions.
pub fn scatter_argmax<S: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// Reduction applied by [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReduceMode {
    Max,
    Mean,
    /// Generalized mean `(mean(max(x,0)^p))^(1/p)`.
    Gem(f64),
}

/// Saved state needed to differentiate a reduction.
#[derive(Debug, Clone)]
pub enum ReduceSaved {
    Max(Vec<usize>),
    Mean,
    Gem,
}

/// Output shape and per-input output offsets for a reduction over `axes`.
pub(crate) fn reduce_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(TensorError::Axis {
                op: "reduce",
                axis: a,
                rank,
            });
        }
        if reduced[a] {
            return Err(TensorError::invalid("reduce", format!("axis {a} repeated")));
        }
        reduced[a] = true;
    }
    if axes.is_empty() {
        return Err(TensorError::invalid("reduce", "empty reduction axis list"));
    }
    let out_shape: Vec<usize> = (0..rank)
        .filter(|&a| !reduced[a])
        .map(|a| shape[a])
        .collect();
    let out_strides = strides(&out_shape);
    let mut per_axis = vec![0usize; rank];
    let mut k = 0;
    for a in 0..rank {
        if !reduced[a] {
            per_axis[a] = out_strides[k];
            k += 1;
        }
    }
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for a in (0..rank).rev() {
            idx[a] += 1;
            off += per_axis[a];
            if idx[a] < shape[a] {
                break;
            }
            off -= per_axis[a] * shape[a];
            idx[a] = 0;
        }
    }
    Ok((out_shape, map))
}

/// Reduce `input` over `axes` (removed from the output shape).
pub fn reduce<S: Scalar>(
    input: &Tensor<S>,
    axes: &[usize],
    mode: ReduceMode,
) -> Result<(Tensor<S>, ReduceSaved)> {
    let (out_shape, map) = reduce_plan(input.shape(), axes)?;
    let out_len = numel(&out_shape);
    let count = input.numel() / out_len;
    let x = input.data();
    match mode {
        ReduceMode::Max => {
            let mut best = vec![S::neg_infinity(); out_len];
            let mut arg = vec![usize::MAX; out_len];
            for (i, (&v, &o)) in x.iter().zip(&map).enumerate() {
                if arg[o] == usize::MAX || v > best[o] {
                    best[o] = v;
                    arg[o] = i;
                }
            }
            Ok((Tensor::from_vec(out_shape, best)?, ReduceSaved::Max(arg)))
        }
        ReduceMode::Mean => {
            let mut acc = vec![S::zero(); out_len];
            for (&v, &o) in x.iter().zip(&map) {
                acc[o] += v;
            }
            let inv = S::one() / S::lit(count as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
            Ok((Tensor::from_vec(out_shape, acc)?, ReduceSaved::Mean))
        }
        ReduceMode::Gem(p) => {
            if !(p >= 1.0) {
                return Err(TensorError::invalid(
                    "reduce",
                    format!("gem exponent {p} must be >= 1"),
                ));
            }
            let p_s = S::lit(p);
            // scale by the group max so x^p cannot overflow
            let mut top = vec![S::zero(); out_len];
            for (&v, &o) in x.iter().zip(&map) {
                if v > top[o] {
                    top[o] = v;
                }
            }
            let mut acc = vec![S::zero(); out_len];
            for (&v, &o) in x.iter().zip(&map) {
                if v > S::zero() {
                    acc[o] += (v / top[o]).powf(p_s);
                }
            }
            let inv = S::one() / S::lit(count as f64);
            let out: Vec<S> = acc
                .iter()
                .zip(&top)
                .map(|(&a, &t)| {
                    if t > S::zero() {
                        t * (a * inv).powf(S::one() / p_s)
                    } else {
                        S::zero()
                    }
                })
                .collect();
            Ok((Tensor::from_vec(out_shape, out)?, ReduceSaved::Gem))
        }
    }
}

pub fn reduce_backward<S: Scalar>(
    input: &Tensor<S>,
    axes: &[usize],
    mode: ReduceMode,
    saved: &ReduceSaved,
    output: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut dx = Tensor::zeros(input.shape());
    match saved {
        ReduceSaved::Max(arg) => {
            let d = dx.data_mut();
            for (&i, &g) in arg.iter().zip(grad_out.data()) {
                d[i] += g;
            }
        }
        ReduceSaved::Mean => {
            let (_, map) = reduce_plan(input.shape(), axes)?;
            let inv = S::one() / S::lit((input.numel() / output.numel()) as f64);
            for (d, &o) in dx.data_mut().iter_mut().zip(&map) {
                *d = grad_out.data()[o] * inv;
            }
        }
        ReduceSaved::Gem => {
            let p = match mode {
                ReduceMode::Gem(p) => S::lit(p),
                _ => unreachable!("gem state without gem mode"),
            };
            let (_, map) = reduce_plan(input.shape(), axes)?;
            let n = S::lit((input.numel() / output.numel()) as f64);
            // d y / d x_i = (x_i / y)^(p-1) / n  for x_i > 0
            for ((d, &v), &o) in dx.data_mut().iter_mut().zip(input.data()).zip(&map) {
                let y = output.data()[o];
                if v > S::zero() && y > S::zero() {
                    *d = grad_out.data()[o] * (v / y).powf(p - S::one()) / n;
                }
            }
        }
    }
    Ok(dx)
}

/// Saved per-channel statistics from a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased variance used for normalization.
    pub var: Vec<S>,
    pub inv_std: Vec<S>,
    /// Elements per channel.
    pub count: usize,
}

fn channel_layout(shape: &[usize], op: &'static str, channels: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::shape(
            op,
            format!("input must be [N,C,...], got {shape:?}"),
        ));
    }
    if shape[1] != channels {
        return Err(TensorError::shape(
            op,
            format!(
                "channel dimension is {} but parameters have {channels}",
                shape[1]
            ),
        ));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

/// Normalize with batch statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm_train<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, BatchStats<S>)> {
    let c = gamma.numel();
    let (n, inner) = channel_layout(input.shape(), "batchnorm", c)?;
    if beta.numel() != c {
        return Err(TensorError::shape(
            "batchnorm",
            "gamma and beta lengths differ",
        ));
    }
    if !(eps > 0.0) {
        return Err(TensorError::invalid("batchnorm", "eps must be positive"));
    }
    let x = input.data();
    let count = n * inner;
    let inv_count = S::one() / S::lit(count as f64);
    let mut mean = vec![S::zero(); c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (b * c + ch) * inner;
            *m += x[base..base + inner].iter().copied().sum::<S>();
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_count);
    let mut var = vec![S::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let m = mean[ch];
            var[ch] += x[base..base + inner]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<S>();
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_count);
    let eps_s = S::lit(eps);
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps_s).sqrt()).collect();
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let (m, is, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + inner {
                out[i] = gm * (x[i] - m) * is + bt;
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape().to_vec(), out)?,
        BatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    ))
}

/// Gradients of [`batchnorm_train`] w.r.t. input, gamma and beta.
pub fn batchnorm_train_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    stats: &BatchStats<S>,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let c = gamma.numel();
    let n = input.dim(0);
    let inner = input.numel() / (n * c);
    let x = input.data();
    let g = grad_out.data();
    let mut sum_g = vec![S::zero(); c];
    let mut sum_gx = vec![S::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let (m, is) = (stats.mean[ch], stats.inv_std[ch]);
            for i in base..base + inner {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * (x[i] - m) * is;
            }
        }
    }
    let count = S::lit(stats.count as f64);
    let mut dx = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let (m, is, gm) = (stats.mean[ch], stats.inv_std[ch], gamma.data()[ch]);
            let k = gm * is / count;
            for i in base..base + inner {
                let xhat = (x[i] - m) * is;
                dx[i] = k * (count * g[i] - sum_g[ch] - xhat * sum_gx[ch]);
            }
        }
    }
    (
        Tensor::from_vec(input.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::from_vec(vec![c], sum_gx).expect("channel vector"),
        Tensor::from_vec(vec![c], sum_g).expect("channel vector"),
    )
}

/// Per-channel affine map `scale[c] * x + shift[c]` over `[N,C,...]`.
pub fn channel_affine<S: Scalar>(input: &Tensor<S>, scale: &[S], shift: &[S]) -> Result<Tensor<S>> {
    let c = scale.len();
    let (n, inner) = channel_layout(input.shape(), "channel_affine", c)?;
    let x = input.data();
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                out[i] = scale[ch] * x[i] + shift[ch];
            }
        }
    }
    Tensor::from_vec(input.shape().to_vec(), out)
}

/// Batched matrix product `x[G,N,Din] * w[G,Dout,Din]^T (+ b[G,Dout])`.
pub fn batched_linear<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    const OP: &str = "linear";
    if x.rank() != 3 || w.rank() != 3 {
        return Err(TensorError::shape(
            OP,
            format!(
                "expected x [G,N,Din] and w [G,Dout,Din], got {:?} and {:?}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    let (g, n, din) = (x.dim(0), x.dim(1), x.dim(2));
    if w.dim(0) != g {
        return Err(TensorError::shape(
            OP,
            format!("group dimension {} vs weight groups {}", g, w.dim(0)),
        ));
    }
    if w.dim(2) != din {
        return Err(TensorError::shape(
            OP,
            format!(
                "input feature dimension is {din} but weight expects {}",
                w.dim(2)
            ),
        ));
    }
    let dout = w.dim(1);
    if let Some(b) = b {
        if b.shape() != [g, dout] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {:?}, expected [{g}, {dout}]", b.shape()),
            ));
        }
    }
    let mut out = vec![S::zero(); g * n * dout];
    for gi in 0..g {
        let dst = &mut out[gi * n * dout..(gi + 1) * n * dout];
        if let Some(b) = b {
            let bias = &b.data()[gi * dout..(gi + 1) * dout];
            for row in dst.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        gemm(
            n,
            din,
            dout,
            S::one(),
            &x.data()[gi * n * din..(gi + 1) * n * din],
            false,
            &w.data()[gi * dout * din..(gi + 1) * dout * din],
            true,
            beta,
            dst,
        );
    }
    Tensor::from_vec(vec![g, n, dout], out)
}

pub fn batched_linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad_out: &Tensor<S>,
    need: (bool, bool, bool),
) -> (Option<Tensor<S>>, Option<Tensor<S>>, Option<Tensor<S>>) {
    let (g, n, din) = (x.dim(0), x.dim(1), x.dim(2));
    let dout = w.dim(1);
    let go = grad_out.data();
    let dx = need.0.then(|| {
        let mut dx = vec![S::zero(); g * n * din];
        for gi in 0..g {
            gemm(
                n,
                dout,
                din,
                S::one(),
                &go[gi * n * dout..(gi + 1) * n * dout],
                false,
                &w.data()[gi * dout * din..(gi + 1) * dout * din],
                false,
                S::zero(),
                &mut dx[gi * n * din..(gi + 1) * n * din],
            );
        }
        Tensor::from_vec(x.shape().to_vec(), dx).expect("shape preserved")
    });
    let dw = need.1.then(|| {
        let mut dw = vec![S::zero(); g * dout * din];
        for gi in 0..g {
            gemm(
                dout,
                n,
                din,
                S::one(),
                &go[gi * n * dout..(gi + 1) * n * dout],
                true,
                &x.data()[gi * n * din..(gi + 1) * n * din],
                false,
                S::zero(),
                &mut dw[gi * dout * din..(gi + 1) * dout * din],
            );
        }
        Tensor::from_vec(w.shape().to_vec(), dw).expect("shape preserved")
    });
    let db = need.2.then(|| {
        let mut db = vec![S::zero(); g * dout];
        for gi in 0..g {
            for r in 0..n {
                let row = &go[(gi * n + r) * dout..(gi * n + r + 1) * dout];
                for (acc, &v) in db[gi * dout..(gi + 1) * dout].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        Tensor::from_vec(vec![g, dout], db).expect("bias shape")
    });
    (dx, dw, db)
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::shape("log_softmax", "scalar input"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(last) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Euclidean distances between rows within each group: `[G,B,D] -> [G,B,B]`.
pub fn pairwise_distance<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(TensorError::shape(
            "pairwise_distance",
            format!("expected [G,B,D], got {:?}", x.shape()),
        ));
    }
    let (g, b, d) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = vec![S::zero(); g * b * b];
    let v = x.data();
    for gi in 0..g {
        for i in 0..b {
            let xi = &v[(gi * b + i) * d..(gi * b + i + 1) * d];
            for j in (i + 1)..b {
                let xj = &v[(gi * b + j) * d..(gi * b + j + 1) * d];
                let dist = xi
                    .iter()
                    .zip(xj)
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum::<S>()
                    .sqrt();
                out[(gi * b + i) * b + j] = dist;
                out[(gi * b + j) * b + i] = dist;
            }
        }
    }
    Tensor::from_vec(vec![g, b, b], out)
}

pub fn pairwise_distance_backward<S: Scalar>(
    x: &Tensor<S>,
    dist: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let (g, b, d) = (x.dim(0), x.dim(1), x.dim(2));
    let v = x.data();
    let mut dx = vec![S::zero(); v.len()];
    for gi in 0..g {
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let k = (gi * b + i) * b + j;
                let dij = dist.data()[k];
                if dij <= S::zero() {
                    continue;
                }
                // d(dist_ij)/d x_i = (x_i - x_j) / dist_ij, and symmetric in (i, j)
                let coef = (grad_out.data()[k] + grad_out.data()[(gi * b + j) * b + i]) / dij;
                if coef == S::zero() {
                    continue;
                }
                let (ri, rj) = ((gi * b + i) * d, (gi * b + j) * d);
                for t in 0..d {
                    dx[ri + t] += coef * (v[ri + t] - v[rj + t]);
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), dx).expect("shape preserved")
}
