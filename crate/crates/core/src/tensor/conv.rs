//! 2D convolution (cross-correlation, no kernel flip) and its transpose.
//!
//! Both directions lower to a GEMM over an im2col buffer. A convolution reads
//! patches of a "big" spatial grid and produces one value per position of a
//! "small" grid; the transposed convolution scatters the small grid back onto
//! the big one, so the two share the same patch geometry.

use super::gemm::{gemm, transpose};
use super::{expect_rank, Real, Result, Tensor, TensorError};

/// Convolution weights `(out_channels, in_channels, kH, kW)`, per-output-channel
/// bias, stride and symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        expect_rank("conv params", weights.shape(), 4)?;
        expect_rank("conv params", bias.shape(), 1)?;
        if bias.len() != weights.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv params",
                axis: "bias length",
                expected: weights.shape()[0],
                actual: bias.len(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidParams {
                op: "conv params",
                reason: "stride must be positive".into(),
            });
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Gradients returned by the convolution backward kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `floor((size + 2·pad − kernel) / stride) + 1`, or `None` if below 1.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (size + 2 * pad) as i64 - kernel as i64;
    if span < 0 {
        return None;
    }
    Some(span as usize / stride + 1)
}

/// `(size − 1)·stride − 2·pad + kernel`, or `None` if below 1.
pub fn conv_transpose_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let out = (size as i64 - 1) * stride as i64 - 2 * pad as i64 + kernel as i64;
    (out >= 1).then_some(out as usize)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn small_len(&self) -> usize {
        self.small_h * self.small_w
    }

    fn big_len(&self) -> usize {
        self.big_h * self.big_w
    }
}

impl Geometry {
    fn padded_w(&self) -> usize {
        self.big_w + 2 * self.pad
    }

    fn padded_len(&self) -> usize {
        (self.big_h + 2 * self.pad) * self.padded_w()
    }

    /// For each kernel tap and small-grid position, the offset of the source
    /// pixel inside a zero-padded big plane. Every offset is in bounds because
    /// `(small − 1)·stride + k ≤ big + 2·pad` for both directions.
    fn taps(&self) -> Vec<usize> {
        let pw = self.padded_w();
        let mut out = Vec::with_capacity(self.kh * self.kw * self.small_len());
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                for sy in 0..self.small_h {
                    for sx in 0..self.small_w {
                        out.push((sy * self.stride + ky) * pw + sx * self.stride + kx);
                    }
                }
            }
        }
        out
    }
}

/// Patches of `big` (n, ch, big_h, big_w) laid out as `(ch·kh·kw, n·small_h·small_w)`.
fn im2col<T: Real>(big: &[T], n: usize, ch: usize, g: &Geometry) -> Vec<T> {
    let cols_per_row = n * g.small_len();
    let kk = g.kh * g.kw;
    let sl = g.small_len();
    let taps = g.taps();
    let pw = g.padded_w();
    let mut padded = vec![T::zero(); g.padded_len()];
    let mut cols = vec![T::zero(); ch * kk * cols_per_row];
    for img in 0..n {
        for c in 0..ch {
            let plane = &big[(img * ch + c) * g.big_len()..(img * ch + c + 1) * g.big_len()];
            for (y, src) in plane.chunks_exact(g.big_w).enumerate() {
                let at = (y + g.pad) * pw + g.pad;
                padded[at..at + g.big_w].copy_from_slice(src);
            }
            for (t, tap) in taps.chunks_exact(sl).enumerate() {
                let start = (c * kk + t) * cols_per_row + img * sl;
                for (dst, &i) in cols[start..start + sl].iter_mut().zip(tap) {
                    *dst = padded[i];
                }
            }
        }
    }
    cols
}

/// The transpose of [`im2col`]: `(n·small_h·small_w, ch·kh·kw)`.
fn im2row<T: Real>(big: &[T], n: usize, ch: usize, g: &Geometry) -> Vec<T> {
    let kk = g.kh * g.kw;
    let sl = g.small_len();
    let width = ch * kk;
    let taps = g.taps();
    let pw = g.padded_w();
    let plen = g.padded_len();
    let mut padded = vec![T::zero(); ch * plen];
    let mut rows = vec![T::zero(); n * sl * width];
    for img in 0..n {
        for c in 0..ch {
            let plane = &big[(img * ch + c) * g.big_len()..(img * ch + c + 1) * g.big_len()];
            for (y, src) in plane.chunks_exact(g.big_w).enumerate() {
                let at = c * plen + (y + g.pad) * pw + g.pad;
                padded[at..at + g.big_w].copy_from_slice(src);
            }
        }
        for p in 0..sl {
            let row = &mut rows[(img * sl + p) * width..(img * sl + p + 1) * width];
            for (c, dst) in row.chunks_exact_mut(kk).enumerate() {
                let plane = &padded[c * plen..(c + 1) * plen];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = plane[taps[t * sl + p]];
                }
            }
        }
    }
    rows
}

/// NCHW → `(N·H·W, C)`.
fn to_pixel_major<T: Real>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for img in 0..n {
        let src = &data[img * c * plane..(img + 1) * c * plane];
        let dst = &mut out[img * c * plane..(img + 1) * c * plane];
        for ch in 0..c {
            for p in 0..plane {
                dst[p * c + ch] = src[ch * plane + p];
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the big grid.
fn col2im<T: Real>(cols: &[T], n: usize, ch: usize, g: &Geometry) -> Vec<T> {
    let cols_per_row = n * g.small_len();
    let kk = g.kh * g.kw;
    let sl = g.small_len();
    let taps = g.taps();
    let pw = g.padded_w();
    let mut padded = vec![T::zero(); g.padded_len()];
    let mut big = vec![T::zero(); n * ch * g.big_len()];
    for img in 0..n {
        for c in 0..ch {
            padded.fill(T::zero());
            for (t, tap) in taps.chunks_exact(sl).enumerate() {
                let start = (c * kk + t) * cols_per_row + img * sl;
                for (&v, &i) in cols[start..start + sl].iter().zip(tap) {
                    padded[i] += v;
                }
            }
            let plane = &mut big[(img * ch + c) * g.big_len()..(img * ch + c + 1) * g.big_len()];
            for (y, dst) in plane.chunks_exact_mut(g.big_w).enumerate() {
                let at = (y + g.pad) * pw + g.pad;
                dst.copy_from_slice(&padded[at..at + g.big_w]);
            }
        }
    }
    big
}

/// NCHW → `(C, N·H·W)`.
fn to_channel_major<T: Real>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for ch in 0..c {
        for img in 0..n {
            let start = (img * c + ch) * plane;
            out.extend_from_slice(&data[start..start + plane]);
        }
    }
    out
}

/// `(C, N·H·W)` → NCHW.
fn from_channel_major<T: Real>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for ch in 0..c {
        for img in 0..n {
            let src = (ch * n + img) * plane;
            let dst = (img * c + ch) * plane;
            out[dst..dst + plane].copy_from_slice(&data[src..src + plane]);
        }
    }
    out
}

fn check_input<T: Real>(op: &'static str, input: &Tensor<T>, channels: usize) -> Result<()> {
    expect_rank(op, input.shape(), 4)?;
    if input.shape()[1] != channels {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "channels",
            expected: channels,
            actual: input.shape()[1],
        });
    }
    Ok(())
}

fn check_grad<T: Real>(op: &'static str, grad: &Tensor<T>, expected: [usize; 4]) -> Result<()> {
    expect_rank(op, grad.shape(), 4)?;
    const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
    for (i, (&e, &a)) in expected.iter().zip(grad.shape()).enumerate() {
        if e != a {
            return Err(TensorError::ShapeMismatch {
                op,
                axis: AXES[i],
                expected: e,
                actual: a,
            });
        }
    }
    Ok(())
}

fn conv_geometry<T: Real>(op: &'static str, input: &Tensor<T>, params: &ConvParams<T>) -> Result<Geometry> {
    let (kh, kw) = params.kernel();
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let out_h = conv_output_size(h, kh, params.stride, params.padding).ok_or(
        TensorError::InvalidOutputSize {
            op,
            axis: "height",
            size: (h + 2 * params.padding) as i64 - kh as i64,
        },
    )?;
    let out_w = conv_output_size(w, kw, params.stride, params.padding).ok_or(
        TensorError::InvalidOutputSize {
            op,
            axis: "width",
            size: (w + 2 * params.padding) as i64 - kw as i64,
        },
    )?;
    Ok(Geometry {
        big_h: h,
        big_w: w,
        small_h: out_h,
        small_w: out_w,
        kh,
        kw,
        stride: params.stride,
        pad: params.padding,
    })
}

/// Cross-correlation of an NCHW batch with `params`, plus per-channel bias.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    check_input(OP, input, params.in_channels())?;
    let g = conv_geometry(OP, input, params)?;
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let o = params.out_channels();
    let k = c * g.kh * g.kw;
    let np = n * g.small_len();

    let cols = im2col(input.data(), n, c, &g);
    let mut out_cm = vec![T::zero(); o * np];
    gemm(o, np, k, params.weights.data(), &cols, &mut out_cm, false);
    for (ch, row) in out_cm.chunks_mut(np).enumerate() {
        let b = params.bias.data()[ch];
        for v in row {
            *v += b;
        }
    }
    let data = from_channel_major(&out_cm, n, o, g.small_len());
    Ok(Tensor::from_parts(vec![n, o, g.small_h, g.small_w], data))
}

/// Backward of [`conv2d`] for upstream gradient `grad_out` (same shape as the
/// forward output).
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    check_input(OP, input, params.in_channels())?;
    let g = conv_geometry(OP, input, params)?;
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let o = params.out_channels();
    check_grad(OP, grad_out, [n, o, g.small_h, g.small_w])?;
    let k = c * g.kh * g.kw;
    let np = n * g.small_len();

    let grad_cm = to_channel_major(grad_out.data(), n, o, g.small_len());
    let cols_t = im2row(input.data(), n, c, &g);
    let mut dw = vec![T::zero(); o * k];
    gemm(o, k, np, &grad_cm, &cols_t, &mut dw, false);
    let db: Vec<T> = grad_cm.chunks(np).map(sum_in_order).collect();

    let input_grad = if need_input_grad {
        let w_t = transpose(o, k, params.weights.data());
        let mut dcols = vec![T::zero(); k * np];
        gemm(k, np, o, &w_t, &grad_cm, &mut dcols, false);
        let dx = col2im(&dcols, n, c, &g);
        Some(Tensor::from_parts(input.shape().to_vec(), dx))
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weights: Tensor::from_parts(params.weights.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![o], db),
    })
}

fn sum_in_order<T: Real>(xs: &[T]) -> T {
    let mut acc = T::zero();
    for &x in xs {
        acc += x;
    }
    acc
}

fn transpose_geometry<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    params: &ConvParams<T>,
    out_hw: Option<(usize, usize)>,
) -> Result<Geometry> {
    let (kh, kw) = params.kernel();
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let (s, p) = (params.stride, params.padding);
    let base_h = conv_transpose_output_size(h, kh, s, p).ok_or(TensorError::InvalidOutputSize {
        op,
        axis: "height",
        size: (h as i64 - 1) * s as i64 - 2 * p as i64 + kh as i64,
    })?;
    let base_w = conv_transpose_output_size(w, kw, s, p).ok_or(TensorError::InvalidOutputSize {
        op,
        axis: "width",
        size: (w as i64 - 1) * s as i64 - 2 * p as i64 + kw as i64,
    })?;
    let (out_h, out_w) = out_hw.unwrap_or((base_h, base_w));
    for (axis, req, base) in [("height", out_h, base_h), ("width", out_w, base_w)] {
        if req < base || req > base + s - 1 {
            return Err(TensorError::OutputSizeOutOfRange {
                op,
                axis,
                requested: req,
                min: base,
                max: base + s - 1,
            });
        }
    }
    Ok(Geometry {
        big_h: out_h,
        big_w: out_w,
        small_h: h,
        small_w: w,
        kh,
        kw,
        stride: s,
        pad: p,
    })
}

/// Weights `(O, C, kh, kw)` rearranged to `(O·kh·kw, C)`.
fn scatter_matrix<T: Real>(weights: &Tensor<T>) -> Vec<T> {
    let s = weights.shape();
    let (o, c, kk) = (s[0], s[1], s[2] * s[3]);
    let w = weights.data();
    let mut out = vec![T::zero(); o * kk * c];
    for oc in 0..o {
        for ic in 0..c {
            for t in 0..kk {
                out[(oc * kk + t) * c + ic] = w[(oc * c + ic) * kk + t];
            }
        }
    }
    out
}

fn gather_scatter_matrix<T: Real>(m: &[T], shape: &[usize]) -> Vec<T> {
    let (o, c, kk) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); o * c * kk];
    for oc in 0..o {
        for ic in 0..c {
            for t in 0..kk {
                out[(oc * c + ic) * kk + t] = m[(oc * kk + t) * c + ic];
            }
        }
    }
    out
}

/// Transposed (fractionally strided) convolution with the output size given
/// by `(H − 1)·stride − 2·pad + kH`.
pub fn conv2d_transpose<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    transpose_forward(input, params, None)
}

/// Transposed convolution with an explicit output size. The target must lie
/// in `base..=base + stride − 1`; the extra rows/columns on the high side keep
/// contributions that the base size would crop.
pub fn conv2d_transpose_sized<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    transpose_forward(input, params, Some((out_h, out_w)))
}

fn transpose_forward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    out_hw: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_transpose";
    check_input(OP, input, params.in_channels())?;
    let g = transpose_geometry(OP, input, params, out_hw)?;
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let o = params.out_channels();
    let okk = o * g.kh * g.kw;
    let nhw = n * g.small_len();

    let x_cm = to_channel_major(input.data(), n, c, g.small_len());
    let wm = scatter_matrix(&params.weights);
    let mut cols = vec![T::zero(); okk * nhw];
    gemm(okk, nhw, c, &wm, &x_cm, &mut cols, false);
    let mut out = col2im(&cols, n, o, &g);
    for (plane_idx, plane) in out.chunks_mut(g.big_len()).enumerate() {
        let b = params.bias.data()[plane_idx % o];
        for v in plane {
            *v += b;
        }
    }
    Ok(Tensor::from_parts(vec![n, o, g.big_h, g.big_w], out))
}

/// Backward of [`conv2d_transpose_sized`] (or [`conv2d_transpose`]); the output
/// size is read from `grad_out`.
pub fn conv2d_transpose_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_transpose_backward";
    check_input(OP, input, params.in_channels())?;
    expect_rank(OP, grad_out.shape(), 4)?;
    let g = transpose_geometry(OP, input, params, Some((grad_out.shape()[2], grad_out.shape()[3])))?;
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let o = params.out_channels();
    check_grad(OP, grad_out, [n, o, g.big_h, g.big_w])?;
    let okk = o * g.kh * g.kw;
    let nhw = n * g.small_len();

    let dcols = im2col(grad_out.data(), n, o, &g);
    let x_t = to_pixel_major(input.data(), n, c, g.small_len());
    let mut dwm = vec![T::zero(); okk * c];
    gemm(okk, c, nhw, &dcols, &x_t, &mut dwm, false);
    let dw = gather_scatter_matrix(&dwm, params.weights.shape());

    let mut db = vec![T::zero(); o];
    for (plane_idx, plane) in grad_out.data().chunks(g.big_len()).enumerate() {
        db[plane_idx % o] += sum_in_order(plane);
    }

    let input_grad = if need_input_grad {
        let wm = scatter_matrix(&params.weights);
        let wm_t = transpose(okk, c, &wm);
        let mut dx_cm = vec![T::zero(); c * nhw];
        gemm(c, nhw, okk, &wm_t, &dcols, &mut dx_cm, false);
        Some(Tensor::from_parts(
            input.shape().to_vec(),
            from_channel_major(&dx_cm, n, c, g.small_len()),
        ))
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weights: Tensor::from_parts(params.weights.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![o], db),
    })
}
