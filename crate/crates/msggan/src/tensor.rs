//! Dense 4-D tensors and the low-level kernels (GEMM-backed convolution,
//! pooling, upsampling, reductions) that the autodiff graph is built on.
//!
//! Everything is stored contiguously in `[batch, channels, height, width]`
//! order. Vectors and matrices ride along as degenerate 4-D shapes
//! (`[n, c, 1, 1]`), which keeps the op set small.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type the engine is generic over. Training runs in `f32`; the
/// finite-difference test harness instantiates everything in `f64`.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C[m x n] = alpha * A[m x k] * B[k x n] + beta * C, arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `[batch, channels, height, width]`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// A scalar lives at `[1, 1, 1, 1]`.
    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// True if `self` can broadcast to `target` (each dim equal or 1).
    pub fn broadcasts_to(&self, target: Shape) -> bool {
        self.0
            .iter()
            .zip(target.0.iter())
            .all(|(&s, &t)| s == t || s == 1)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Contiguous NCHW tensor.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(shape.numel(), data.len(), "shape {} does not match data length {}", shape, data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(Shape::scalar(), vec![value])
    }

    /// Standard-normal entries. Sampling happens in f64 so that a given RNG
    /// stream yields the same values regardless of `T`.
    pub fn randn<R: Rng>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64(StandardNormal.sample(rng)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a `[1,1,1,1]` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.shape.numel(), 1, "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch {} vs {}", self.shape, other.shape);
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape, data }
    }

    pub fn reshaped(&self, shape: Shape) -> Self {
        assert_eq!(self.shape.numel(), shape.numel(), "reshape {} -> {} changes element count", self.shape, shape);
        Tensor { shape, data: self.data.clone() }
    }

    /// Convert element type (used at I/O boundaries, e.g. f32 checkpoints).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect() }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Output spatial size of a stride-1 convolution.
fn conv_out_size(input: usize, kernel: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad + 1 > kernel,
        "kernel {} too large for input {} with pad {}",
        kernel,
        input,
        pad
    );
    input + 2 * pad - kernel + 1
}

/// Patch rows for one tile of output pixels: `patches[(ic*kh+ky)*kw+kx][p]`
/// holds `x[b, ic, oy+ky-pad, ox+kx-pad]` (0 outside). The tile covers output
/// rows `oy0..oy1`.
#[allow(clippy::too_many_arguments)]
fn fill_patches<T: Real>(
    patches: &mut [T],
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    w_out: usize,
    oy0: usize,
    oy1: usize,
) {
    let tile_px = (oy1 - oy0) * w_out;
    for v in patches[..c_in * kh * kw * tile_px].iter_mut() {
        *v = T::zero();
    }
    for ic in 0..c_in {
        let x_chan = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row_base = ((ic * kh + ky) * kw + kx) * tile_px;
                // valid output columns: 0 <= ox + kx - pad < w
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(w_out);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst_base = row_base + (oy - oy0) * w_out;
                    let src_base = iy * w + (ox_lo + kx - pad);
                    patches[dst_base + ox_lo..dst_base + ox_hi]
                        .copy_from_slice(&x_chan[src_base..src_base + (ox_hi - ox_lo)]);
                }
            }
        }
    }
}

/// Rows per im2col tile, sized to keep the patch buffer around 8 MB.
fn tile_rows(k: usize, w_out: usize, h_out: usize) -> usize {
    const TARGET_ELEMS: usize = 2 << 20;
    (TARGET_ELEMS / (k * w_out)).clamp(1, h_out)
}

/// Stride-1 2-D convolution with optional fused bias (shape `[1,C,1,1]`) and
/// fused LeakyReLU. Weight layout is `[out_c, in_c, kh, kw]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
    lrelu_slope: Option<f64>,
) -> Tensor<T> {
    let [n, c_in, h, w] = x.shape().0;
    let [c_out, wc_in, kh, kw] = weight.shape().0;
    assert_eq!(c_in, wc_in, "conv2d: input has {} channels, weight expects {}", c_in, wc_in);
    if let Some(b) = bias {
        assert_eq!(b.shape(), Shape::nchw(1, c_out, 1, 1), "conv2d: bias shape {}", b.shape());
    }
    let h_out = conv_out_size(h, kh, pad);
    let w_out = conv_out_size(w, kw, pad);
    let mut out = Tensor::zeros(Shape::nchw(n, c_out, h_out, w_out));
    let k = c_in * kh * kw;

    if kh == 1 && kw == 1 && pad == 0 {
        // 1x1: the input itself is the patch matrix.
        for b in 0..n {
            let x_b = &x.data()[b * c_in * h * w..];
            let out_b = &mut out.data_mut()[b * c_out * h_out * w_out..];
            unsafe {
                T::gemm(
                    c_out,
                    k,
                    h_out * w_out,
                    T::one(),
                    weight.data().as_ptr(),
                    k as isize,
                    1,
                    x_b.as_ptr(),
                    (h * w) as isize,
                    1,
                    T::zero(),
                    out_b.as_mut_ptr(),
                    (h_out * w_out) as isize,
                    1,
                );
            }
        }
    } else {
        let rows = tile_rows(k, w_out, h_out);
        let mut patches = vec![T::zero(); k * rows * w_out];
        for b in 0..n {
            let x_b = &x.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
            let mut oy0 = 0;
            while oy0 < h_out {
                let oy1 = (oy0 + rows).min(h_out);
                let tile_px = (oy1 - oy0) * w_out;
                fill_patches(&mut patches, x_b, c_in, h, w, kh, kw, pad, w_out, oy0, oy1);
                let out_off = b * c_out * h_out * w_out + oy0 * w_out;
                unsafe {
                    T::gemm(
                        c_out,
                        k,
                        tile_px,
                        T::one(),
                        weight.data().as_ptr(),
                        k as isize,
                        1,
                        patches.as_ptr(),
                        tile_px as isize,
                        1,
                        T::zero(),
                        out.data_mut()[out_off..].as_mut_ptr(),
                        (h_out * w_out) as isize,
                        1,
                    );
                }
                oy0 = oy1;
            }
        }
    }

    let px = h_out * w_out;
    if let Some(bias) = bias {
        for b in 0..n {
            for oc in 0..c_out {
                let add = bias.data()[oc];
                let base = (b * c_out + oc) * px;
                for v in out.data_mut()[base..base + px].iter_mut() {
                    *v += add;
                }
            }
        }
    }
    if let Some(slope) = lrelu_slope {
        let slope = T::from_f64(slope);
        for v in out.data_mut().iter_mut() {
            if *v < T::zero() {
                *v *= slope;
            }
        }
    }
    out
}

/// Gradient of `conv2d` w.r.t. its input: a full correlation, computed by
/// flipping the kernel, swapping its in/out axes, and reusing the forward
/// kernel with complementary padding.
pub fn conv2d_grad_input<T: Real>(g: &Tensor<T>, weight: &Tensor<T>, pad: usize) -> Tensor<T> {
    let [c_out, c_in, kh, kw] = weight.shape().0;
    assert_eq!(g.shape().c(), c_out, "conv2d_grad_input: cotangent has {} channels, weight produces {}", g.shape().c(), c_out);
    let mut flipped = Tensor::zeros(Shape::nchw(c_in, c_out, kh, kw));
    for oc in 0..c_out {
        for ic in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = ((oc * c_in + ic) * kh + ky) * kw + kx;
                    let dst = ((ic * c_out + oc) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx);
                    flipped.data_mut()[dst] = weight.data()[src];
                }
            }
        }
    }
    // forward out size h + 2p - k + 1 inverts to h_out + 2(k-1-p) - k + 1 = h
    conv2d(g, &flipped, None, kh - 1 - pad, None)
}

/// Gradient of `conv2d` w.r.t. its weight.
pub fn conv2d_grad_weight<T: Real>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let [n, c_in, h, w] = x.shape().0;
    let [gn, c_out, h_out, w_out] = g.shape().0;
    assert_eq!(n, gn, "conv2d_grad_weight: batch mismatch");
    assert_eq!(h_out, conv_out_size(h, kh, pad));
    assert_eq!(w_out, conv_out_size(w, kw, pad));
    let k = c_in * kh * kw;
    let mut dw = Tensor::zeros(Shape::nchw(c_out, c_in, kh, kw));

    let rows = tile_rows(k, w_out, h_out);
    let mut patches = vec![T::zero(); k * rows * w_out];
    for b in 0..n {
        let x_b = &x.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
        let mut oy0 = 0;
        while oy0 < h_out {
            let oy1 = (oy0 + rows).min(h_out);
            let tile_px = (oy1 - oy0) * w_out;
            fill_patches(&mut patches, x_b, c_in, h, w, kh, kw, pad, w_out, oy0, oy1);
            // dW[c_out x k] += G_tile[c_out x px] * patches^T[px x k]
            let g_off = b * c_out * h_out * w_out + oy0 * w_out;
            unsafe {
                T::gemm(
                    c_out,
                    tile_px,
                    k,
                    T::one(),
                    g.data()[g_off..].as_ptr(),
                    (h_out * w_out) as isize,
                    1,
                    patches.as_ptr(),
                    1,
                    tile_px as isize,
                    T::one(),
                    dw.data_mut().as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            oy0 = oy1;
        }
    }
    dw
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {}", x.shape());
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::nchw(n, c, ho, wo));
    let quarter = T::from_f64(0.25);
    for bc in 0..n * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * ho * wo..(bc + 1) * ho * wo];
        for oy in 0..ho {
            let r0 = &src[2 * oy * w..];
            let r1 = &src[(2 * oy + 1) * w..];
            for ox in 0..wo {
                dst[oy * wo + ox] =
                    (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    out
}

/// 2x nearest-neighbor upsampling, scaled by `scale` (1.0 for the generator's
/// upsample; 0.25 makes it the adjoint of `avg_pool2`).
pub fn upsample2_nearest<T: Real>(x: &Tensor<T>, scale: f64) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let (ho, wo) = (h * 2, w * 2);
    let mut out = Tensor::zeros(Shape::nchw(n, c, ho, wo));
    let s = T::from_f64(scale);
    for bc in 0..n * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * ho * wo..(bc + 1) * ho * wo];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_] * s;
                let base = 2 * y * wo + 2 * x_;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + wo] = v;
                dst[base + wo + 1] = v;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fused normalizers
// ---------------------------------------------------------------------------

/// `x * rsqrt(mean_over_channels(x^2) + eps)` at every spatial position.
pub fn pixel_norm<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let eps = T::from_f64(eps);
    let inv_c = T::from_f64(1.0 / c as f64);
    let px = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        let base = b * c * px;
        for p in 0..px {
            let mut acc = T::zero();
            for ch in 0..c {
                let v = x.data()[base + ch * px + p];
                acc += v * v;
            }
            let r = (acc * inv_c + eps).sqrt().recip();
            for ch in 0..c {
                out.data_mut()[base + ch * px + p] = x.data()[base + ch * px + p] * r;
            }
        }
    }
    out
}

/// Appends one channel holding a single batch statistic: the mean over
/// (channel, y, x) of the per-position population standard deviation across
/// the batch. Uses an exact square root, so an identical batch appends an
/// exact zero.
pub fn batch_stddev_append<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let px = h * w;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut sum_std = T::zero();
    for ch in 0..c {
        for p in 0..px {
            let mut mean = T::zero();
            for b in 0..n {
                mean += x.data()[(b * c + ch) * px + p];
            }
            mean *= inv_n;
            let mut var = T::zero();
            for b in 0..n {
                let d = x.data()[(b * c + ch) * px + p] - mean;
                var += d * d;
            }
            sum_std += (var * inv_n).sqrt();
        }
    }
    let s = sum_std / T::from_f64((c * px) as f64);

    let mut out = Tensor::zeros(Shape::nchw(n, c + 1, h, w));
    for b in 0..n {
        let src = &x.data()[b * c * px..(b + 1) * c * px];
        let dst = &mut out.data_mut()[b * (c + 1) * px..];
        dst[..c * px].copy_from_slice(src);
        for v in dst[c * px..(c + 1) * px].iter_mut() {
            *v = s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!parts.is_empty());
    let [n, _, h, w] = parts[0].shape().0;
    let c_total: usize = parts.iter().map(|p| p.shape().c()).sum();
    for p in parts {
        assert_eq!(
            (p.shape().n(), p.shape().h(), p.shape().w()),
            (n, h, w),
            "concat_channels: incompatible shape {}",
            p.shape()
        );
    }
    let mut out = Tensor::zeros(Shape::nchw(n, c_total, h, w));
    let px = h * w;
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            let c = p.shape().c();
            let src = &p.data()[b * c * px..(b + 1) * c * px];
            let dst_base = (b * c_total + c_off) * px;
            out.data_mut()[dst_base..dst_base + c * px].copy_from_slice(src);
            c_off += c;
        }
    }
    out
}

pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    assert!(start + len <= c, "slice_channels: {}+{} exceeds {} channels", start, len, c);
    let px = h * w;
    let mut out = Tensor::zeros(Shape::nchw(n, len, h, w));
    for b in 0..n {
        let src_base = (b * c + start) * px;
        let dst_base = b * len * px;
        out.data_mut()[dst_base..dst_base + len * px]
            .copy_from_slice(&x.data()[src_base..src_base + len * px]);
    }
    out
}

/// Sum-reduce to a target shape whose dims are each equal to the source dim
/// or 1. Inverse (as an adjoint) of `broadcast_to`.
pub fn sum_to<T: Real>(x: &Tensor<T>, target: Shape) -> Tensor<T> {
    let src = x.shape();
    assert!(target.broadcasts_to(src), "sum_to: {} is not a reduction of {}", target, src);
    if src == target {
        return x.clone();
    }
    let mut out = Tensor::zeros(target);
    let [_, sc, sh, sw] = src.0;
    let keep = [
        target.0[0] != 1,
        target.0[1] != 1,
        target.0[2] != 1,
        target.0[3] != 1,
    ];
    let [_, tc, th, tw] = target.0;
    let mut idx = 0;
    for b in 0..src.n() {
        let tb = if keep[0] { b } else { 0 };
        for c in 0..sc {
            let tcc = if keep[1] { c } else { 0 };
            for y in 0..sh {
                let ty = if keep[2] { y } else { 0 };
                let row_base = ((tb * tc + tcc) * th + ty) * tw;
                if keep[3] {
                    let dst = &mut out.data_mut()[row_base..row_base + tw];
                    for (d, &s) in dst.iter_mut().zip(&x.data()[idx..idx + sw]) {
                        *d += s;
                    }
                } else {
                    let mut acc = T::zero();
                    for &s in &x.data()[idx..idx + sw] {
                        acc += s;
                    }
                    out.data_mut()[row_base] += acc;
                }
                idx += sw;
            }
        }
    }
    out
}

pub fn broadcast_to<T: Real>(x: &Tensor<T>, target: Shape) -> Tensor<T> {
    let src = x.shape();
    assert!(src.broadcasts_to(target), "broadcast_to: {} does not broadcast to {}", src, target);
    if src == target {
        return x.clone();
    }
    let mut out = Tensor::zeros(target);
    let [sn, sc, sh, sw] = src.0;
    let [_, tc, th, tw] = target.0;
    let mut idx = 0;
    for b in 0..target.n() {
        let sb = if sn == 1 { 0 } else { b };
        for c in 0..tc {
            let scc = if sc == 1 { 0 } else { c };
            for y in 0..th {
                let sy = if sh == 1 { 0 } else { y };
                let row_base = ((sb * sc + scc) * sh + sy) * sw;
                if sw == 1 {
                    let v = x.data()[row_base];
                    for d in &mut out.data_mut()[idx..idx + tw] {
                        *d = v;
                    }
                } else {
                    out.data_mut()[idx..idx + tw]
                        .copy_from_slice(&x.data()[row_base..row_base + sw]);
                }
                idx += tw;
            }
        }
    }
    out
}

/// 2-D matmul over the leading two dims: `[m,k,1,1] x [k,n,1,1] -> [m,n,1,1]`,
/// with optional transposes.
pub fn matmul<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    assert!(a.shape().h() == 1 && a.shape().w() == 1 && b.shape().h() == 1 && b.shape().w() == 1,
        "matmul expects matrix-shaped tensors, got {} and {}", a.shape(), b.shape());
    let (ar, ac) = (a.shape().n(), a.shape().c());
    let (br, bc) = (b.shape().n(), b.shape().c());
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(ka, kb, "matmul: inner dims {} vs {}", ka, kb);
    let mut out = Tensor::zeros(Shape::nchw(m, n, 1, 1));
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    unsafe {
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}
