use rand::Rng;
use rayon::prelude::*;

use super::{DenseTensor, Real};
use crate::error::{Error, Result};

/// Geometry of a convolution over the three spatial axes `(t, h, w)`.
///
/// Two-dimensional layers use a kernel of extent 1 (and padding 0) on the
/// time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Kernel 3, stride 1, padding 1 on all three axes; output size equals input size.
    pub fn same(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: [3; 3],
            stride: [1; 3],
            padding: [1; 3],
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    /// Kernel 3 and padding 1 on `(h, w)` only.
    pub fn same_2d(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: [1, 3, 3],
            stride: [1; 3],
            padding: [0, 1, 1],
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    /// Kernel 3, stride 2, padding 1: the upsampling transposed convolution.
    pub fn upsample(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: [3; 3],
            stride: [2; 3],
            padding: [1; 3],
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Relative offset of every kernel tap, lexicographic over `(dt, dh, dw)`
    /// from most negative to most positive. Tap `k` along an axis sits at
    /// offset `k - padding`.
    pub fn offsets(&self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(self.kernel_volume());
        for kt in 0..self.kernel[0] {
            for kh in 0..self.kernel[1] {
                for kw in 0..self.kernel[2] {
                    out.push([
                        kt as isize - self.padding[0] as isize,
                        kh as isize - self.padding[1] as isize,
                        kw as isize - self.padding[2] as isize,
                    ]);
                }
            }
        }
        out
    }

    /// Index of the zero-offset tap, if the kernel has one.
    pub fn center_offset(&self) -> Option<usize> {
        self.offsets().iter().position(|d| *d == [0, 0, 0])
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if self.stride[axis] == 0 || padded < self.kernel[axis] {
                return Err(Error::shape(
                    "conv output",
                    format!("spatial axis {axis}"),
                    self.kernel[axis],
                    padded,
                ));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.kernel_volume() * self.in_channels * self.out_channels + if self.has_bias { self.out_channels } else { 0 }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig(format!("{op}: zero channel count")));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::InvalidConfig(format!("{op}: zero kernel extent or stride")));
        }
        Ok(())
    }
}

/// Offset-major weights `[tap][in_channel][out_channel]` plus an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights<T = f32> {
    pub spec: ConvSpec,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> KernelWeights<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weights: vec![T::zero(); spec.kernel_volume() * spec.in_channels * spec.out_channels],
            bias: spec.has_bias.then(|| vec![T::zero(); spec.out_channels]),
        }
    }

    /// Uniform in `±sqrt(1 / fan_in)` with `fan_in = taps * in_channels`.
    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / (spec.kernel_volume() * spec.in_channels) as f64).sqrt();
        let mut draw = || T::from_f64(rng.gen_range(-bound..bound));
        let n = spec.kernel_volume() * spec.in_channels * spec.out_channels;
        let weights = (0..n).map(|_| draw()).collect();
        let bias = spec.has_bias.then(|| (0..spec.out_channels).map(|_| draw()).collect());
        Self { spec, weights, bias }
    }

    /// Identity map: the center tap is the identity matrix, every other tap is zero.
    pub fn identity(spec: ConvSpec) -> Result<Self> {
        if spec.in_channels != spec.out_channels {
            return Err(Error::shape(
                "identity kernel",
                "channels",
                spec.in_channels,
                spec.out_channels,
            ));
        }
        let center = spec
            .center_offset()
            .ok_or_else(|| Error::InvalidConfig("identity kernel needs a zero-offset tap".into()))?;
        let mut w = Self::zeros(spec);
        for c in 0..spec.in_channels {
            let idx = w.index(center, c, c);
            w.weights[idx] = T::one();
        }
        Ok(w)
    }

    #[inline]
    pub fn index(&self, tap: usize, ci: usize, co: usize) -> usize {
        (tap * self.spec.in_channels + ci) * self.spec.out_channels + co
    }

    /// Weight matrix `[in_channel][out_channel]` of one tap.
    pub fn tap(&self, tap: usize) -> &[T] {
        let n = self.spec.in_channels * self.spec.out_channels;
        &self.weights[tap * n..(tap + 1) * n]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn cast<U: Real>(&self) -> KernelWeights<U> {
        KernelWeights {
            spec: self.spec,
            weights: self.weights.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// Every scalar, weights first then bias.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(self.bias.iter().flatten())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.bias.iter_mut().flatten())
    }

    pub(crate) fn check_spec(&self, op: &'static str, spec: &ConvSpec) -> Result<()> {
        if self.spec != *spec {
            return Err(Error::ModelMismatch(format!(
                "{op}: weights built for {:?}, layer uses {:?}",
                self.spec, spec
            )));
        }
        let n = spec.kernel_volume() * spec.in_channels * spec.out_channels;
        if self.weights.len() != n {
            return Err(Error::shape(op, "weights", n, self.weights.len()));
        }
        match (&self.bias, spec.has_bias) {
            (Some(b), true) if b.len() == spec.out_channels => Ok(()),
            (None, false) => Ok(()),
            (b, _) => Err(Error::shape(
                op,
                "bias",
                if spec.has_bias { spec.out_channels } else { 0 },
                b.as_ref().map_or(0, Vec::len),
            )),
        }
    }
}

/// Gradients of a convolution layer.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: DenseTensor<T>,
    pub params: KernelWeights<T>,
}

// ---------------------------------------------------------------------------
// Strided plane primitives.
//
// Each routine relates a "small" plane indexed by `o` to a "large" plane
// indexed by `o * stride + delta`, per axis. Out-of-range positions in the
// large plane are zero padding.
// ---------------------------------------------------------------------------

#[inline]
fn valid_range(small_len: usize, large_len: usize, stride: usize, delta: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if delta >= 0 { 0 } else { (-delta + s - 1) / s };
    let last = large_len as isize - 1 - delta;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = hi.min(small_len as isize).max(0) as usize;
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

#[derive(Clone, Copy)]
struct Geometry {
    small: [usize; 3],
    large: [usize; 3],
    stride: [usize; 3],
}

impl Geometry {
    /// Calls `f(small_row_start, large_row_start, len)` for every contiguous
    /// run of small-plane positions along `w` that maps into the large plane.
    #[inline]
    fn for_each_row(&self, delta: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let [st, sh, sw] = self.small;
        let [lt, lh, lw] = self.large;
        let (t0, t1) = valid_range(st, lt, self.stride[0], delta[0]);
        let (h0, h1) = valid_range(sh, lh, self.stride[1], delta[1]);
        let (w0, w1) = valid_range(sw, lw, self.stride[2], delta[2]);
        if w0 >= w1 {
            return;
        }
        for ot in t0..t1 {
            let it = (ot * self.stride[0]) as isize + delta[0];
            for oh in h0..h1 {
                let ih = (oh * self.stride[1]) as isize + delta[1];
                let small_row = (ot * sh + oh) * sw + w0;
                let large_row =
                    ((it as usize * lh + ih as usize) * lw) as isize + (w0 * self.stride[2]) as isize + delta[2];
                f(small_row, large_row as usize, w1 - w0);
            }
        }
    }

    /// `small[o] += w * large[o * s + delta]`
    fn gather_axpy<T: Real>(&self, small: &mut [T], large: &[T], w: T, delta: [isize; 3]) {
        let sw = self.stride[2];
        self.for_each_row(delta, |s0, l0, len| {
            let dst = &mut small[s0..s0 + len];
            if sw == 1 {
                for (d, &x) in dst.iter_mut().zip(&large[l0..l0 + len]) {
                    *d += w * x;
                }
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += w * large[l0 + j * sw];
                }
            }
        });
    }

    /// `large[o * s + delta] += w * small[o]`
    fn scatter_axpy<T: Real>(&self, large: &mut [T], small: &[T], w: T, delta: [isize; 3]) {
        let sw = self.stride[2];
        self.for_each_row(delta, |s0, l0, len| {
            let src = &small[s0..s0 + len];
            if sw == 1 {
                for (d, &x) in large[l0..l0 + len].iter_mut().zip(src) {
                    *d += w * x;
                }
            } else {
                for (j, &x) in src.iter().enumerate() {
                    large[l0 + j * sw] += w * x;
                }
            }
        });
    }
}

fn check_input<T: Real>(
    op: &'static str,
    input: &DenseTensor<T>,
    spec: &ConvSpec,
    w: &KernelWeights<T>,
) -> Result<[usize; 5]> {
    spec.validate(op)?;
    let dims = input.dims5(op)?;
    if dims[1] != spec.in_channels {
        return Err(Error::shape(op, "input channels", spec.in_channels, dims[1]));
    }
    w.check_spec(op, spec)?;
    Ok(dims)
}

fn plane(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Unfolds one batch item into `[tap * C_in + c, small_site]` rows, zero where
/// the tap falls into padding.
fn im2col<T: Real>(geom: &Geometry, x: &[T], cin: usize, offsets: &[[isize; 3]]) -> Vec<T> {
    let (small, large) = (plane(&geom.small), plane(&geom.large));
    let mut col = vec![T::zero(); offsets.len() * cin * small];
    for (k, delta) in offsets.iter().enumerate() {
        for ci in 0..cin {
            let row = &mut col[(k * cin + ci) * small..][..small];
            geom.gather_axpy(row, &x[ci * large..][..large], T::one(), *delta);
        }
    }
    col
}

/// Adjoint of [`im2col`]: adds every row back onto the large plane.
fn col2im<T: Real>(geom: &Geometry, col: &[T], cin: usize, offsets: &[[isize; 3]], dst: &mut [T]) {
    let (small, large) = (plane(&geom.small), plane(&geom.large));
    for (k, delta) in offsets.iter().enumerate() {
        for ci in 0..cin {
            let row = &col[(k * cin + ci) * small..][..small];
            geom.scatter_axpy(&mut dst[ci * large..][..large], row, T::one(), *delta);
        }
    }
}

fn fill_bias<T: Real>(dst: &mut [T], bias: Option<&Vec<T>>, plane: usize) {
    if let Some(bias) = bias {
        for (chunk, &b) in dst.chunks_mut(plane).zip(bias) {
            chunk.fill(b);
        }
    }
}

/// Sums per-item partial weight gradients in batch order.
fn sum_partials<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Cross-correlation of `[B, C_in, T, H, W]` with zero padding.
pub fn conv3d_forward<T: Real>(
    input: &DenseTensor<T>,
    spec: &ConvSpec,
    w: &KernelWeights<T>,
) -> Result<DenseTensor<T>> {
    let [b, cin, t, h, wd] = check_input("conv3d_forward", input, spec, w)?;
    let out_sp = spec.output_dims([t, h, wd])?;
    let geom = Geometry {
        small: out_sp,
        large: [t, h, wd],
        stride: spec.stride,
    };
    let cout = spec.out_channels;
    let (in_plane, out_plane) = (plane(&[t, h, wd]), plane(&out_sp));
    let offsets = spec.offsets();
    let rows = offsets.len() * cin;
    let x = input.data();
    let mut out = vec![T::zero(); b * cout * out_plane];
    if out_plane > 0 {
        out.par_chunks_mut(cout * out_plane).enumerate().for_each(|(bi, dst)| {
            fill_bias(dst, w.bias.as_ref(), out_plane);
            let col = im2col(&geom, &x[bi * cin * in_plane..][..cin * in_plane], cin, &offsets);
            T::gemm(
                cout,
                rows,
                out_plane,
                (&w.weights, 1, cout),
                (&col, out_plane, 1),
                T::one(),
                (dst, out_plane, 1),
            );
        });
    }
    DenseTensor::new(vec![b, cout, out_sp[0], out_sp[1], out_sp[2]], out)
}

/// Gradients of [`conv3d_forward`] for the loss whose output gradient is `grad_out`.
pub fn conv3d_backward<T: Real>(
    grad_out: &DenseTensor<T>,
    cached_input: &DenseTensor<T>,
    spec: &ConvSpec,
    w: &KernelWeights<T>,
) -> Result<ConvGrads<T>> {
    let [b, cin, t, h, wd] = check_input("conv3d_backward", cached_input, spec, w)?;
    let out_sp = spec.output_dims([t, h, wd])?;
    let cout = spec.out_channels;
    grad_out.expect_shape("conv3d_backward", &[b, cout, out_sp[0], out_sp[1], out_sp[2]])?;
    let geom = Geometry {
        small: out_sp,
        large: [t, h, wd],
        stride: spec.stride,
    };
    let (in_plane, out_plane) = (plane(&[t, h, wd]), plane(&out_sp));
    let offsets = spec.offsets();
    let rows = offsets.len() * cin;
    let (x, g) = (cached_input.data(), grad_out.data());

    let mut grad_in = vec![T::zero(); b * cin * in_plane];
    let parts: Vec<Vec<T>> = if in_plane > 0 {
        grad_in
            .par_chunks_mut(cin * in_plane)
            .enumerate()
            .map(|(bi, dst)| {
                let gb = &g[bi * cout * out_plane..][..cout * out_plane];
                let col = im2col(&geom, &x[bi * cin * in_plane..][..cin * in_plane], cin, &offsets);
                let mut gw = vec![T::zero(); rows * cout];
                T::gemm(
                    rows,
                    out_plane,
                    cout,
                    (&col, out_plane, 1),
                    (gb, 1, out_plane),
                    T::zero(),
                    (&mut gw, cout, 1),
                );
                let mut dcol = col;
                T::gemm(
                    rows,
                    cout,
                    out_plane,
                    (&w.weights, cout, 1),
                    (gb, out_plane, 1),
                    T::zero(),
                    (&mut dcol, out_plane, 1),
                );
                col2im(&geom, &dcol, cin, &offsets, dst);
                gw
            })
            .collect()
    } else {
        Vec::new()
    };
    let grad_w = sum_partials(parts, w.weights.len());

    let grad_b = w.bias.as_ref().map(|_| channel_sums(g, b, cout, out_plane));
    Ok(ConvGrads {
        input: DenseTensor::new(cached_input.shape().to_vec(), grad_in)?,
        params: KernelWeights {
            spec: *spec,
            weights: grad_w,
            bias: grad_b,
        },
    })
}

fn channel_sums<T: Real>(g: &[T], b: usize, c: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for bi in 0..b {
        for (ch, s) in sums.iter_mut().enumerate() {
            for &v in &g[(bi * c + ch) * plane..][..plane] {
                *s += v;
            }
        }
    }
    sums
}

/// Transposed convolution: input site `i` feeds output site `i * stride + delta`
/// through tap `delta`. The output spatial size is supplied by the caller,
/// typically the size of the matching encoder level.
pub fn conv_transpose3d_forward<T: Real>(
    input: &DenseTensor<T>,
    spec: &ConvSpec,
    w: &KernelWeights<T>,
    out_spatial: [usize; 3],
) -> Result<DenseTensor<T>> {
    let [b, cin, t, h, wd] = check_input("conv_transpose3d_forward", input, spec, w)?;
    let geom = Geometry {
        small: [t, h, wd],
        large: out_spatial,
        stride: spec.stride,
    };
    let cout = spec.out_channels;
    let (in_plane, out_plane) = (plane(&[t, h, wd]), plane(&out_spatial));
    let offsets = spec.offsets();
    let x = input.data();
    let mut out = vec![T::zero(); b * cout * out_plane];
    if out_plane > 0 {
        out.par_chunks_mut(cout * out_plane).enumerate().for_each(|(bi, dst)| {
            fill_bias(dst, w.bias.as_ref(), out_plane);
            let xb = &x[bi * cin * in_plane..][..cin * in_plane];
            let mut y = vec![T::zero(); cout * in_plane];
            for (k, delta) in offsets.iter().enumerate() {
                T::gemm(
                    cout,
                    cin,
                    in_plane,
                    (w.tap(k), 1, cout),
                    (xb, in_plane, 1),
                    T::zero(),
                    (&mut y, in_plane, 1),
                );
                for co in 0..cout {
                    let row = &y[co * in_plane..][..in_plane];
                    geom.scatter_axpy(&mut dst[co * out_plane..][..out_plane], row, T::one(), *delta);
                }
            }
        });
    }
    DenseTensor::new(vec![b, cout, out_spatial[0], out_spatial[1], out_spatial[2]], out)
}

pub fn conv_transpose3d_backward<T: Real>(
    grad_out: &DenseTensor<T>,
    cached_input: &DenseTensor<T>,
    spec: &ConvSpec,
    w: &KernelWeights<T>,
) -> Result<ConvGrads<T>> {
    let [b, cin, t, h, wd] = check_input("conv_transpose3d_backward", cached_input, spec, w)?;
    let cout = spec.out_channels;
    let gd = grad_out.dims5("conv_transpose3d_backward")?;
    if gd[0] != b || gd[1] != cout {
        return Err(Error::shape(
            "conv_transpose3d_backward",
            "grad_out batch*channels",
            b * cout,
            gd[0] * gd[1],
        ));
    }
    let out_spatial = [gd[2], gd[3], gd[4]];
    let geom = Geometry {
        small: [t, h, wd],
        large: out_spatial,
        stride: spec.stride,
    };
    let (in_plane, out_plane) = (plane(&[t, h, wd]), plane(&out_spatial));
    let offsets = spec.offsets();
    let (x, g) = (cached_input.data(), grad_out.data());

    let mut grad_in = vec![T::zero(); b * cin * in_plane];
    let parts: Vec<Vec<T>> = if in_plane > 0 {
        grad_in
            .par_chunks_mut(cin * in_plane)
            .enumerate()
            .map(|(bi, dst)| {
                let xb = &x[bi * cin * in_plane..][..cin * in_plane];
                let gb = &g[bi * cout * out_plane..][..cout * out_plane];
                let mut gw = vec![T::zero(); w.weights.len()];
                // Output gradient pulled back onto the input grid, one tap at a time.
                let gathered = im2col(&geom, gb, cout, &offsets);
                for k in 0..offsets.len() {
                    let gk = &gathered[k * cout * in_plane..][..cout * in_plane];
                    T::gemm(
                        cin,
                        cout,
                        in_plane,
                        (w.tap(k), cout, 1),
                        (gk, in_plane, 1),
                        T::one(),
                        (&mut *dst, in_plane, 1),
                    );
                    let n = cin * cout;
                    T::gemm(
                        cin,
                        in_plane,
                        cout,
                        (xb, in_plane, 1),
                        (gk, 1, in_plane),
                        T::zero(),
                        (&mut gw[k * n..][..n], cout, 1),
                    );
                }
                gw
            })
            .collect()
    } else {
        Vec::new()
    };
    let grad_w = sum_partials(parts, w.weights.len());

    let grad_b = w.bias.as_ref().map(|_| channel_sums(g, b, cout, out_plane));
    Ok(ConvGrads {
        input: DenseTensor::new(cached_input.shape().to_vec(), grad_in)?,
        params: KernelWeights {
            spec: *spec,
            weights: grad_w,
            bias: grad_b,
        },
    })
}

/// 2D convolution over `[B, C, H, W]`; `spec` must have a time kernel of 1.
pub fn conv2d_forward<T: Real>(
    input: &DenseTensor<T>,
    spec: &ConvSpec,
    w: &KernelWeights<T>,
) -> Result<DenseTensor<T>> {
    let [b, c, h, wd] = dims4("conv2d_forward", input, spec)?;
    let out = conv3d_forward(&input.reshape(&[b, c, 1, h, wd])?, spec, w)?;
    let s = out.shape().to_vec();
    out.reshape(&[s[0], s[1], s[3], s[4]])
}

pub fn conv2d_backward<T: Real>(
    grad_out: &DenseTensor<T>,
    cached_input: &DenseTensor<T>,
    spec: &ConvSpec,
    w: &KernelWeights<T>,
) -> Result<ConvGrads<T>> {
    let [b, c, h, wd] = dims4("conv2d_backward", cached_input, spec)?;
    grad_out.expect_rank("conv2d_backward", 4)?;
    let g = grad_out.shape();
    let grad_out = grad_out.reshape(&[g[0], g[1], 1, g[2], g[3]])?;
    let mut grads = conv3d_backward(&grad_out, &cached_input.reshape(&[b, c, 1, h, wd])?, spec, w)?;
    grads.input = grads.input.reshape(&[b, c, h, wd])?;
    Ok(grads)
}

fn dims4<T: Real>(op: &'static str, input: &DenseTensor<T>, spec: &ConvSpec) -> Result<[usize; 4]> {
    input.expect_rank(op, 4)?;
    if spec.kernel[0] != 1 || spec.padding[0] != 0 || spec.stride[0] != 1 {
        return Err(Error::InvalidConfig(format!(
            "{op}: 2D convolution needs a unit time kernel, got {:?}",
            spec
        )));
    }
    let s = input.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

/// Spatial size after a stride-2 pool with floor coordinate semantics.
pub fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d.div_ceil(2))
}

#[derive(Clone, Debug)]
pub struct MaxPoolResult<T = f32> {
    pub output: DenseTensor<T>,
    /// Flat input index chosen for each output element.
    pub argmax: Vec<usize>,
}

/// Max pool with window 2 and stride 2 on all three spatial axes; input site
/// `i` belongs to output site `floor(i / 2)`. Ties resolve to the first site
/// in row-major order.
pub fn maxpool3d_forward<T: Real>(input: &DenseTensor<T>) -> Result<MaxPoolResult<T>> {
    let [b, c, t, h, w] = input.dims5("maxpool3d_forward")?;
    let [pt, ph, pw] = pooled_dims([t, h, w]);
    let (in_plane, out_plane) = (t * h * w, pt * ph * pw);
    let x = input.data();
    let mut out = vec![T::zero(); b * c * out_plane];
    let mut argmax = vec![usize::MAX; b * c * out_plane];
    for p in 0..b * c {
        let src = &x[p * in_plane..][..in_plane];
        let dst = &mut out[p * out_plane..][..out_plane];
        let arg = &mut argmax[p * out_plane..][..out_plane];
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..w {
                    let i = (it * h + ih) * w + iw;
                    let o = ((it / 2) * ph + ih / 2) * pw + iw / 2;
                    if arg[o] == usize::MAX || src[i] > dst[o] {
                        dst[o] = src[i];
                        arg[o] = p * in_plane + i;
                    }
                }
            }
        }
    }
    Ok(MaxPoolResult {
        output: DenseTensor::new(vec![b, c, pt, ph, pw], out)?,
        argmax,
    })
}

pub fn maxpool3d_backward<T: Real>(
    grad_out: &DenseTensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<DenseTensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool3d_backward",
            "routing indices",
            grad_out.len(),
            argmax.len(),
        ));
    }
    let mut grad = DenseTensor::zeros(input_shape);
    let dst = grad.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        dst[i] += g;
    }
    Ok(grad)
}
