//! 2-D cross-correlation kernels (im2col + gemm) used by the tape.


use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec {
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
    };
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4()?;
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if spec.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            spec,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_item(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.spec.stride + ky).checked_sub(self.spec.padding)?;
        let x = (ox * self.spec.stride + kx).checked_sub(self.spec.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Columns `[c, ky, kx]` over rows `[b, oy, ox]` laid out as a
/// `patch × (N·plane)` matrix; item `b` occupies columns `b·plane..`.
fn im2col_batch<T: Scalar>(g: &Geometry, src: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let ld = g.n * plane;
    let mut col = vec![T::zero(); g.patch() * ld];
    for b in 0..g.n {
        let item = &src[b * g.in_item()..(b + 1) * g.in_item()];
        for c in 0..g.cin {
            let chan = &item[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = ((c * g.kh + ky) * g.kw + kx) * ld + b * plane;
                    let dst = &mut col[row..row + plane];
                    for_each_source_row(g, ky, kx, |oy, y, ox0, ox1, x0| {
                        let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        let line = &chan[y * g.w..(y + 1) * g.w];
                        if g.spec.stride == 1 {
                            out[ox0..ox1].copy_from_slice(&line[x0..x0 + (ox1 - ox0)]);
                        } else {
                            for (i, o) in out[ox0..ox1].iter_mut().enumerate() {
                                *o = line[x0 + i * g.spec.stride];
                            }
                        }
                    });
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col_batch`]: scatters a column matrix back onto the input.
fn col2im_batch<T: Scalar>(g: &Geometry, col: &[T], dst: &mut [T]) {
    let plane = g.out_plane();
    let ld = g.n * plane;
    for b in 0..g.n {
        let item = &mut dst[b * g.in_item()..(b + 1) * g.in_item()];
        for c in 0..g.cin {
            let chan = &mut item[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = ((c * g.kh + ky) * g.kw + kx) * ld + b * plane;
                    let src = &col[row..row + plane];
                    for_each_source_row(g, ky, kx, |oy, y, ox0, ox1, x0| {
                        let from = &src[oy * g.ow..(oy + 1) * g.ow];
                        let line = &mut chan[y * g.w..(y + 1) * g.w];
                        for (i, &v) in from[ox0..ox1].iter().enumerate() {
                            line[x0 + i * g.spec.stride] += v;
                        }
                    });
                }
            }
        }
    }
}

/// For tap `(ky, kx)`, calls `f(oy, y, ox0, ox1, x0)` for every output row
/// whose source row `y` is inside the image; outputs `ox0..ox1` read input
/// columns `x0, x0 + stride, …`.
#[inline]
fn for_each_source_row(g: &Geometry, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (s, p) = (g.spec.stride, g.spec.padding);
    // first ox with ox·s + kx ≥ p, and one past the last with ox·s + kx − p < w
    let ox0 = p.saturating_sub(kx).div_ceil(s);
    let ox1 = if g.w + p > kx { ((g.w + p - kx - 1) / s + 1).min(g.ow) } else { 0 };
    if ox0 >= ox1 {
        return;
    }
    let x0 = ox0 * s + kx - p;
    for oy in 0..g.oh {
        let Some(y) = (oy * s + ky).checked_sub(p) else { continue };
        if y < g.h {
            f(oy, y, ox0, ox1, x0);
        }
    }
}

/// `[N, C, plane]` ↔ `[C, N·plane]`.
fn to_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * plane..(ch * n + b + 1) * plane]
                .copy_from_slice(&src[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
        }
    }
    out
}

fn from_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .copy_from_slice(&src[(ch * n + b) * plane..(ch * n + b + 1) * plane]);
        }
    }
    out
}

/// Input as a `patch × (N·plane)` matrix.
fn columns<T: Scalar>(g: &Geometry, src: &[T]) -> Vec<T> {
    if g.is_pointwise() {
        to_channel_major(src, g.n, g.cin, g.out_plane())
    } else {
        im2col_batch(g, src)
    }
}

/// Output shape of a convolution, validating channel agreement.
pub fn conv2d_output_shape<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
) -> Result<[usize; 4]> {
    let g = Geometry::new(input, kernel, spec)?;
    Ok([g.n, g.cout, g.oh, g.ow])
}

/// `out[n, o, y, x] = bias[o] + Σ_{c,ky,kx} kernel[o, c, ky, kx] · in[n, c, y·s+ky−p, x·s+kx−p]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, kernel, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![g.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let plane = g.out_plane();
    let ld = g.n * plane;
    let cols = columns(&g, input.data());
    let mut out_t = vec![T::zero(); g.cout * ld];
    if let Some(b) = bias {
        for (row, &bv) in out_t.chunks_mut(ld).zip(b.data()) {
            row.fill(bv);
        }
    }
    T::gemm(g.cout, g.patch(), ld, kernel.data(), false, &cols, false, &mut out_t, bias.is_some());
    let out = from_channel_major(&out_t, g.n, g.cout, plane);
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to the requested operands.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input, kernel, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            lhs: vec![g.n, g.cout, g.oh, g.ow],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (want_input, want_kernel, want_bias) = want;
    let plane = g.out_plane();
    let ld = g.n * plane;
    let gout = grad_out.data();
    let gout_t = to_channel_major(gout, g.n, g.cout, plane);

    let grad_input = want_input.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * ld];
        T::gemm(g.patch(), g.cout, ld, kernel.data(), true, &gout_t, false, &mut dcols, false);
        if g.is_pointwise() {
            from_channel_major(&dcols, g.n, g.cin, plane)
        } else {
            let mut gin = vec![T::zero(); g.n * g.in_item()];
            col2im_batch(&g, &dcols, &mut gin);
            gin
        }
    });

    let grad_kernel = want_kernel.then(|| {
        let cols = columns(&g, input.data());
        let mut dk = vec![T::zero(); g.cout * g.patch()];
        T::gemm(g.cout, ld, g.patch(), &gout_t, false, &cols, true, &mut dk, false);
        dk
    });

    let grad_bias = want_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let base = (b * g.cout + o) * plane;
                for &v in &gout[base..base + plane] {
                    *acc += v;
                }
            }
        }
        db
    });

    Ok(ConvGrads {
        input: grad_input
            .map(|d| Tensor::new(input.shape(), d))
            .transpose()?,
        kernel: grad_kernel
            .map(|d| Tensor::new(kernel.shape(), d))
            .transpose()?,
        bias: grad_bias.map(|d| Tensor::new(&[g.cout], d)).transpose()?,
    })
}

/// Six-nested-loop reference convolution.
pub fn conv2d_naive<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, kernel, spec)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let o_data = out.data_mut();
    for b in 0..g.n {
        for o in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias.map_or(T::zero(), |bb| bb.data()[o]);
                    for c in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                    acc += k[((o * g.cin + c) * g.kh + ky) * g.kw + kx]
                                        * x[((b * g.cin + c) * g.h + y) * g.w + xx];
                                }
                            }
                        }
                    }
                    o_data[((b * g.cout + o) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}
