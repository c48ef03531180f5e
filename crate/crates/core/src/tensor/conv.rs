use super::{Graph, Op, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Spatial padding mode.
///
/// `Same` pads so the output extent is `ceil(input / stride)`, placing the
/// odd pixel of padding after the input (TensorFlow convention). `Valid` uses
/// no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl std::str::FromStr for Padding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Self::Same),
            "valid" => Ok(Self::Valid),
            other => Err(Error::config(format!("unknown padding `{other}` (expected same|valid)"))),
        }
    }
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Same => "same",
            Self::Valid => "valid",
        })
    }
}

/// Output extent of a convolution along one axis, `None` if the kernel does not fit.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (kernel <= input).then(|| (input - kernel) / stride + 1),
    }
}

/// Index arithmetic shared by a convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        let err = || {
            Error::config(format!(
                "kernel {kernel} with stride {stride} and {padding} padding does not fit input {in_h}x{in_w}"
            ))
        };
        let out_h = conv_output_len(in_h, kernel, stride, padding).ok_or_else(err)?;
        let out_w = conv_output_len(in_w, kernel, stride, padding).ok_or_else(err)?;
        let pad = |input: usize, out: usize| match padding {
            Padding::Same => ((out - 1) * stride + kernel).saturating_sub(input) / 2,
            Padding::Valid => 0,
        };
        Ok(Self { in_h, in_w, kernel, stride, pad_top: pad(in_h, out_h), pad_left: pad(in_w, out_w), out_h, out_w })
    }

    /// Geometry of the convolution whose transpose maps `h×w` up to the returned input size.
    pub fn for_transpose(h: usize, w: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        let up = |x: usize| match padding {
            Padding::Same => x * stride,
            Padding::Valid => (x - 1) * stride + kernel,
        };
        let g = Self::new(up(h), up(w), kernel, stride, padding)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel of kernel tap (`ky`,`kx`) for output (`oy`,`ox`), if inside the input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then(|| iy * self.in_w + ix)
    }

    /// Unfolds channels `[c0, c0+cg)` of one `[H, W, C]` image into `[patches, K·K·cg]`.
    fn im2col<F: Real>(&self, image: &[F], channels: usize, c0: usize, cg: usize, col: &mut Vec<F>) {
        let k = self.kernel;
        col.clear();
        col.resize(self.patches() * k * k * cg, F::zero());
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = (oy * self.out_w + ox) * k * k * cg;
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(pix) = self.source(oy, ox, ky, kx) {
                            let dst = row + (ky * k + kx) * cg;
                            let src = pix * channels + c0;
                            col[dst..dst + cg].copy_from_slice(&image[src..src + cg]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-adds `[patches, K·K·cg]` back into channels `[c0, c0+cg)`.
    fn col2im<F: Real>(&self, col: &[F], channels: usize, c0: usize, cg: usize, image: &mut [F]) {
        let k = self.kernel;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = (oy * self.out_w + ox) * k * k * cg;
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(pix) = self.source(oy, ox, ky, kx) {
                            let src = row + (ky * k + kx) * cg;
                            let dst = pix * channels + c0;
                            for (d, &s) in image[dst..dst + cg].iter_mut().zip(&col[src..src + cg]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix view: element (r, c) lives at `offset + r*rs + c*cs`.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn dense(cols: usize) -> Self {
        Self { offset: 0, rs: cols, cs: 1 }
    }
    /// Transpose of a dense matrix with `cols` columns.
    fn dense_t(cols: usize) -> Self {
        Self { offset: 0, rs: 1, cs: cols }
    }
    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a·b + beta·c` over strided views with bounds checks.
#[allow(clippy::too_many_arguments)]
fn gemm_view<F: Real>(m: usize, k: usize, n: usize, a: &[F], va: View, b: &[F], vb: View, beta: F, c: &mut [F], vc: View) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(va.last(m, k) < a.len() && vb.last(k, n) < b.len() && vc.last(m, n) < c.len());
    // SAFETY: the assert bounds the furthest element each view touches.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Grouped 2-D convolution over NHWC input with a `[K, K, Cin/groups, Cout]` kernel.
struct Conv2d {
    geom: ConvGeometry,
    groups: usize,
}

fn conv_forward<F: Real>(geom: &ConvGeometry, groups: usize, x: &Tensor<F>, kernel: &Tensor<F>, bias: Option<&Tensor<F>>) -> Tensor<F> {
    let (n, cin) = (x.shape()[0], x.shape()[3]);
    let cout = kernel.shape()[3];
    let (cg, og) = (cin / groups, cout / groups);
    let kk = geom.kernel * geom.kernel * cg;
    let p = geom.patches();
    let mut out = vec![F::zero(); n * p * cout];
    if let Some(b) = bias {
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    let image_len = geom.in_h * geom.in_w * cin;
    let mut col = Vec::new();
    for img in 0..n {
        let image = &x.data()[img * image_len..(img + 1) * image_len];
        let dst = &mut out[img * p * cout..(img + 1) * p * cout];
        for g in 0..groups {
            geom.im2col(image, cin, g * cg, cg, &mut col);
            gemm_view(
                p,
                kk,
                og,
                &col,
                View::dense(kk),
                kernel.data(),
                View { offset: g * og, rs: cout, cs: 1 },
                F::one(),
                dst,
                View { offset: g * og, rs: cout, cs: 1 },
            );
        }
    }
    Tensor { shape: vec![n, geom.out_h, geom.out_w, cout], data: out }
}

/// Returns (d input, d kernel) for a grouped convolution given the output gradient.
fn conv_backward<F: Real>(
    geom: &ConvGeometry,
    groups: usize,
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    grad: &[F],
    need_x: bool,
    need_k: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (n, cin) = (x.shape()[0], x.shape()[3]);
    let cout = kernel.shape()[3];
    let (cg, og) = (cin / groups, cout / groups);
    let kk = geom.kernel * geom.kernel * cg;
    let p = geom.patches();
    let image_len = geom.in_h * geom.in_w * cin;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gk = need_k.then(|| Tensor::zeros(kernel.shape()));
    let mut col = Vec::new();
    let mut dcol = vec![F::zero(); p * kk];
    for img in 0..n {
        let image = &x.data()[img * image_len..(img + 1) * image_len];
        let gout = &grad[img * p * cout..(img + 1) * p * cout];
        for g in 0..groups {
            let gout_view = View { offset: g * og, rs: cout, cs: 1 };
            if let Some(gk) = gk.as_mut() {
                geom.im2col(image, cin, g * cg, cg, &mut col);
                // dW_g += colᵀ · dY_g
                gemm_view(
                    kk,
                    p,
                    og,
                    &col,
                    View::dense_t(kk),
                    gout,
                    gout_view,
                    F::one(),
                    gk.data_mut(),
                    View { offset: g * og, rs: cout, cs: 1 },
                );
            }
            if let Some(gx) = gx.as_mut() {
                // dcol = dY_g · W_gᵀ
                gemm_view(
                    p,
                    og,
                    kk,
                    gout,
                    gout_view,
                    kernel.data(),
                    View { offset: g * og, rs: 1, cs: cout },
                    F::zero(),
                    &mut dcol,
                    View::dense(kk),
                );
                let dst = &mut gx.data_mut()[img * image_len..(img + 1) * image_len];
                geom.col2im(&dcol, cin, g * cg, cg, dst);
            }
        }
    }
    (gx, gk)
}

fn bias_grad<F: Real>(grad: &[F], channels: usize) -> Tensor<F> {
    let mut gb = vec![F::zero(); channels];
    for row in grad.chunks(channels) {
        for (a, &b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor { shape: vec![channels], data: gb }
}

impl<F: Real> Op<F> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>, needs: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (gx, gk) = conv_backward(&self.geom, self.groups, inputs[0], inputs[1], grad.data(), needs[0], needs[1]);
        let mut out = vec![gx, gk];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| bias_grad(grad.data(), inputs[1].shape()[3])));
        }
        out
    }
}

/// Transposed convolution: the adjoint of [`Conv2d`] with respect to its input.
/// Kernel is `[K, K, Cout, Cin]`, i.e. the kernel of the forward convolution
/// mapping `Cout` channels down to `Cin`.
struct ConvTranspose2d {
    geom: ConvGeometry,
}

impl<F: Real> Op<F> for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "conv2d_transpose"
    }
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>, needs: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let geom = &self.geom;
        let n = x.shape()[0];
        let cin = x.shape()[3];
        let cout = output.shape()[3];
        let kk = geom.kernel * geom.kernel * cout;
        let p = geom.patches();
        let big_len = geom.in_h * geom.in_w * cout;
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gk = needs[1].then(|| Tensor::zeros(kernel.shape()));
        let mut col = Vec::new();
        for img in 0..n {
            // dZ = im2col(dY), Z = X · Wᵀ
            geom.im2col(&grad.data()[img * big_len..(img + 1) * big_len], cout, 0, cout, &mut col);
            let xm = &x.data()[img * p * cin..(img + 1) * p * cin];
            if let Some(gx) = gx.as_mut() {
                gemm_view(
                    p,
                    kk,
                    cin,
                    &col,
                    View::dense(kk),
                    kernel.data(),
                    View::dense(cin),
                    F::one(),
                    &mut gx.data_mut()[img * p * cin..(img + 1) * p * cin],
                    View::dense(cin),
                );
            }
            if let Some(gk) = gk.as_mut() {
                gemm_view(kk, p, cin, &col, View::dense_t(kk), xm, View::dense(cin), F::one(), gk.data_mut(), View::dense(cin));
            }
        }
        let mut out = vec![gx, gk];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| bias_grad(grad.data(), cout)));
        }
        out
    }
}

fn conv_transpose_forward<F: Real>(geom: &ConvGeometry, x: &Tensor<F>, kernel: &Tensor<F>, bias: Option<&Tensor<F>>) -> Tensor<F> {
    let n = x.shape()[0];
    let cin = x.shape()[3];
    let cout = kernel.shape()[2];
    let kk = geom.kernel * geom.kernel * cout;
    let p = geom.patches();
    let big_len = geom.in_h * geom.in_w * cout;
    let mut out = vec![F::zero(); n * big_len];
    let mut z = vec![F::zero(); p * kk];
    for img in 0..n {
        let xm = &x.data()[img * p * cin..(img + 1) * p * cin];
        gemm_view(p, cin, kk, xm, View::dense(cin), kernel.data(), View::dense_t(cin), F::zero(), &mut z, View::dense(kk));
        geom.col2im(&z, cout, 0, cout, &mut out[img * big_len..(img + 1) * big_len]);
    }
    if let Some(b) = bias {
        for row in out.chunks_mut(cout) {
            for (a, &bv) in row.iter_mut().zip(b.data()) {
                *a += bv;
            }
        }
    }
    Tensor { shape: vec![n, geom.in_h, geom.in_w, cout], data: out }
}

fn check_kernel(x: &[usize], kernel: &[usize]) -> Result<()> {
    if x.len() != 4 {
        return Err(Error::config(format!("convolution input must be NHWC, got shape {x:?}")));
    }
    if kernel.len() != 4 || kernel[0] != kernel[1] {
        return Err(Error::config(format!("convolution kernel must be [K, K, in, out], got {kernel:?}")));
    }
    Ok(())
}

fn check_bias<F: Real>(g: &Graph<F>, bias: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if g.shape(b) != [channels] {
            return Err(Error::shape_mismatch("convolution bias", g.shape(b), &[channels]));
        }
    }
    Ok(())
}

impl<F: Real> Graph<F> {
    /// 2-D convolution of NHWC `x` with a `[K, K, Cin, Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        self.conv2d_grouped(x, kernel, bias, stride, padding, 1)
    }

    /// Grouped convolution: input channels split into `groups` equal blocks, each
    /// convolved with its own slice of output channels. Kernel is `[K, K, Cin/groups, Cout]`.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        check_kernel(&xs, &ks)?;
        if groups == 0 || xs[3] % groups != 0 || ks[3] % groups != 0 || ks[2] * groups != xs[3] {
            return Err(Error::shape_mismatch(&format!("conv2d with {groups} groups: input vs kernel"), &xs, &ks));
        }
        check_bias(self, bias, ks[3])?;
        let geom = ConvGeometry::new(xs[1], xs[2], ks[0], stride, padding)?;
        let out = conv_forward(&geom, groups, self.value(x), self.value(kernel), bias.map(|b| self.value(b)));
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.apply(Conv2d { geom, groups }, &inputs, out)
    }

    /// Transposed convolution of NHWC `x` with a `[K, K, Cout, Cin]` kernel.
    /// Output extent is `H·stride` (same) or `(H−1)·stride + K` (valid).
    pub fn conv2d_transpose(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        check_kernel(&xs, &ks)?;
        if ks[3] != xs[3] {
            return Err(Error::shape_mismatch("conv2d_transpose input vs kernel", &xs, &ks));
        }
        check_bias(self, bias, ks[2])?;
        if stride == 0 {
            return Err(Error::config("conv2d_transpose stride must be ≥ 1"));
        }
        let geom = ConvGeometry::for_transpose(xs[1], xs[2], ks[0], stride, padding)?;
        let out = conv_transpose_forward(&geom, self.value(x), self.value(kernel), bias.map(|b| self.value(b)));
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.apply(ConvTranspose2d { geom }, &inputs, out)
    }
}
