//! Spatial ops: grouped 2-D cross-correlation, max pooling, and token-axis
//! adaptive average pooling.

use super::{Backward, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    images: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn cg_in(&self) -> usize {
        self.c_in / self.spec.groups
    }

    fn cg_out(&self) -> usize {
        self.c_out / self.spec.groups
    }

    fn col_rows(&self) -> usize {
        self.cg_in() * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfold channels `[c0, c0 + cg_in)` of one image into `col`.
    fn im2col<R: Real>(&self, img: &[R], c0: usize, col: &mut [R]) {
        let (k, s, p) = (self.k, self.spec.stride as isize, self.spec.padding as isize);
        let hw = self.hw_out();
        for c in 0..self.cg_in() {
            let plane = &img[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                    for oy in 0..self.h_out {
                        let iy = oy as isize * s + ky as isize - p;
                        let dst = &mut row[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = R::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize { R::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<R: Real>(&self, col: &[R], c0: usize, img: &mut [R]) {
        let (k, s, p) = (self.k, self.spec.stride as isize, self.spec.padding as isize);
        let hw = self.hw_out();
        for c in 0..self.cg_in() {
            let plane = &mut img[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                    for oy in 0..self.h_out {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += row[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dRule {
    geom: ConvGeom,
}

impl<R: Real> Backward<R> for Conv2dRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, need: &[bool]) -> Vec<Option<Tensor<R>>> {
        let geo = self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, hw, cg_out) = (geo.col_rows(), geo.hw_out(), geo.cg_out());
        let mut gx = need[0].then(|| Tensor::zeros(x.shape()));
        let mut gw = need[1].then(|| Tensor::zeros(w.shape()));
        let mut col = vec![R::zero(); rows * hw];
        let mut dcol = vec![R::zero(); rows * hw];
        let img_in = geo.c_in * geo.h * geo.w;
        let img_out = geo.c_out * hw;
        for n in 0..geo.images {
            let img = &x.data()[n * img_in..(n + 1) * img_in];
            for gi in 0..geo.spec.groups {
                let gout = &g.data()[n * img_out + gi * cg_out * hw..n * img_out + (gi + 1) * cg_out * hw];
                let wg = &w.data()[gi * cg_out * rows..(gi + 1) * cg_out * rows];
                if let Some(gw) = gw.as_mut() {
                    geo.im2col(img, gi * geo.cg_in(), &mut col);
                    let dst = &mut gw.data_mut()[gi * cg_out * rows..(gi + 1) * cg_out * rows];
                    // dW_g += dOut_g · colᵀ
                    R::gemm(cg_out, hw, rows, R::one(), gout, hw as isize, 1, &col, 1, hw as isize, R::one(), dst, rows as isize, 1);
                }
                if let Some(gx) = gx.as_mut() {
                    // dcol = W_gᵀ · dOut_g
                    R::gemm(rows, cg_out, hw, R::one(), wg, 1, rows as isize, gout, hw as isize, 1, R::zero(), &mut dcol, hw as isize, 1);
                    let dimg = &mut gx.data_mut()[n * img_in..(n + 1) * img_in];
                    geo.col2im(&dcol, gi * geo.cg_in(), dimg);
                }
            }
        }
        vec![gx, gw]
    }
}

/// Grouped 2-D cross-correlation.
///
/// `x` is `(..., C_in, H, W)` with any leading axes folded into the image batch (this
/// is how the time axis is handled); `w` is `(C_out, C_in / groups, k, k)`.
pub fn conv2d<R: Real>(g: &mut Graph<R>, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
    let (xv, wv) = (g.value(x), g.value(w));
    let xs = xv.shape();
    let ws = wv.shape();
    let geom_err = || Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}, {spec:?}"));
    if xs.len() < 3 || ws.len() != 4 || ws[2] != ws[3] || spec.groups == 0 || spec.stride == 0 {
        return Err(geom_err());
    }
    let r = xs.len();
    let (c_in, h, w_) = (xs[r - 3], xs[r - 2], xs[r - 1]);
    let (c_out, k) = (ws[0], ws[2]);
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 || ws[1] != c_in / spec.groups {
        return Err(geom_err());
    }
    if h + 2 * spec.padding < k || w_ + 2 * spec.padding < k {
        return Err(geom_err());
    }
    let geom = ConvGeom {
        images: xs[..r - 3].iter().product(),
        c_in,
        h,
        w: w_,
        c_out,
        k,
        h_out: (h + 2 * spec.padding - k) / spec.stride + 1,
        w_out: (w_ + 2 * spec.padding - k) / spec.stride + 1,
        spec,
    };
    let mut out_shape = xs[..r - 3].to_vec();
    out_shape.extend([c_out, geom.h_out, geom.w_out]);
    let mut out = Tensor::zeros(&out_shape);
    let (rows, hw, cg_out) = (geom.col_rows(), geom.hw_out(), geom.cg_out());
    let mut col = vec![R::zero(); rows * hw];
    let img_in = c_in * h * w_;
    let img_out = c_out * hw;
    for n in 0..geom.images {
        let img = &xv.data()[n * img_in..(n + 1) * img_in];
        for gi in 0..spec.groups {
            geom.im2col(img, gi * geom.cg_in(), &mut col);
            let wg = &wv.data()[gi * cg_out * rows..(gi + 1) * cg_out * rows];
            let dst = &mut out.data_mut()[n * img_out + gi * cg_out * hw..n * img_out + (gi + 1) * cg_out * hw];
            R::gemm(cg_out, rows, hw, R::one(), wg, rows as isize, 1, &col, hw as isize, 1, R::zero(), dst, hw as isize, 1);
        }
    }
    Ok(g.push(out, &[x, w], Conv2dRule { geom }))
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - k) / stride + 1
}

struct MaxPoolRule {
    argmax: Vec<u32>,
    in_plane: usize,
    out_plane: usize,
}

impl<R: Real> Backward<R> for MaxPoolRule {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let mut out = Tensor::zeros(inputs[0].shape());
        let od = out.data_mut();
        for (i, (gv, &am)) in g.data().iter().zip(&self.argmax).enumerate() {
            let plane = i / self.out_plane;
            od[plane * self.in_plane + am as usize] += *gv;
        }
        vec![Some(out)]
    }
}

/// Windowed maximum over the last two axes. Ties route the gradient to the first
/// index in row-major window order.
pub fn maxpool2d<R: Real>(g: &mut Graph<R>, x: Var, kernel: usize, stride: usize) -> Result<Var> {
    let xv = g.value(x);
    let xs = xv.shape();
    let r = xs.len();
    if r < 2 || kernel == 0 || stride == 0 {
        return Err(Error::shape("maxpool2d", format!("input {xs:?}")));
    }
    let (h, w) = (xs[r - 2], xs[r - 1]);
    if h < kernel || w < kernel || (h - kernel) % stride != 0 || (w - kernel) % stride != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("{h}x{w} is not tiled by kernel {kernel} stride {stride}"),
        ));
    }
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let planes: usize = xs[..r - 2].iter().product();
    let mut out_shape = xs[..r - 2].to_vec();
    out_shape.extend([ho, wo]);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    let xd = xv.data();
    for p in 0..planes {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (oy * stride) * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                }
                out.push(plane[best]);
                argmax.push(best as u32);
            }
        }
    }
    let out = Tensor::new(&out_shape, out)?;
    g.record_branches(argmax.iter().copied());
    Ok(g.push(
        out,
        &[x],
        MaxPoolRule {
            argmax,
            in_plane: h * w,
            out_plane: ho * wo,
        },
    ))
}

/// Token windows `[floor(i·N/n), floor((i+1)·N/n))` for `i in 0..n`.
pub fn token_windows(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len / n, (i + 1) * len / n)).collect()
}

struct AvgPoolTokensRule {
    windows: Vec<(usize, usize)>,
    tokens: usize,
    channels: usize,
}

impl<R: Real> Backward<R> for AvgPoolTokensRule {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool_tokens"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (n, d) = (self.windows.len(), self.channels);
        let mut out = Tensor::zeros(inputs[0].shape());
        let od = out.data_mut();
        for (s, gseq) in g.data().chunks_exact(n * d).enumerate() {
            let base = s * self.tokens * d;
            for (i, &(lo, hi)) in self.windows.iter().enumerate() {
                let inv = R::one() / R::from_usize(hi - lo).unwrap();
                for tok in lo..hi {
                    for c in 0..d {
                        od[base + tok * d + c] += gseq[i * d + c] * inv;
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

/// Average-pool the token axis of `(T, B, N, D)` down to `n` tokens.
pub fn adaptive_avg_pool_tokens<R: Real>(g: &mut Graph<R>, x: Var, n: usize) -> Result<Var> {
    let xv = g.value(x);
    let xs = xv.shape();
    if xs.len() != 4 {
        return Err(Error::shape("adaptive_avg_pool_tokens", format!("expected (T,B,N,D), got {xs:?}")));
    }
    let (tokens, d) = (xs[2], xs[3]);
    if n < 1 || n > tokens {
        return Err(Error::Config(format!(
            "aggregation length n={n} must lie in [1, {tokens}]"
        )));
    }
    let windows = token_windows(tokens, n);
    let seqs = xs[0] * xs[1];
    let mut out = vec![R::zero(); seqs * n * d];
    for s in 0..seqs {
        let src = &xv.data()[s * tokens * d..(s + 1) * tokens * d];
        for (i, &(lo, hi)) in windows.iter().enumerate() {
            let dst = &mut out[(s * n + i) * d..(s * n + i + 1) * d];
            for tok in lo..hi {
                for (o, v) in dst.iter_mut().zip(&src[tok * d..(tok + 1) * d]) {
                    *o += *v;
                }
            }
            let inv = R::one() / R::from_usize(hi - lo).unwrap();
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    }
    let out = Tensor::new(&[xs[0], xs[1], n, d], out)?;
    Ok(g.push(out, &[x], AvgPoolTokensRule { windows, tokens, channels: d }))
}
