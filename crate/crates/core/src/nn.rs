//! Convolution, channel layer norm, bilinear sampling and pixel
//! shuffle/unshuffle, all in NCHW layout.

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    /// Symmetric zero padding.
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvOptions {
    /// Stride 1 with `(k - 1) / 2` zero padding.
    pub fn same(kernel: usize) -> Self {
        ConvOptions {
            padding: (kernel - 1) / 2,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], opts: ConvOptions) -> Result<Self> {
        let dump = || {
            format!(
                "input {x:?}, weight {w:?}, stride {}, padding {}, groups {}",
                opts.stride, opts.padding, opts.groups
            )
        };
        if x.len() != 4 || w.len() != 4 || opts.stride == 0 || opts.groups == 0 {
            return Err(Error::ConvGeometry(dump()));
        }
        let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        let g = opts.groups;
        if cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::ConvGeometry(dump()));
        }
        if h + 2 * opts.padding < kh || wd + 2 * opts.padding < kw || kh == 0 || kw == 0 {
            return Err(Error::ConvGeometry(dump()));
        }
        let ho = (h + 2 * opts.padding - kh) / opts.stride + 1;
        let wo = (wd + 2 * opts.padding - kw) / opts.stride + 1;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.padding,
            groups: g,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }

    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout
    }

    fn macs(&self) -> u64 {
        (self.n * self.cout * self.ho * self.wo * (self.cin / self.groups) * self.kh * self.kw)
            as u64
    }

    /// Output columns `[ox_lo, ox_hi)` whose input column `ox*s + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(self.wo, self.w, self.stride, kx, self.pad)
    }

    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(self.ho, self.h, self.stride, ky, self.pad)
    }
}

fn valid_range(out: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*s + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest o with o*s + k - pad <= extent - 1
    let hi = if extent + pad < k + 1 {
        0
    } else {
        ((extent + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Cross-correlation. `x`: [N, C_in, H, W], `weight`: [C_out, C_in/groups, kh, kw],
/// `bias`: [C_out].
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    opts: ConvOptions,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let geo = ConvGeom::new(xv.shape(), wv.shape(), opts)?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(Error::shape("conv2d bias", &b.shape(), &[geo.cout]));
        }
    }
    let bv = bias.map(|b| b.value());
    let mut out = if geo.pointwise() {
        pointwise_forward(&geo, xv.data(), wv.data())
    } else if geo.depthwise() {
        depthwise_forward(&geo, xv.data(), wv.data())
    } else {
        general_forward(&geo, xv.data(), wv.data())
    };
    if let Some(b) = &bv {
        let plane = geo.ho * geo.wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = b.data()[i % geo.cout];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    let out = Tensor::from_parts(vec![geo.n, geo.cout, geo.ho, geo.wo], out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().record(out, &parents, 2 * geo.macs(), move |g| {
        let (gx, gw) = if geo.pointwise() {
            pointwise_backward(&geo, xv.data(), wv.data(), g.data())
        } else if geo.depthwise() {
            depthwise_backward(&geo, xv.data(), wv.data(), g.data())
        } else {
            general_backward(&geo, xv.data(), wv.data(), g.data())
        };
        let mut grads = vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), gx)),
            Some(Tensor::from_parts(wv.shape().to_vec(), gw)),
        ];
        if has_bias {
            let plane = geo.ho * geo.wo;
            let mut gb = vec![T::zero(); geo.cout];
            for (i, chunk) in g.data().chunks(plane).enumerate() {
                gb[i % geo.cout] = gb[i % geo.cout] + chunk.iter().copied().sum();
            }
            grads.push(Some(Tensor::from_parts(vec![geo.cout], gb)));
        }
        grads
    }))
}

fn pointwise_forward<T: Scalar>(geo: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let hw = geo.h * geo.w;
    let mut out = vec![T::zero(); geo.n * geo.cout * hw];
    for n in 0..geo.n {
        T::gemm(
            geo.cout,
            geo.cin,
            hw,
            w,
            geo.cin as isize,
            1,
            &x[n * geo.cin * hw..(n + 1) * geo.cin * hw],
            hw as isize,
            1,
            T::zero(),
            &mut out[n * geo.cout * hw..(n + 1) * geo.cout * hw],
            hw as isize,
            1,
        );
    }
    out
}

fn pointwise_backward<T: Scalar>(geo: &ConvGeom, x: &[T], w: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let hw = geo.h * geo.w;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for n in 0..geo.n {
        let gn = &g[n * geo.cout * hw..(n + 1) * geo.cout * hw];
        let xn = &x[n * geo.cin * hw..(n + 1) * geo.cin * hw];
        // dX = Wᵀ · dY
        T::gemm(
            geo.cin,
            geo.cout,
            hw,
            w,
            1,
            geo.cin as isize,
            gn,
            hw as isize,
            1,
            T::zero(),
            &mut gx[n * geo.cin * hw..(n + 1) * geo.cin * hw],
            hw as isize,
            1,
        );
        // dW += dY · Xᵀ
        T::gemm(
            geo.cout,
            hw,
            geo.cin,
            gn,
            hw as isize,
            1,
            xn,
            1,
            hw as isize,
            if n == 0 { T::zero() } else { T::one() },
            &mut gw,
            geo.cin as isize,
            1,
        );
    }
    (gx, gw)
}

// strided rows index the output by position, not by iteration
#[allow(clippy::needless_range_loop)]
fn depthwise_forward<T: Scalar>(geo: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (hw_in, hw_out) = (geo.h * geo.w, geo.ho * geo.wo);
    let kk = geo.kh * geo.kw;
    let s = geo.stride;
    let mut out = vec![T::zero(); geo.n * geo.cout * hw_out];
    for n in 0..geo.n {
        for c in 0..geo.cin {
            let src = &x[(n * geo.cin + c) * hw_in..(n * geo.cin + c + 1) * hw_in];
            let dst = &mut out[(n * geo.cin + c) * hw_out..(n * geo.cin + c + 1) * hw_out];
            let wc = &w[c * kk..(c + 1) * kk];
            for ky in 0..geo.kh {
                let (oy_lo, oy_hi) = geo.valid_rows(ky);
                for kx in 0..geo.kw {
                    let (ox_lo, ox_hi) = geo.valid_cols(kx);
                    let wk = wc[ky * geo.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geo.pad;
                        let row_in = &src[iy * geo.w..(iy + 1) * geo.w];
                        let row_out = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                        if s == 1 {
                            let ix0 = ox_lo + kx - geo.pad;
                            for (o, &i) in row_out[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&row_in[ix0..ix0 + (ox_hi - ox_lo)])
                            {
                                *o = *o + wk * i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - geo.pad;
                                row_out[ox] = row_out[ox] + wk * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::needless_range_loop)]
fn depthwise_backward<T: Scalar>(geo: &ConvGeom, x: &[T], w: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let (hw_in, hw_out) = (geo.h * geo.w, geo.ho * geo.wo);
    let kk = geo.kh * geo.kw;
    let s = geo.stride;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for n in 0..geo.n {
        for c in 0..geo.cin {
            let src = &x[(n * geo.cin + c) * hw_in..(n * geo.cin + c + 1) * hw_in];
            let gsrc = &mut gx[(n * geo.cin + c) * hw_in..(n * geo.cin + c + 1) * hw_in];
            let gout = &g[(n * geo.cin + c) * hw_out..(n * geo.cin + c + 1) * hw_out];
            for ky in 0..geo.kh {
                let (oy_lo, oy_hi) = geo.valid_rows(ky);
                for kx in 0..geo.kw {
                    let (ox_lo, ox_hi) = geo.valid_cols(kx);
                    let wk = w[c * kk + ky * geo.kw + kx];
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geo.pad;
                        let grow = &gout[oy * geo.wo..(oy + 1) * geo.wo];
                        if s == 1 {
                            let ix0 = ox_lo + kx - geo.pad;
                            let len = ox_hi - ox_lo;
                            let row_in = &src[iy * geo.w + ix0..iy * geo.w + ix0 + len];
                            let grow_in = &mut gsrc[iy * geo.w + ix0..iy * geo.w + ix0 + len];
                            for ((gi, &xi), &go) in
                                grow_in.iter_mut().zip(row_in).zip(&grow[ox_lo..ox_hi])
                            {
                                *gi = *gi + wk * go;
                                acc = acc + go * xi;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - geo.pad;
                                let go = grow[ox];
                                gsrc[iy * geo.w + ix] = gsrc[iy * geo.w + ix] + wk * go;
                                acc = acc + go * src[iy * geo.w + ix];
                            }
                        }
                    }
                    gw[c * kk + ky * geo.kw + kx] = gw[c * kk + ky * geo.kw + kx] + acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Unfolds one group of one image into `[cin_g·kh·kw, ho·wo]`.
fn im2col<T: Scalar>(geo: &ConvGeom, x: &[T], n: usize, group: usize, cols: &mut [T]) {
    let cin_g = geo.cin / geo.groups;
    let hw_out = geo.ho * geo.wo;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..cin_g {
        let c = group * cin_g + ci;
        let src = &x[(n * geo.cin + c) * geo.h * geo.w..(n * geo.cin + c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (oy_lo, oy_hi) = geo.valid_rows(ky);
            for kx in 0..geo.kw {
                let (ox_lo, ox_hi) = geo.valid_cols(kx);
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * geo.stride + ky - geo.pad;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * geo.stride + kx - geo.pad;
                        dst[oy * geo.wo + ox] = src[iy * geo.w + ix];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(geo: &ConvGeom, cols: &[T], n: usize, group: usize, gx: &mut [T]) {
    let cin_g = geo.cin / geo.groups;
    let hw_out = geo.ho * geo.wo;
    for ci in 0..cin_g {
        let c = group * cin_g + ci;
        let dst = &mut gx[(n * geo.cin + c) * geo.h * geo.w..(n * geo.cin + c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (oy_lo, oy_hi) = geo.valid_rows(ky);
            for kx in 0..geo.kw {
                let (ox_lo, ox_hi) = geo.valid_cols(kx);
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * geo.stride + ky - geo.pad;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * geo.stride + kx - geo.pad;
                        dst[iy * geo.w + ix] = dst[iy * geo.w + ix] + src[oy * geo.wo + ox];
                    }
                }
            }
        }
    }
}

fn general_forward<T: Scalar>(geo: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let cin_g = geo.cin / geo.groups;
    let cout_g = geo.cout / geo.groups;
    let kdim = cin_g * geo.kh * geo.kw;
    let hw_out = geo.ho * geo.wo;
    let mut out = vec![T::zero(); geo.n * geo.cout * hw_out];
    let mut cols = vec![T::zero(); kdim * hw_out];
    for n in 0..geo.n {
        for grp in 0..geo.groups {
            im2col(geo, x, n, grp, &mut cols);
            let o0 = (n * geo.cout + grp * cout_g) * hw_out;
            T::gemm(
                cout_g,
                kdim,
                hw_out,
                &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim],
                kdim as isize,
                1,
                &cols,
                hw_out as isize,
                1,
                T::zero(),
                &mut out[o0..o0 + cout_g * hw_out],
                hw_out as isize,
                1,
            );
        }
    }
    out
}

fn general_backward<T: Scalar>(geo: &ConvGeom, x: &[T], w: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let cin_g = geo.cin / geo.groups;
    let cout_g = geo.cout / geo.groups;
    let kdim = cin_g * geo.kh * geo.kw;
    let hw_out = geo.ho * geo.wo;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut cols = vec![T::zero(); kdim * hw_out];
    let mut gcols = vec![T::zero(); kdim * hw_out];
    for n in 0..geo.n {
        for grp in 0..geo.groups {
            im2col(geo, x, n, grp, &mut cols);
            let o0 = (n * geo.cout + grp * cout_g) * hw_out;
            let gslice = &g[o0..o0 + cout_g * hw_out];
            let wg = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            // dW_g += dY_g · colsᵀ
            T::gemm(
                cout_g,
                hw_out,
                kdim,
                gslice,
                hw_out as isize,
                1,
                &cols,
                1,
                hw_out as isize,
                T::one(),
                &mut gw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim],
                kdim as isize,
                1,
            );
            // dcols = W_gᵀ · dY_g
            T::gemm(
                kdim,
                cout_g,
                hw_out,
                wg,
                1,
                kdim as isize,
                gslice,
                hw_out as isize,
                1,
                T::zero(),
                &mut gcols,
                hw_out as isize,
                1,
            );
            col2im(geo, &gcols, n, grp, &mut gx);
        }
    }
    (gx, gw)
}

/// Reflect padding (edge pixel not repeated) on both spatial axes.
pub fn pad_reflect<'t, T: Scalar>(x: Var<'t, T>, pad: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let sh = xv.shape().to_vec();
    if sh.len() != 4 {
        return Err(Error::shape("pad_reflect", &sh, &[0, 0, 0, 0]));
    }
    let (h, w) = (sh[2], sh[3]);
    if pad >= h || pad >= w {
        return Err(Error::ConvGeometry(format!(
            "reflect padding {pad} needs spatial extents > {pad}, got {h}x{w}"
        )));
    }
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        r as usize
    };
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let planes = sh[0] * sh[1];
    let mut index = Vec::with_capacity(planes * hp * wp);
    for p in 0..planes {
        for y in 0..hp {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..wp {
                let sx = reflect(xx as isize - pad as isize, w);
                index.push(p * h * w + sy * w + sx);
            }
        }
    }
    let out: Vec<T> = index.iter().map(|&i| xv.data()[i]).collect();
    let out = Tensor::from_parts(vec![sh[0], sh[1], hp, wp], out);
    Ok(x.tape().record(out, &[x], 0, move |g| {
        let mut gx = vec![T::zero(); sh.iter().product()];
        for (&i, &gv) in index.iter().zip(g.data()) {
            gx[i] = gx[i] + gv;
        }
        vec![Some(Tensor::from_parts(sh.clone(), gx))]
    }))
}

/// Normalizes each spatial location across the channel axis (axis 1), then
/// applies the per-channel affine `gamma`, `beta`.
pub fn layer_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let sh = xv.shape().to_vec();
    if sh.len() < 2 {
        return Err(Error::shape("layer_norm", &sh, &gamma.shape()));
    }
    let (n, c) = (sh[0], sh[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm", &sh, &gamma.shape()));
    }
    let gv = gamma.value();
    let bv = beta.value();
    let hw: usize = sh[2..].iter().product();
    let eps = T::of(eps);
    let inv_c = T::one() / T::of(c as f64);
    let mut xhat = vec![T::zero(); xv.numel()];
    let mut rstd = vec![T::zero(); n * hw];
    let mut out = vec![T::zero(); xv.numel()];
    let xd = xv.data();
    let mut mean = vec![T::zero(); hw];
    let mut var = vec![T::zero(); hw];
    for b in 0..n {
        mean.iter_mut().for_each(|v| *v = T::zero());
        var.iter_mut().for_each(|v| *v = T::zero());
        let base = b * c * hw;
        for ch in 0..c {
            for (m, &v) in mean
                .iter_mut()
                .zip(&xd[base + ch * hw..base + (ch + 1) * hw])
            {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_c);
        for ch in 0..c {
            for ((s, &m), &v) in var
                .iter_mut()
                .zip(&mean)
                .zip(&xd[base + ch * hw..base + (ch + 1) * hw])
            {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        let r = &mut rstd[b * hw..(b + 1) * hw];
        for (ri, &s) in r.iter_mut().zip(&var) {
            *ri = T::one() / (s * inv_c + eps).sqrt();
        }
        for ch in 0..c {
            let range = base + ch * hw..base + (ch + 1) * hw;
            let (gc, bc) = (gv.data()[ch], bv.data()[ch]);
            for (((xh, o), &v), (&m, &ri)) in xhat[range.clone()]
                .iter_mut()
                .zip(&mut out[range.clone()])
                .zip(&xd[range])
                .zip(mean.iter().zip(r.iter()))
            {
                *xh = (v - m) * ri;
                *o = *xh * gc + bc;
            }
        }
    }
    let out = Tensor::from_parts(sh.clone(), out);
    let flops = 8 * xv.numel() as u64;
    Ok(x.tape().record(out, &[x, gamma, beta], flops, move |g| {
        let gd = g.data();
        let mut gx = vec![T::zero(); gd.len()];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let mut mean_d = vec![T::zero(); hw];
        let mut mean_dx = vec![T::zero(); hw];
        for b in 0..n {
            mean_d.iter_mut().for_each(|v| *v = T::zero());
            mean_dx.iter_mut().for_each(|v| *v = T::zero());
            let base = b * c * hw;
            for ch in 0..c {
                let gc = gv.data()[ch];
                let range = base + ch * hw..base + (ch + 1) * hw;
                let (mut sg, mut sb) = (T::zero(), T::zero());
                for (((md, mdx), &gy), &xh) in mean_d
                    .iter_mut()
                    .zip(mean_dx.iter_mut())
                    .zip(&gd[range.clone()])
                    .zip(&xhat[range])
                {
                    let d = gy * gc;
                    *md = *md + d;
                    *mdx = *mdx + d * xh;
                    sg = sg + gy * xh;
                    sb = sb + gy;
                }
                ggamma[ch] = ggamma[ch] + sg;
                gbeta[ch] = gbeta[ch] + sb;
            }
            for ch in 0..c {
                let gc = gv.data()[ch];
                let range = base + ch * hw..base + (ch + 1) * hw;
                for ((((o, &gy), &xh), (&md, &mdx)), &ri) in gx[range.clone()]
                    .iter_mut()
                    .zip(&gd[range.clone()])
                    .zip(&xhat[range])
                    .zip(mean_d.iter().zip(&mean_dx))
                    .zip(&rstd[b * hw..(b + 1) * hw])
                {
                    *o = ri * (gy * gc - md * inv_c - xh * mdx * inv_c);
                }
            }
        }
        vec![
            Some(Tensor::from_parts(sh.clone(), gx)),
            Some(Tensor::from_parts(vec![c], ggamma)),
            Some(Tensor::from_parts(vec![c], gbeta)),
        ]
    }))
}

/// Lattice blend data for one sampling location along one axis.
#[derive(Clone, Copy)]
struct AxisSample<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// d(pixel coordinate)/d(normalized coordinate); zero when clamped.
    dpix: T,
}

/// Normalized coordinate in [-1, 1] (with ±1 at the centers of the border
/// pixels) to lattice indices and blend weight. Out-of-range coordinates
/// are clamped to the border.
fn axis_sample<T: Scalar>(u: T, extent: usize) -> AxisSample<T> {
    if extent == 1 {
        return AxisSample {
            lo: 0,
            hi: 0,
            frac: T::zero(),
            dpix: T::zero(),
        };
    }
    let half = T::of((extent - 1) as f64) * T::of(0.5);
    let inside = u >= -T::one() && u <= T::one();
    let uc = if u.is_nan() {
        T::zero()
    } else {
        u.max(-T::one()).min(T::one())
    };
    let pix = (uc + T::one()) * half;
    let max_lo = extent - 2;
    let lo = pix.floor().to_usize().unwrap_or(0).min(max_lo);
    AxisSample {
        lo,
        hi: lo + 1,
        frac: pix - T::of(lo as f64),
        dpix: if inside { half } else { T::zero() },
    }
}

/// Bilinear sampling. `x`: [N, C, H, W]; `coords`: [N, Hg, Wg, 2] with the
/// last axis ordered (horizontal, vertical) in normalized coordinates.
/// Output: [N, C, Hg, Wg]. Differentiable in both `x` and `coords`.
pub fn bilinear_sample<'t, T: Scalar>(x: Var<'t, T>, coords: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let cv = coords.value();
    let (xs, cs) = (xv.shape().to_vec(), cv.shape().to_vec());
    if xs.len() != 4 || cs.len() != 4 || cs[3] != 2 || cs[0] != xs[0] {
        return Err(Error::shape("bilinear_sample", &xs, &cs));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (hg, wg) = (cs[1], cs[2]);
    let points = hg * wg;
    let samples: Vec<(AxisSample<T>, AxisSample<T>)> = cv
        .data()
        .chunks(2)
        .map(|uv| (axis_sample(uv[0], w), axis_sample(uv[1], h)))
        .collect();
    let mut out = vec![T::zero(); n * c * points];
    let xd = xv.data();
    for b in 0..n {
        for ch in 0..c {
            let img = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dst = &mut out[(b * c + ch) * points..(b * c + ch + 1) * points];
            for (o, (sx, sy)) in dst.iter_mut().zip(&samples[b * points..(b + 1) * points]) {
                let top = img[sy.lo * w + sx.lo] * (T::one() - sx.frac)
                    + img[sy.lo * w + sx.hi] * sx.frac;
                let bot = img[sy.hi * w + sx.lo] * (T::one() - sx.frac)
                    + img[sy.hi * w + sx.hi] * sx.frac;
                *o = top * (T::one() - sy.frac) + bot * sy.frac;
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, hg, wg], out);
    let flops = 8 * (n * c * points) as u64;
    Ok(x.tape().record(out, &[x, coords], flops, move |g| {
        let gd = g.data();
        let mut gx = vec![T::zero(); xd_len(&xs)];
        let mut gc = vec![T::zero(); cs.iter().product()];
        for b in 0..n {
            for ch in 0..c {
                let img = &xv.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let gimg = &mut gx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let gout = &gd[(b * c + ch) * points..(b * c + ch + 1) * points];
                for (p, (&go, (sx, sy))) in gout
                    .iter()
                    .zip(&samples[b * points..(b + 1) * points])
                    .enumerate()
                {
                    let (fx, fy) = (sx.frac, sy.frac);
                    let (ofx, ofy) = (T::one() - fx, T::one() - fy);
                    let i00 = sy.lo * w + sx.lo;
                    let i01 = sy.lo * w + sx.hi;
                    let i10 = sy.hi * w + sx.lo;
                    let i11 = sy.hi * w + sx.hi;
                    gimg[i00] = gimg[i00] + go * ofx * ofy;
                    gimg[i01] = gimg[i01] + go * fx * ofy;
                    gimg[i10] = gimg[i10] + go * ofx * fy;
                    gimg[i11] = gimg[i11] + go * fx * fy;
                    let dfx = ofy * (img[i01] - img[i00]) + fy * (img[i11] - img[i10]);
                    let dfy = ofx * (img[i10] - img[i00]) + fx * (img[i11] - img[i01]);
                    let k = (b * points + p) * 2;
                    gc[k] = gc[k] + go * dfx * sx.dpix;
                    gc[k + 1] = gc[k + 1] + go * dfy * sy.dpix;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(xs.clone(), gx)),
            Some(Tensor::from_parts(cs.clone(), gc)),
        ]
    }))
}

fn xd_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// [N, C, H, W] -> [N, C·r², H/r, W/r]; output channel `c·r² + i·r + j`
/// holds the pixels at offset (i, j) of each r×r cell.
pub fn pixel_unshuffle<'t, T: Scalar>(x: Var<'t, T>, r: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 {
        return Err(Error::shape("pixel_unshuffle", &s, &[r]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % r != 0 {
        return Err(Error::divisibility("pixel_unshuffle", "height", h, r));
    }
    if w % r != 0 {
        return Err(Error::divisibility("pixel_unshuffle", "width", w, r));
    }
    x.reshape(&[n, c, h / r, r, w / r, r])?
        .permute(&[0, 1, 3, 5, 2, 4])?
        .reshape(&[n, c * r * r, h / r, w / r])
}

/// Inverse of [`pixel_unshuffle`]: [N, C·r², H, W] -> [N, C, H·r, W·r].
pub fn pixel_shuffle<'t, T: Scalar>(x: Var<'t, T>, r: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 {
        return Err(Error::shape("pixel_shuffle", &s, &[r]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c % (r * r) != 0 {
        return Err(Error::divisibility("pixel_shuffle", "channels", c, r * r));
    }
    let co = c / (r * r);
    x.reshape(&[n, co, r, r, h, w])?
        .permute(&[0, 1, 4, 2, 5, 3])?
        .reshape(&[n, co, h * r, w * r])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn identity_pointwise_conv() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin()));
        let w = tape.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| {
            if i % 4 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let y = conv2d(x, w, None, ConvOptions::default()).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::full(&[1, 1, 5, 5], 2.0));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = conv2d(x, w, None, ConvOptions::same(3)).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(y.get(&[0, 0, r, c]), 18.0);
            }
        }
        assert_eq!(y.get(&[0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn output_extent_formula() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 4, 9, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 1, 5, 5]));
        let opts = ConvOptions {
            stride: 2,
            padding: 2,
            groups: 4,
        };
        let y = conv2d(x, w, None, opts).unwrap();
        assert_eq!(
            y.shape(),
            vec![1, 4, (9 + 4 - 5) / 2 + 1, (8 + 4 - 5) / 2 + 1]
        );
    }

    #[test]
    fn bad_geometry_dumps_everything() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 3, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let msg = conv2d(x, w, None, ConvOptions::default())
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("[1, 3, 2, 2]") && msg.contains("[4, 2, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn general_and_depthwise_paths_agree_with_naive() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 7, 6], |i| ((i * 37 % 11) as f64) - 5.0);
        let cases = [
            (
                vec![6, 2, 3, 3],
                ConvOptions {
                    stride: 2,
                    padding: 1,
                    groups: 2,
                },
            ),
            (
                vec![4, 1, 5, 5],
                ConvOptions {
                    stride: 2,
                    padding: 2,
                    groups: 4,
                },
            ),
            (
                vec![4, 1, 3, 3],
                ConvOptions {
                    stride: 1,
                    padding: 1,
                    groups: 4,
                },
            ),
            (vec![3, 4, 1, 1], ConvOptions::default()),
            (
                vec![5, 4, 3, 2],
                ConvOptions {
                    stride: 1,
                    padding: 0,
                    groups: 1,
                },
            ),
        ];
        for (wshape, opts) in cases {
            let w = Tensor::<f64>::from_fn(&wshape, |i| ((i * 13 % 7) as f64) * 0.25 - 0.5);
            let tape = Tape::new();
            let y = conv2d(
                tape.constant(x.clone()),
                tape.constant(w.clone()),
                None,
                opts,
            )
            .unwrap()
            .value();
            let naive = naive_conv(&x, &w, opts);
            assert_eq!(y.shape(), naive.shape());
            assert!(y.max_abs_diff(&naive) < 1e-12, "{wshape:?} {opts:?}");
        }
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, o: ConvOptions) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let cout_g = cout / o.groups;
        let ho = (h + 2 * o.padding - kh) / o.stride + 1;
        let wo = (wd + 2 * o.padding - kw) / o.stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * o.stride + ky) as isize - o.padding as isize;
                                    let ix = (ox * o.stride + kx) as isize - o.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.get(&[b, grp * cin_g + ci, iy as usize, ix as usize])
                                        * w.get(&[co, ci, ky, kx]);
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        let _ = cin;
        Tensor::new(&[n, cout, ho, wo], out).unwrap()
    }

    #[test]
    fn layer_norm_constant_channels_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 4, 2, 2], |i| (i % 4) as f64));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = layer_norm(x, g, b, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_lattice_and_center() {
        let tape = Tape::new();
        let img =
            tape.constant(Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let coords = tape
            .constant(Tensor::new(&[1, 1, 3, 2], vec![0.0, 0.0, -1.0, -1.0, 1.0, -1.0]).unwrap());
        let y = bilinear_sample(img, coords).unwrap().value();
        assert_eq!(y.data(), &[1.5, 0.0, 1.0]);
    }

    #[test]
    fn bilinear_out_of_range_clamps() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let coords = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, -2.0, 5.0, 5.0]).unwrap());
        let y = bilinear_sample(img, coords).unwrap().value();
        assert_eq!(y.data(), &[1.0, 8.0]);
    }

    #[test]
    fn unshuffle_index_map() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = pixel_unshuffle(x, 2).unwrap().value();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let odd = tape.constant(Tensor::<f64>::zeros(&[1, 1, 3, 2]));
        assert!(matches!(
            pixel_unshuffle(odd, 2),
            Err(Error::Divisibility { .. })
        ));
    }

    #[test]
    fn reflect_pad_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let y = pad_reflect(x, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(&y.data()[..5], &[4.0, 3.0, 4.0, 5.0, 4.0]);
        assert_eq!(y.get(&[0, 0, 1, 0]), 1.0);
    }
}
