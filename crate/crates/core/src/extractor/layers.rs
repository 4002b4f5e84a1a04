//! Forward and backward kernels for the small set of layers the extractor uses.
//!
//! Activations are flat `f64` slices in channel-major `(c, h, w)` order.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions `o` with `0 <= o * stride + k - padding < extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p <= extent - 1
        let hi = if extent + p > k {
            ((extent + p - k - 1) / s + 1).min(out_extent)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for oc in 0..g.out_c {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(b[oc]);
        for ic in 0..g.in_c {
            let xin = &x[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                let rows = g.valid(ky, g.in_h, oh);
                for kx in 0..k {
                    let wv = w[((oc * g.in_c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = g.valid(kx, g.in_w, ow);
                    if cols.is_empty() {
                        continue;
                    }
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let orow = &mut plane[oy * ow + cols.start..oy * ow + cols.end];
                        let irow = &xin[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = cols.start + kx - g.padding;
                            for (o, xi) in orow.iter_mut().zip(&irow[ix0..ix0 + cols.len()]) {
                                *o += wv * xi;
                            }
                        } else {
                            for (o, ox) in orow.iter_mut().zip(cols.clone()) {
                                *o += wv * irow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and (optionally) parameter gradients of a convolution.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gin: &mut [f64],
    mut gw: Option<(&mut [f64], &mut [f64])>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    if let Some((_, gb)) = gw.as_mut() {
        for oc in 0..g.out_c {
            gb[oc] += gout[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    for oc in 0..g.out_c {
        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..g.in_c {
            let off = ic * g.in_h * g.in_w;
            for ky in 0..k {
                let rows = g.valid(ky, g.in_h, oh);
                for kx in 0..k {
                    let widx = ((oc * g.in_c + ic) * k + ky) * k + kx;
                    let wv = w[widx];
                    let cols = g.valid(kx, g.in_w, ow);
                    if cols.is_empty() {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &gplane[oy * ow + cols.start..oy * ow + cols.end];
                        let base = off + iy * g.in_w;
                        if g.stride == 1 {
                            let ix0 = base + cols.start + kx - g.padding;
                            let span = ix0..ix0 + cols.len();
                            if gw.is_some() {
                                for (gv, xv) in grow.iter().zip(&x[span.clone()]) {
                                    acc += gv * xv;
                                }
                            }
                            for (gi, gv) in gin[span].iter_mut().zip(grow) {
                                *gi += wv * gv;
                            }
                        } else {
                            for (gv, ox) in grow.iter().zip(cols.clone()) {
                                let ix = base + ox * g.stride + kx - g.padding;
                                gin[ix] += wv * gv;
                                acc += gv * x[ix];
                            }
                        }
                    }
                    if let Some((gw, _)) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn avg_pool_forward(c: usize, h: usize, w: usize, win: usize, x: &[f64], out: &mut [f64]) {
    let (oh, ow) = (h / win, w / win);
    let inv = 1.0 / (win * win) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..win {
                    let row = (ch * h + oy * win + dy) * w + ox * win;
                    s += x[row..row + win].iter().sum::<f64>();
                }
                out[(ch * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(c: usize, h: usize, w: usize, win: usize, gout: &[f64], gin: &mut [f64]) {
    let (oh, ow) = (h / win, w / win);
    let inv = 1.0 / (win * win) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gout[(ch * oh + oy) * ow + ox] * inv;
                for dy in 0..win {
                    let row = (ch * h + oy * win + dy) * w + ox * win;
                    for v in &mut gin[row..row + win] {
                        *v += gv;
                    }
                }
            }
        }
    }
}

pub(crate) fn dense_forward(in_dim: usize, out_dim: usize, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    for o in 0..out_dim {
        out[o] = b[o] + crate::numerics::dot(&w[o * in_dim..(o + 1) * in_dim], x);
    }
}

pub(crate) fn dense_backward(
    in_dim: usize,
    out_dim: usize,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gin: &mut [f64],
    mut gw: Option<(&mut [f64], &mut [f64])>,
) {
    for o in 0..out_dim {
        let go = gout[o];
        if go == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for (gi, wi) in gin.iter_mut().zip(row) {
            *gi += go * wi;
        }
        if let Some((gw, gb)) = gw.as_mut() {
            gb[o] += go;
            for (g, xi) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(x) {
                *g += go * xi;
            }
        }
    }
}
