//! Raw slice kernels behind the tape operations. Layouts are NCHW row-major.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<R: Real>(g: &ConvGeom, x: &[R], cols: &mut [R]) {
    let (ho, wo) = (g.ho, g.wo);
    let plane = ho * wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = R::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            R::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<R: Real>(g: &ConvGeom, cols: &[R], dx: &mut [R]) {
    let (ho, wo) = (g.ho, g.wo);
    let plane = ho * wo;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<R: Real>(g: &ConvGeom, x: &[R], weight: &[R], bias: &[R]) -> Vec<R> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![R::zero(); g.batch * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![R::zero(); patch * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        let rhs: &[R] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        R::gemm(g.cout, patch, plane, weight, false, rhs, false, ob, false);
        for (co, row) in ob.chunks_exact_mut(plane).enumerate() {
            let bv = bias[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when requested.
pub(crate) fn conv2d_backward<R: Real>(
    g: &ConvGeom,
    x: &[R],
    weight: &[R],
    gout: &[R],
    dweight: &mut [R],
    dbias: &mut [R],
    want_dx: bool,
) -> Option<Vec<R>> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![R::zero(); patch * plane]
    };
    let mut dcols = if want_dx && !g.is_pointwise() {
        vec![R::zero(); patch * plane]
    } else {
        Vec::new()
    };
    let mut dx = want_dx.then(|| vec![R::zero(); x.len()]);
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let gb = &gout[b * g.cout * plane..(b + 1) * g.cout * plane];
        let rhs: &[R] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        R::gemm(g.cout, plane, patch, gb, false, rhs, true, dweight, true);
        for (co, row) in gb.chunks_exact(plane).enumerate() {
            let mut s = R::zero();
            for &v in row {
                s += v;
            }
            dbias[co] += s;
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()];
            if g.is_pointwise() {
                R::gemm(patch, g.cout, plane, weight, true, gb, false, dxb, false);
            } else {
                R::gemm(patch, g.cout, plane, weight, true, gb, false, &mut dcols, false);
                col2im_add(g, &dcols, dxb);
            }
        }
    }
    dx
}

/// 2×2 stride-2 max pooling. Returns the output and the winning position
/// (0..4, row-major inside the window) of every output element; ties go to
/// the first position.
pub(crate) fn maxpool2x2_forward<R: Real>(x: &[R], planes: usize, h: usize, w: usize) -> (Vec<R>, Vec<u8>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * w + 2 * ox;
                let cands = [xp[base], xp[base + 1], xp[base + w], xp[base + w + 1]];
                let mut best = 0usize;
                for (i, &c) in cands.iter().enumerate().skip(1) {
                    if c > cands[best] {
                        best = i;
                    }
                }
                out.push(cands[best]);
                arg.push(best as u8);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2x2_backward<R: Real>(gout: &[R], arg: &[u8], planes: usize, h: usize, w: usize) -> Vec<R> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![R::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (p * ho + oy) * wo + ox;
                let a = arg[o] as usize;
                let iy = 2 * oy + a / 2;
                let ix = 2 * ox + a % 2;
                dx[p * h * w + iy * w + ix] += gout[o];
            }
        }
    }
    dx
}

pub(crate) fn upsample2x_forward<R: Real>(x: &[R], planes: usize, h: usize, w: usize) -> Vec<R> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![R::zero(); planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            let src = &xp[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, v) in op[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<R: Real>(gout: &[R], planes: usize, h: usize, w: usize) -> Vec<R> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![R::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &gout[p * ho * wo..(p + 1) * ho * wo];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                dp[(y / 2) * w + xo / 2] += gp[y * wo + xo];
            }
        }
    }
    dx
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub(crate) fn softmax_channels<R: Real>(x: &[R], batch: usize, channels: usize, plane: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    let mut maxv = vec![R::zero(); plane];
    let mut denom = vec![R::zero(); plane];
    for b in 0..batch {
        let base = b * channels * plane;
        let xb = &x[base..base + channels * plane];
        let ob = &mut out[base..base + channels * plane];
        maxv.copy_from_slice(&xb[..plane]);
        for c in 1..channels {
            for (m, &v) in maxv.iter_mut().zip(&xb[c * plane..(c + 1) * plane]) {
                if v > *m {
                    *m = v;
                }
            }
        }
        denom.iter_mut().for_each(|d| *d = R::zero());
        for c in 0..channels {
            let src = &xb[c * plane..(c + 1) * plane];
            let dst = &mut ob[c * plane..(c + 1) * plane];
            for i in 0..plane {
                let e = (src[i] - maxv[i]).exp();
                dst[i] = e;
                denom[i] += e;
            }
        }
        for c in 0..channels {
            for (v, &d) in ob[c * plane..(c + 1) * plane].iter_mut().zip(&denom) {
                *v = *v / d;
            }
        }
    }
    out
}

/// Backward of the channel softmax given its output `p`: `dx = p ⊙ (g − Σ_c p g)`.
pub(crate) fn softmax_channels_backward<R: Real>(
    p: &[R],
    gout: &[R],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<R> {
    let mut dx = vec![R::zero(); p.len()];
    let mut dot = vec![R::zero(); plane];
    for b in 0..batch {
        let base = b * channels * plane;
        dot.iter_mut().for_each(|d| *d = R::zero());
        for c in 0..channels {
            let off = base + c * plane;
            for i in 0..plane {
                dot[i] += p[off + i] * gout[off + i];
            }
        }
        for c in 0..channels {
            let off = base + c * plane;
            for i in 0..plane {
                dx[off + i] = p[off + i] * (gout[off + i] - dot[i]);
            }
        }
    }
    dx
}
