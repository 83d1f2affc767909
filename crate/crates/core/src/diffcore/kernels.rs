//! Forward and adjoint kernels for the spatial operations.
//!
//! All kernels work on planar buffers; shape checks happen in the tape.

use super::array::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    /// Kernel side length (odd).
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    /// Input channels per group.
    pub cin: usize,
    /// Output channels per group.
    pub cout: usize,
    /// Number of groups; every group uses the same kernel.
    pub groups: usize,
}

impl ConvGeometry {
    pub fn output(&self) -> Shape {
        let h = (self.input.height + 2 * self.padding - self.ksize) / self.stride + 1;
        let w = (self.input.width + 2 * self.padding - self.ksize) / self.stride + 1;
        Shape::new(self.cout * self.groups, h, w)
    }

    /// Output columns `ox` whose input column `ox * stride + kx - padding`
    /// is in range.
    #[inline]
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // ox * s + off >= 0  and  ox * s + off < in_len
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = (in_len as isize - off + s - 1) / s;
        let lo = lo.max(0) as usize;
        let hi = (hi_excl.max(0) as usize).min(out_len);
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let out_shape = g.output();
    let (ih, iw) = (g.input.height, g.input.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.ksize;
    let mut out = vec![0.0; out_shape.len()];
    for grp in 0..g.groups {
        for co in 0..g.cout {
            let oc = grp * g.cout + co;
            let out_plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            for ci in 0..g.cin {
                let ic = grp * g.cin + ci;
                let in_plane = &input[ic * ih * iw..(ic + 1) * ih * iw];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, ih, oh);
                    for kx in 0..k {
                        let w = kernel[((co * g.cin + ci) * k + ky) * k + kx];
                        let (ox0, ox1) = g.valid_range(kx, iw, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
                            let irow = &in_plane[iy * iw..(iy + 1) * iw];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                let n = ox1 - ox0;
                                for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + n]) {
                                    *o += w * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += w * irow[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dot product with four interleaved partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Accumulates the adjoints of `conv2d_forward` into `grad_input` and
/// `grad_kernel` (either may be skipped).
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
) {
    let out_shape = g.output();
    let (ih, iw) = (g.input.height, g.input.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let k = g.ksize;
    for grp in 0..g.groups {
        for co in 0..g.cout {
            let oc = grp * g.cout + co;
            let go_plane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
            for ci in 0..g.cin {
                let ic = grp * g.cin + ci;
                let in_plane = &input[ic * ih * iw..(ic + 1) * ih * iw];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, ih, oh);
                    for kx in 0..k {
                        let widx = ((co * g.cin + ci) * k + ky) * k + kx;
                        let w = kernel[widx];
                        let (ox0, ox1) = g.valid_range(kx, iw, ow);
                        let mut gw = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let gorow = &go_plane[oy * ow..(oy + 1) * ow];
                            let irow = &in_plane[iy * iw..(iy + 1) * iw];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                let n = ox1 - ox0;
                                gw += dot(&gorow[ox0..ox1], &irow[ix0..ix0 + n]);
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    let girow = &mut gi[ic * ih * iw + iy * iw + ix0..ic * ih * iw + iy * iw + ix0 + n];
                                    for (o, &go) in girow.iter_mut().zip(&gorow[ox0..ox1]) {
                                        *o += w * go;
                                    }
                                }
                                continue;
                            }
                            for (ox, &go) in gorow.iter().enumerate().take(ox1).skip(ox0) {
                                gw += go * irow[ox * g.stride + kx - g.padding];
                            }
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let girow = &mut gi[ic * ih * iw + iy * iw..ic * ih * iw + (iy + 1) * iw];
                                for ox in ox0..ox1 {
                                    girow[ox * g.stride + kx - g.padding] += w * gorow[ox];
                                }
                            }
                        }
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            gk[widx] += gw;
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 box filter with edge replication.
pub fn avg_pool3_forward(shape: Shape, input: &[f64]) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![0.0; input.len()];
    let mut rowsum = vec![0.0; w];
    for c in 0..shape.channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        let oplane = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                rowsum[x] = ys.iter().map(|&yy| plane[yy * w + x]).sum();
            }
            for x in 0..w {
                let s = rowsum[x.saturating_sub(1)] + rowsum[x] + rowsum[(x + 1).min(w - 1)];
                oplane[y * w + x] = s / 9.0;
            }
        }
    }
    out
}

pub fn avg_pool3_backward(shape: Shape, grad_out: &[f64], grad_in: &mut [f64]) {
    let (h, w) = (shape.height, shape.width);
    for c in 0..shape.channels {
        let go = &grad_out[c * h * w..(c + 1) * h * w];
        let gi = &mut grad_in[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                let g = go[y * w + x] / 9.0;
                let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                for &yy in &ys {
                    for &xx in &xs {
                        gi[yy * w + xx] += g;
                    }
                }
            }
        }
    }
}

/// Bilinear tap along a row of width `w` for coordinate `u`, or `None`
/// outside `[0, w - 1]`. Returns `(i0, f)` with the sample being
/// `(1 - f) * row[i0] + f * row[i0 + 1]`.
#[inline]
pub fn hsample_tap(u: f64, w: usize) -> Option<(usize, f64)> {
    if !(0.0..=(w - 1) as f64).contains(&u) {
        return None;
    }
    if w == 1 {
        return Some((0, 0.0));
    }
    let i0 = (u.floor() as usize).min(w - 2);
    Some((i0, u - i0 as f64))
}

/// Returns samples and the validity plane.
pub fn hsample_forward(src: Shape, source: &[f64], coords: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (src.height, src.width);
    let mut out = vec![0.0; source.len()];
    let mut valid = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if let Some((i0, f)) = hsample_tap(coords[p], w) {
                valid[p] = 1.0;
                let i1 = (i0 + 1).min(w - 1);
                for c in 0..src.channels {
                    let base = c * h * w + y * w;
                    out[base + x] = (1.0 - f) * source[base + i0] + f * source[base + i1];
                }
            }
        }
    }
    (out, valid)
}

pub fn hsample_backward(
    src: Shape,
    source: &[f64],
    coords: &[f64],
    grad_out: &[f64],
    mut grad_source: Option<&mut [f64]>,
    mut grad_coords: Option<&mut [f64]>,
) {
    let (h, w) = (src.height, src.width);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let Some((i0, f)) = hsample_tap(coords[p], w) else {
                continue;
            };
            let i1 = (i0 + 1).min(w - 1);
            let mut gu = 0.0;
            for c in 0..src.channels {
                let base = c * h * w + y * w;
                let g = grad_out[base + x];
                gu += g * (source[base + i1] - source[base + i0]);
                if let Some(gs) = grad_source.as_deref_mut() {
                    gs[base + i0] += (1.0 - f) * g;
                    gs[base + i1] += f * g;
                }
            }
            if let Some(gc) = grad_coords.as_deref_mut() {
                gc[p] += gu;
            }
        }
    }
}

/// Channel-averaged correlation of `left(x)` with `right(x - d)` for
/// `d in 0..=max_disp`; zero where `x - d` leaves the image.
pub fn correlation_forward(feat: Shape, left: &[f64], right: &[f64], max_disp: usize) -> Vec<f64> {
    let (c, h, w) = (feat.channels, feat.height, feat.width);
    let n = h * w;
    let inv = 1.0 / c as f64;
    let mut out = vec![0.0; (max_disp + 1) * n];
    for d in 0..=max_disp.min(w.saturating_sub(1)) {
        let oplane = &mut out[d * n..(d + 1) * n];
        for ch in 0..c {
            let lp = &left[ch * n..(ch + 1) * n];
            let rp = &right[ch * n..(ch + 1) * n];
            for y in 0..h {
                let row = y * w;
                for x in d..w {
                    oplane[row + x] += lp[row + x] * rp[row + x - d];
                }
            }
        }
        oplane.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn correlation_backward(
    feat: Shape,
    left: &[f64],
    right: &[f64],
    max_disp: usize,
    grad_out: &[f64],
    mut grad_left: Option<&mut [f64]>,
    mut grad_right: Option<&mut [f64]>,
) {
    let (c, h, w) = (feat.channels, feat.height, feat.width);
    let n = h * w;
    let inv = 1.0 / c as f64;
    for d in 0..=max_disp.min(w.saturating_sub(1)) {
        let gplane = &grad_out[d * n..(d + 1) * n];
        for ch in 0..c {
            let lp = &left[ch * n..(ch + 1) * n];
            let rp = &right[ch * n..(ch + 1) * n];
            for y in 0..h {
                let row = y * w;
                let m = w - d;
                let grow = &gplane[row + d..row + w];
                if let Some(gl) = grad_left.as_deref_mut() {
                    let dst = &mut gl[ch * n + row + d..ch * n + row + w];
                    for ((o, &g), &r) in dst.iter_mut().zip(grow).zip(&rp[row..row + m]) {
                        *o += g * inv * r;
                    }
                }
                if let Some(gr) = grad_right.as_deref_mut() {
                    let dst = &mut gr[ch * n + row..ch * n + row + m];
                    for ((o, &g), &l) in dst.iter_mut().zip(grow).zip(&lp[row + d..row + w]) {
                        *o += g * inv * l;
                    }
                }
            }
        }
    }
}

/// Per-pixel softmax over the leading (disparity) axis of `-volume / tau`,
/// written into `probs`; returns the expected index.
pub fn soft_argmin_forward(vol: Shape, volume: &[f64], tau: f64, probs: &mut [f64]) -> Vec<f64> {
    let n = vol.plane_len();
    let planes = vol.channels;
    let mut out = vec![0.0; n];
    let mut zmax = vec![f64::NEG_INFINITY; n];
    for d in 0..planes {
        for (p, m) in zmax.iter_mut().enumerate() {
            *m = m.max(-volume[d * n + p] / tau);
        }
    }
    let mut denom = vec![0.0; n];
    for d in 0..planes {
        for p in 0..n {
            let e = (-volume[d * n + p] / tau - zmax[p]).exp();
            probs[d * n + p] = e;
            denom[p] += e;
        }
    }
    for d in 0..planes {
        for p in 0..n {
            let q = probs[d * n + p] / denom[p];
            probs[d * n + p] = q;
            out[p] += d as f64 * q;
        }
    }
    out
}

pub fn soft_argmin_backward(vol: Shape, probs: &[f64], out: &[f64], tau: f64, grad_out: &[f64], grad_vol: &mut [f64]) {
    let n = vol.plane_len();
    for d in 0..vol.channels {
        for p in 0..n {
            let q = probs[d * n + p];
            grad_vol[d * n + p] += -grad_out[p] * q * (d as f64 - out[p]) / tau;
        }
    }
}
