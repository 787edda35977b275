//! Forward and adjoint kernels for the layer catalog, on NCHW slices.

use super::tensor::{gemm, Scalar, Trans};

/// Extents of an NCHW activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Nchw {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c, h, w] => Some(Nchw { n, c, h, w }),
            _ => None,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

/// Unfold 3x3 zero-padded neighbourhoods into `[c*9, n*h*w]`.
fn im2col<T: Scalar>(x: &[T], d: Nchw, cols: &mut [T]) {
    let (h, w) = (d.h as isize, d.w as isize);
    let hw = d.plane();
    let ncols = d.n * hw;
    for ci in 0..d.c {
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (ci * 9 + (ky * 3 + kx) as usize) * ncols;
                for bi in 0..d.n {
                    let src = &x[(bi * d.c + ci) * hw..(bi * d.c + ci + 1) * hw];
                    let dst = &mut cols[row + bi * hw..row + (bi + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky - 1;
                        let drow = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                        for xx in 0..w {
                            let sx = xx + kx - 1;
                            drow[xx as usize] = if sx < 0 || sx >= w {
                                T::zero()
                            } else {
                                srow[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
fn col2im<T: Scalar>(cols: &[T], d: Nchw, dx: &mut [T]) {
    let (h, w) = (d.h as isize, d.w as isize);
    let hw = d.plane();
    let ncols = d.n * hw;
    for ci in 0..d.c {
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (ci * 9 + (ky * 3 + kx) as usize) * ncols;
                for bi in 0..d.n {
                    let src = &cols[row + bi * hw..row + (bi + 1) * hw];
                    let dst = &mut dx[(bi * d.c + ci) * hw..(bi * d.c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx + kx - 1;
                            if sx >= 0 && sx < w {
                                dst[(sy * w + sx) as usize] += src[(y * w + xx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[o, c, 3, 3]`.
pub fn conv3x3_forward<T: Scalar>(x: &[T], d: Nchw, weight: &[T], bias: &[T], o: usize) -> Vec<T> {
    let hw = d.plane();
    let ncols = d.n * hw;
    let k = d.c * 9;
    let mut cols = vec![T::zero(); k * ncols];
    im2col(x, d, &mut cols);
    let mut tmp = vec![T::zero(); o * ncols];
    gemm(o, k, ncols, weight, Trans::No, &cols, Trans::No, &mut tmp, false);
    let mut out = vec![T::zero(); d.n * o * hw];
    for oi in 0..o {
        let b = bias[oi];
        for bi in 0..d.n {
            let src = &tmp[oi * ncols + bi * hw..oi * ncols + (bi + 1) * hw];
            let dst = &mut out[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
            for (dv, &sv) in dst.iter_mut().zip(src) {
                *dv = sv + b;
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub fn conv3x3_backward<T: Scalar>(
    x: &[T],
    d: Nchw,
    weight: &[T],
    o: usize,
    gout: &[T],
    want_dx: bool,
    want_params: bool,
) -> ConvGrads<T> {
    let hw = d.plane();
    let ncols = d.n * hw;
    let k = d.c * 9;
    let mut g = vec![T::zero(); o * ncols];
    for oi in 0..o {
        for bi in 0..d.n {
            g[oi * ncols + bi * hw..oi * ncols + (bi + 1) * hw]
                .copy_from_slice(&gout[(bi * o + oi) * hw..(bi * o + oi + 1) * hw]);
        }
    }
    let (dweight, dbias) = if want_params {
        let mut cols = vec![T::zero(); k * ncols];
        im2col(x, d, &mut cols);
        let mut dw = vec![T::zero(); o * k];
        gemm(o, ncols, k, &g, Trans::No, &cols, Trans::Yes, &mut dw, false);
        let db = (0..o)
            .map(|oi| g[oi * ncols..(oi + 1) * ncols].iter().copied().sum())
            .collect();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let dx = if want_dx {
        let mut dcols = vec![T::zero(); k * ncols];
        gemm(k, o, ncols, weight, Trans::Yes, &g, Trans::No, &mut dcols, false);
        let mut dx = vec![T::zero(); d.len()];
        col2im(&dcols, d, &mut dx);
        Some(dx)
    } else {
        None
    };
    ConvGrads {
        dx,
        dweight,
        dbias,
    }
}

/// 2x2 max pooling with stride 2; returns values and flat argmax indices.
pub fn maxpool2_forward<T: Scalar>(x: &[T], d: Nchw) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (d.h / 2, d.w / 2);
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..d.n * d.c {
        let base = plane * d.plane();
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + (2 * y) * d.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * d.w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(argmax: &[u32], in_len: usize, gout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&i, &g) in argmax.iter().zip(gout) {
        dx[i as usize] += g;
    }
    dx
}

/// Linear interpolation taps for resampling an axis of `input` samples to
/// `output` samples with pixel-centre alignment (align-corners = false).
///
/// Each entry is `(lo, hi, frac)`: the output sample is
/// `(1 - frac) * in[lo] + frac * in[hi]`.
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resampling of every plane from `d.h x d.w` to `oh x ow`.
pub fn bilinear_forward<T: Scalar>(x: &[T], d: Nchw, oh: usize, ow: usize) -> Vec<T> {
    let ty = linear_taps(d.h, oh);
    let tx = linear_taps(d.w, ow);
    let mut out = vec![T::zero(); d.n * d.c * oh * ow];
    for plane in 0..d.n * d.c {
        let src = &x[plane * d.plane()..(plane + 1) * d.plane()];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - fy), T::of(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(1.0 - fx), T::of(fx));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * d.w + x0] + wx1 * src[y0 * d.w + x1])
                    + wy1 * (wx0 * src[y1 * d.w + x0] + wx1 * src[y1 * d.w + x1]);
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(gout: &[T], d: Nchw, oh: usize, ow: usize) -> Vec<T> {
    let ty = linear_taps(d.h, oh);
    let tx = linear_taps(d.w, ow);
    let mut dx = vec![T::zero(); d.len()];
    for plane in 0..d.n * d.c {
        let g = &gout[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * d.plane()..(plane + 1) * d.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - fy), T::of(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(1.0 - fx), T::of(fx));
                let gv = g[oy * ow + ox];
                dst[y0 * d.w + x0] += wy0 * wx0 * gv;
                dst[y0 * d.w + x1] += wy0 * wx1 * gv;
                dst[y1 * d.w + x0] += wy1 * wx0 * gv;
                dst[y1 * d.w + x1] += wy1 * wx1 * gv;
            }
        }
    }
    dx
}

/// Layout of a batchnorm operand: `groups` outer blocks, `channels`
/// features, `inner` contiguous elements per feature per block.
///
/// NCHW is `(n, c, h*w)`; a `[rows, features]` matrix is `(rows, f, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct BnLayout {
    pub groups: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c, h, w] => Some(BnLayout {
                groups: n,
                channels: c,
                inner: h * w,
            }),
            [n, f] => Some(BnLayout {
                groups: n,
                channels: f,
                inner: 1,
            }),
            _ => None,
        }
    }

    pub fn count(&self) -> usize {
        self.groups * self.inner
    }

    fn for_channel<T: Copy>(&self, data: &[T], c: usize, mut f: impl FnMut(usize, T)) {
        for g in 0..self.groups {
            let base = (g * self.channels + c) * self.inner;
            for i in base..base + self.inner {
                f(i, data[i]);
            }
        }
    }
}

/// Per-channel batch mean and biased variance.
pub fn channel_moments<T: Scalar>(x: &[T], l: BnLayout) -> (Vec<f64>, Vec<f64>) {
    let cnt = l.count() as f64;
    let mut mean = vec![0.0; l.channels];
    let mut var = vec![0.0; l.channels];
    for c in 0..l.channels {
        let mut s = 0.0;
        l.for_channel(x, c, |_, v| s += v.f64());
        let m = s / cnt;
        let mut q = 0.0;
        l.for_channel(x, c, |_, v| {
            let d = v.f64() - m;
            q += d * d;
        });
        mean[c] = m;
        var[c] = q / cnt;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`; returns `(y, xhat)`.
pub fn batchnorm_apply<T: Scalar>(
    x: &[T],
    l: BnLayout,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for c in 0..l.channels {
        let (m, s) = (T::of(mean[c]), T::of(inv_std[c]));
        let (g, b) = (gamma[c], beta[c]);
        for grp in 0..l.groups {
            let base = (grp * l.channels + c) * l.inner;
            for i in base..base + l.inner {
                let h = (x[i] - m) * s;
                xhat[i] = h;
                y[i] = g * h + b;
            }
        }
    }
    (y, xhat)
}

pub struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Adjoint of batchnorm. `batch_stats` selects the train-mode formula, in
/// which mean and variance depend on `x`.
pub fn batchnorm_backward<T: Scalar>(
    gout: &[T],
    xhat: &[T],
    l: BnLayout,
    inv_std: &[f64],
    gamma: &[T],
    batch_stats: bool,
) -> BnGrads<T> {
    let cnt = l.count() as f64;
    let mut dx = vec![T::zero(); gout.len()];
    let mut dgamma = vec![T::zero(); l.channels];
    let mut dbeta = vec![T::zero(); l.channels];
    for c in 0..l.channels {
        let mut sg = 0.0;
        let mut sgx = 0.0;
        l.for_channel(gout, c, |i, g| {
            sg += g.f64();
            sgx += g.f64() * xhat[i].f64();
        });
        dgamma[c] = T::of(sgx);
        dbeta[c] = T::of(sg);
        let scale = gamma[c].f64() * inv_std[c];
        if batch_stats {
            let (mg, mgx) = (sg / cnt, sgx / cnt);
            l.for_channel(gout, c, |i, g| {
                dx[i] = T::of(scale * (g.f64() - mg - xhat[i].f64() * mgx));
            });
        } else {
            l.for_channel(gout, c, |i, g| {
                dx[i] = T::of(scale * g.f64());
            });
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_for_doubling_follow_pixel_centres() {
        let t = linear_taps(2, 4);
        // sources at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped high)
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[3], (1, 1, 0.0));
    }

    #[test]
    fn identity_taps_when_extent_is_unchanged() {
        for (i, &(lo, hi, f)) in linear_taps(5, 5).iter().enumerate() {
            assert_eq!(lo, i);
            assert!(f == 0.0 || hi == lo);
        }
    }

    #[test]
    fn maxpool_picks_first_of_ties() {
        let d = Nchw {
            n: 1,
            c: 1,
            h: 2,
            w: 2,
        };
        let (v, a) = maxpool2_forward(&[1.0f64, 1.0, 1.0, 1.0], d);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
