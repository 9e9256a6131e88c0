//! Raw loops behind the graph primitives. Everything here is sequential so that
//! reductions happen in a fixed order.

use crate::error::{mismatch, Result};
use crate::real::Real;

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `src` aligned to the axes of `out`, zero along broadcast axes.
pub fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let axis = rank - src.len() + i;
        strides[axis] = if src[i] == 1 && out[axis] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Visits every element of `out_shape` in row-major order, passing the linear
/// output index and the matching offsets into two broadcast operands.
pub fn broadcast_for_each(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    if out_shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer = total / inner;
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance the outer multi-index
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base_a -= sa[ax] * out_shape[ax];
            base_b -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `src` (shaped `src_shape`) down to `dst_shape`, which must broadcast to it.
pub fn reduce_to<T: Real>(src: &[T], src_shape: &[usize], dst_shape: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); dst_shape.iter().product()];
    let sd = broadcast_strides(dst_shape, src_shape);
    let ss = broadcast_strides(src_shape, src_shape);
    broadcast_for_each(src_shape, &ss, &sd, |_, i, j| out[j] += src[i]);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.oh * self.ow
    }
}

/// Unfolds one `cin×h×w` image into a `(cin·kh·kw) × (oh·ow)` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source sampling positions for half-pixel-center bilinear resampling along one axis.
/// Returns `(i0, i1, frac)` per output coordinate, clamped to the edges.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `h×w` planes to `oh×ow`.
pub fn resize_bilinear<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Real>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = src[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    out
}
