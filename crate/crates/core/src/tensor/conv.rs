//! Direct 2-D convolution (cross-correlation, as is usual for learned
//! filters) and its transpose.
//!
//! Both are expressed over a "small" strided grid and a "large" dense grid:
//! a small cell `(i, j)` touches large cell `(i*s + ky - p, j*s + kx - p)`
//! through weight `W[a, b, ky, kx]`. A convolution gathers large -> small,
//! its transpose scatters small -> large, and the weight gradient pairs the
//! two.

use super::{shape_err, GradSink, Graph, Op, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    /// Channels on the small grid.
    a_ch: usize,
    /// Channels on the large grid.
    b_ch: usize,
    hs: usize,
    ws: usize,
    hl: usize,
    wl: usize,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
}

impl Geom {
    /// Small-grid indices `i` with `0 <= i*s + k - p < large`.
    #[inline]
    fn range(&self, k: usize, small: usize, large: usize) -> (usize, usize) {
        let (s, p) = (self.s, self.p);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if large + p <= k {
            return (0, 0);
        }
        let hi = ((large - 1 + p - k) / s + 1).min(small);
        (lo.min(hi), hi)
    }

    /// Rows `(b, ky, kx)`, columns small-grid cells: the large-grid value each
    /// weight meets at each output cell (zero outside the grid).
    fn im2col<T: Real>(&self, large: &[T]) -> Vec<T> {
        let (hs, ws, hl, wl) = (self.hs, self.ws, self.hl, self.wl);
        let plane = hs * ws;
        let mut cols = vec![T::zero(); self.b_ch * self.kh * self.kw * plane];
        let mut row = 0;
        for b in 0..self.b_ch {
            for ky in 0..self.kh {
                let (ilo, ihi) = self.range(ky, hs, hl);
                for kx in 0..self.kw {
                    let (jlo, jhi) = self.range(kx, ws, wl);
                    let col = &mut cols[row * plane..(row + 1) * plane];
                    for i in ilo..ihi {
                        let y = i * self.s + ky - self.p;
                        let lrow = &large[(b * hl + y) * wl..(b * hl + y + 1) * wl];
                        let dst = &mut col[i * ws + jlo..i * ws + jhi];
                        if self.s == 1 {
                            let x0 = jlo + kx - self.p;
                            dst.copy_from_slice(&lrow[x0..x0 + (jhi - jlo)]);
                        } else {
                            for (d, j) in dst.iter_mut().zip(jlo..jhi) {
                                *d = lrow[j * self.s + kx - self.p];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Adjoint of [`Geom::im2col`]: accumulates columns into the large grid.
    fn col2im<T: Real>(&self, cols: &[T], large: &mut [T]) {
        let (hs, ws, hl, wl) = (self.hs, self.ws, self.hl, self.wl);
        let plane = hs * ws;
        let mut row = 0;
        for b in 0..self.b_ch {
            for ky in 0..self.kh {
                let (ilo, ihi) = self.range(ky, hs, hl);
                for kx in 0..self.kw {
                    let (jlo, jhi) = self.range(kx, ws, wl);
                    let col = &cols[row * plane..(row + 1) * plane];
                    for i in ilo..ihi {
                        let y = i * self.s + ky - self.p;
                        let lrow = &mut large[(b * hl + y) * wl..(b * hl + y + 1) * wl];
                        let src = &col[i * ws + jlo..i * ws + jhi];
                        for (v, j) in src.iter().zip(jlo..jhi) {
                            let x = j * self.s + kx - self.p;
                            lrow[x] = lrow[x] + *v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn rows(&self) -> usize {
        self.b_ch * self.kh * self.kw
    }

    fn gather<T: Real>(&self, large: &[T], w: &[T], small: &mut [T]) {
        let cols = self.im2col(large);
        let (plane, rows) = (self.hs * self.ws, self.rows());
        for a in 0..self.a_ch {
            let out = &mut small[a * plane..(a + 1) * plane];
            for r in 0..rows {
                axpy(w[a * rows + r], &cols[r * plane..(r + 1) * plane], out);
            }
        }
    }

    fn scatter<T: Real>(&self, small: &[T], w: &[T], large: &mut [T]) {
        let (plane, rows) = (self.hs * self.ws, self.rows());
        let mut cols = vec![T::zero(); rows * plane];
        for a in 0..self.a_ch {
            let src = &small[a * plane..(a + 1) * plane];
            for r in 0..rows {
                axpy(w[a * rows + r], src, &mut cols[r * plane..(r + 1) * plane]);
            }
        }
        self.col2im(&cols, large);
    }

    fn weight_grad<T: Real>(&self, small: &[T], large: &[T], dw: &mut [T]) {
        let cols = self.im2col(large);
        let (plane, rows) = (self.hs * self.ws, self.rows());
        for a in 0..self.a_ch {
            let s = &small[a * plane..(a + 1) * plane];
            for r in 0..rows {
                let idx = a * rows + r;
                dw[idx] = dw[idx] + dot(s, &cols[r * plane..(r + 1) * plane]);
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    if a == T::zero() {
        return;
    }
    for (o, v) in y.iter_mut().zip(x) {
        *o = *o + a * *v;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (cx, cy) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let tail: T = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .fold(T::zero(), |s, (a, b)| s + *a * *b);
    for (a, b) in cx.zip(cy) {
        for k in 0..LANES {
            acc[k] = acc[k] + a[k] * b[k];
        }
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

pub(crate) struct ConvNode {
    transpose: bool,
    x: usize,
    w: usize,
    bias: Option<usize>,
    geom: Geom,
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(g: &[T], db: &mut [T], plane: usize) {
    for (c, d) in db.iter_mut().enumerate() {
        *d = *d + g[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

impl<T: Real> Graph<T> {
    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(shape_err(op, self.shape(b), &[channels]));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x: [C, H, W]` with `kernel: [K, C, kh, kw]`,
    /// giving `[K, H', W']` with `H' = (H + 2p - kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(shape_err("conv2d", &sx, &sk));
        }
        let ConvSpec { stride, padding } = spec;
        if stride == 0 {
            return Err(Error::InvalidStride {
                op: "conv2d",
                stride,
                padding,
            });
        }
        let (h, w, kh, kw) = (sx[1], sx[2], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::KernelTooLarge {
                op: "conv2d",
                kernel: (kh, kw),
                input: (h + 2 * padding, w + 2 * padding),
            });
        }
        self.check_bias("conv2d bias", bias, sk[0])?;
        let geom = Geom {
            a_ch: sk[0],
            b_ch: sx[0],
            hs: (h + 2 * padding - kh) / stride + 1,
            ws: (w + 2 * padding - kw) / stride + 1,
            hl: h,
            wl: w,
            kh,
            kw,
            s: stride,
            p: padding,
        };
        let plane = geom.hs * geom.ws;
        let mut out = vec![T::zero(); geom.a_ch * plane];
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b), plane);
        }
        geom.gather(self.value(x), self.value(kernel), &mut out);
        let mut parents = vec![x.0, kernel.0];
        parents.extend(bias.map(|b| b.0));
        let node = ConvNode {
            transpose: false,
            x: x.0,
            w: kernel.0,
            bias: bias.map(|b| b.0),
            geom,
        };
        Ok(self.push(vec![geom.a_ch, geom.hs, geom.ws], out, &parents, Op::Conv(node)))
    }

    /// Transpose convolution of `x: [C, H, W]` with `kernel: [C, K, kh, kw]`,
    /// giving `[K, (H-1)*stride - 2p + kh, ...]`. It is the adjoint of
    /// [`Graph::conv2d`] with the same kernel.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sx[0] {
            return Err(shape_err("conv_transpose2d", &sx, &sk));
        }
        let ConvSpec { stride, padding } = spec;
        let (h, w, kh, kw) = (sx[1], sx[2], sk[2], sk[3]);
        let invalid = stride == 0
            || padding >= kh
            || padding >= kw
            || (h - 1) * stride + kh <= 2 * padding
            || (w - 1) * stride + kw <= 2 * padding;
        if invalid {
            return Err(Error::InvalidStride {
                op: "conv_transpose2d",
                stride,
                padding,
            });
        }
        self.check_bias("conv_transpose2d bias", bias, sk[1])?;
        let geom = Geom {
            a_ch: sx[0],
            b_ch: sk[1],
            hs: h,
            ws: w,
            hl: (h - 1) * stride + kh - 2 * padding,
            wl: (w - 1) * stride + kw - 2 * padding,
            kh,
            kw,
            s: stride,
            p: padding,
        };
        let plane = geom.hl * geom.wl;
        let mut out = vec![T::zero(); geom.b_ch * plane];
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b), plane);
        }
        geom.scatter(self.value(x), self.value(kernel), &mut out);
        let mut parents = vec![x.0, kernel.0];
        parents.extend(bias.map(|b| b.0));
        let node = ConvNode {
            transpose: true,
            x: x.0,
            w: kernel.0,
            bias: bias.map(|b| b.0),
            geom,
        };
        Ok(self.push(vec![geom.b_ch, geom.hl, geom.wl], out, &parents, Op::Conv(node)))
    }
}

impl ConvNode {
    pub(super) fn backward<T: Real>(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let xv = sink.value(Var(self.x));
        let wv = sink.value(Var(self.w));
        let geom = &self.geom;
        if self.transpose {
            if let Some(dx) = sink.grad_mut(Var(self.x)) {
                geom.gather(g, wv, dx);
            }
            if let Some(dw) = sink.grad_mut(Var(self.w)) {
                geom.weight_grad(xv, g, dw);
            }
            if let Some(db) = self.bias.and_then(|b| sink.grad_mut(Var(b))) {
                bias_grad(g, db, geom.hl * geom.wl);
            }
        } else {
            if let Some(dx) = sink.grad_mut(Var(self.x)) {
                geom.scatter(g, wv, dx);
            }
            if let Some(dw) = sink.grad_mut(Var(self.w)) {
                geom.weight_grad(g, xv, dw);
            }
            if let Some(db) = self.bias.and_then(|b| sink.grad_mut(Var(b))) {
                bias_grad(g, db, geom.hs * geom.ws);
            }
        }
    }
}
