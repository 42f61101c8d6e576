//! Linear 2-D convolution and cross-correlation evaluated in Fourier space.
//!
//! Transform sizes are the next power of two covering the linear result on
//! each axis, so circular wrap-around never reaches a retained sample.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use super::{shape_err, GradSink, Graph, Op, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftMode {
    /// Output extent `H + h - 1`.
    Full,
    /// Output extent equals the image; the kernel's cell `floor(h/2)` is its
    /// origin, so a one-hot kernel at that cell is the identity.
    SameCentered,
}

thread_local! {
    static PLANS: RefCell<HashMap<(TypeId, usize, bool), Box<dyn Any>>> = RefCell::new(HashMap::new());
}

fn plan<T: Real>(len: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    PLANS.with(|plans| {
        let mut plans = plans.borrow_mut();
        let key = (TypeId::of::<T>(), len, inverse);
        if let Some(p) = plans.get(&key).and_then(|p| p.downcast_ref::<Arc<dyn Fft<T>>>()) {
            return p.clone();
        }
        let dir = if inverse {
            FftDirection::Inverse
        } else {
            FftDirection::Forward
        };
        let p = FftPlanner::<T>::new().plan_fft(len, dir);
        plans.insert(key, Box::new(p.clone()));
        p
    })
}

/// Zero-padded 2-D transform of size `rows x cols`. Spectra are kept in
/// column-major (transposed) layout; only the plan that made them reads them.
pub struct FftPlan<T: Real> {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> FftPlan<T> {
    /// Plan covering at least `min_rows x min_cols`, rounded up to powers of two.
    pub fn covering(min_rows: usize, min_cols: usize) -> Self {
        let rows = min_rows.max(1).next_power_of_two();
        let cols = min_cols.max(1).next_power_of_two();
        FftPlan {
            rows,
            cols,
            row_fwd: plan(cols, false),
            col_fwd: plan(rows, false),
            row_inv: plan(cols, true),
            col_inv: plan(rows, true),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn forward(&self, data: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
        let (r, c) = (self.rows, self.cols);
        debug_assert!(h <= r && w <= c);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); h * c];
        for y in 0..h {
            for x in 0..w {
                buf[y * c + x].re = data[y * w + x];
            }
        }
        // Rows past `h` are zero and stay zero under the row transform.
        self.row_fwd.process(&mut buf);
        let mut t = vec![Complex::new(T::zero(), T::zero()); r * c];
        for y in 0..h {
            for x in 0..c {
                t[x * r + y] = buf[y * c + x];
            }
        }
        self.col_fwd.process(&mut t);
        t
    }

    /// Inverse transform, returning the real part scaled by `1 / (rows*cols)`.
    pub fn inverse(&self, mut spec: Vec<Complex<T>>) -> Vec<T> {
        let (r, c) = (self.rows, self.cols);
        self.col_inv.process(&mut spec);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); r * c];
        for x in 0..c {
            for y in 0..r {
                buf[y * c + x] = spec[x * r + y];
            }
        }
        self.row_inv.process(&mut buf);
        let scale = T::one() / T::of((r * c) as f64);
        buf.into_iter().map(|z| z.re * scale).collect()
    }
}

#[derive(Clone, Copy)]
struct Stack<'a, T> {
    data: &'a [T],
    ch: usize,
    h: usize,
    w: usize,
}

impl<'a, T> Stack<'a, T> {
    fn channel(&self, c: usize) -> &'a [T] {
        let c = if self.ch == 1 { 0 } else { c };
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

enum Pairing {
    Convolve,
    Correlate,
}

/// Pairs every channel of `a` with the matching channel of `b` (a single
/// channel broadcasts), combining spectra as `A*B` or `A*conj(B)`. With
/// `reduce` the channel results are summed into one plane.
fn spectral_pairs<T: Real>(
    plan: &FftPlan<T>,
    a: Stack<'_, T>,
    b: Stack<'_, T>,
    pairing: Pairing,
    reduce: bool,
) -> Vec<Vec<T>> {
    let channels = a.ch.max(b.ch);
    let shared_a = (a.ch == 1).then(|| plan.forward(a.channel(0), a.h, a.w));
    let shared_b = (b.ch == 1).then(|| plan.forward(b.channel(0), b.h, b.w));
    let mut out = Vec::new();
    let mut acc: Option<Vec<Complex<T>>> = None;
    for c in 0..channels {
        let fa_own;
        let fa = match &shared_a {
            Some(s) => s,
            None => {
                fa_own = plan.forward(a.channel(c), a.h, a.w);
                &fa_own
            }
        };
        let fb_own;
        let fb = match &shared_b {
            Some(s) => s,
            None => {
                fb_own = plan.forward(b.channel(c), b.h, b.w);
                &fb_own
            }
        };
        let prod: Vec<Complex<T>> = match pairing {
            Pairing::Convolve => fa.iter().zip(fb).map(|(x, y)| x * y).collect(),
            Pairing::Correlate => fa.iter().zip(fb).map(|(x, y)| x * y.conj()).collect(),
        };
        if reduce {
            match &mut acc {
                Some(s) => s.iter_mut().zip(&prod).for_each(|(s, p)| *s = *s + *p),
                None => acc = Some(prod),
            }
        } else {
            out.push(plan.inverse(prod));
        }
    }
    if let Some(s) = acc {
        out.push(plan.inverse(s));
    }
    out
}

fn wrap(i: isize, len: usize) -> usize {
    i.rem_euclid(len as isize) as usize
}

fn max_nnz<T: Real>(s: Stack<'_, T>) -> usize {
    (0..s.ch)
        .map(|c| s.channel(c).iter().filter(|v| **v != T::zero()).count())
        .max()
        .unwrap_or(0)
}

/// Whether summing over the nonzeros of a `nnz`-sparse operand directly is
/// cheaper than transforming on `plan`. The direct sum is also exact for
/// one-hot operands.
fn prefer_direct(nnz: usize, out: (usize, usize), plan: (usize, usize)) -> bool {
    let area = plan.0 * plan.1;
    nnz * out.0 * out.1 <= area * (area.max(2).ilog2() as usize)
}

/// `out[c][o] = sum_s sparse[c][s] dense[c][index(o, s)]` over the nonzero
/// entries of `sparse`, skipping indices outside `dense`.
fn direct_sum<T: Real>(
    dense: Stack<'_, T>,
    sparse: Stack<'_, T>,
    out: (usize, usize),
    reduce: bool,
    index: impl Fn(isize, isize, usize) -> isize,
) -> Vec<T> {
    let channels = dense.ch.max(sparse.ch);
    let planes = if reduce { 1 } else { channels };
    let mut result = vec![T::zero(); planes * out.0 * out.1];
    for c in 0..channels {
        let d = dense.channel(c);
        let s = sparse.channel(c);
        let base = if reduce { 0 } else { c * out.0 * out.1 };
        for (si, &sv) in s.iter().enumerate() {
            if sv == T::zero() {
                continue;
            }
            let (sy, sx) = ((si / sparse.w) as isize, (si % sparse.w) as isize);
            for y in 0..out.0 {
                let dy = index(y as isize, sy, 0);
                if dy < 0 || dy >= dense.h as isize {
                    continue;
                }
                let row = &d[dy as usize * dense.w..(dy as usize + 1) * dense.w];
                let dst = &mut result[base + y * out.1..base + (y + 1) * out.1];
                for (x, o) in dst.iter_mut().enumerate() {
                    let dx = index(x as isize, sx, 1);
                    if dx >= 0 && dx < dense.w as isize {
                        *o = *o + sv * row[dx as usize];
                    }
                }
            }
        }
    }
    result
}

/// `out[i] = sum_u b[u] a[i + offset - u]`, zero outside `a`.
fn conv_linear<T: Real>(
    a: Stack<'_, T>,
    b: Stack<'_, T>,
    offset: (usize, usize),
    out: (usize, usize),
    reduce: bool,
) -> Vec<T> {
    let plan = FftPlan::covering(
        (a.h + b.h - 1).max(out.0 + offset.0),
        (a.w + b.w - 1).max(out.1 + offset.1),
    );
    let (na, nb) = (max_nnz(a), max_nnz(b));
    if prefer_direct(na.min(nb), out, plan.size()) {
        let off = [offset.0 as isize, offset.1 as isize];
        let (dense, sparse) = if nb <= na { (a, b) } else { (b, a) };
        return direct_sum(dense, sparse, out, reduce, |o, s, axis| o + off[axis] - s);
    }
    let (_, cols) = plan.size();
    let planes = spectral_pairs(&plan, a, b, Pairing::Convolve, reduce);
    let mut result = Vec::with_capacity(planes.len() * out.0 * out.1);
    for plane in planes {
        for y in 0..out.0 {
            let row = (y + offset.0) * cols;
            result.extend_from_slice(&plane[row + offset.1..row + offset.1 + out.1]);
        }
    }
    result
}

/// `out[i] = sum_u k[u] a[i + u - shift]`, zero outside `a`.
fn corr_linear<T: Real>(
    a: Stack<'_, T>,
    k: Stack<'_, T>,
    shift: (usize, usize),
    out: (usize, usize),
    reduce: bool,
) -> Vec<T> {
    let plan = FftPlan::covering(
        (a.h + k.h - 1).max(a.h + shift.0).max(out.0 + k.h - 1),
        (a.w + k.w - 1).max(a.w + shift.1).max(out.1 + k.w - 1),
    );
    let (na, nk) = (max_nnz(a), max_nnz(k));
    if prefer_direct(na.min(nk), out, plan.size()) {
        let sh = [shift.0 as isize, shift.1 as isize];
        return if nk <= na {
            direct_sum(a, k, out, reduce, |o, s, axis| o + s - sh[axis])
        } else {
            direct_sum(k, a, out, reduce, |o, s, axis| s - o + sh[axis])
        };
    }
    let (rows, cols) = plan.size();
    let planes = spectral_pairs(&plan, a, k, Pairing::Correlate, reduce);
    let mut result = Vec::with_capacity(planes.len() * out.0 * out.1);
    for plane in planes {
        for y in 0..out.0 {
            let ry = wrap(y as isize - shift.0 as isize, rows);
            for x in 0..out.1 {
                let rx = wrap(x as isize - shift.1 as isize, cols);
                result.push(plane[ry * cols + rx]);
            }
        }
    }
    result
}

pub(crate) enum FftNode {
    Conv {
        image: usize,
        kernel: usize,
        ci: usize,
        ck: usize,
        img: (usize, usize),
        ker: (usize, usize),
        offset: (usize, usize),
        out: (usize, usize),
    },
    Crop {
        image: usize,
        weights: usize,
        channels: usize,
        n: (usize, usize),
        m: usize,
    },
}

fn split3(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [h, w] => Some((1, h, w)),
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

impl<T: Real> Graph<T> {
    /// True linear convolution (kernel flipped) of `image` with `kernel`.
    ///
    /// Either argument may be `[H, W]` or `[C, H, W]`; channel counts must
    /// agree unless one of them is 1, which is then broadcast.
    pub fn conv2d_fft(&mut self, image: Var, kernel: Var, mode: FftMode) -> Result<Var> {
        let (si, sk) = (self.shape(image).to_vec(), self.shape(kernel).to_vec());
        let ((ci, h, w), (ck, kh, kw)) = match (split3(&si), split3(&sk)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("conv2d_fft", &si, &sk)),
        };
        if (ci != ck && ci != 1 && ck != 1) || h == 0 || w == 0 || kh == 0 || kw == 0 {
            return Err(shape_err("conv2d_fft", &si, &sk));
        }
        let (offset, out) = match mode {
            FftMode::Full => ((0, 0), (h + kh - 1, w + kw - 1)),
            FftMode::SameCentered => ((kh / 2, kw / 2), (h, w)),
        };
        let a = Stack {
            data: self.value(image),
            ch: ci,
            h,
            w,
        };
        let b = Stack {
            data: self.value(kernel),
            ch: ck,
            h: kh,
            w: kw,
        };
        let value = conv_linear(a, b, offset, out, false);
        let channels = ci.max(ck);
        let shape = if si.len() == 2 && sk.len() == 2 {
            vec![out.0, out.1]
        } else {
            vec![channels, out.0, out.1]
        };
        let node = FftNode::Conv {
            image: image.0,
            kernel: kernel.0,
            ci,
            ck,
            img: (h, w),
            ker: (kh, kw),
            offset,
            out,
        };
        Ok(self.push(shape, value, &[image.0, kernel.0], Op::Fft(node)))
    }

    /// Position-weighted average of the `m x m` crops of `image: [C, N, N]`
    /// centred on every pixel, weighted by `weights: [N, N]`. Out-of-image
    /// crop cells read zero. This is the adjoint of placing an `m x m` canvas
    /// with [`FftMode::SameCentered`] convolution.
    pub fn crop_correlate(&mut self, image: Var, weights: Var, m: usize) -> Result<Var> {
        let (si, sw) = (self.shape(image).to_vec(), self.shape(weights).to_vec());
        let (c, h, w) = split3(&si).ok_or_else(|| shape_err("crop_correlate", &si, &sw))?;
        if sw != [h, w] {
            return Err(shape_err("crop_correlate", &si, &sw));
        }
        if m == 0 || m > h || m > w {
            return Err(Error::InvalidShape {
                op: "crop_correlate",
                detail: format!("crop size {m} does not fit image {h}x{w}"),
            });
        }
        let a = Stack {
            data: self.value(image),
            ch: c,
            h,
            w,
        };
        let k = Stack {
            data: self.value(weights),
            ch: 1,
            h,
            w,
        };
        let value = corr_linear(a, k, (m / 2, m / 2), (m, m), false);
        let shape = if si.len() == 2 { vec![m, m] } else { vec![c, m, m] };
        let node = FftNode::Crop {
            image: image.0,
            weights: weights.0,
            channels: c,
            n: (h, w),
            m,
        };
        Ok(self.push(shape, value, &[image.0, weights.0], Op::Fft(node)))
    }
}

impl FftNode {
    pub(super) fn backward<T: Real>(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        match *self {
            FftNode::Conv {
                image,
                kernel,
                ci,
                ck,
                img,
                ker,
                offset,
                out,
            } => {
                let channels = ci.max(ck);
                let gs = Stack {
                    data: g,
                    ch: channels,
                    h: out.0,
                    w: out.1,
                };
                let iv = sink.value(Var(image));
                let kv = sink.value(Var(kernel));
                if sink.requires_grad(Var(image)) {
                    let ks = Stack {
                        data: kv,
                        ch: ck,
                        h: ker.0,
                        w: ker.1,
                    };
                    let d = corr_linear(gs, ks, offset, img, ci == 1 && channels > 1);
                    accumulate(sink.grad_mut(Var(image)), &d);
                }
                if sink.requires_grad(Var(kernel)) {
                    let is = Stack {
                        data: iv,
                        ch: ci,
                        h: img.0,
                        w: img.1,
                    };
                    let d = corr_linear(gs, is, offset, ker, ck == 1 && channels > 1);
                    accumulate(sink.grad_mut(Var(kernel)), &d);
                }
            }
            FftNode::Crop {
                image,
                weights,
                channels,
                n,
                m,
            } => {
                let gs = Stack {
                    data: g,
                    ch: channels,
                    h: m,
                    w: m,
                };
                let iv = sink.value(Var(image));
                let wv = sink.value(Var(weights));
                let ws = Stack {
                    data: wv,
                    ch: 1,
                    h: n.0,
                    w: n.1,
                };
                if sink.requires_grad(Var(image)) {
                    let d = conv_linear(ws, gs, (m / 2, m / 2), n, false);
                    accumulate(sink.grad_mut(Var(image)), &d);
                }
                if sink.requires_grad(Var(weights)) {
                    let is = Stack {
                        data: iv,
                        ch: channels,
                        h: n.0,
                        w: n.1,
                    };
                    let d = corr_linear(is, gs, (m / 2, m / 2), n, true);
                    accumulate(sink.grad_mut(Var(weights)), &d);
                }
            }
        }
    }
}

fn accumulate<T: Real>(dst: Option<&mut Vec<T>>, src: &[T]) {
    if let Some(dst) = dst {
        debug_assert_eq!(dst.len(), src.len());
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *d + *s;
        }
    }
}
