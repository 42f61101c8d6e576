use super::{shape_err, GradSink, Graph, Op, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Subgradient goes to the first maximal element.
    Max,
}

pub(crate) enum ShapeNode {
    Reduce {
        x: usize,
        /// Output index of every input element.
        map: Vec<usize>,
        kind: ReduceOp,
        count: usize,
        /// Input index of each output's maximum (for `Max`).
        argmax: Vec<usize>,
    },
    Softmax {
        x: usize,
        dims: (usize, usize, usize),
        log: bool,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        in_width: usize,
        start: usize,
        width: usize,
    },
    Reshape {
        x: usize,
    },
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
    }
}

impl<T: Real> Graph<T> {
    pub fn reduce(&mut self, kind: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        for &a in axes {
            check_axis("reduce", a, shape.len())?;
        }
        let mut out_shape = Vec::new();
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for d in (0..shape.len()).rev() {
            if !axes.contains(&d) {
                out_strides[d] = stride;
                stride *= shape[d];
            }
        }
        for (d, &n) in shape.iter().enumerate() {
            if !axes.contains(&d) {
                out_shape.push(n);
            }
        }
        let out_len = stride;
        let count: usize = axes.iter().map(|&a| shape[a]).product::<usize>().max(1);
        let values = self.value(x);
        let mut map = Vec::with_capacity(values.len());
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..values.len() {
            map.push(coord.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
            for d in (0..shape.len()).rev() {
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        let mut out = vec![T::zero(); out_len];
        let mut argmax = Vec::new();
        match kind {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (v, &o) in values.iter().zip(&map) {
                    out[o] = out[o] + *v;
                }
                if kind == ReduceOp::Mean {
                    let inv = T::one() / T::of(count as f64);
                    out.iter_mut().for_each(|v| *v = *v * inv);
                }
            }
            ReduceOp::Max => {
                argmax = vec![usize::MAX; out_len];
                for (i, (v, &o)) in values.iter().zip(&map).enumerate() {
                    if argmax[o] == usize::MAX || *v > out[o] {
                        out[o] = *v;
                        argmax[o] = i;
                    }
                }
            }
        }
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let node = ShapeNode::Reduce {
            x: x.0,
            map,
            kind,
            count,
            argmax,
        };
        Ok(self.push(out_shape, out, &[x.0], Op::Shape(node)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceOp::Sum, x, &axes).expect("all axes are in range")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceOp::Mean, x, &axes).expect("all axes are in range")
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(if log { "log_softmax" } else { "softmax" }, axis, shape.len())?;
        let (outer, n, inner) = around(&shape, axis);
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| v[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (v[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                let logz = z.ln();
                for k in 0..n {
                    out[at(k)] = if log {
                        v[at(k)] - mx - logz
                    } else {
                        out[at(k)] / z
                    };
                }
            }
        }
        let node = ShapeNode::Softmax {
            x: x.0,
            dims: (outer, n, inner),
            log,
        };
        Ok(self.push(shape, out, &[x.0], Op::Shape(node)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        check_axis("concat", axis, first.len())?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            let (_, n, inner) = around(s, axis);
            widths.push(n * inner);
            total += s[axis];
        }
        let (outer, _, _) = around(&first, axis);
        let mut out = Vec::with_capacity(outer * widths.iter().sum::<usize>());
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let node = ShapeNode::Concat {
            xs: ids.clone(),
            outer,
            widths,
        };
        Ok(self.push(shape, out, &ids, Op::Shape(node)))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", axis, shape.len())?;
        if start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("range {start}..{} outside axis of extent {}", start + len, shape[axis]),
            });
        }
        let (outer, n, inner) = around(&shape, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let node = ShapeNode::Slice {
            x: x.0,
            outer,
            in_width: n * inner,
            start: start * inner,
            width: len * inner,
        };
        Ok(self.push(out_shape, out, &[x.0], Op::Shape(node)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, &[x.0], Op::Shape(ShapeNode::Reshape { x: x.0 })))
    }
}

impl ShapeNode {
    pub(super) fn backward<T: Real>(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        match self {
            ShapeNode::Reduce {
                x,
                map,
                kind,
                count,
                argmax,
            } => {
                let Some(dx) = sink.grad_mut(Var(*x)) else {
                    return;
                };
                match kind {
                    ReduceOp::Sum => {
                        for (d, &o) in dx.iter_mut().zip(map) {
                            *d = *d + g[o];
                        }
                    }
                    ReduceOp::Mean => {
                        let inv = T::one() / T::of(*count as f64);
                        for (d, &o) in dx.iter_mut().zip(map) {
                            *d = *d + g[o] * inv;
                        }
                    }
                    ReduceOp::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            dx[i] = dx[i] + g[o];
                        }
                    }
                }
            }
            ShapeNode::Softmax {
                x,
                dims: (outer, n, inner),
                log,
            } => {
                // Recompute the forward values from the input.
                let xv = sink.value(Var(*x));
                let Some(dx) = sink.grad_mut(Var(*x)) else {
                    return;
                };
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut p = vec![T::zero(); n];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mx = (0..n).map(|k| xv[at(k)]).fold(T::neg_infinity(), T::max);
                        let mut z = T::zero();
                        for (k, pk) in p.iter_mut().enumerate() {
                            *pk = (xv[at(k)] - mx).exp();
                            z = z + *pk;
                        }
                        p.iter_mut().for_each(|pk| *pk = *pk / z);
                        if *log {
                            let gsum: T = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                dx[at(k)] = dx[at(k)] + g[at(k)] - p[k] * gsum;
                            }
                        } else {
                            let dot: T = (0..n).map(|k| g[at(k)] * p[k]).sum();
                            for k in 0..n {
                                dx[at(k)] = dx[at(k)] + p[k] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            ShapeNode::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    if let Some(dx) = sink.grad_mut(Var(x)) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (d, s) in dx[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d = *d + *s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            ShapeNode::Slice {
                x,
                outer,
                in_width,
                start,
                width,
            } => {
                if let Some(dx) = sink.grad_mut(Var(*x)) {
                    for o in 0..*outer {
                        let dst = &mut dx[o * in_width + start..o * in_width + start + width];
                        for (d, s) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *d = *d + *s;
                        }
                    }
                }
            }
            ShapeNode::Reshape { x } => {
                if let Some(dx) = sink.grad_mut(Var(*x)) {
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}
