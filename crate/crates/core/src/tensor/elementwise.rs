use super::{shape_err, GradSink, Graph, Op, Real, Var};
use crate::error::{Error, Result};

/// Elementwise unary operations. `Elu` uses alpha = 1; the ReLU subgradient
/// at zero is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Sigmoid,
    Relu,
    Elu,
    Tanh,
    Negate,
    Scale(f64),
    Shift(f64),
    Abs,
    Square,
    Sqrt,
    Softplus,
    /// `x * ln x`, with `0 * ln 0 = 0`.
    XLogX,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// How an operand is read when the other operand is larger.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Pattern {
    Full,
    Scalar,
    /// A vector broadcast along the last axis.
    Row(usize),
}

impl Pattern {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Pattern::Full => i,
            Pattern::Scalar => 0,
            Pattern::Row(n) => i % n,
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Pattern, Pattern)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Pattern::Full, Pattern::Full));
    }
    if nb == 1 {
        return Ok((a.to_vec(), Pattern::Full, Pattern::Scalar));
    }
    if na == 1 {
        return Ok((b.to_vec(), Pattern::Scalar, Pattern::Full));
    }
    if b.len() == 1 && a.last() == Some(&b[0]) {
        return Ok((a.to_vec(), Pattern::Full, Pattern::Row(b[0])));
    }
    if a.len() == 1 && b.last() == Some(&a[0]) {
        return Ok((b.to_vec(), Pattern::Row(a[0]), Pattern::Full));
    }
    Err(shape_err(op, a, b))
}

impl<T: Real> Graph<T> {
    pub fn unary(&mut self, kind: UnaryOp, x: Var) -> Result<Var> {
        let input = self.value(x);
        let value: Vec<T> = match kind {
            UnaryOp::Exp => input.iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = input.iter().find(|v| **v <= T::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                input.iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Sqrt => {
                if let Some(bad) = input.iter().find(|v| **v < T::zero()) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                input.iter().map(|v| v.sqrt()).collect()
            }
            UnaryOp::Sigmoid => input.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Relu => input.iter().map(|&v| v.max(T::zero())).collect(),
            UnaryOp::Elu => input
                .iter()
                .map(|&v| if v > T::zero() { v } else { v.exp_m1() })
                .collect(),
            UnaryOp::Tanh => input.iter().map(|v| v.tanh()).collect(),
            UnaryOp::Negate => input.iter().map(|&v| -v).collect(),
            UnaryOp::Scale(c) => {
                let c = T::of(c);
                input.iter().map(|&v| v * c).collect()
            }
            UnaryOp::Shift(c) => {
                let c = T::of(c);
                input.iter().map(|&v| v + c).collect()
            }
            UnaryOp::Abs => input.iter().map(|v| v.abs()).collect(),
            UnaryOp::Square => input.iter().map(|&v| v * v).collect(),
            UnaryOp::Softplus => input.iter().map(|&v| softplus(v)).collect(),
            UnaryOp::XLogX => input
                .iter()
                .map(|&v| if v > T::zero() { v * v.ln() } else { T::zero() })
                .collect(),
        };
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, &[x.0], Op::Unary { kind, x: x.0 }))
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (shape, a_pat, b_pat) = broadcast(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        if kind == BinaryOp::Div && bv.iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let n: usize = shape.iter().product();
        let f: fn(T, T) -> T = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let value = (0..n)
            .map(|i| f(av[a_pat.index(i)], bv[b_pat.index(i)]))
            .collect();
        Ok(self.push(
            shape,
            value,
            &[a.0, b.0],
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                a_pat,
                b_pat,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), x).expect("scale is total")
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::Shift(c), x).expect("shift is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Elu, x).expect("elu is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x).expect("exp is total")
    }
}

fn reduce_into<T: Real>(dst: &mut [T], pat: Pattern, contrib: impl Fn(usize) -> T, n: usize) {
    match pat {
        Pattern::Full => {
            for (i, d) in dst.iter_mut().enumerate().take(n) {
                *d = *d + contrib(i);
            }
        }
        Pattern::Scalar => {
            let mut acc = T::zero();
            for i in 0..n {
                acc = acc + contrib(i);
            }
            dst[0] = dst[0] + acc;
        }
        Pattern::Row(m) => {
            for i in 0..n {
                dst[i % m] = dst[i % m] + contrib(i);
            }
        }
    }
}

pub(super) fn unary_backward<T: Real>(
    kind: UnaryOp,
    x: usize,
    y: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let xv = sink.value(Var(x));
    let Some(dx) = sink.grad_mut(Var(x)) else {
        return;
    };
    let one = T::one();
    for i in 0..g.len() {
        let d = match kind {
            UnaryOp::Exp => g[i] * y[i],
            UnaryOp::Log => g[i] / xv[i],
            UnaryOp::Sqrt => {
                if y[i] > T::zero() {
                    g[i] / (y[i] + y[i])
                } else {
                    T::zero()
                }
            }
            UnaryOp::Sigmoid => g[i] * y[i] * (one - y[i]),
            UnaryOp::Relu => {
                if xv[i] > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            }
            UnaryOp::Elu => {
                if xv[i] > T::zero() {
                    g[i]
                } else {
                    g[i] * (y[i] + one)
                }
            }
            UnaryOp::Tanh => g[i] * (one - y[i] * y[i]),
            UnaryOp::Negate => -g[i],
            UnaryOp::Scale(c) => g[i] * T::of(c),
            UnaryOp::Shift(_) => g[i],
            UnaryOp::Abs => {
                if xv[i] > T::zero() {
                    g[i]
                } else if xv[i] < T::zero() {
                    -g[i]
                } else {
                    T::zero()
                }
            }
            UnaryOp::Square => g[i] * (xv[i] + xv[i]),
            UnaryOp::Softplus => g[i] * sigmoid(xv[i]),
            UnaryOp::XLogX => {
                if xv[i] > T::zero() {
                    g[i] * (xv[i].ln() + one)
                } else {
                    T::zero()
                }
            }
        };
        dx[i] = dx[i] + d;
    }
}

pub(super) fn binary_backward<T: Real>(
    kind: BinaryOp,
    (a, a_pat): (usize, Pattern),
    (b, b_pat): (usize, Pattern),
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let av = sink.value(Var(a));
    let bv = sink.value(Var(b));
    let n = g.len();
    if let Some(da) = sink.grad_mut(Var(a)) {
        match kind {
            BinaryOp::Add | BinaryOp::Sub => reduce_into(da, a_pat, |i| g[i], n),
            BinaryOp::Mul => reduce_into(da, a_pat, |i| g[i] * bv[b_pat.index(i)], n),
            BinaryOp::Div => reduce_into(da, a_pat, |i| g[i] / bv[b_pat.index(i)], n),
        }
    }
    if let Some(db) = sink.grad_mut(Var(b)) {
        match kind {
            BinaryOp::Add => reduce_into(db, b_pat, |i| g[i], n),
            BinaryOp::Sub => reduce_into(db, b_pat, |i| -g[i], n),
            BinaryOp::Mul => reduce_into(db, b_pat, |i| g[i] * av[a_pat.index(i)], n),
            BinaryOp::Div => reduce_into(
                db,
                b_pat,
                |i| {
                    let bi = bv[b_pat.index(i)];
                    -g[i] * av[a_pat.index(i)] / (bi * bi)
                },
                n,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn vec_var(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.leaf(Tensor::from_f64(vec![v.len()], v).unwrap())
    }

    #[test]
    fn add_componentwise() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[1.0, 2.0]);
        let b = vec_var(&mut g, &[3.0, 4.0]);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[0.0]);
        let s = g.sigmoid(a);
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn sigmoid_slope_at_zero_matches_central_difference() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[0.0]);
        let s = g.sigmoid(a);
        g.backward(s).unwrap();
        let analytic = g.grad(a).unwrap()[0];
        assert_eq!(analytic, 0.25);
        let h = 1e-5;
        let f = |x: f64| 1.0 / (1.0 + (-x).exp());
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((analytic - fd).abs() < 1e-8, "{analytic} vs {fd}");
    }

    #[test]
    fn row_broadcast_adds_along_last_axis() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_f64(vec![2, 3], &[0., 0., 0., 1., 1., 1.]).unwrap());
        let b = vec_var(&mut g, &[1.0, 2.0, 3.0]);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[1., 2., 3., 2., 3., 4.]);
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![4]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn log_and_div_domain_errors() {
        let mut g = Graph::<f64>::new();
        let a = vec_var(&mut g, &[1.0, 0.0]);
        assert!(matches!(g.unary(UnaryOp::Log, a), Err(Error::Domain { .. })));
        let b = vec_var(&mut g, &[1.0, 1.0]);
        assert!(matches!(g.div(b, a), Err(Error::Domain { .. })));
    }

    #[test]
    fn elu_and_relu_conventions() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[-1.0, 0.0, 2.0]);
        let e = g.elu(a);
        assert!((g.value(e)[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        let r = g.unary(UnaryOp::Relu, a).unwrap();
        let s = g.sum_all(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn xlogx_treats_zero_as_zero() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[0.0, 1.0, 0.5]);
        let r = g.unary(UnaryOp::XLogX, a).unwrap();
        assert_eq!(g.value(r)[0], 0.0);
        assert_eq!(g.value(r)[1], 0.0);
        assert!((g.value(r)[2] - 0.5 * 0.5f64.ln()).abs() < 1e-15);
    }
}
