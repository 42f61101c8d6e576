use super::{shape_err, GradSink, Graph, Op, Real, Var};
use crate::error::Result;

impl<T: Real> Graph<T> {
    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o = *o + x * y;
                }
            }
        }
        Ok(self.push(vec![m, n], out, &[a.0, b.0], Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }
}

pub(super) fn matmul_backward<T: Real>(
    a: usize,
    b: usize,
    (m, k, n): (usize, usize, usize),
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let av = sink.value(Var(a));
    let bv = sink.value(Var(b));
    if let Some(da) = sink.grad_mut(Var(a)) {
        // dA = G . B^T
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &bv[p * n..(p + 1) * n];
                let mut acc = T::zero();
                for (x, y) in grow.iter().zip(brow) {
                    acc = acc + *x * *y;
                }
                da[i * k + p] = da[i * k + p] + acc;
            }
        }
    }
    if let Some(db) = sink.grad_mut(Var(b)) {
        // dB = A^T . G
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let drow = &mut db[p * n..(p + 1) * n];
                for (d, y) in drow.iter_mut().zip(grow) {
                    *d = *d + x * *y;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn identity_leaves_matrix_unchanged() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let m = g.constant(Tensor::from_fn(vec![3, 3], |i| i as f64 * 0.5 - 1.0));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p), g.value(m));
    }

    #[test]
    fn hand_computed_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::from_f64(vec![2, 1], &[1., 1.]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p), &[3.0, 7.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.matmul(a, b).is_err());
    }
}
