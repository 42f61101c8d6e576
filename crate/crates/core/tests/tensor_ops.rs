use layerscene::tensor::gradcheck::GradCheck;
use layerscene::tensor::{ConvSpec, FftMode, Graph, ReduceOp, Tensor, UnaryOp, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn get(t: &Tensor<f64>, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, n) in idx.iter().zip(t.shape()) {
        flat = flat * n + i;
    }
    t.data()[flat]
}

/// Reads `x[c, y, x]` with zero outside the grid.
fn padded(t: &Tensor<f64>, c: usize, y: isize, x: isize) -> f64 {
    let s = t.shape();
    if y < 0 || x < 0 || y >= s[1] as isize || x >= s[2] as isize {
        0.0
    } else {
        get(t, &[c, y as usize, x as usize])
    }
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ko, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * p - kh) / s + 1;
    let wo = (w + 2 * p - kw) / s + 1;
    let mut out = Vec::new();
    for o in 0..ko {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias[o];
                for ci in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let y = (i * s + u) as isize - p as isize;
                            let xx = (j * s + v) as isize - p as isize;
                            acc += padded(x, ci, y, xx) * get(k, &[o, ci, u, v]);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (vec![ko, ho, wo], out)
}

fn naive_conv_transpose(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ko, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h - 1) * s + kh - 2 * p;
    let wo = (w - 1) * s + kw - 2 * p;
    let mut out = vec![0.0; ko * ho * wo];
    for o in 0..ko {
        for v in &mut out[o * ho * wo..(o + 1) * ho * wo] {
            *v = bias[o];
        }
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for u in 0..kh {
                        for vv in 0..kw {
                            let y = (i * s + u) as isize - p as isize;
                            let xx = (j * s + vv) as isize - p as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < ho && (xx as usize) < wo {
                                out[(o * ho + y as usize) * wo + xx as usize] +=
                                    get(x, &[ci, i, j]) * get(k, &[ci, o, u, vv]);
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![ko, ho, wo], out)
}

/// Linear convolution of matching channels (or one broadcast channel).
fn naive_linear_conv(img: &Tensor<f64>, ker: &Tensor<f64>, mode: FftMode) -> Vec<f64> {
    let (ci, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (ck, kh, kw) = (ker.shape()[0], ker.shape()[1], ker.shape()[2]);
    let ch = ci.max(ck);
    let (oy, ox, ho, wo) = match mode {
        FftMode::Full => (0, 0, h + kh - 1, w + kw - 1),
        FftMode::SameCentered => (kh / 2, kw / 2, h, w),
    };
    let mut out = Vec::new();
    for c in 0..ch {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for u in 0..kh {
                    for v in 0..kw {
                        let iy = (y + oy) as isize - u as isize;
                        let ix = (x + ox) as isize - v as isize;
                        acc += padded(img, c.min(ci - 1), iy, ix) * get(ker, &[c.min(ck - 1), u, v]);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Keeps `keep` random entries per channel and zeroes the rest.
fn sparsify(rng: &mut ChaCha8Rng, t: &mut Tensor<f64>, keep: usize) {
    let plane = t.shape()[t.shape().len() - 2..].iter().product::<usize>();
    for chunk in t.data_mut().chunks_mut(plane) {
        let kept: Vec<usize> = (0..keep).map(|_| rng.random_range(0..plane)).collect();
        for (i, v) in chunk.iter_mut().enumerate() {
            if !kept.contains(&i) {
                *v = 0.0;
            }
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..60 {
        let c = rng.random_range(1..4);
        let ko = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let s = rng.random_range(1..3);
        let p = rng.random_range(0..3);
        let h = rng.random_range(k.max(1)..10);
        let w = rng.random_range(k.max(1)..10);
        let x = random(&mut rng, &[c, h, w]);
        let kern = random(&mut rng, &[ko, c, k, k]);
        let bias: Vec<f64> = (0..ko).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(kern.clone()));
        let bv = g.constant(Tensor::from_f64(vec![ko], &bias).unwrap());
        let y = g.conv2d(xv, kv, Some(bv), ConvSpec::new(s, p)).unwrap();
        let (shape, expect) = naive_conv(&x, &kern, &bias, s, p);
        assert_eq!(g.shape(y), shape.as_slice());
        assert!(max_abs_diff(g.value(y), &expect) < 1e-12);
    }
}

#[test]
fn conv_transpose2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let c = rng.random_range(1..4);
        let ko = rng.random_range(1..4);
        let k = rng.random_range(2..5);
        let s = rng.random_range(1..3);
        let p = rng.random_range(0..k.min(2));
        let h = rng.random_range(1..7);
        let w = rng.random_range(1..7);
        if (h - 1) * s + k <= 2 * p || (w - 1) * s + k <= 2 * p {
            continue;
        }
        let x = random(&mut rng, &[c, h, w]);
        let kern = random(&mut rng, &[c, ko, k, k]);
        let bias: Vec<f64> = (0..ko).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(kern.clone()));
        let bv = g.constant(Tensor::from_f64(vec![ko], &bias).unwrap());
        let y = g.conv_transpose2d(xv, kv, Some(bv), ConvSpec::new(s, p)).unwrap();
        let (shape, expect) = naive_conv_transpose(&x, &kern, &bias, s, p);
        assert_eq!(g.shape(y), shape.as_slice());
        assert!(max_abs_diff(g.value(y), &expect) < 1e-12);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let (c, ko) = (rng.random_range(1..4), rng.random_range(1..4));
        let spec = ConvSpec::new(2, 1);
        let x = random(&mut rng, &[c, 8, 8]);
        let kern = random(&mut rng, &[ko, c, 4, 4]);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(kern.clone()));
        let y = g.conv2d(xv, kv, None, spec).unwrap();
        let r = random(&mut rng, g.shape(y));
        let rv = g.constant(r.clone());
        let back = g.conv_transpose2d(rv, kv, None, spec).unwrap();
        let lhs = dot(g.value(y), r.data());
        let rhs = dot(x.data(), g.value(back));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

#[test]
fn fft_convolution_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..200 {
        let mode = if i % 2 == 0 { FftMode::Full } else { FftMode::SameCentered };
        let ch = rng.random_range(1..4);
        let (ci, ck) = match i % 3 {
            0 => (ch, ch),
            1 => (1, ch),
            _ => (ch, 1),
        };
        let big = i % 4 == 0;
        let (h, w) = if big {
            (rng.random_range(16..40), rng.random_range(16..40))
        } else {
            (rng.random_range(1..12), rng.random_range(1..12))
        };
        let (kh, kw) = (rng.random_range(1..h.min(16) + 1), rng.random_range(1..w.min(16) + 1));
        let img = random(&mut rng, &[ci, h, w]);
        let mut ker = random(&mut rng, &[ck, kh, kw]);
        if i % 5 == 1 {
            sparsify(&mut rng, &mut ker, 2);
        }
        let mut g = Graph::new();
        let (a, b) = (g.constant(img.clone()), g.constant(ker.clone()));
        let y = g.conv2d_fft(a, b, mode).unwrap();
        assert!(max_abs_diff(g.value(y), &naive_linear_conv(&img, &ker, mode)) < 1e-9);
    }
}

#[test]
fn crop_correlate_reads_crops_centred_at_each_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..40 {
        let n = if i % 2 == 0 { rng.random_range(4..12) } else { rng.random_range(20..32) };
        let m = rng.random_range(1..=n);
        let c = rng.random_range(1..4);
        let img = random(&mut rng, &[c, n, n]);
        let mut wts = random(&mut rng, &[n, n]);
        if i % 3 == 0 {
            sparsify(&mut rng, &mut wts, 1);
        }
        let mut g = Graph::new();
        let (a, b) = (g.constant(img.clone()), g.constant(wts.clone()));
        let crop = g.crop_correlate(a, b, m).unwrap();
        let half = (m / 2) as isize;
        let mut expect = Vec::new();
        for ch in 0..c {
            for u in 0..m {
                for v in 0..m {
                    let mut acc = 0.0;
                    for y in 0..n {
                        for x in 0..n {
                            let iy = y as isize + u as isize - half;
                            let ix = x as isize + v as isize - half;
                            acc += get(&wts, &[y, x]) * padded(&img, ch, iy, ix);
                        }
                    }
                    expect.push(acc);
                }
            }
        }
        assert_eq!(g.shape(crop), &[c, m, m]);
        assert!(max_abs_diff(g.value(crop), &expect) < 1e-10);
    }
}

#[test]
fn placement_and_crop_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let n = rng.random_range(4..20);
        let m = rng.random_range(1..=n);
        let canvas = random(&mut rng, &[3, m, m]);
        let wts = random(&mut rng, &[n, n]);
        let img = random(&mut rng, &[3, n, n]);
        let mut g = Graph::new();
        let (cv, wv, iv) = (g.constant(canvas.clone()), g.constant(wts), g.constant(img.clone()));
        let placed = g.conv2d_fft(wv, cv, FftMode::SameCentered).unwrap();
        let crop = g.crop_correlate(iv, wv, m).unwrap();
        let lhs = dot(g.value(placed), img.data());
        let rhs = dot(canvas.data(), g.value(crop));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300));
    }
}

/// Scalar loss `sum(y * r)` for a fixed random `r`, so every output element
/// contributes a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> layerscene::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> layerscene::Result<Var>) {
    let report = GradCheck::default().run(&f, inputs).unwrap();
    assert!(report.max_rel_error < 1e-4, "{name}: {:?}", report.per_input);
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 5]);
    let pos = x.map(|v| v.abs() + 0.2);
    let ops = [
        UnaryOp::Exp,
        UnaryOp::Sigmoid,
        UnaryOp::Elu,
        UnaryOp::Tanh,
        UnaryOp::Negate,
        UnaryOp::Scale(-2.5),
        UnaryOp::Shift(0.3),
        UnaryOp::Square,
        UnaryOp::Softplus,
    ];
    for op in ops {
        check(&format!("{op:?}"), &[x.clone()], |g, v| {
            let y = g.unary(op, v[0])?;
            project(g, y, 1)
        });
    }
    for op in [UnaryOp::Log, UnaryOp::Sqrt, UnaryOp::XLogX, UnaryOp::Abs, UnaryOp::Relu] {
        let input = if matches!(op, UnaryOp::Abs | UnaryOp::Relu) {
            x.map(|v| if v.abs() < 0.05 { 0.3 } else { v })
        } else {
            pos.clone()
        };
        check(&format!("{op:?}"), &[input], |g, v| {
            let y = g.unary(op, v[0])?;
            project(g, y, 2)
        });
    }
}

#[test]
fn binary_gradients_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&mut rng, &[4, 3]);
    let b = random(&mut rng, &[4, 3]).map(|v| v.signum() * (v.abs() + 0.5));
    let row = random(&mut rng, &[3]).map(|v| v + 2.0);
    let s = Tensor::scalar(1.7);
    check("add", &[a.clone(), row.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 3)
    });
    check("sub", &[a.clone(), s.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 4)
    });
    check("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 5)
    });
    check("div", &[a.clone(), b], |g, v| {
        let y = g.div(v[0], v[1])?;
        project(g, y, 6)
    });
    check("div row", &[a, row], |g, v| {
        let y = g.div(v[0], v[1])?;
        project(g, y, 7)
    });
}

#[test]
fn matmul_and_shape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    check("matmul", &[a.clone(), b.clone()], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 8)
    });
    let x = random(&mut rng, &[2, 3, 4]);
    for (kind, axes) in [
        (ReduceOp::Sum, vec![1]),
        (ReduceOp::Mean, vec![0, 2]),
        (ReduceOp::Max, vec![2]),
    ] {
        check(&format!("{kind:?}"), &[x.clone()], |g, v| {
            let y = g.reduce(kind, v[0], &axes)?;
            project(g, y, 9)
        });
    }
    check("softmax", &[x.clone()], |g, v| {
        let y = g.softmax(v[0], 2)?;
        project(g, y, 10)
    });
    check("log_softmax", &[x.clone()], |g, v| {
        let y = g.log_softmax(v[0], 1)?;
        project(g, y, 11)
    });
    check("concat slice reshape", &[x.clone(), a], |g, v| {
        let r = g.reshape(v[1], &[1, 3, 4])?;
        let c = g.concat(&[v[0], r], 0)?;
        let s = g.slice(c, 1, 1, 2)?;
        project(g, s, 12)
    });
    check("sum_all mean_all", &[x], |g, v| {
        let e = g.exp(v[0]);
        let s = g.sum_all(e);
        let m = g.mean_all(v[0]);
        g.mul(s, m)
    });
}

#[test]
fn convolution_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[2, 8, 8]);
    let k = random(&mut rng, &[3, 2, 4, 4]);
    let b = random(&mut rng, &[3]);
    for spec in [ConvSpec::new(2, 1), ConvSpec::new(1, 1), ConvSpec::new(1, 0)] {
        check(&format!("conv2d {spec:?}"), &[x.clone(), k.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(g, y, 13)
        });
    }
    let kt = random(&mut rng, &[2, 3, 4, 4]);
    check("conv_transpose2d", &[x.clone(), kt, b], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1))?;
        project(g, y, 14)
    });
    let w = random(&mut rng, &[8, 8]);
    let canvas = random(&mut rng, &[3, 4, 4]);
    for mode in [FftMode::Full, FftMode::SameCentered] {
        check(&format!("conv2d_fft {mode:?}"), &[w.clone(), canvas.clone()], |g, v| {
            let y = g.conv2d_fft(v[0], v[1], mode)?;
            project(g, y, 15)
        });
    }
    check("conv2d_fft same channels", &[x.clone(), random(&mut rng, &[2, 3, 3])], |g, v| {
        let y = g.conv2d_fft(v[0], v[1], FftMode::SameCentered)?;
        project(g, y, 16)
    });
    let mut sparse = random(&mut rng, &[8, 8]);
    sparsify(&mut rng, &mut sparse, 2);
    check("conv2d_fft sparse", &[sparse.clone(), canvas], |g, v| {
        let y = g.conv2d_fft(v[0], v[1], FftMode::SameCentered)?;
        project(g, y, 18)
    });
    let img = random(&mut rng, &[3, 8, 8]);
    check("crop_correlate", &[img.clone(), w], |g, v| {
        let y = g.crop_correlate(v[0], v[1], 5)?;
        project(g, y, 17)
    });
    check("crop_correlate sparse", &[img, sparse], |g, v| {
        let y = g.crop_correlate(v[0], v[1], 5)?;
        project(g, y, 19)
    });
}

#[test]
fn lr_zero_adam_step_keeps_parameters_bitwise() {
    use layerscene::tensor::optim::{adam_step, Adam, AdamConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = vec![random(&mut rng, &[5]).cast::<f32>()];
    let before = p.clone();
    let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
    let mut adam = Adam::new(cfg, [5]);
    adam_step(&mut p, &[vec![0.3, -1.0, 2.0, 0.0, 1e-3]], &mut adam).unwrap();
    for (a, b) in p[0].data().iter().zip(before[0].data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(xs in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], xs).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn conv2d_is_linear_in_input(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 6 * 6),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 6 * 6),
        k in prop::collection::vec(-1.0f64..1.0, 2 * 2 * 3 * 3),
        c in -2.0f64..2.0,
    ) {
        let mut g = Graph::new();
        let kv = g.constant(Tensor::new(vec![2, 2, 3, 3], k).unwrap());
        let av = g.constant(Tensor::new(vec![2, 6, 6], a).unwrap());
        let bv = g.constant(Tensor::new(vec![2, 6, 6], b).unwrap());
        let sb = g.scale(bv, c);
        let sum = g.add(av, sb).unwrap();
        let spec = ConvSpec::new(1, 1);
        let lhs = g.conv2d(sum, kv, None, spec).unwrap();
        let ya = g.conv2d(av, kv, None, spec).unwrap();
        let yb = g.conv2d(bv, kv, None, spec).unwrap();
        let yb = g.scale(yb, c);
        let rhs = g.add(ya, yb).unwrap();
        prop_assert!(max_abs_diff(g.value(lhs), g.value(rhs)) < 1e-12);
    }
}
