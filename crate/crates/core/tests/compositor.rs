use layerscene::compositor::{
    attention_crop, blend_order, composite_hard, composite_soft, compositors, place, CompositorOptions, ObjectCanvas,
    PlacedObject,
};
use layerscene::tensor::gradcheck::GradCheck;
use layerscene::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn one_hot(n: usize, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n, n], |i| if i == r * n + c { 1.0 } else { 0.0 })
}

fn canvas(g: &mut Graph<f64>, pixels: Tensor<f64>, alpha: Tensor<f64>) -> ObjectCanvas {
    ObjectCanvas {
        pixels: g.constant(pixels),
        alpha: g.constant(alpha),
    }
}

#[test]
fn corner_placement_keeps_the_lower_right_quadrant() {
    let (n, m) = (9, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let px = uniform(&mut rng, &[3, m, m]);
    let al = uniform(&mut rng, &[m, m]);
    let mut g = Graph::new();
    let cv = canvas(&mut g, px.clone(), al.clone());
    let w = g.constant(one_hot(n, 0, 0));
    let (pixels, alpha) = place(&mut g, &cv, w).unwrap();
    // shift each canvas cell by -m/2 and drop what falls off the image
    let mut want_px = vec![0.0; 3 * n * n];
    let mut want_al = vec![0.0; n * n];
    for a in 0..m {
        for b in 0..m {
            let (r, c) = (a as isize - (m / 2) as isize, b as isize - (m / 2) as isize);
            if r < 0 || c < 0 {
                continue;
            }
            let p = r as usize * n + c as usize;
            want_al[p] = al.data()[a * m + b];
            for ch in 0..3 {
                want_px[ch * n * n + p] = px.data()[ch * m * m + a * m + b];
            }
        }
    }
    assert_eq!(g.value(pixels), &want_px[..]);
    assert_eq!(g.value(alpha), &want_al[..]);
    let kept = g.value(alpha).iter().filter(|v| **v != 0.0).count();
    assert_eq!(kept, m.div_ceil(2) * m.div_ceil(2));
}

#[test]
fn interior_one_hot_placement_conserves_alpha_mass() {
    let (n, m) = (16, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (r, c) = (rng.random_range(m / 2..n - m / 2), rng.random_range(m / 2..n - m / 2));
        let al = uniform(&mut rng, &[m, m]);
        let mut g = Graph::new();
        let cv = canvas(&mut g, uniform(&mut rng, &[3, m, m]), al.clone());
        let w = g.constant(one_hot(n, r, c));
        let (_, alpha) = place(&mut g, &cv, w).unwrap();
        let placed: f64 = g.value(alpha).iter().sum();
        let original: f64 = al.data().iter().sum();
        assert!((placed - original).abs() < 1e-12);
    }
}

#[test]
fn center_crop_and_constant_image_crop() {
    let (n, m) = (11, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = uniform(&mut rng, &[3, n, n]);
    let mut g = Graph::new();
    let iv = g.constant(img.clone());
    let w = g.constant(one_hot(n, n / 2, n / 2));
    let crop = attention_crop(&mut g, iv, w, m).unwrap();
    let off = n / 2 - m / 2;
    let mut want = Vec::new();
    for ch in 0..3 {
        for a in 0..m {
            for b in 0..m {
                want.push(img.data()[ch * n * n + (a + off) * n + b + off]);
            }
        }
    }
    assert_eq!(g.value(crop), &want[..]);

    // uniform weights on a constant image: each crop cell sees the image for
    // the fraction of centres that keep it in bounds
    let ones = g.constant(Tensor::from_fn(vec![3, n, n], |_| 0.7));
    let uw = g.constant(Tensor::from_fn(vec![n, n], |_| 1.0 / (n * n) as f64));
    let crop = attention_crop(&mut g, ones, uw, m).unwrap();
    let inside = |a: usize| (0..n).filter(|&r| (r + a).checked_sub(m / 2).is_some_and(|y| y < n)).count();
    for a in 0..m {
        for b in 0..m {
            let frac = (inside(a) * inside(b)) as f64 / (n * n) as f64;
            let got = g.value(crop)[a * m + b];
            assert!((got - 0.7 * frac).abs() < 1e-12, "{a},{b}: {got} vs {}", 0.7 * frac);
        }
    }
}

#[test]
fn place_and_crop_are_adjoint_for_relaxed_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let n = rng.random_range(6..24);
        let m = rng.random_range(1..=n);
        let logits: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w = Tensor::new(vec![n, n], logits.iter().map(|l| l.exp() / z).collect()).unwrap();
        let cpx = uniform(&mut rng, &[3, m, m]);
        let img = uniform(&mut rng, &[3, n, n]);
        let mut g = Graph::new();
        let cv = canvas(&mut g, cpx.clone(), Tensor::zeros(vec![m, m]));
        let wv = g.constant(w);
        let iv = g.constant(img.clone());
        let (placed, _) = place(&mut g, &cv, wv).unwrap();
        let crop = attention_crop(&mut g, iv, wv, m).unwrap();
        let lhs: f64 = g.value(placed).iter().zip(img.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(crop).iter().zip(cpx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
    }
}

#[test]
fn placement_rejects_unnormalized_weights_and_oversized_crops() {
    let mut g = Graph::new();
    let cv = canvas(&mut g, Tensor::zeros(vec![3, 3, 3]), Tensor::zeros(vec![3, 3]));
    let w = g.constant(Tensor::from_fn(vec![5, 5], |_| 0.5));
    assert!(place(&mut g, &cv, w).is_err());
    let img = g.constant(Tensor::zeros(vec![3, 5, 5]));
    let ok = g.constant(one_hot(5, 2, 2));
    assert!(attention_crop(&mut g, img, ok, 6).is_err());
}

struct Assembly {
    background: Tensor<f64>,
    layers: Vec<(Tensor<f64>, Tensor<f64>, f64)>,
}

impl Assembly {
    fn bind(&self, g: &mut Graph<f64>) -> (Var, Vec<PlacedObject>) {
        let bg = g.constant(self.background.clone());
        let objs = self
            .layers
            .iter()
            .map(|(px, al, d)| PlacedObject {
                pixels: g.constant(px.clone()),
                alpha: g.constant(al.clone()),
                depth: g.constant(Tensor::new(vec![1], vec![*d]).unwrap()),
            })
            .collect();
        (bg, objs)
    }
}

/// Binary rectangular alphas with depths drawn without replacement from
/// {0.05, 0.10, ..., 0.95}.
fn binary_assembly(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Assembly {
    let mut grid: Vec<usize> = (1..=19).collect();
    grid.shuffle(rng);
    let layers = (0..count)
        .map(|k| {
            let (r0, c0) = (rng.random_range(0..n), rng.random_range(0..n));
            let (h, w) = (rng.random_range(1..=n - r0), rng.random_range(1..=n - c0));
            let alpha = Tensor::from_fn(vec![n, n], |i| {
                let (r, c) = (i / n, i % n);
                if (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c) {
                    1.0
                } else {
                    0.0
                }
            });
            (uniform(rng, &[3, n, n]), alpha, grid[k] as f64 * 0.05)
        })
        .collect();
    Assembly {
        background: uniform(rng, &[3, n, n]),
        layers,
    }
}

/// Back-to-front "over" per pixel, written independently of the library.
fn over_oracle(a: &Assembly) -> Vec<f64> {
    let plane = a.background.numel() / 3;
    let mut idx: Vec<usize> = (0..a.layers.len()).collect();
    idx.sort_by(|&i, &j| a.layers[j].2.partial_cmp(&a.layers[i].2).unwrap().then(i.cmp(&j)));
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let mut v = a.background.data()[ch * plane + p];
            for &j in &idx {
                let (px, al, _) = &a.layers[j];
                let t = al.data()[p];
                v = t * px.data()[ch * plane + p] + (1.0 - t) * v;
            }
            out[ch * plane + p] = v;
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn hard_compositing_matches_over_operator_with_translucent_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10;
    for _ in 0..50 {
        let a = Assembly {
            background: uniform(&mut rng, &[3, n, n]),
            layers: (0..3)
                .map(|_| (uniform(&mut rng, &[3, n, n]), uniform(&mut rng, &[n, n]), rng.random_range(0.01..0.99)))
                .collect(),
        };
        let mut g = Graph::new();
        let (bg, objs) = a.bind(&mut g);
        let out = composite_hard(&mut g, bg, &objs).unwrap();
        assert!(max_abs_diff(g.value(out), &over_oracle(&a)) < 1e-12);
    }
}

#[test]
fn hard_compositing_ignores_object_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = binary_assembly(&mut rng, 8, 4);
    let mut g = Graph::new();
    let (bg, objs) = a.bind(&mut g);
    let base = composite_hard(&mut g, bg, &objs).unwrap();
    for _ in 0..10 {
        let mut shuffled = objs.clone();
        shuffled.shuffle(&mut rng);
        let out = composite_hard(&mut g, bg, &shuffled).unwrap();
        assert_eq!(g.value(out), g.value(base));
    }
}

#[test]
fn blend_order_breaks_ties_by_index() {
    assert_eq!(blend_order(&[0.5, 0.9, 0.5, 0.1]), vec![1, 0, 2, 3]);
}

#[test]
fn soft_compositing_approaches_hard_at_low_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let count = rng.random_range(1..=4);
        let a = binary_assembly(&mut rng, 12, count);
        let mut g = Graph::new();
        let (bg, objs) = a.bind(&mut g);
        let hard = composite_hard(&mut g, bg, &objs).unwrap();
        let soft = composite_soft(&mut g, bg, &objs, 1e-3).unwrap();
        assert!(max_abs_diff(g.value(soft), g.value(hard)) <= 1e-3);
    }
}

#[test]
fn soft_single_opaque_object_shows_its_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 6;
    let px = uniform(&mut rng, &[3, n, n]);
    let mut g = Graph::new();
    let bg = g.constant(uniform(&mut rng, &[3, n, n]));
    let obj = PlacedObject {
        pixels: g.constant(px.clone()),
        alpha: g.constant(Tensor::from_fn(vec![n, n], |_| 1.0)),
        depth: g.constant(Tensor::new(vec![1], vec![0.5]).unwrap()),
    };
    let out = composite_soft(&mut g, bg, &[obj], 1e-3).unwrap();
    assert!(max_abs_diff(g.value(out), px.data()) < 1e-6);
    let zero = PlacedObject {
        alpha: g.constant(Tensor::zeros(vec![n, n])),
        ..obj
    };
    let out = composite_soft(&mut g, bg, &[zero], 0.1).unwrap();
    assert_eq!(g.value(out), g.value(bg));
    assert!(composite_soft(&mut g, bg, &[obj], 0.0).is_err());
}

#[test]
fn soft_compositing_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 5;
    let mut inputs = vec![uniform(&mut rng, &[3, n, n])];
    for _ in 0..3 {
        inputs.push(uniform(&mut rng, &[3, n, n]));
        inputs.push(uniform(&mut rng, &[n, n]));
        inputs.push(Tensor::new(vec![1], vec![rng.random_range(0.1..0.9)]).unwrap());
    }
    let weights = uniform(&mut rng, &[3, n, n]);
    let report = GradCheck::default()
        .run(
            |g, v| {
                let objs: Vec<PlacedObject> = v[1..]
                    .chunks(3)
                    .map(|c| PlacedObject {
                        pixels: c[0],
                        alpha: c[1],
                        depth: c[2],
                    })
                    .collect();
                let out = composite_soft(g, v[0], &objs, 0.2)?;
                let w = g.constant(weights.clone());
                let p = g.mul(out, w)?;
                Ok(g.sum_all(p))
            },
            &inputs,
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.per_input);
}

#[test]
fn hard_compositing_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 4;
    let mut inputs = vec![uniform(&mut rng, &[3, n, n])];
    for d in [0.3, 0.7] {
        inputs.push(uniform(&mut rng, &[3, n, n]));
        inputs.push(uniform(&mut rng, &[n, n]));
        inputs.push(Tensor::new(vec![1], vec![d]).unwrap());
    }
    let weights = uniform(&mut rng, &[3, n, n]);
    let report = GradCheck::default()
        .run(
            |g, v| {
                let objs: Vec<PlacedObject> = v[1..]
                    .chunks(3)
                    .map(|c| PlacedObject {
                        pixels: c[0],
                        alpha: c[1],
                        depth: c[2],
                    })
                    .collect();
                let out = composite_hard(g, v[0], &objs)?;
                let w = g.constant(weights.clone());
                let p = g.mul(out, w)?;
                Ok(g.sum_all(p))
            },
            &inputs,
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.per_input);
}

#[test]
fn registry_builds_both_compositors() {
    let reg = compositors::<f64>();
    let opts = CompositorOptions { tau_depth: 1e-3 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = binary_assembly(&mut rng, 6, 2);
    let mut g = Graph::new();
    let (bg, objs) = a.bind(&mut g);
    let hard = reg.create("hard", &opts).unwrap().composite(&mut g, bg, &objs).unwrap();
    let soft = reg.create("soft", &opts).unwrap().composite(&mut g, bg, &objs).unwrap();
    assert!(max_abs_diff(g.value(hard), g.value(soft)) <= 1e-3);
    assert!(reg.create("additive", &opts).is_err());
}

proptest! {
    #[test]
    fn placement_is_linear_in_the_canvas(
        seed in any::<u64>(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (8, 5);
        let (c1, c2) = (uniform(&mut rng, &[3, m, m]), uniform(&mut rng, &[3, m, m]));
        let logits: Vec<f64> = (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w = Tensor::new(vec![n, n], logits.iter().map(|l| l.exp() / z).collect()).unwrap();
        let mix = Tensor::new(
            vec![3, m, m],
            c1.data().iter().zip(c2.data()).map(|(x, y)| a * x + b * y).collect(),
        ).unwrap();
        let mut g = Graph::new();
        let wv = g.constant(w);
        let mut placed = |t: Tensor<f64>| {
            let cv = canvas(&mut g, t, Tensor::zeros(vec![m, m]));
            let (p, _) = place(&mut g, &cv, wv).unwrap();
            g.value(p).to_vec()
        };
        let (p1, p2, pm) = (placed(c1), placed(c2), placed(mix));
        for ((x, y), z) in p1.iter().zip(&p2).zip(&pm) {
            prop_assert!((a * x + b * y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_output_is_a_per_pixel_convex_combination(
        seed in any::<u64>(),
        tau in 1e-3f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let a = Assembly {
            background: uniform(&mut rng, &[3, n, n]),
            layers: (0..3)
                .map(|_| (uniform(&mut rng, &[3, n, n]), uniform(&mut rng, &[n, n]), rng.random_range(0.01..0.99)))
                .collect(),
        };
        let mut g = Graph::new();
        let (bg, objs) = a.bind(&mut g);
        let out = composite_soft(&mut g, bg, &objs, tau).unwrap();
        let plane = n * n;
        for i in 0..3 * plane {
            let mut lo = a.background.data()[i];
            let mut hi = lo;
            for (px, _, _) in &a.layers {
                lo = lo.min(px.data()[i]);
                hi = hi.max(px.data()[i]);
            }
            let v = g.value(out)[i];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
