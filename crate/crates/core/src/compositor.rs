//! Placement of object canvases into the image and depth-ordered blending.
//!
//! Placement convention: with a one-hot position at pixel `(r, c)`, canvas
//! cell `(a, b)` lands on image pixel `(r + a - M/2, c + b - M/2)` (integer
//! division); anything falling outside the image is dropped. For a relaxed
//! (Gumbel-Softmax) position map the result is the weighted sum of all such
//! placements, which is a linear convolution of the map with the canvas.
//!
//! Depth convention: smaller depth is nearer. The background sits behind
//! every object (depth 1 in the soft compositor).

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::{CustomOp, FftMode, GradSink, Graph, Real, Var};

/// An object decoded on its own `M x M` canvas: `pixels: [3, M, M]`,
/// `alpha: [M, M]`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectCanvas {
    pub pixels: Var,
    pub alpha: Var,
}

/// An object placed in the full image: `pixels: [3, N, N]`, `alpha: [N, N]`,
/// `depth: [1]` in (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct PlacedObject {
    pub pixels: Var,
    pub alpha: Var,
    pub depth: Var,
}

fn check_probability_map<T: Real>(g: &Graph<T>, weights: Var, what: &'static str) -> Result<()> {
    let sum: f64 = g.value(weights).iter().map(|v| v.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::NotNormalized { what, sum });
    }
    Ok(())
}

fn square_side(shape: &[usize], op: &'static str) -> Result<usize> {
    match *shape {
        [h, w] if h == w => Ok(h),
        _ => Err(Error::InvalidShape {
            op,
            detail: format!("expected a square map, got {shape:?}"),
        }),
    }
}

/// Places `canvas` at the positions weighted by `weights: [N, N]`; returns
/// `(pixels [3, N, N], alpha [N, N])`.
pub fn place<T: Real>(g: &mut Graph<T>, canvas: &ObjectCanvas, weights: Var) -> Result<(Var, Var)> {
    let n = square_side(g.shape(weights), "place")?;
    check_probability_map(g, weights, "position weights")?;
    let m = square_side(g.shape(canvas.alpha), "place")?;
    if g.shape(canvas.pixels) != [3, m, m] {
        return Err(Error::ShapeMismatch {
            op: "place",
            left: g.shape(canvas.pixels).to_vec(),
            right: vec![3, m, m],
        });
    }
    if m > n {
        return Err(Error::InvalidShape {
            op: "place",
            detail: format!("canvas {m} larger than image {n}"),
        });
    }
    let alpha = g.reshape(canvas.alpha, &[1, m, m])?;
    let stack = g.concat(&[canvas.pixels, alpha], 0)?;
    let placed = g.conv2d_fft(weights, stack, FftMode::SameCentered)?;
    let pixels = g.slice(placed, 0, 0, 3)?;
    let alpha = g.slice(placed, 0, 3, 1)?;
    let alpha = g.reshape(alpha, &[n, n])?;
    Ok((pixels, alpha))
}

/// Weighted average of the `m x m` crops of `image: [3, N, N]` centred on each
/// pixel, weighted by `weights`. Exactly the adjoint of [`place`].
pub fn attention_crop<T: Real>(g: &mut Graph<T>, image: Var, weights: Var, m: usize) -> Result<Var> {
    let n = square_side(g.shape(weights), "attention_crop")?;
    if m > n {
        return Err(Error::InvalidShape {
            op: "attention_crop",
            detail: format!("crop {m} larger than image {n}"),
        });
    }
    check_probability_map(g, weights, "position weights")?;
    g.crop_correlate(image, weights, m)
}

struct Layer {
    pixels: Var,
    alpha: Var,
}

fn gather_layers<T: Real>(
    g: &Graph<T>,
    background: Var,
    objects: &[PlacedObject],
    op: &'static str,
) -> Result<(usize, Vec<Layer>, Vec<f64>)> {
    let bshape = g.shape(background);
    let plane = match *bshape {
        [3, h, w] => h * w,
        _ => {
            return Err(Error::InvalidShape {
                op,
                detail: format!("background must be [3, N, N], got {bshape:?}"),
            })
        }
    };
    let mut layers = Vec::with_capacity(objects.len());
    let mut depths = Vec::with_capacity(objects.len());
    for o in objects {
        if g.shape(o.pixels) != bshape || g.value(o.alpha).len() != plane || g.value(o.depth).len() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                left: bshape.to_vec(),
                right: g.shape(o.pixels).to_vec(),
            });
        }
        layers.push(Layer {
            pixels: o.pixels,
            alpha: o.alpha,
        });
        depths.push(g.value(o.depth)[0].as_f64());
    }
    Ok((plane, layers, depths))
}

/// Back-to-front order: farthest (largest depth) first, ties by ascending
/// object index.
pub fn blend_order(depths: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[b].total_cmp(&depths[a]).then(a.cmp(&b)));
    order
}

struct HardComposite {
    background: Var,
    layers: Vec<Layer>,
    order: Vec<usize>,
    plane: usize,
    /// Image before each blend, in blend order.
    before: Vec<Vec<f64>>,
}

/// Alpha-blends `objects` over `background` from the farthest to the nearest.
/// Differentiable in pixels and alphas; the ordering itself carries no
/// gradient.
pub fn composite_hard<T: Real>(g: &mut Graph<T>, background: Var, objects: &[PlacedObject]) -> Result<Var> {
    let (plane, layers, depths) = gather_layers(g, background, objects, "composite_hard")?;
    let order = blend_order(&depths);
    let mut cur: Vec<T> = g.value(background).to_vec();
    let mut before = Vec::with_capacity(order.len());
    for &j in &order {
        before.push(cur.iter().map(|v| v.as_f64()).collect());
        let px = g.value(layers[j].pixels);
        let al = g.value(layers[j].alpha);
        for c in 0..3 {
            for p in 0..plane {
                let i = c * plane + p;
                cur[i] = (T::one() - al[p]) * cur[i] + al[p] * px[i];
            }
        }
    }
    let mut parents = vec![background];
    for o in objects {
        parents.extend([o.pixels, o.alpha, o.depth]);
    }
    let shape = g.shape(background).to_vec();
    let op = HardComposite {
        background,
        layers,
        order,
        plane,
        before,
    };
    Ok(g.push_custom(shape, cur, &parents, Box::new(op)))
}

impl<T: Real> CustomOp<T> for HardComposite {
    fn name(&self) -> &'static str {
        "composite_hard"
    }

    fn backward(&self, _output: &[T], grad_out: &[T], sink: &mut GradSink<'_, T>) {
        let plane = self.plane;
        let mut gcur: Vec<T> = grad_out.to_vec();
        for (step, &j) in self.order.iter().enumerate().rev() {
            let layer = &self.layers[j];
            let (pv, av) = (layer.pixels, layer.alpha);
            let px = sink.value(pv);
            let al = sink.value(av);
            let prev = &self.before[step];
            if let Some(dp) = sink.grad_mut(pv) {
                for c in 0..3 {
                    for p in 0..plane {
                        let i = c * plane + p;
                        dp[i] = dp[i] + gcur[i] * al[p];
                    }
                }
            }
            if let Some(da) = sink.grad_mut(av) {
                for c in 0..3 {
                    for p in 0..plane {
                        let i = c * plane + p;
                        da[p] = da[p] + gcur[i] * (px[i] - T::of(prev[i]));
                    }
                }
            }
            for c in 0..3 {
                for p in 0..plane {
                    let i = c * plane + p;
                    gcur[i] = gcur[i] * (T::one() - al[p]);
                }
            }
        }
        if let Some(db) = sink.grad_mut(self.background) {
            for (d, g) in db.iter_mut().zip(&gcur) {
                *d = *d + *g;
            }
        }
    }
}

struct SoftComposite {
    background: Var,
    layers: Vec<Layer>,
    depths: Vec<Var>,
    tau: f64,
    plane: usize,
}

impl SoftComposite {
    /// Per-pixel normalised weights: returns `(scaled[j], alpha-weighted[j],
    /// background weight, total)` where `scaled[j] = exp((1-d_j)/tau - shift)`.
    fn weights<T: Real>(&self, p: usize, alphas: &[&[T]], logits: &[f64], out: &mut (Vec<f64>, Vec<f64>)) -> (f64, f64) {
        let (scaled, weighted) = out;
        let mut shift = 0.0f64;
        for (a, l) in alphas.iter().zip(logits) {
            let a = a[p].as_f64();
            if a > 0.0 {
                shift = shift.max(a.ln() + l);
            }
        }
        let bg = (-shift).exp();
        let mut total = bg;
        for (j, (a, l)) in alphas.iter().zip(logits).enumerate() {
            let s = (l - shift).exp();
            scaled[j] = s;
            weighted[j] = a[p].as_f64() * s;
            total += weighted[j];
        }
        (bg, total)
    }
}

/// Softened depth ordering: every layer contributes with weight
/// `alpha_j * exp((1 - d_j) / tau)`, the background with `exp(0)` (depth 1),
/// and each pixel is the weighted average. As `tau -> 0` with binary alphas
/// this approaches [`composite_hard`].
pub fn composite_soft<T: Real>(
    g: &mut Graph<T>,
    background: Var,
    objects: &[PlacedObject],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "composite_soft",
            detail: format!("depth temperature {tau} must be positive"),
        });
    }
    let (plane, layers, depths) = gather_layers(g, background, objects, "composite_soft")?;
    let op = SoftComposite {
        background,
        layers,
        depths: objects.iter().map(|o| o.depth).collect(),
        tau,
        plane,
    };
    let logits: Vec<f64> = depths.iter().map(|d| (1.0 - d) / tau).collect();
    let alphas: Vec<&[T]> = op.layers.iter().map(|l| g.value(l.alpha)).collect();
    let pixels: Vec<&[T]> = op.layers.iter().map(|l| g.value(l.pixels)).collect();
    let bg = g.value(background);
    let mut out = vec![T::zero(); 3 * plane];
    let mut buf = (vec![0.0; objects.len()], vec![0.0; objects.len()]);
    for p in 0..plane {
        let (wbg, total) = op.weights(p, &alphas, &logits, &mut buf);
        for c in 0..3 {
            let i = c * plane + p;
            let mut acc = wbg * bg[i].as_f64();
            for (w, px) in buf.1.iter().zip(&pixels) {
                acc += w * px[i].as_f64();
            }
            out[i] = T::of(acc / total);
        }
    }
    let mut parents = vec![background];
    for o in objects {
        parents.extend([o.pixels, o.alpha, o.depth]);
    }
    let shape = g.shape(background).to_vec();
    Ok(g.push_custom(shape, out, &parents, Box::new(op)))
}

impl<T: Real> CustomOp<T> for SoftComposite {
    fn name(&self) -> &'static str {
        "composite_soft"
    }

    fn backward(&self, output: &[T], grad_out: &[T], sink: &mut GradSink<'_, T>) {
        let plane = self.plane;
        let n = self.layers.len();
        let depth_vals: Vec<f64> = self
            .depths
            .iter()
            .map(|&d| sink.value(d)[0].as_f64())
            .collect();
        let logits: Vec<f64> = depth_vals.iter().map(|d| (1.0 - d) / self.tau).collect();
        let alphas: Vec<&[T]> = self.layers.iter().map(|l| sink.value(l.alpha)).collect();
        let pixels: Vec<&[T]> = self.layers.iter().map(|l| sink.value(l.pixels)).collect();

        let mut d_pix = vec![vec![0.0f64; 3 * plane]; n];
        let mut d_alpha = vec![vec![0.0f64; plane]; n];
        let mut d_depth = vec![0.0f64; n];
        let mut d_bg = vec![0.0f64; 3 * plane];
        let mut buf = (vec![0.0; n], vec![0.0; n]);
        for p in 0..plane {
            let (wbg, total) = self.weights(p, &alphas, &logits, &mut buf);
            let (scaled, weighted) = (&buf.0, &buf.1);
            for c in 0..3 {
                let i = c * plane + p;
                let g = grad_out[i].as_f64();
                if g == 0.0 {
                    continue;
                }
                let o = output[i].as_f64();
                d_bg[i] += g * wbg / total;
                for j in 0..n {
                    let diff = pixels[j][i].as_f64() - o;
                    d_pix[j][i] += g * weighted[j] / total;
                    d_alpha[j][p] += g * diff * scaled[j] / total;
                    d_depth[j] -= g * diff * weighted[j] / (total * self.tau);
                }
            }
        }
        let add = |dst: Option<&mut Vec<T>>, src: &[f64]| {
            if let Some(dst) = dst {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + T::of(*s);
                }
            }
        };
        add(sink.grad_mut(self.background), &d_bg);
        for j in 0..n {
            add(sink.grad_mut(self.layers[j].pixels), &d_pix[j]);
            add(sink.grad_mut(self.layers[j].alpha), &d_alpha[j]);
            add(sink.grad_mut(self.depths[j]), &[d_depth[j]]);
        }
    }
}

/// A way of combining placed objects with the background.
pub trait Compositor<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn composite(&self, g: &mut Graph<T>, background: Var, objects: &[PlacedObject]) -> Result<Var>;
}

pub struct HardCompositor;

impl<T: Real> Compositor<T> for HardCompositor {
    fn name(&self) -> &'static str {
        "hard"
    }

    fn composite(&self, g: &mut Graph<T>, background: Var, objects: &[PlacedObject]) -> Result<Var> {
        composite_hard(g, background, objects)
    }
}

pub struct SoftCompositor {
    pub tau: f64,
}

impl<T: Real> Compositor<T> for SoftCompositor {
    fn name(&self) -> &'static str {
        "soft"
    }

    fn composite(&self, g: &mut Graph<T>, background: Var, objects: &[PlacedObject]) -> Result<Var> {
        composite_soft(g, background, objects, self.tau)
    }
}

/// Settings shared by compositor constructors.
#[derive(Clone, Copy, Debug)]
pub struct CompositorOptions {
    pub tau_depth: f64,
}

/// All built-in compositors: `hard` and `soft`.
pub fn compositors<T: Real>() -> Registry<dyn Compositor<T>, CompositorOptions> {
    let mut reg: Registry<dyn Compositor<T>, CompositorOptions> = Registry::new("compositor");
    reg.register("hard", |_| Box::new(HardCompositor));
    reg.register("soft", |o| Box::new(SoftCompositor { tau: o.tau_depth }));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_hot(n: usize, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![n, n], |i| if i == r * n + c { 1.0 } else { 0.0 })
    }

    #[test]
    fn center_one_hot_with_full_canvas_reproduces_canvas() {
        let n = 6;
        let mut g = Graph::<f64>::new();
        let pixels = g.constant(Tensor::from_fn(vec![3, n, n], |i| (i as f64 * 0.13).sin().abs()));
        let alpha = g.constant(Tensor::from_fn(vec![n, n], |i| (i % 3) as f64 / 2.0));
        let w = g.constant(one_hot(n, n / 2, n / 2));
        let (px, al) = place(&mut g, &ObjectCanvas { pixels, alpha }, w).unwrap();
        for (a, b) in g.value(px).iter().zip(g.value(pixels)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(al).iter().zip(g.value(alpha)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_canvas_places_nothing() {
        let mut g = Graph::<f64>::new();
        let pixels = g.constant(Tensor::zeros(vec![3, 3, 3]));
        let alpha = g.constant(Tensor::zeros(vec![3, 3]));
        let w = g.constant(Tensor::full(vec![5, 5], 1.0 / 25.0));
        let (px, al) = place(&mut g, &ObjectCanvas { pixels, alpha }, w).unwrap();
        assert!(g.value(px).iter().chain(g.value(al)).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let mut g = Graph::<f64>::new();
        let pixels = g.constant(Tensor::zeros(vec![3, 3, 3]));
        let alpha = g.constant(Tensor::zeros(vec![3, 3]));
        let w = g.constant(Tensor::full(vec![5, 5], 0.5));
        assert!(matches!(
            place(&mut g, &ObjectCanvas { pixels, alpha }, w),
            Err(Error::NotNormalized { .. })
        ));
    }

    fn constant_object(g: &mut Graph<f64>, n: usize, color: f64, alpha: f64, depth: f64) -> PlacedObject {
        PlacedObject {
            pixels: g.constant(Tensor::full(vec![3, n, n], color)),
            alpha: g.constant(Tensor::full(vec![n, n], alpha)),
            depth: g.constant(Tensor::scalar(depth)),
        }
    }

    #[test]
    fn zero_alphas_show_background() {
        let mut g = Graph::<f64>::new();
        let bg = g.constant(Tensor::from_fn(vec![3, 4, 4], |i| i as f64 / 48.0));
        let objs = [constant_object(&mut g, 4, 0.9, 0.0, 0.3), constant_object(&mut g, 4, 0.1, 0.0, 0.6)];
        let hard = composite_hard(&mut g, bg, &objs).unwrap();
        assert_eq!(g.value(hard), g.value(bg));
        for tau in [1e-3, 0.1, 10.0] {
            let soft = composite_soft(&mut g, bg, &objs, tau).unwrap();
            assert_eq!(g.value(soft), g.value(bg));
        }
    }

    #[test]
    fn nearer_opaque_object_wins() {
        let mut g = Graph::<f64>::new();
        let bg = g.constant(Tensor::zeros(vec![3, 2, 2]));
        let near = constant_object(&mut g, 2, 0.8, 1.0, 0.2);
        let far = constant_object(&mut g, 2, 0.3, 1.0, 0.7);
        let out = composite_hard(&mut g, bg, &[near, far]).unwrap();
        assert!(g.value(out).iter().all(|v| (v - 0.8).abs() < 1e-15));
        let out = composite_hard(&mut g, bg, &[far, near]).unwrap();
        assert!(g.value(out).iter().all(|v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn soft_limit_single_object() {
        let mut g = Graph::<f64>::new();
        let bg = g.constant(Tensor::full(vec![3, 3, 3], 0.1));
        let obj = constant_object(&mut g, 3, 0.7, 1.0, 0.5);
        let out = composite_soft(&mut g, bg, &[obj], 1e-3).unwrap();
        assert!(g.value(out).iter().all(|v| (v - 0.7).abs() < 1e-6));
        assert!(composite_soft(&mut g, bg, &[obj], 0.0).is_err());
    }

    #[test]
    fn ties_broken_by_index() {
        assert_eq!(blend_order(&[0.5, 0.5, 0.9]), vec![2, 0, 1]);
    }

    #[test]
    fn registry_knows_both_compositors() {
        let reg = compositors::<f64>();
        assert_eq!(reg.names(), vec!["hard", "soft"]);
        let c = reg.create("soft", &CompositorOptions { tau_depth: 0.1 }).unwrap();
        assert_eq!(c.name(), "soft");
        assert!(reg.create("fancy", &CompositorOptions { tau_depth: 0.1 }).is_err());
    }
}
