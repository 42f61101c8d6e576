//! Synthetic scenes with exact ground truth.
//!
//! Coordinates are continuous pixel units: `x` runs along columns, `y` along
//! rows, and pixel `(r, c)` has its centre at `(c + 0.5, r + 0.5)`. A pixel
//! belongs to a shape iff its centre lies inside it; points exactly on an
//! edge count as inside on the lower-coordinate side and outside on the
//! higher one, so adjacent shapes never share a pixel.

mod dataset;
mod generators;

pub use dataset::{
    image_path, load_rgb, mask_path, read_dataset, save_mask, save_rgb, scene_seed, to_u8, train_count, write_dataset,
    write_scenes, Dataset, DatasetManifest, SceneRecord, Split, GENERATOR_VERSION,
};
pub use generators::{
    generators, sample_polygon_scene, sample_sprite_scene, sample_two_squares_scene, GeneratorOptions,
    PolygonGenerator, SceneGenerator, SpriteGenerator, TwoSquaresGenerator,
};

use serde::{Deserialize, Serialize};

use crate::mask::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    /// Regular polygon with the given circumradius.
    Polygon { edges: u32, radius: f64 },
    Square { half_side: f64 },
    Ellipse { rx: f64, ry: f64 },
    /// Equilateral triangle with the given circumradius.
    Triangle { radius: f64 },
    /// Heart of half-width roughly `scale`.
    Heart { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// `[x, y]` in pixel units.
    pub center: [f64; 2],
    /// Radians, counter-clockwise in `(x, y)`.
    pub rotation: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub background: [f64; 3],
    pub objects: Vec<ObjectSpec>,
    /// Object indices from the farthest (painted first) to the nearest.
    pub order: Vec<usize>,
}

impl SceneSpec {
    /// Depth rank per object: 0 is the nearest.
    pub fn depth_ranks(&self) -> Vec<usize> {
        let n = self.order.len();
        let mut ranks = vec![0; self.objects.len()];
        for (k, &j) in self.order.iter().enumerate() {
            ranks[j] = n - 1 - k;
        }
        ranks
    }

    /// Depth value in (0, 1) per object: rank `r` of `R` maps to `(r+1)/(R+1)`.
    pub fn depth_values(&self) -> Vec<f64> {
        let r = self.objects.len() as f64;
        self.depth_ranks().into_iter().map(|k| (k as f64 + 1.0) / (r + 1.0)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    /// `[3, N, N]` in [0, 1].
    pub image: Vec<f64>,
    pub amodal: Vec<Mask>,
    pub modal: Vec<Mask>,
    pub depth_ranks: Vec<usize>,
    pub spec: SceneSpec,
}

impl RenderedScene {
    pub fn size(&self) -> usize {
        self.spec.size
    }
}

fn polygon_vertices(center: [f64; 2], radius: f64, edges: u32, rotation: f64) -> Vec<[f64; 2]> {
    (0..edges)
        .map(|k| {
            let a = rotation + std::f64::consts::TAU * k as f64 / edges as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Crossing-number test, half-open in both axes.
fn inside_polygon(verts: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let [x0, y0] = verts[i];
        let [x1, y1] = verts[(i + 1) % n];
        if (y0 <= y) != (y1 <= y) {
            let xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0);
            if x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

impl ObjectSpec {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.rotation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Whether the point `(x, y)` is covered.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.shape {
            Shape::Polygon { edges, radius } => {
                inside_polygon(&polygon_vertices(self.center, radius, edges, self.rotation), x, y)
            }
            Shape::Triangle { radius } => inside_polygon(&polygon_vertices(self.center, radius, 3, self.rotation), x, y),
            Shape::Square { half_side } => {
                let h = half_side;
                let verts = [[-h, -h], [h, -h], [h, h], [-h, h]]
                    .map(|[u, v]| {
                        let (s, c) = self.rotation.sin_cos();
                        [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v]
                    });
                inside_polygon(&verts, x, y)
            }
            Shape::Ellipse { rx, ry } => {
                let (u, v) = self.local(x, y);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Heart { scale } => {
                let (u, v) = self.local(x, y);
                let (u, v) = (u / scale, -v / scale);
                let q = u * u + v * v - 1.0;
                q * q * q - u * u * v * v * v <= 0.0
            }
        }
    }

    pub fn rasterize(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |r, c| self.contains(c as f64 + 0.5, r as f64 + 0.5))
    }
}

/// Painter's-algorithm rendering with exact modal and amodal masks.
pub fn render(spec: &SceneSpec) -> RenderedScene {
    let n = spec.size;
    let plane = n * n;
    let amodal: Vec<Mask> = spec.objects.iter().map(|o| o.rasterize(n)).collect();
    let mut image = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        image.extend(std::iter::repeat(spec.background[c]).take(plane));
    }
    for &j in &spec.order {
        let color = spec.objects[j].color;
        for (p, &on) in amodal[j].bits().iter().enumerate() {
            if on {
                for c in 0..3 {
                    image[c * plane + p] = color[c];
                }
            }
        }
    }
    let mut modal = amodal.clone();
    for (k, &j) in spec.order.iter().enumerate() {
        for &nearer in &spec.order[k + 1..] {
            modal[j] = modal[j].minus(&amodal[nearer]).expect("masks share the scene size");
        }
    }
    RenderedScene {
        image,
        amodal,
        modal,
        depth_ranks: spec.depth_ranks(),
        spec: spec.clone(),
    }
}
