use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ObjectSpec, SceneSpec, Shape};
use crate::error::{Error, Result};
use crate::registry::Registry;

pub const POLYGON_IMAGE_SIZE: usize = 64;
pub const TWO_SQUARES_IMAGE_SIZE: usize = 32;
pub const TWO_SQUARES_HALF_SIDE: f64 = 4.0;
pub const TWO_SQUARES_PALETTE: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
/// Largest overlap, as a fraction of one square's area, that the two-squares
/// set accepts.
pub const TWO_SQUARES_MAX_OVERLAP: f64 = 0.25;

/// A family of random scenes, each drawn from its own seed.
pub trait SceneGenerator: Send + Sync {
    fn name(&self) -> &'static str;

    fn image_size(&self) -> usize;

    fn max_objects(&self) -> usize;

    fn sample(&self, seed: u64) -> Result<SceneSpec>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorOptions {
    /// Image side for generators that allow choosing it.
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            size: 64,
            min_objects: 1,
            max_objects: 3,
        }
    }
}

fn random_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Two regular polygons on a black 64x64 canvas: 3 to 6 edges, circumradius
/// in [7.5, 12.5], centre within 5 pixels (per axis) of the image centre.
pub fn sample_polygon_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mid = POLYGON_IMAGE_SIZE as f64 / 2.0;
    let objects = (0..2)
        .map(|_| {
            let edges = rng.random_range(3..=6u32);
            let radius = rng.random_range(7.5..=12.5);
            let center = [mid + rng.random_range(-5.0..=5.0), mid + rng.random_range(-5.0..=5.0)];
            let rotation = rng.random_range(0.0..std::f64::consts::TAU);
            ObjectSpec {
                shape: Shape::Polygon { edges, radius },
                center,
                rotation,
                color: random_color(&mut rng),
            }
        })
        .collect();
    SceneSpec {
        size: POLYGON_IMAGE_SIZE,
        background: [0.0; 3],
        objects,
        order: random_order(&mut rng, 2),
    }
}

/// Squares, ellipses, triangles and hearts with random pose and colour.
pub fn sample_sprite_scene(seed: u64, size: usize, min_objects: usize, max_objects: usize) -> Result<SceneSpec> {
    if min_objects == 0 || min_objects > max_objects {
        return Err(Error::InvalidArgument(format!(
            "sprite object bounds must satisfy 1 <= min <= max, got {min_objects}..{max_objects}"
        )));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!("sprite image side {size} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(min_objects..=max_objects);
    let unit = size as f64 / 64.0;
    let objects = (0..count)
        .map(|_| {
            let scale = rng.random_range(6.0..12.0) * unit;
            let shape = match rng.random_range(0..4u32) {
                0 => Shape::Square { half_side: scale * 0.8 },
                1 => Shape::Ellipse {
                    rx: scale,
                    ry: scale * rng.random_range(0.5..1.0),
                },
                2 => Shape::Triangle { radius: scale * 1.1 },
                _ => Shape::Heart { scale: scale * 0.9 },
            };
            let lo = scale;
            let hi = size as f64 - scale;
            let center = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
            let rotation = rng.random_range(0.0..std::f64::consts::TAU);
            ObjectSpec {
                shape,
                center,
                rotation,
                color: random_color(&mut rng),
            }
        })
        .collect();
    Ok(SceneSpec {
        size,
        background: [0.0; 3],
        objects,
        order: random_order(&mut rng, count),
    })
}

fn square_overlap(a: [f64; 2], b: [f64; 2], h: f64) -> f64 {
    let ox = (2.0 * h - (a[0] - b[0]).abs()).max(0.0);
    let oy = (2.0 * h - (a[1] - b[1]).abs()).max(0.0);
    ox * oy
}

/// Two axis-aligned 8x8 squares of distinct palette colours on a black 32x32
/// canvas, at integer centres, overlapping by at most a quarter of a square.
pub fn sample_two_squares_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = TWO_SQUARES_HALF_SIDE;
    let span = h as i64..=(TWO_SQUARES_IMAGE_SIZE as i64 - h as i64);
    let centre = |rng: &mut ChaCha8Rng| [rng.random_range(span.clone()) as f64, rng.random_range(span.clone()) as f64];
    let a = centre(&mut rng);
    let b = loop {
        let b = centre(&mut rng);
        if square_overlap(a, b, h) <= TWO_SQUARES_MAX_OVERLAP * 4.0 * h * h {
            break b;
        }
    };
    let colors: Vec<usize> = rand::seq::index::sample(&mut rng, TWO_SQUARES_PALETTE.len(), 2).into_vec();
    let objects = [a, b]
        .into_iter()
        .zip(colors)
        .map(|(center, k)| ObjectSpec {
            shape: Shape::Square { half_side: h },
            center,
            rotation: 0.0,
            color: TWO_SQUARES_PALETTE[k],
        })
        .collect();
    SceneSpec {
        size: TWO_SQUARES_IMAGE_SIZE,
        background: [0.0; 3],
        objects,
        order: random_order(&mut rng, 2),
    }
}

pub struct PolygonGenerator;

impl SceneGenerator for PolygonGenerator {
    fn name(&self) -> &'static str {
        "polygons"
    }

    fn image_size(&self) -> usize {
        POLYGON_IMAGE_SIZE
    }

    fn max_objects(&self) -> usize {
        2
    }

    fn sample(&self, seed: u64) -> Result<SceneSpec> {
        Ok(sample_polygon_scene(seed))
    }
}

pub struct SpriteGenerator {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl SceneGenerator for SpriteGenerator {
    fn name(&self) -> &'static str {
        "sprites"
    }

    fn image_size(&self) -> usize {
        self.size
    }

    fn max_objects(&self) -> usize {
        self.max_objects
    }

    fn sample(&self, seed: u64) -> Result<SceneSpec> {
        sample_sprite_scene(seed, self.size, self.min_objects, self.max_objects)
    }
}

pub struct TwoSquaresGenerator;

impl SceneGenerator for TwoSquaresGenerator {
    fn name(&self) -> &'static str {
        "two-squares"
    }

    fn image_size(&self) -> usize {
        TWO_SQUARES_IMAGE_SIZE
    }

    fn max_objects(&self) -> usize {
        2
    }

    fn sample(&self, seed: u64) -> Result<SceneSpec> {
        Ok(sample_two_squares_scene(seed))
    }
}

/// All built-in generators: `polygons`, `sprites`, `two-squares`.
pub fn generators() -> Registry<dyn SceneGenerator, GeneratorOptions> {
    let mut reg: Registry<dyn SceneGenerator, GeneratorOptions> = Registry::new("scene generator");
    reg.register("polygons", |_| Box::new(PolygonGenerator));
    reg.register("sprites", |o| {
        Box::new(SpriteGenerator {
            size: o.size,
            min_objects: o.min_objects,
            max_objects: o.max_objects,
        })
    });
    reg.register("two-squares", |_| Box::new(TwoSquaresGenerator));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::render;

    #[test]
    fn polygon_scenes_are_reproducible() {
        assert_eq!(sample_polygon_scene(7), sample_polygon_scene(7));
        assert_ne!(sample_polygon_scene(7), sample_polygon_scene(8));
    }

    #[test]
    fn sprite_bounds_validated() {
        assert!(sample_sprite_scene(0, 64, 0, 2).is_err());
        assert!(sample_sprite_scene(0, 64, 3, 2).is_err());
        for seed in 0..50 {
            let s = sample_sprite_scene(seed, 64, 2, 4).unwrap();
            assert!((2..=4).contains(&s.objects.len()));
        }
    }

    #[test]
    fn two_squares_stay_inside_and_overlap_mildly() {
        for seed in 0..200 {
            let s = sample_two_squares_scene(seed);
            let r = render(&s);
            assert_eq!(r.amodal[0].count(), 64);
            assert_eq!(r.amodal[1].count(), 64);
            assert!(r.amodal[0].intersection_count(&r.amodal[1]).unwrap() <= 16);
            assert_ne!(s.objects[0].color, s.objects[1].color);
        }
    }

    #[test]
    fn registry_lists_generators() {
        let reg = generators();
        assert_eq!(reg.names(), vec!["polygons", "sprites", "two-squares"]);
        let g = reg.create("two-squares", &GeneratorOptions::default()).unwrap();
        assert_eq!(g.image_size(), 32);
    }
}
