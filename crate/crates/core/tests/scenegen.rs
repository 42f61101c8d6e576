use std::fs;
use std::path::Path;

use layerscene::mask::Mask;
use layerscene::scenegen::{
    generators, read_dataset, render, sample_polygon_scene, sample_sprite_scene, write_dataset, GeneratorOptions,
    ObjectSpec, SceneSpec, Shape, Split,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn union(masks: &[Mask]) -> Vec<bool> {
    let mut out = vec![false; masks[0].bits().len()];
    for m in masks {
        for (o, b) in out.iter_mut().zip(m.bits()) {
            *o |= *b;
        }
    }
    out
}

fn check_render_invariants(spec: &SceneSpec) {
    let scene = render(spec);
    let plane = spec.size * spec.size;
    let k = spec.objects.len();
    for j in 0..k {
        assert!(scene.modal[j].minus(&scene.amodal[j]).unwrap().is_empty(), "modal outside amodal");
        for i in j + 1..k {
            assert_eq!(scene.modal[i].intersection_count(&scene.modal[j]).unwrap(), 0);
        }
    }
    assert_eq!(union(&scene.modal), union(&scene.amodal));
    for p in 0..plane {
        let owner = (0..k).find(|&j| scene.modal[j].bits()[p]);
        let want = owner.map_or(spec.background, |j| spec.objects[j].color);
        for c in 0..3 {
            assert_eq!(scene.image[c * plane + p], want[c]);
        }
    }
    // nearest object covering a pixel owns it
    for p in 0..plane {
        let nearest = (0..k)
            .filter(|&j| scene.amodal[j].bits()[p])
            .min_by_key(|&j| scene.depth_ranks[j]);
        assert_eq!(nearest, (0..k).find(|&j| scene.modal[j].bits()[p]));
    }
}

#[test]
fn polygon_scenes_satisfy_the_recipe() {
    let mut edges = [0usize; 4];
    let n = 10_000;
    for seed in 0..n as u64 {
        let spec = sample_polygon_scene(seed);
        assert_eq!(spec.size, 64);
        assert_eq!(spec.objects.len(), 2);
        assert_eq!(spec.background, [0.0; 3]);
        for o in &spec.objects {
            let Shape::Polygon { edges: e, radius } = o.shape else {
                panic!("not a polygon");
            };
            assert!((3..=6).contains(&e));
            edges[e as usize - 3] += 1;
            assert!((7.5..=12.5).contains(&radius));
            assert!(o.center.iter().all(|c| (c - 32.0).abs() <= 5.0));
            assert!(o.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        if seed % 50 == 0 {
            check_render_invariants(&spec);
        }
    }
    let e = (2 * n) as f64 / 4.0;
    let stat: f64 = edges.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
    assert!(p > 0.01, "edge histogram {edges:?}, p {p}");
}

#[test]
fn sprite_colors_are_uniform() {
    let mut reds = Vec::new();
    for seed in 0..10_000u64 {
        let spec = sample_sprite_scene(seed, 64, 1, 4).unwrap();
        assert!((1..=4).contains(&spec.objects.len()));
        reds.push(spec.objects[0].color[0]);
        if seed % 100 == 0 {
            check_render_invariants(&spec);
        }
    }
    reds.sort_by(f64::total_cmp);
    let n = reds.len() as f64;
    let d = reds
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    // asymptotic Kolmogorov-Smirnov critical value at the 1% level
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
}

fn scanline_area(spec: &ObjectSpec, size: usize, half: f64) -> usize {
    let mut count = 0;
    for r in 0..size {
        let y = r as f64 + 0.5;
        if y < spec.center[1] - half || y >= spec.center[1] + half {
            continue;
        }
        for c in 0..size {
            let x = c as f64 + 0.5;
            if x >= spec.center[0] - half && x < spec.center[0] + half {
                count += 1;
            }
        }
    }
    count
}

#[test]
fn axis_aligned_squares_match_a_scanline_count() {
    for (center, half) in [([32.0, 32.0], 10.0), ([31.7, 30.2], 10.0), ([20.0, 40.5], 4.0)] {
        let o = ObjectSpec {
            shape: Shape::Square { half_side: half },
            center,
            rotation: 0.0,
            color: [1.0; 3],
        };
        assert_eq!(o.rasterize(64).count(), scanline_area(&o, 64, half));
    }
    // a four-edged polygon turned by 45 degrees is the same square
    let o = ObjectSpec {
        shape: Shape::Polygon {
            edges: 4,
            radius: 10.0 * 2f64.sqrt(),
        },
        center: [32.0, 32.0],
        rotation: std::f64::consts::FRAC_PI_4,
        color: [1.0; 3],
    };
    assert_eq!(o.rasterize(64).count(), 400);
}

#[test]
fn render_is_pure() {
    let spec = sample_sprite_scene(9, 48, 2, 5).unwrap();
    assert_eq!(render(&spec), render(&spec));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn datasets_split_nine_to_one_and_regenerate_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let manifest = write_dataset(&a, "two-squares", GeneratorOptions::default(), 11, 1000).unwrap();
    assert_eq!((manifest.train, manifest.eval), (900, 100));
    let ds = read_dataset(&a).unwrap();
    assert_eq!(ds.indices(Split::Train).len(), 900);
    assert_eq!(ds.indices(Split::Eval).len(), 100);

    let again = read_dataset(&a).unwrap();
    write_dataset(&b, &again.manifest.generator, again.manifest.options, again.manifest.seed, again.manifest.count)
        .unwrap();
    assert_eq!(read_tree(&a), read_tree(&b));

    // records round-trip the in-memory scenes exactly
    let gen = generators().create("two-squares", &GeneratorOptions::default()).unwrap();
    for rec in ds.records.iter().take(50) {
        let spec = gen.sample(rec.seed).unwrap();
        assert_eq!(rec.spec, spec);
        let scene = render(&spec);
        assert_eq!(ds.render(rec.index), scene);
        let img = ds.image(rec.index).unwrap();
        for (x, y) in img.iter().zip(&scene.image) {
            assert_eq!(*x, (y * 255.0).round() / 255.0);
        }
    }
}

#[test]
fn unknown_generator_and_empty_dataset_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(write_dataset(tmp.path(), "clevr", GeneratorOptions::default(), 0, 5).is_err());
    assert!(write_dataset(tmp.path(), "polygons", GeneratorOptions::default(), 0, 0).is_err());
    assert!(read_dataset(&tmp.path().join("missing")).is_err());
}
