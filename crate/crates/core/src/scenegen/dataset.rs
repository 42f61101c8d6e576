//! On-disk dataset layout:
//!
//! ```text
//! images/000000.png                 8-bit RGB
//! masks/000000_obj00_modal.png      8-bit grey, 255 = member
//! masks/000000_obj00_amodal.png
//! meta.jsonl                        one record per scene
//! manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::generators::{generators, GeneratorOptions};
use super::{render, RenderedScene, SceneSpec};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::stochastic::derive_seed;

pub const GENERATOR_VERSION: u32 = 1;
pub const TRAIN_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub depth_ranks: Vec<usize>,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub generator_version: u32,
    pub options: GeneratorOptions,
    pub seed: u64,
    pub count: usize,
    pub train: usize,
    pub eval: usize,
    pub image_size: usize,
    pub max_objects: usize,
}

pub fn train_count(count: usize) -> usize {
    (count as f64 * TRAIN_FRACTION).floor() as usize
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

pub fn image_path(root: &Path, index: usize) -> PathBuf {
    root.join("images").join(format!("{index:06}.png"))
}

pub fn mask_path(root: &Path, index: usize, object: usize, modal: bool) -> PathBuf {
    let kind = if modal { "modal" } else { "amodal" };
    root.join("masks").join(format!("{index:06}_obj{object:02}_{kind}.png"))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a planar `[3, N, N]` image as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, planar: &[f64], size: usize) -> Result<()> {
    let plane = size * size;
    if planar.len() != 3 * plane {
        return Err(Error::InvalidShape {
            op: "save_rgb",
            detail: format!("{} values for a 3x{size}x{size} image", planar.len()),
        });
    }
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            buf.push(to_u8(planar[c * plane + p]));
        }
    }
    let img = RgbImage::from_raw(size as u32, size as u32, buf).expect("buffer sized above");
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, buf).expect("buffer sized above");
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an RGB PNG as a planar `[3, H, W]` array in [0, 1]; returns the
/// values and the side length.
pub fn load_rgb(path: &Path) -> Result<(Vec<f64>, usize)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let img = img.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::format(path, format!("image is {w}x{h}, expected square")));
    }
    let n = w as usize;
    let plane = n * n;
    let mut out = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    Ok((out, n))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes rendered scenes (with the seeds they were drawn from) in the
/// dataset layout. The first `floor(0.9 * count)` scenes form the training
/// split.
pub fn write_scenes(
    root: &Path,
    generator: &str,
    options: GeneratorOptions,
    seed: u64,
    scenes: &[(u64, RenderedScene)],
) -> Result<DatasetManifest> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("a dataset needs at least one scene".into()));
    }
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    let train = train_count(scenes.len());
    let mut meta = Vec::new();
    for (index, (scene_seed, scene)) in scenes.iter().enumerate() {
        save_rgb(&image_path(root, index), &scene.image, scene.size())?;
        for j in 0..scene.amodal.len() {
            save_mask(&mask_path(root, index, j, true), &scene.modal[j])?;
            save_mask(&mask_path(root, index, j, false), &scene.amodal[j])?;
        }
        let record = SceneRecord {
            index,
            seed: *scene_seed,
            split: if index < train { Split::Train } else { Split::Eval },
            depth_ranks: scene.depth_ranks.clone(),
            spec: scene.spec.clone(),
        };
        serde_json::to_writer(&mut meta, &record).expect("records serialise");
        meta.push(b'\n');
    }
    write_file(&root.join("meta.jsonl"), &meta)?;
    let manifest = DatasetManifest {
        generator: generator.to_string(),
        generator_version: GENERATOR_VERSION,
        options,
        seed,
        count: scenes.len(),
        train,
        eval: scenes.len() - train,
        image_size: scenes[0].1.size(),
        max_objects: scenes.iter().map(|(_, s)| s.amodal.len()).max().unwrap_or(0),
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    text.push(b'\n');
    write_file(&root.join("manifest.json"), &text)?;
    Ok(manifest)
}

/// Samples `count` scenes from the named generator (scene `i` uses a seed
/// derived from `seed` and `i`) and writes them under `root`.
pub fn write_dataset(
    root: &Path,
    generator: &str,
    options: GeneratorOptions,
    seed: u64,
    count: usize,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::InvalidArgument("--count must be at least 1".into()));
    }
    let gen = generators().create(generator, &options)?;
    let scenes = (0..count)
        .map(|i| {
            let s = scene_seed(seed, i);
            gen.sample(s).map(|spec| (s, render(&spec)))
        })
        .collect::<Result<Vec<_>>>()?;
    write_scenes(root, gen.name(), options, seed, &scenes)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.index).collect()
    }

    /// The stored (8-bit quantised) image as `[3, N, N]` in [0, 1].
    pub fn image(&self, index: usize) -> Result<Vec<f64>> {
        let path = image_path(&self.root, index);
        let (img, n) = load_rgb(&path)?;
        if n != self.manifest.image_size {
            return Err(Error::format(path, format!("side {n}, manifest says {}", self.manifest.image_size)));
        }
        Ok(img)
    }

    /// Exact float ground truth, re-rendered from the recorded spec.
    pub fn render(&self, index: usize) -> RenderedScene {
        render(&self.records[index].spec)
    }
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let meta_path = root.join("meta.jsonl");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut records = Vec::with_capacity(manifest.count);
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SceneRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&meta_path, format!("line {}: {e}", line_no + 1)))?;
        if rec.index != records.len() {
            return Err(Error::format(&meta_path, format!("line {}: out-of-order index {}", line_no + 1, rec.index)));
        }
        records.push(rec);
    }
    if records.len() != manifest.count {
        return Err(Error::format(
            &meta_path,
            format!("{} records, manifest says {}", records.len(), manifest.count),
        ));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        records,
    })
}
