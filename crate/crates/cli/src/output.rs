use std::fs;
use std::path::Path;

use layerscene::model::{ModelConfig, Rendering, SceneLatents};
use layerscene::scenegen::save_rgb;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Label colours for segmentations and position maps; background is black.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.20],
    [0.15, 0.35, 0.95],
    [0.95, 0.80, 0.10],
    [0.70, 0.20, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.10],
    [0.60, 0.60, 0.60],
];

const CHECKER_CELL: usize = 4;
const CHECKER_LIGHT: f64 = 0.85;
const CHECKER_DARK: f64 = 0.6;

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn save_png(path: &Path, planar: &[f64], size: usize) -> CliResult<()> {
    Ok(save_rgb(path, planar, size)?)
}

/// Alpha-blends a planar `[3, S, S]` image over a grey checkerboard.
pub fn over_checkerboard(pixels: &[f64], alpha: &[f64], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let (r, c) = (p / size, p % size);
        let back = if (r / CHECKER_CELL + c / CHECKER_CELL).is_multiple_of(2) {
            CHECKER_LIGHT
        } else {
            CHECKER_DARK
        };
        for ch in 0..3 {
            out[ch * plane + p] = alpha[p] * pixels[ch * plane + p] + (1.0 - alpha[p]) * back;
        }
    }
    out
}

/// Colours each pixel by its object label.
pub fn segmentation(labels: &[Option<usize>], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for (p, l) in labels.iter().enumerate() {
        if let Some(j) = l {
            for ch in 0..3 {
                out[ch * plane + p] = PALETTE[j % PALETTE.len()][ch];
            }
        }
    }
    out
}

/// Marks each object's position with a 3x3 dot in its label colour.
pub fn position_map(positions: &[[usize; 2]], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for (j, [r, c]) in positions.iter().enumerate() {
        for y in r.saturating_sub(1)..(r + 2).min(size) {
            for x in c.saturating_sub(1)..(c + 2).min(size) {
                for ch in 0..3 {
                    out[ch * plane + y * size + x] = PALETTE[j % PALETTE.len()][ch];
                }
            }
        }
    }
    out
}

/// Per-slot summary written to `latents.json`.
#[derive(Debug, Serialize)]
pub struct ObjectSummary {
    pub slot: usize,
    pub position: [usize; 2],
    pub depth: f64,
    pub alpha_max: f64,
    /// Canvases whose alpha never reaches 0.5 are left out of figures.
    pub omitted: bool,
}

pub const OMIT_ALPHA: f64 = 0.5;

pub fn summarize(latents: &SceneLatents, rendering: &Rendering) -> Vec<ObjectSummary> {
    latents
        .objects
        .iter()
        .enumerate()
        .map(|(slot, o)| {
            let alpha_max = rendering.canvas_alpha.get(slot).map_or(0.0, |a| a.iter().copied().fold(0.0, f64::max));
            ObjectSummary {
                slot,
                position: o.position,
                depth: o.depth(),
                alpha_max,
                omitted: alpha_max < OMIT_ALPHA,
            }
        })
        .collect()
}

/// Writes the image set for one rendering: `<image_name>.png`,
/// `background.png`, `segmentation.png`, `positions.png` and, per slot,
/// `object_XX_canvas.png` (over a checkerboard) and `object_XX_placed.png`.
pub fn write_rendering(
    dir: &Path,
    image_name: &str,
    latents: &SceneLatents,
    rendering: &Rendering,
    cfg: &ModelConfig,
) -> CliResult<()> {
    let (n, m) = (cfg.image_size, cfg.canvas_size);
    create_dir(dir)?;
    save_png(&dir.join(format!("{image_name}.png")), &rendering.image, n)?;
    save_png(&dir.join("background.png"), &rendering.background, n)?;
    save_png(&dir.join("segmentation.png"), &segmentation(&rendering.labels, n), n)?;
    let positions: Vec<[usize; 2]> = latents.objects.iter().map(|o| o.position).collect();
    save_png(&dir.join("positions.png"), &position_map(&positions, n), n)?;
    for (j, (pixels, alpha)) in rendering.canvas_pixels.iter().zip(&rendering.canvas_alpha).enumerate() {
        save_png(
            &dir.join(format!("object_{j:02}_canvas.png")),
            &over_checkerboard(pixels, alpha, m),
            m,
        )?;
    }
    for (j, (pixels, alpha)) in rendering.placed_pixels.iter().zip(&rendering.placed_alpha).enumerate() {
        save_png(
            &dir.join(format!("object_{j:02}_placed.png")),
            &over_checkerboard(pixels, alpha, n),
            n,
        )?;
    }
    Ok(())
}
