use std::path::Path;

use layerscene::model::{interpolate, InterpolationMode};
use layerscene::scenegen::load_rgb;

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, save_png, segmentation};

use super::load_checkpoint;

fn load_image(path: &Path, n: usize) -> CliResult<Vec<f64>> {
    let (img, side) = load_rgb(path)?;
    if side != n {
        return Err(CliError::usage(format!(
            "{} is {side}x{side}, the model expects {n}x{n}",
            path.display()
        )));
    }
    Ok(img)
}

pub fn run(
    ckpt_dir: &Path,
    image_a: &Path,
    image_b: &Path,
    mode: InterpolationMode,
    steps: usize,
    out: &Path,
) -> CliResult<()> {
    if steps < 2 {
        return Err(CliError::usage(format!("--steps must be at least 2, got {steps}")));
    }
    let ckpt = load_checkpoint(ckpt_dir)?;
    let n = ckpt.model.image_size;
    let (a, b) = (load_image(image_a, n)?, load_image(image_b, n)?);
    let frames = interpolate(&ckpt.params, &ckpt.model, &a, &b, steps, mode)?;
    create_dir(out)?;
    for (k, r) in frames.iter().enumerate() {
        save_png(&out.join(format!("frame_{k:03}.png")), &r.image, n)?;
        save_png(&out.join(format!("background_{k:03}.png")), &r.background, n)?;
        save_png(&out.join(format!("segmentation_{k:03}.png")), &segmentation(&r.labels, n), n)?;
    }
    println!("{}", out.display());
    Ok(())
}
