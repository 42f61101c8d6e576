use std::path::Path;

use layerscene::model::{decompose, SceneLatents};
use layerscene::scenegen::read_dataset;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, summarize, write_json, write_rendering, ObjectSummary};
use crate::SplitArg;

use super::{load_checkpoint, split_indices};

#[derive(Serialize)]
struct DecompositionMeta<'a> {
    index: usize,
    latents: &'a SceneLatents,
    objects: Vec<ObjectSummary>,
}

pub fn run(ckpt_dir: &Path, data: &Path, out: &Path, split: SplitArg, limit: Option<usize>) -> CliResult<()> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let ds = read_dataset(data)?;
    if ds.manifest.image_size != ckpt.model.image_size {
        return Err(CliError::usage(format!(
            "dataset images are {0}x{0}, the model expects {1}x{1}",
            ds.manifest.image_size, ckpt.model.image_size
        )));
    }
    let mut indices = split_indices(&ds, split);
    if let Some(l) = limit {
        indices.truncate(l);
    }
    create_dir(out)?;
    for &i in &indices {
        let image = ds.image(i)?;
        let d = decompose(&ckpt.params, &ckpt.model, &image)?;
        let dir = out.join(format!("{i:06}"));
        write_rendering(&dir, "reconstruction", &d.latents, &d.rendering, &ckpt.model)?;
        write_json(
            &dir.join("latents.json"),
            &DecompositionMeta {
                index: i,
                latents: &d.latents,
                objects: summarize(&d.latents, &d.rendering),
            },
        )?;
    }
    println!("{}", out.display());
    Ok(())
}
