use std::path::Path;

use layerscene::metrics::{aggregate, evaluate_scene, Prediction};
use layerscene::model::decompose;
use layerscene::scenegen::read_dataset;

use crate::error::{CliError, CliResult};
use crate::SplitArg;

use super::{load_checkpoint, split_indices};

pub fn run(
    ckpt_dir: Option<&Path>,
    data: &Path,
    report: &Path,
    split: SplitArg,
    dpa_threshold: usize,
    oracle: bool,
) -> CliResult<()> {
    let ds = read_dataset(data)?;
    let n = ds.manifest.image_size;
    let ckpt = match (ckpt_dir, oracle) {
        (Some(_), true) => return Err(CliError::usage("--oracle and --ckpt are mutually exclusive")),
        (None, false) => return Err(CliError::usage("--ckpt is required unless --oracle is given")),
        (Some(dir), false) => Some(load_checkpoint(dir)?),
        (None, true) => None,
    };
    if let Some(c) = &ckpt {
        if c.model.image_size != n {
            return Err(CliError::usage(format!(
                "dataset images are {n}x{n}, the model expects {0}x{0}",
                c.model.image_size
            )));
        }
    }
    let indices = split_indices(&ds, split);
    if indices.is_empty() {
        return Err(CliError::usage("the selected split is empty"));
    }
    let mut reports = Vec::with_capacity(indices.len());
    for &i in &indices {
        let gt = ds.render(i);
        let pred = match &ckpt {
            Some(c) => {
                let image = ds.image(i)?;
                decompose(&c.params, &c.model, &image)?.rendering.prediction(n)
            }
            None => Prediction::oracle(&gt),
        };
        reports.push((i, evaluate_scene(&gt, &pred)?));
    }
    let agg = aggregate(&reports, dpa_threshold);
    agg.write(report)?;
    let dpa = agg.dpa.map_or_else(|| "n/a".to_string(), |d| format!("{d:.4}"));
    eprintln!(
        "{} scenes, {} objects: mIOU {:.4}, aIOU {:.4}, DPA@{} {dpa} ({} pairs), MSE {:.6}",
        agg.scenes, agg.objects, agg.miou, agg.aiou, agg.dpa_threshold, agg.dpa_pairs, agg.mse
    );
    println!("{}", report.display());
    Ok(())
}
