use std::path::Path;

use layerscene::model::{generate, Overrides, SceneLatents};
use layerscene::stochastic::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, read_json, summarize, write_json, write_rendering, ObjectSummary};

use super::load_checkpoint;

/// `--fix-positions` accepts a bare list of `[row, col]` pairs or a full
/// overrides object.
#[derive(Deserialize)]
#[serde(untagged)]
enum FixFile {
    Positions(Vec<[usize; 2]>),
    Overrides(Overrides),
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    seed: u64,
    hyperprior: bool,
    latents: &'a SceneLatents,
    objects: Vec<ObjectSummary>,
}

pub fn run(
    ckpt_dir: &Path,
    count: usize,
    seed: u64,
    out: &Path,
    no_hyperprior: bool,
    fix_positions: Option<&Path>,
) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let overrides = match fix_positions {
        Some(p) => match read_json::<FixFile>(p)? {
            FixFile::Positions(positions) => Overrides {
                positions: Some(positions),
                ..Overrides::default()
            },
            FixFile::Overrides(o) => o,
        },
        None => Overrides::default(),
    };
    let ckpt = load_checkpoint(ckpt_dir)?;
    let hyperprior = !no_hyperprior;
    create_dir(out)?;
    for i in 0..count {
        let s = derive_seed(seed, &[i as u64]);
        let (latents, rendering) = generate(&ckpt.params, &ckpt.model, s, hyperprior, &overrides)?;
        let dir = out.join(format!("sample_{i:06}"));
        write_rendering(&dir, "image", &latents, &rendering, &ckpt.model)?;
        write_json(
            &dir.join("latents.json"),
            &SampleMeta {
                seed: s,
                hyperprior,
                latents: &latents,
                objects: summarize(&latents, &rendering),
            },
        )?;
    }
    println!("{}", out.display());
    Ok(())
}
