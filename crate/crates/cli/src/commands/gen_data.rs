use std::path::Path;

use layerscene::scenegen::{generators, write_dataset, GeneratorOptions};

use crate::error::{CliError, CliResult};

pub fn run(
    kind: &str,
    count: usize,
    seed: u64,
    out: &Path,
    size: usize,
    min_objects: usize,
    max_objects: usize,
) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let options = GeneratorOptions {
        size,
        min_objects,
        max_objects,
    };
    // fail on a bad kind or bounds before touching the output directory
    generators().create(kind, &options)?.sample(seed)?;
    write_dataset(out, kind, options, seed, count)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}
