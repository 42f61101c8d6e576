pub mod decompose;
pub mod evaluate;
pub mod gen_data;
pub mod interpolate;
pub mod sample;
pub mod train;

use std::path::Path;

use layerscene::model::Checkpoint;
use layerscene::scenegen::{Dataset, Split};

use crate::error::CliResult;
use crate::SplitArg;

pub fn load_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(dir)?)
}

pub fn split_indices(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => ds.indices(Split::Train),
        SplitArg::Eval => ds.indices(Split::Eval),
        SplitArg::All => (0..ds.records.len()).collect(),
    }
}
