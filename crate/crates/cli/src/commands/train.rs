use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use layerscene::model::{
    train_stage, Checkpoint, ModelConfig, StepLog, TrainConfig, TrainData, TrainObserver, MANIFEST_FILE,
};
use layerscene::scenegen::read_dataset;
use layerscene::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::output::{read_json, write_json};
use crate::StageArg;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.json";
pub const VALIDATION_FILE: &str = "validation.csv";

pub fn loss_file(stage: u8) -> String {
    format!("loss_stage{stage}.csv")
}

/// Contents of `--config`. A missing `model` section means the default
/// architecture sized for the dataset's images.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: TrainConfig,
}

/// The fully resolved configuration echoed next to the run's outputs.
#[derive(Debug, Serialize)]
struct ResolvedConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    stage: &'static str,
}

/// Settings that may change when a run is resumed.
fn resumable(mut t: TrainConfig, like: &TrainConfig) -> TrainConfig {
    t.stage1_steps = like.stage1_steps;
    t.stage2_steps = like.stage2_steps;
    t.checkpoint_every = like.checkpoint_every;
    t.validate_every = like.validate_every;
    t
}

/// Writes the checkpoint next to its final location, then swaps it in.
fn save_checkpoint(ckpt: &Checkpoint, out: &Path) -> layerscene::Result<()> {
    let dir = out.join(CHECKPOINT_DIR);
    let tmp = out.join(format!("{CHECKPOINT_DIR}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    ckpt.save(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))
}

/// Keeps the header and the rows accepted by `keep` (given the row's
/// columns), then reopens the file for appending.
fn reopen_csv(path: &Path, header: &str, keep: impl Fn(&[&str]) -> bool) -> CliResult<BufWriter<File>> {
    let mut text = format!("{header}\n");
    if let Ok(old) = fs::read_to_string(path) {
        for line in old.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if keep(&cols) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, &text).map_err(|e| CliError::io(path, e))?;
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    Ok(BufWriter::new(f))
}

struct RunLog {
    out: PathBuf,
    loss: BufWriter<File>,
    loss_path: PathBuf,
    validation: BufWriter<File>,
    validation_path: PathBuf,
}

impl RunLog {
    fn flush(&mut self) -> layerscene::Result<()> {
        self.loss.flush().map_err(|e| Error::io(&self.loss_path, e))?;
        self.validation.flush().map_err(|e| Error::io(&self.validation_path, e))
    }
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, log: &StepLog) -> layerscene::Result<()> {
        let mut row = log.step.to_string();
        for v in &log.parts {
            row.push(',');
            row.push_str(&v.to_string());
        }
        writeln!(self.loss, "{row}").map_err(|e| Error::io(&self.loss_path, e))
    }

    fn on_validation(&mut self, stage: u8, step: u64, loss: f64) -> layerscene::Result<()> {
        eprintln!("stage {stage} step {step}: validation loss {loss}");
        writeln!(self.validation, "{stage},{step},{loss}").map_err(|e| Error::io(&self.validation_path, e))
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> layerscene::Result<()> {
        self.flush()?;
        save_checkpoint(ckpt, &self.out)
    }
}

fn open_log(out: &Path, stage: u8, ckpt: &Checkpoint) -> CliResult<RunLog> {
    let done = |s: u8| {
        if s == 1 {
            ckpt.progress.stage1_steps
        } else {
            ckpt.progress.stage2_steps
        }
    };
    let parse = |c: Option<&&str>| c.and_then(|v| v.parse::<u64>().ok());
    let loss_path = out.join(loss_file(stage));
    let mut header = String::from("step");
    for f in StepLog::columns(stage) {
        header.push(',');
        header.push_str(f);
    }
    let d = done(stage);
    let loss = reopen_csv(&loss_path, &header, |cols| parse(cols.first()).is_some_and(|s| s < d))?;
    let validation_path = out.join(VALIDATION_FILE);
    let validation = reopen_csv(&validation_path, "stage,step,loss", |cols| {
        match (parse(cols.first()), parse(cols.get(1))) {
            (Some(s), Some(step)) if s == 1 || s == 2 => {
                let d = done(s as u8);
                d > 0 && step <= d
            }
            _ => false,
        }
    })?;
    Ok(RunLog {
        out: out.to_path_buf(),
        loss,
        loss_path,
        validation,
        validation_path,
    })
}

pub fn run(data: &Path, config: Option<&Path>, out: &Path, stage: StageArg) -> CliResult<()> {
    let file: ConfigFile = match config {
        Some(p) => read_json(p)?,
        None => ConfigFile::default(),
    };
    let ds = read_dataset(data)?;
    let n = ds.manifest.image_size;
    let model = file.model.unwrap_or_else(|| ModelConfig::for_image_size(n));
    model.validate()?;
    file.train.validate()?;
    if model.image_size != n {
        return Err(CliError::usage(format!(
            "model image_size {} does not match the dataset's {n}",
            model.image_size
        )));
    }
    crate::output::create_dir(out)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let mut ckpt = if ckpt_dir.join(MANIFEST_FILE).exists() {
        let c = Checkpoint::load(&ckpt_dir)?;
        if c.model != model || resumable(c.train.clone(), &file.train) != file.train {
            return Err(CliError::usage(format!(
                "{} was trained with a different configuration",
                ckpt_dir.display()
            )));
        }
        eprintln!(
            "resuming from {} (stage 1: {} steps, stage 2: {} steps)",
            ckpt_dir.display(),
            c.progress.stage1_steps,
            c.progress.stage2_steps
        );
        Checkpoint { train: file.train.clone(), ..c }
    } else {
        Checkpoint::new(model.clone(), file.train.clone())?
    };
    let stage_name = match stage {
        StageArg::One => "1",
        StageArg::Two => "2",
        StageArg::Both => "both",
    };
    write_json(
        &out.join(CONFIG_FILE),
        &ResolvedConfig {
            model: &ckpt.model,
            train: &ckpt.train,
            stage: stage_name,
        },
    )?;
    let train_data = TrainData::from_dataset(&ds, ckpt.train.validation_size)?;
    let stages: &[u8] = match stage {
        StageArg::One => &[1],
        StageArg::Two => &[2],
        StageArg::Both => &[1, 2],
    };
    for &s in stages {
        let mut log = open_log(out, s, &ckpt)?;
        let result = train_stage(&mut ckpt, &train_data, s, &mut log);
        log.flush()?;
        result?;
    }
    println!("{}", ckpt_dir.display());
    Ok(())
}
