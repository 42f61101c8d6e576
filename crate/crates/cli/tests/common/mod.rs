#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn layerscene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerscene"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> Output {
    let out = layerscene(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(args: &[&str]) -> i32 {
    layerscene(args).status.code().expect("exit code")
}

/// Every file under `root` as `(relative path, bytes)`, sorted.
pub fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn gen_data(dir: &Path, kind: &str, count: usize, seed: u64) -> PathBuf {
    ok(&[
        "gen-data",
        "--kind",
        kind,
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path(dir),
    ]);
    dir.to_path_buf()
}

pub fn write_config(path: &Path, json: &str) -> PathBuf {
    fs::write(path, json).unwrap();
    path.to_path_buf()
}

pub fn train(data: &Path, config: &Path, out: &Path, stage: &str) -> Output {
    layerscene(&["train", "--data", path(data), "--config", path(config), "--out", path(out), "--stage", stage])
}

/// A 32x32 two-squares dataset and a checkpoint trained for a few steps.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub run: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_data(&dir.path().join("data"), "two-squares", 40, 2);
        let cfg = write_config(
            &dir.path().join("cfg.json"),
            r#"{"train":{"stage1_steps":4,"stage2_steps":2,"batch_size":4,"validation_size":4}}"#,
        );
        let run = dir.path().join("run");
        let out = train(&data, &cfg, &run, "both");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { dir, data, run }
    }

    pub fn ckpt(&self) -> PathBuf {
        self.run.join("checkpoint")
    }

    pub fn tmp(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}
