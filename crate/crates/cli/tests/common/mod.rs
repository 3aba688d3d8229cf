#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn csg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csg")).args(args).current_dir(dir).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn json(o: &Output) -> serde_json::Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}
