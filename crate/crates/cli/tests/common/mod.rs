#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs a command in-process.
pub fn cqvqa(args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cqvqa")
        .chain(args.iter().copied())
        .map(Into::into);
    let code = cqvqa_cli::run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// Runs the built binary, for real process exit codes.
pub fn cqvqa_bin(args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_cqvqa"))
        .args(args)
        .output()
        .unwrap();
    Output {
        code: o.status.code().unwrap(),
        stdout: String::from_utf8(o.stdout).unwrap(),
        stderr: String::from_utf8(o.stderr).unwrap(),
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the 4 × 3 × `samples` synthetic set with seed 7 into `dir`.
pub fn gen(dir: &Path, samples: usize) -> Output {
    let o = cqvqa(&[
        "gen-data",
        "--out",
        s(dir),
        "--categories",
        "4",
        "--answers-per",
        "3",
        "--samples-per",
        &samples.to_string(),
        "--seed",
        "7",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    o
}
