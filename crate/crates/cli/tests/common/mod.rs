#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SCENE: &str = "\
plane z=0 half_extent=14 class=9
box center=4,2.5,0.75 size=1.5,1.5,1.5 class=13
sphere center=2,-2.5,1 radius=1 class=15
sensor height=1.8 max_range=9
trajectory start=0,0 end=6,0
";

pub fn nsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsm"))
        .args(args)
        .env_remove("NSM_DATA_ROOT")
        .output()
        .expect("spawning nsm")
}

pub fn ok(args: &[&str]) -> String {
    let out = nsm(args);
    assert!(
        out.status.success(),
        "nsm {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes `scene.txt` and `run.toml` into `dir`; `top` holds top-level keys,
/// `train` extra `[train]` keys and `tail` continues the `[synth]` table.
pub fn small_run(dir: &Path, top: &str, train: &str, tail: &str) -> PathBuf {
    std::fs::write(dir.join("scene.txt"), SCENE).unwrap();
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "{top}seed = 5\n[train]\nsteps = 60\nrays_per_step = 256\n{train}[synth]\nscene = \"scene.txt\"\nscans = 3\nrays_per_scan = 1000\n{tail}"
        ),
    )
    .unwrap();
    cfg
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
