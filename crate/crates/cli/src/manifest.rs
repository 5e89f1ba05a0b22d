//! Run manifests (JSON, one per command) and merge manifests (text).

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use nsm_core::config::RunConfig;
use nsm_core::Error;

#[derive(Debug, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub config_path: Option<PathBuf>,
    /// The configuration after defaults and overrides, as TOML.
    pub resolved_config: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub timings: Vec<Timing>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, threads: Option<usize>) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_path: None,
            resolved_config: None,
            seed,
            threads,
            timings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, path: &Path, cfg: &RunConfig) {
        self.config_path = Some(path.to_path_buf());
        self.resolved_config = Some(cfg.to_toml());
        self.seed = Some(cfg.seed);
    }

    pub fn time(&mut self, stage: &str, start: Instant) {
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    pub fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(paths);
    }

    /// Writes `<command>_manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}_manifest.json", self.command));
        let text = serde_json::to_string_pretty(self).context("serializing the run manifest")?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestSubmap {
    pub path: PathBuf,
    pub scans: (usize, usize),
}

/// Lines `output PATH`, `s_cube X` and `submap PATH scans A B`, in order of
/// the trajectory; `#` starts a comment. Relative paths are taken relative to
/// the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeManifest {
    pub output: PathBuf,
    pub s_cube: f64,
    pub submaps: Vec<ManifestSubmap>,
}

impl MergeManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading merge manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| anyhow::Error::new(e).context(format!("in {}", path.display())))
    }

    pub fn parse(text: &str, base: &Path) -> nsm_core::Result<Self> {
        let rooted = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        let mut output = None;
        let mut s_cube = 0.1;
        let mut submaps = Vec::new();
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["output", p] => output = Some(rooted(p)),
                ["s_cube", v] => match v.parse::<f64>() {
                    Ok(x) if x > 0.0 && x.is_finite() => s_cube = x,
                    _ => errs.push(format!("line {}: s_cube must be a positive number, got {v:?}", i + 1)),
                },
                ["submap", p, "scans", a, b] => match (a.parse::<usize>(), b.parse::<usize>()) {
                    (Ok(a), Ok(b)) if a < b => submaps.push(ManifestSubmap {
                        path: rooted(p),
                        scans: (a, b),
                    }),
                    _ => errs.push(format!("line {}: scan range must be two integers a < b", i + 1)),
                },
                _ => errs.push(format!("line {}: expected `output PATH`, `s_cube X` or `submap PATH scans A B`", i + 1)),
            }
        }
        let Some(output) = output else {
            errs.push("missing `output PATH` line".into());
            return Err(Error::Config(errs));
        };
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(MergeManifest { output, s_cube, submaps })
    }
}
