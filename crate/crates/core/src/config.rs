//! TOML run configuration.
//!
//! The file layer mirrors the document with every field optional and unknown
//! keys rejected; [`ConfigFile::resolve`] applies defaults, the mode rules for
//! the loss weights and all range checks, reporting every problem at once.
//! [`RunConfig::to_file`] writes the fully resolved form back out, which
//! resolves to the same configuration again.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DatasetConfig;
use crate::loss::LossWeights;
use crate::mlp::AdamConfig;
use crate::model::{DecoderConfig, Mode};
use crate::octree::{FeatureMerge, GridConfig};
use crate::palette::Palette;
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;
use crate::util::mix64;

/// Incremental-mode default of the Eikonal weight.
pub const INCREMENTAL_LAMBDA2: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub grid: Option<GridSection>,
    pub decoder: Option<DecoderSection>,
    pub sampler: Option<SamplerSection>,
    pub loss: Option<LossSection>,
    pub train: Option<TrainSection>,
    pub synth: Option<SynthSection>,
    pub dataset: Option<DatasetConfig>,
    pub mesh: Option<MeshSection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub leaf_size: Option<f64>,
    pub levels: Option<usize>,
    pub geo_dim: Option<usize>,
    pub sem_dim: Option<usize>,
    pub init_std: Option<f64>,
    pub merge: Option<FeatureMerge>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub hidden: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub classes: Option<usize>,
    pub things: Option<Vec<u16>>,
    pub max_instances: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub samples_per_ray: Option<usize>,
    pub band_width: Option<f64>,
    pub min_range: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
    pub lambda4: Option<f64>,
    pub lambda5: Option<f64>,
    pub alpha: Option<f64>,
    pub beta_max: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub rays_per_step: Option<usize>,
    pub feature_lr: Option<f64>,
    pub decoder_lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub dynamic_classes: Option<Vec<u16>>,
    /// Train in the frame of the first scan (a submap).
    pub submap: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub scene: Option<PathBuf>,
    pub scans: Option<usize>,
    pub rays_per_scan: Option<usize>,
    /// Scans `[start, end)` of the trajectory; all when absent.
    pub range: Option<(usize, usize)>,
    pub palette: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub s_cube: Option<f64>,
    pub iso: Option<f64>,
    pub filter_dynamic: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSource {
    pub scene: PathBuf,
    pub scans: usize,
    pub rays_per_scan: usize,
    pub range: (usize, usize),
    pub palette: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Synth(SynthSource),
    Dataset(DatasetConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshConfig {
    pub s_cube: f64,
    pub iso: f64,
    pub filter_dynamic: bool,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            s_cube: 0.1,
            iso: 0.0,
            filter_dynamic: true,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub grid: GridConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub source: Option<Source>,
    pub mesh: MeshConfig,
    pub submap: bool,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config sections serialize")
    }

    /// Apply defaults and overrides, resolve relative paths against `root`
    /// and validate everything.
    pub fn resolve(&self, root: &Path, ov: &Overrides) -> Result<RunConfig> {
        let mut errs: Vec<String> = Vec::new();
        let mode = ov.mode.or(self.mode).unwrap_or(Mode::BatchSemantic);
        let seed = ov.seed.or(self.seed).unwrap_or(0);

        let g = self.grid.clone().unwrap_or_default();
        let gd = GridConfig::default();
        let grid = GridConfig {
            leaf_size: g.leaf_size.unwrap_or(gd.leaf_size),
            levels: g.levels.unwrap_or(gd.levels),
            geo_dim: g.geo_dim.unwrap_or(gd.geo_dim),
            sem_dim: g.sem_dim.unwrap_or(gd.sem_dim),
            seed: mix64(seed ^ 0x4752_4944),
            init_std: g.init_std.unwrap_or(gd.init_std),
            merge: g.merge.unwrap_or(gd.merge),
        };
        collect(&mut errs, grid.validate());
        if mode.is_panoptic() && grid.merge != FeatureMerge::Concat {
            errs.push("panoptic modes need grid.merge = \"concat\"".into());
        }

        let mut source = None;
        let mut palette: Option<Palette> = None;
        match (&self.synth, &self.dataset) {
            (Some(_), Some(_)) => errs.push("give either [synth] or [dataset], not both".into()),
            (Some(s), None) => {
                let scans = s.scans.unwrap_or(10);
                let range = s.range.unwrap_or((0, scans));
                if scans == 0 {
                    errs.push("synth.scans must be positive".into());
                }
                if s.rays_per_scan == Some(0) {
                    errs.push("synth.rays_per_scan must be positive".into());
                }
                if range.0 >= range.1 || range.1 > scans {
                    errs.push(format!("synth.range {range:?} must be a non-empty part of [0, {scans})"));
                }
                match &s.scene {
                    None => errs.push("synth.scene is required".into()),
                    Some(scene) => {
                        let pal = s.palette.as_ref().map(|p| rooted(root, p));
                        if let Some(p) = &pal {
                            match Palette::load(p) {
                                Ok(p) => palette = Some(p),
                                Err(e) => errs.push(e.to_string()),
                            }
                        }
                        source = Some(Source::Synth(SynthSource {
                            scene: rooted(root, scene),
                            scans,
                            rays_per_scan: s.rays_per_scan.unwrap_or(4000),
                            range,
                            palette: pal,
                        }));
                    }
                }
            }
            (None, Some(d)) => {
                let mut d = d.clone();
                d.resolve(root);
                errs.extend(d.validate());
                match d.load_palette() {
                    Ok(p) => palette = Some(p),
                    Err(e) => errs.push(e.to_string()),
                }
                source = Some(Source::Dataset(d));
            }
            (None, None) => {}
        }

        let dsec = self.decoder.clone().unwrap_or_default();
        let dd = DecoderConfig::default();
        let pal = palette.unwrap_or_default();
        let dataset_cap = match &source {
            Some(Source::Dataset(d)) => Some(d.max_instances),
            _ => None,
        };
        let decoder = DecoderConfig {
            hidden: dsec.hidden.unwrap_or(dd.hidden),
            hidden_layers: dsec.hidden_layers.unwrap_or(dd.hidden_layers),
            classes: dsec.classes.unwrap_or(pal.len()),
            max_instances: dsec.max_instances.or(dataset_cap).unwrap_or(dd.max_instances),
            things: dsec.things.clone().unwrap_or_else(|| pal.things.clone()),
            seed: mix64(seed ^ 0x4445_434F),
        };
        collect(&mut errs, decoder.validate());

        let s = self.sampler.clone().unwrap_or_default();
        let sd = SamplerConfig::default();
        let sampler = SamplerConfig {
            samples_per_ray: s.samples_per_ray.unwrap_or(sd.samples_per_ray),
            band_width: s.band_width.unwrap_or(sd.band_width),
            min_range: s.min_range.unwrap_or(sd.min_range),
        };

        let l = self.loss.clone().unwrap_or_default();
        let ld = LossWeights::default();
        match (mode.is_incremental(), l.lambda3.is_some()) {
            (true, false) => errs.push(format!("mode {mode} requires loss.lambda3")),
            (false, true) => errs.push(format!("loss.lambda3 is only used by incremental modes, not {mode}")),
            _ => {}
        }
        match (mode.is_panoptic(), l.lambda5.is_some()) {
            (true, false) => errs.push(format!("mode {mode} requires loss.lambda5")),
            (false, true) => errs.push(format!("loss.lambda5 is only used by panoptic modes, not {mode}")),
            _ => {}
        }
        let weights = LossWeights {
            lambda2: l
                .lambda2
                .unwrap_or(if mode.is_incremental() { INCREMENTAL_LAMBDA2 } else { ld.lambda2 }),
            lambda3: if mode.is_incremental() { l.lambda3.unwrap_or(ld.lambda3) } else { 0.0 },
            lambda4: l.lambda4.unwrap_or(ld.lambda4),
            lambda5: if mode.is_panoptic() { l.lambda5.unwrap_or(ld.lambda5) } else { 0.0 },
            alpha: l.alpha.unwrap_or(ld.alpha),
            beta_max: l.beta_max.unwrap_or(ld.beta_max),
        };

        let t = self.train.clone().unwrap_or_default();
        let td = TrainConfig::default();
        let ad = AdamConfig::default();
        let adam = |lr: Option<f64>| AdamConfig {
            lr: lr.unwrap_or(ad.lr),
            beta1: t.beta1.unwrap_or(ad.beta1),
            beta2: t.beta2.unwrap_or(ad.beta2),
            eps: t.eps.unwrap_or(ad.eps),
        };
        let dynamic_classes = t.dynamic_classes.clone().unwrap_or_default();
        for &c in &dynamic_classes {
            if c as usize >= decoder.classes {
                errs.push(format!("dynamic class {c} outside [0, {})", decoder.classes));
            }
        }
        let train = TrainConfig {
            mode,
            steps: t.steps.unwrap_or(td.steps),
            rays_per_step: t.rays_per_step.unwrap_or(td.rays_per_step),
            sampler,
            weights,
            feature_adam: adam(t.feature_lr),
            decoder_adam: adam(t.decoder_lr),
            seed,
            dynamic_classes,
            checkpoint_every: t.checkpoint_every.unwrap_or(td.checkpoint_every),
        };
        collect(&mut errs, train.validate());
        if !(train.feature_adam.eps > 0.0) {
            errs.push("train.eps must be positive".into());
        }

        let m = self.mesh.clone().unwrap_or_default();
        let md = MeshConfig::default();
        let mesh = MeshConfig {
            s_cube: m.s_cube.unwrap_or(md.s_cube),
            iso: m.iso.unwrap_or(md.iso),
            filter_dynamic: m.filter_dynamic.unwrap_or(md.filter_dynamic),
        };
        if !(mesh.s_cube > 0.0 && mesh.s_cube.is_finite()) {
            errs.push(format!("mesh.s_cube must be positive, got {}", mesh.s_cube));
        }
        if !mesh.iso.is_finite() {
            errs.push("mesh.iso must be finite".into());
        }

        errs.dedup();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(RunConfig {
            mode,
            seed,
            grid,
            decoder,
            train,
            source,
            mesh,
            submap: t.submap.unwrap_or(false),
        })
    }
}

fn collect(errs: &mut Vec<String>, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(v)) => errs.extend(v),
        Err(e) => errs.push(e.to_string()),
    }
}

fn rooted(root: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        root.join(p)
    } else {
        p.to_path_buf()
    }
}

impl RunConfig {
    /// Fully explicit file form; the mode-gated weights appear only where
    /// the mode uses them.
    pub fn to_file(&self) -> ConfigFile {
        let w = &self.train.weights;
        let t = &self.train;
        ConfigFile {
            mode: Some(self.mode),
            seed: Some(self.seed),
            grid: Some(GridSection {
                leaf_size: Some(self.grid.leaf_size),
                levels: Some(self.grid.levels),
                geo_dim: Some(self.grid.geo_dim),
                sem_dim: Some(self.grid.sem_dim),
                init_std: Some(self.grid.init_std),
                merge: Some(self.grid.merge),
            }),
            decoder: Some(DecoderSection {
                hidden: Some(self.decoder.hidden),
                hidden_layers: Some(self.decoder.hidden_layers),
                classes: Some(self.decoder.classes),
                things: Some(self.decoder.things.clone()),
                max_instances: Some(self.decoder.max_instances),
            }),
            sampler: Some(SamplerSection {
                samples_per_ray: Some(t.sampler.samples_per_ray),
                band_width: Some(t.sampler.band_width),
                min_range: Some(t.sampler.min_range),
            }),
            loss: Some(LossSection {
                lambda2: Some(w.lambda2),
                lambda3: self.mode.is_incremental().then_some(w.lambda3),
                lambda4: Some(w.lambda4),
                lambda5: self.mode.is_panoptic().then_some(w.lambda5),
                alpha: Some(w.alpha),
                beta_max: Some(w.beta_max),
            }),
            train: Some(TrainSection {
                steps: Some(t.steps),
                rays_per_step: Some(t.rays_per_step),
                feature_lr: Some(t.feature_adam.lr),
                decoder_lr: Some(t.decoder_adam.lr),
                beta1: Some(t.feature_adam.beta1),
                beta2: Some(t.feature_adam.beta2),
                eps: Some(t.feature_adam.eps),
                checkpoint_every: Some(t.checkpoint_every),
                dynamic_classes: Some(t.dynamic_classes.clone()),
                submap: Some(self.submap),
            }),
            synth: match &self.source {
                Some(Source::Synth(s)) => Some(SynthSection {
                    scene: Some(s.scene.clone()),
                    scans: Some(s.scans),
                    rays_per_scan: Some(s.rays_per_scan),
                    range: Some(s.range),
                    palette: s.palette.clone(),
                }),
                _ => None,
            },
            dataset: match &self.source {
                Some(Source::Dataset(d)) => Some(d.clone()),
                _ => None,
            },
            mesh: Some(MeshSection {
                s_cube: Some(self.mesh.s_cube),
                iso: Some(self.mesh.iso),
                filter_dynamic: Some(self.mesh.filter_dynamic),
            }),
        }
    }

    pub fn to_toml(&self) -> String {
        self.to_file().to_toml()
    }

    /// Palette of the configured source.
    pub fn palette(&self) -> Result<Palette> {
        match &self.source {
            Some(Source::Dataset(d)) => d.load_palette(),
            Some(Source::Synth(SynthSource { palette: Some(p), .. })) => Palette::load(p),
            _ => Ok(Palette::semantic_kitti()),
        }
    }
}
