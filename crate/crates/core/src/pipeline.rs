//! End-to-end stages shared by the command line and the verification suites.

use crate::config::{MeshConfig, RunConfig, Source};
use crate::error::{Error, Result};
use crate::io::{invert_rigid, load_sequence, InstanceVocabulary};
use crate::mesh::{extract_map_mesh, filter_dynamic, label_mesh, SemanticMesh};
use crate::model::NeuralMap;
use crate::palette::Palette;
use crate::sampler::{LabeledScan, Pose};
use crate::synth::{synth_scans_range, SceneSpec};
use crate::train::{train, TrainReport};

/// Scans ready for training, in the map frame.
#[derive(Clone, Debug)]
pub struct ScanSet {
    pub scans: Vec<LabeledScan>,
    pub palette: Palette,
    pub vocabulary: InstanceVocabulary,
    /// World pose of the map frame when training a submap.
    pub reference_pose: Option<Pose>,
    /// Trajectory indices `[start, end)` of the scans.
    pub range: (usize, usize),
    /// The analytic scene, for synthetic sources.
    pub scene: Option<SceneSpec>,
}

/// Reads or simulates the configured scans, densifies instance ids and, for
/// submaps, moves everything into the frame of the first scan.
pub fn load_scans(cfg: &RunConfig) -> Result<ScanSet> {
    let palette = cfg.palette()?;
    let (mut scans, vocabulary, range, scene) = match &cfg.source {
        None => return Err(Error::config("no scan source: add a [synth] or [dataset] section")),
        Some(Source::Synth(s)) => {
            let spec = SceneSpec::load(&s.scene)?;
            let mut scans = synth_scans_range(&spec, s.range.0..s.range.1, s.scans, s.rays_per_scan, cfg.seed)?;
            let vocab = InstanceVocabulary::build(&scans, cfg.decoder.max_instances);
            vocab.apply(&mut scans)?;
            (scans, vocab, s.range, Some(spec))
        }
        Some(Source::Dataset(d)) => {
            let (scans, vocab, stats) = load_sequence(d, &palette)?;
            let first = stats.frames.first().copied().unwrap_or(d.first);
            let last = stats.frames.last().map_or(first, |f| f + 1);
            (scans, vocab, (first, last), None)
        }
    };
    if scans.is_empty() {
        return Err(Error::config("the scan source produced no scans"));
    }
    let mut reference_pose = None;
    if cfg.submap {
        let reference = scans[0].pose;
        let into = invert_rigid(&reference);
        scans = scans.iter().map(|s| s.transformed(&into)).collect();
        reference_pose = Some(reference);
    }
    Ok(ScanSet {
        scans,
        palette,
        vocabulary,
        reference_pose,
        range,
        scene,
    })
}

pub fn new_map(cfg: &RunConfig) -> Result<NeuralMap> {
    NeuralMap::new(cfg.grid.clone(), &cfg.decoder, cfg.mode.is_panoptic())
}

/// Allocates and trains a fresh map.
pub fn train_map(cfg: &RunConfig, scans: &[LabeledScan]) -> Result<(NeuralMap, TrainReport)> {
    let mut map = new_map(cfg)?;
    let report = train(&mut map, scans, &cfg.train)?;
    Ok((map, report))
}

/// Extracts, labels and (optionally) filters the mesh of a map.
pub fn mesh_map(map: &NeuralMap, palette: &Palette, mesh: &MeshConfig, dynamic: &[u16]) -> Result<SemanticMesh> {
    let tri = extract_map_mesh(map, mesh.s_cube, mesh.iso)?;
    let labeled = label_mesh(tri, map, palette);
    if mesh.filter_dynamic && !dynamic.is_empty() {
        filter_dynamic(&labeled, dynamic, map.classes())
    } else {
        Ok(labeled)
    }
}
