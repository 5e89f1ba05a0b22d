//! KITTI-style dataset I/O: point and label files, poses, calibration, the
//! instance vocabulary, and a converter from nuScenes point/label files.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palette::Palette;
use crate::sampler::{compose_poses, transform_point, validate_rigid, LabeledScan, Pose, IDENTITY_POSE};

/// `x, y, z, intensity` as little-endian float32.
pub fn read_points(path: &Path) -> Result<Vec<[f32; 4]>> {
    read_records(path, 16, |r| {
        [0, 4, 8, 12].map(|o| f32::from_le_bytes(r[o..o + 4].try_into().unwrap()))
    })
}

pub fn write_points(path: &Path, points: &[[f32; 4]]) -> Result<()> {
    let mut buf = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Per-point `u32`: low 16 bits semantic class, high 16 bits instance.
pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    read_records(path, 4, |r| u32::from_le_bytes(r.try_into().unwrap()))
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let buf: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_records<T>(path: &Path, size: usize, parse: impl Fn(&[u8]) -> T) -> Result<Vec<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % size != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a multiple of the {size}-byte record", bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(size).map(parse).collect())
}

fn parse_row_major(values: &[f64]) -> Pose {
    let mut p = IDENTITY_POSE;
    for r in 0..3 {
        p[r].copy_from_slice(&values[4 * r..4 * r + 4]);
    }
    p
}

fn parse_floats(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line,
                detail: format!("{t:?} is not a number"),
            })
        })
        .collect()
}

/// One row-major 3x4 matrix per line.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    parse_poses(&std::fs::read_to_string(path)?)
}

pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, i + 1)?;
        if v.len() != 12 {
            return Err(Error::Parse {
                line: i + 1,
                detail: format!("expected 12 values, found {}", v.len()),
            });
        }
        out.push(parse_row_major(&v));
    }
    Ok(out)
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p[..3].iter().flatten().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    std::fs::write(path, format_poses(poses))?;
    Ok(())
}

/// The `Tr:` entry (sensor to body) of a KITTI `calib.txt`.
pub fn read_calibration(path: &Path) -> Result<Pose> {
    let text = std::fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("Tr:") {
            let v = parse_floats(rest, i + 1)?;
            if v.len() != 12 {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("Tr needs 12 values, found {}", v.len()),
                });
            }
            return Ok(parse_row_major(&v));
        }
    }
    Err(Error::format(path, "no Tr: entry"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub points: usize,
    /// Points whose raw class is not in the palette; mapped to unlabeled.
    pub unknown_raw: usize,
}

/// Reads one scan into the world frame (`pose ∘ calibration`). Classes are
/// remapped through the palette. Instances keep their raw ids for things and
/// are 0 otherwise; see [`InstanceVocabulary`] for densification.
pub fn read_scan(bin: &Path, label: Option<&Path>, pose: &Pose, calibration: &Pose, palette: &Palette) -> Result<(LabeledScan, ScanStats)> {
    let pts = read_points(bin)?;
    let labels = match label {
        Some(l) => {
            let v = read_labels(l)?;
            if v.len() != pts.len() {
                return Err(Error::format(
                    l,
                    format!(
                        "{} label bytes for {} point bytes ({} labels vs {} points)",
                        v.len() * 4,
                        pts.len() * 16,
                        v.len(),
                        pts.len()
                    ),
                ));
            }
            v
        }
        None => vec![0; pts.len()],
    };
    let world = compose_poses(pose, calibration);
    validate_rigid(&world, 1e-4)?;
    let mut stats = ScanStats {
        points: pts.len(),
        ..Default::default()
    };
    let mut scan = LabeledScan {
        origin: [world[0][3], world[1][3], world[2][3]],
        points: Vec::with_capacity(pts.len()),
        labels: Vec::with_capacity(pts.len()),
        instances: Vec::with_capacity(pts.len()),
        pose: world,
    };
    for (p, &l) in pts.iter().zip(&labels) {
        let raw = (l & 0xFFFF) as u16;
        let class = palette.train_id(raw).unwrap_or_else(|| {
            stats.unknown_raw += 1;
            0
        });
        let inst = l >> 16;
        scan.points.push(transform_point(&world, [p[0] as f64, p[1] as f64, p[2] as f64]));
        scan.labels.push(class);
        scan.instances.push(if palette.things.contains(&class) { inst } else { 0 });
    }
    Ok((scan, stats))
}

/// Dense instance ids in `[1, max_instances]`, assigned in first-seen order;
/// 0 is reserved for "no instance".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceVocabulary {
    pub max_instances: usize,
    map: FxHashMap<u32, u32>,
    order: Vec<u32>,
    /// Distinct raw ids that did not fit and map to 0.
    pub overflow: usize,
}

impl InstanceVocabulary {
    pub fn new(max_instances: usize) -> Self {
        InstanceVocabulary {
            max_instances,
            ..Default::default()
        }
    }

    /// Builds the vocabulary over non-zero raw ids in scan order.
    pub fn build(scans: &[LabeledScan], max_instances: usize) -> Self {
        let mut v = Self::new(max_instances);
        for s in scans {
            for &raw in &s.instances {
                v.insert(raw);
            }
        }
        if v.overflow > 0 {
            log::warn!("{} instances beyond the cap of {max_instances} map to 0", v.overflow);
        }
        v
    }

    pub fn insert(&mut self, raw: u32) -> u32 {
        if raw == 0 {
            return 0;
        }
        if let Some(&d) = self.map.get(&raw) {
            return d;
        }
        let dense = if self.order.len() < self.max_instances {
            self.order.push(raw);
            self.order.len() as u32
        } else {
            self.overflow += 1;
            0
        };
        self.map.insert(raw, dense);
        dense
    }

    pub fn dense(&self, raw: u32) -> Option<u32> {
        if raw == 0 { Some(0) } else { self.map.get(&raw).copied() }
    }

    /// Raw ids in dense order (dense id `i + 1` is `raw_ids()[i]`).
    pub fn raw_ids(&self) -> &[u32] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Rewrites scan instance ids to dense ids.
    pub fn apply(&self, scans: &mut [LabeledScan]) -> Result<()> {
        for s in scans {
            for i in &mut s.instances {
                *i = self.dense(*i).ok_or(Error::UnknownInstance(*i))?;
            }
        }
        Ok(())
    }
}

/// Location and shape of a KITTI-layout sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory of `NNNNNN.bin` scans.
    pub scans: PathBuf,
    /// Directory of `NNNNNN.label` files; unlabeled when absent.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    pub poses: PathBuf,
    /// KITTI `calib.txt`; identity when absent.
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    /// Custom palette file; SemanticKITTI when absent.
    #[serde(default)]
    pub palette: Option<PathBuf>,
    #[serde(default = "default_first")]
    pub first: usize,
    /// Exclusive end frame; all frames when absent.
    #[serde(default)]
    pub last: Option<usize>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_max_instances")]
    pub max_instances: usize,
}

fn default_first() -> usize {
    0
}

fn default_stride() -> usize {
    1
}

fn default_max_instances() -> usize {
    64
}

impl DatasetConfig {
    /// Relative paths are resolved against `root`.
    pub fn resolve(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.scans);
        fix(&mut self.poses);
        for p in [&mut self.labels, &mut self.calibration, &mut self.palette].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.stride == 0 {
            e.push("dataset.stride must be positive".into());
        }
        if self.max_instances == 0 {
            e.push("dataset.max_instances must be at least 1".into());
        }
        if self.last.is_some_and(|l| l <= self.first) {
            e.push("dataset.last must exceed dataset.first".into());
        }
        e
    }

    pub fn load_palette(&self) -> Result<Palette> {
        match &self.palette {
            Some(p) => Palette::load(p),
            None => Ok(Palette::semantic_kitti()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceStats {
    pub frames: Vec<usize>,
    pub points: usize,
    pub unknown_raw: usize,
    pub instance_overflow: usize,
}

/// Loads the configured frames, reading scans in parallel, then densifies
/// instance ids in frame order.
pub fn load_sequence(cfg: &DatasetConfig, palette: &Palette) -> Result<(Vec<LabeledScan>, InstanceVocabulary, SequenceStats)> {
    let poses = read_poses(&cfg.poses)?;
    let calib = match &cfg.calibration {
        Some(c) => read_calibration(c)?,
        None => IDENTITY_POSE,
    };
    let last = cfg.last.unwrap_or(poses.len()).min(poses.len());
    let frames: Vec<usize> = (cfg.first..last).step_by(cfg.stride.max(1)).collect();
    if frames.is_empty() {
        return Err(Error::config(format!(
            "no frames selected ({} poses, first {}, last {last})",
            poses.len(),
            cfg.first
        )));
    }
    let loaded: Vec<(LabeledScan, ScanStats)> = frames
        .par_iter()
        .map(|&f| {
            let bin = cfg.scans.join(format!("{f:06}.bin"));
            let label = cfg.labels.as_ref().map(|d| d.join(format!("{f:06}.label")));
            read_scan(&bin, label.as_deref(), &poses[f], &calib, palette)
        })
        .collect::<Result<_>>()?;
    let mut stats = SequenceStats {
        frames,
        ..Default::default()
    };
    let mut scans = Vec::with_capacity(loaded.len());
    for (s, st) in loaded {
        stats.points += st.points;
        stats.unknown_raw += st.unknown_raw;
        scans.push(s);
    }
    if stats.unknown_raw > 0 {
        log::warn!("{} points had raw classes missing from the palette", stats.unknown_raw);
    }
    let vocab = InstanceVocabulary::build(&scans, cfg.max_instances);
    stats.instance_overflow = vocab.overflow;
    vocab.apply(&mut scans)?;
    Ok((scans, vocab, stats))
}

/// Writes scans in KITTI layout (`velodyne/`, `labels/`, `poses.txt`), with
/// points stored in each scan's sensor frame.
pub fn write_sequence(dir: &Path, scans: &[LabeledScan]) -> Result<()> {
    let vel = dir.join("velodyne");
    let lab = dir.join("labels");
    std::fs::create_dir_all(&vel)?;
    std::fs::create_dir_all(&lab)?;
    let mut poses = Vec::with_capacity(scans.len());
    for (i, s) in scans.iter().enumerate() {
        let inv = invert_rigid(&s.pose);
        let pts: Vec<[f32; 4]> = s
            .points
            .iter()
            .map(|p| {
                let q = transform_point(&inv, *p);
                [q[0] as f32, q[1] as f32, q[2] as f32, 0.0]
            })
            .collect();
        write_points(&vel.join(format!("{i:06}.bin")), &pts)?;
        let labels: Vec<u32> = s
            .labels
            .iter()
            .zip(&s.instances)
            .map(|(&c, &inst)| c as u32 | (inst << 16))
            .collect();
        write_labels(&lab.join(format!("{i:06}.label")), &labels)?;
        poses.push(s.pose);
    }
    write_poses(&dir.join("poses.txt"), &poses)
}

pub fn invert_rigid(p: &Pose) -> Pose {
    let mut out = IDENTITY_POSE;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = p[j][i];
        }
    }
    for i in 0..3 {
        out[i][3] = -(0..3).map(|j| out[i][j] * p[j][3]).sum::<f64>();
    }
    out
}

/// nuScenes-lidarseg general classes mapped onto its 16 training classes.
pub fn nuscenes_palette() -> Palette {
    let names = [
        "unlabeled",
        "barrier",
        "bicycle",
        "bus",
        "car",
        "construction_vehicle",
        "motorcycle",
        "pedestrian",
        "traffic_cone",
        "trailer",
        "truck",
        "driveable_surface",
        "other_flat",
        "sidewalk",
        "terrain",
        "manmade",
        "vegetation",
    ];
    let raw: [u16; 32] = [0, 0, 7, 7, 7, 0, 7, 0, 0, 1, 0, 0, 8, 0, 2, 3, 3, 4, 5, 0, 0, 6, 9, 10, 11, 12, 13, 14, 15, 0, 16, 0];
    Palette {
        classes: names
            .iter()
            .enumerate()
            .map(|(i, n)| crate::palette::ClassInfo {
                name: n.to_string(),
                color: if i == 0 {
                    [0, 0, 0]
                } else {
                    let h = crate::util::mix64(i as u64);
                    [h as u8, (h >> 8) as u8, (h >> 16) as u8]
                },
            })
            .collect(),
        raw_map: raw.iter().enumerate().map(|(r, &t)| (r as u16, t)).collect(),
        things: (1..=10).collect(),
    }
}

/// Converts one nuScenes sweep to KITTI layout. Points are float32 records of
/// `x, y, z, intensity, ring`; labels are either one `u8` general class per
/// point (lidarseg) or one `u16` `class * 1000 + instance` per point (panoptic).
pub fn convert_nuscenes_scan(pcd: &Path, labels: Option<&Path>, out_bin: &Path, out_label: &Path) -> Result<usize> {
    let pts = read_records(pcd, 20, |r| {
        [0, 4, 8, 12].map(|o| f32::from_le_bytes(r[o..o + 4].try_into().unwrap()))
    })?;
    let n = pts.len();
    let kitti: Vec<u32> = match labels {
        None => vec![0; n],
        Some(l) => {
            let bytes = std::fs::read(l)?;
            if bytes.len() == n {
                bytes.iter().map(|&c| c as u32).collect()
            } else if bytes.len() == 2 * n {
                bytes
                    .chunks_exact(2)
                    .map(|b| {
                        let v = u16::from_le_bytes([b[0], b[1]]) as u32;
                        (v / 1000) | ((v % 1000) << 16)
                    })
                    .collect()
            } else {
                return Err(Error::format(
                    l,
                    format!("{} label bytes for {n} points (expected {n} or {})", bytes.len(), 2 * n),
                ));
            }
        }
    };
    write_points(out_bin, &pts)?;
    write_labels(out_label, &kitti)?;
    Ok(n)
}

/// Converts a list of `pcd_path [label_path]` lines into a KITTI-layout
/// directory; poses are copied from a KITTI-format pose file.
pub fn convert_nuscenes(list: &Path, poses: &Path, out: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(list)?;
    let base = list.parent().unwrap_or(Path::new("."));
    let entries: Vec<(PathBuf, Option<PathBuf>)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut t = l.split_whitespace();
            let p = base.join(t.next().unwrap());
            (p, t.next().map(|x| base.join(x)))
        })
        .collect();
    let pose_list = read_poses(poses)?;
    if pose_list.len() != entries.len() {
        return Err(Error::format(
            poses,
            format!("{} poses for {} sweeps", pose_list.len(), entries.len()),
        ));
    }
    std::fs::create_dir_all(out.join("velodyne"))?;
    std::fs::create_dir_all(out.join("labels"))?;
    for (i, (p, l)) in entries.iter().enumerate() {
        convert_nuscenes_scan(
            p,
            l.as_deref(),
            &out.join("velodyne").join(format!("{i:06}.bin")),
            &out.join("labels").join(format!("{i:06}.label")),
        )?;
    }
    write_poses(&out.join("poses.txt"), &pose_list)?;
    let mut f = std::fs::File::create(out.join("palette.txt"))?;
    let pal = nuscenes_palette();
    for (i, c) in pal.classes.iter().enumerate() {
        writeln!(f, "{i} {} {} {} {}", c.name, c.color[0], c.color[1], c.color[2])?;
    }
    for (r, t) in &pal.raw_map {
        writeln!(f, "raw {r} {t}")?;
    }
    let things: Vec<String> = pal.things.iter().map(|t| t.to_string()).collect();
    writeln!(f, "things {}", things.join(" "))?;
    Ok(entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn empty_files_give_empty_scan() {
        let d = tempfile::tempdir().unwrap();
        let (b, l) = (d.path().join("a.bin"), d.path().join("a.label"));
        std::fs::write(&b, []).unwrap();
        std::fs::write(&l, []).unwrap();
        let (s, st) = read_scan(&b, Some(&l), &IDENTITY_POSE, &IDENTITY_POSE, &Palette::semantic_kitti()).unwrap();
        assert!(s.is_empty());
        assert_eq!(st.points, 0);
    }

    #[test]
    fn hand_written_bytes() {
        let d = tempfile::tempdir().unwrap();
        let (b, l) = (d.path().join("a.bin"), d.path().join("a.label"));
        let mut bytes = Vec::new();
        for v in [1.5f32, -2.0, 0.25, 0.9, 10.0, 20.0, -0.5, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&b, &bytes).unwrap();
        // Point 0: raw class 10 (car), instance 3. Point 1: raw 50 (building), instance 9.
        let labels: Vec<u8> = [10u32 | 3 << 16, 50 | 9 << 16].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&l, &labels).unwrap();
        let (s, _) = read_scan(&b, Some(&l), &IDENTITY_POSE, &IDENTITY_POSE, &Palette::semantic_kitti()).unwrap();
        assert_eq!(s.points, vec![[1.5, -2.0, 0.25], [10.0, 20.0, -0.5]]);
        assert_eq!(s.labels, vec![1, 13]);
        // Building is stuff, so its instance is dropped.
        assert_eq!(s.instances, vec![3, 0]);
        assert_eq!(s.origin, [0.0; 3]);
    }

    #[test]
    fn scan_errors_and_unknown_classes() {
        let d = tempfile::tempdir().unwrap();
        let (b, l) = (d.path().join("a.bin"), d.path().join("a.label"));
        write_points(&b, &[[0.0; 4], [1.0; 4]]).unwrap();
        write_labels(&l, &[7]).unwrap();
        let err = read_scan(&b, Some(&l), &IDENTITY_POSE, &IDENTITY_POSE, &Palette::semantic_kitti()).unwrap_err();
        assert!(err.to_string().contains("4 label bytes for 32 point bytes"), "{err}");
        write_labels(&l, &[7, 40]).unwrap();
        let (s, st) = read_scan(&b, Some(&l), &IDENTITY_POSE, &IDENTITY_POSE, &Palette::semantic_kitti()).unwrap();
        assert_eq!(st.unknown_raw, 1);
        assert_eq!(s.labels, vec![0, 9]);
        std::fs::write(&b, [0u8; 17]).unwrap();
        assert!(matches!(read_points(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn pose_and_calibration_are_applied() {
        let d = tempfile::tempdir().unwrap();
        let b = d.path().join("a.bin");
        write_points(&b, &[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let pose = parse_poses("0 -1 0 5 1 0 0 6 0 0 1 7").unwrap()[0];
        let mut calib = IDENTITY_POSE;
        calib[2][3] = 1.0;
        let (s, _) = read_scan(&b, None, &pose, &calib, &Palette::semantic_kitti()).unwrap();
        assert_eq!(s.points, vec![[5.0, 7.0, 8.0]]);
        assert_eq!(s.origin, [5.0, 6.0, 8.0]);
    }

    #[test]
    fn pose_parsing() {
        assert_eq!(parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap(), vec![IDENTITY_POSE]);
        let t = parse_poses("1 0 0 2.5 0 1 0 -1 0 0 1 3\n").unwrap()[0];
        assert_eq!([t[0][3], t[1][3], t[2][3]], [2.5, -1.0, 3.0]);
        assert_eq!(t[3], [0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 2 3\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_poses("1 0 0 0 0 1 0 x 0 0 1 0\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn calibration_file() {
        let d = tempfile::tempdir().unwrap();
        let c = d.path().join("calib.txt");
        std::fs::write(&c, "P0: 1 2 3\nTr: 1 0 0 0.5 0 1 0 0 0 0 1 -0.25\n").unwrap();
        let t = read_calibration(&c).unwrap();
        assert_eq!((t[0][3], t[2][3]), (0.5, -0.25));
        std::fs::write(&c, "P0: 1 2 3\n").unwrap();
        assert!(read_calibration(&c).is_err());
    }

    #[test]
    fn vocabulary_cases() {
        let mut v = InstanceVocabulary::new(64);
        assert_eq!([7, 42, 7].map(|r| v.insert(r)), [1, 2, 1]);
        assert_eq!(v.raw_ids(), &[7, 42]);
        let mut v = InstanceVocabulary::new(2);
        assert_eq!([5, 6, 8, 8].map(|r| v.insert(r)), [1, 2, 0, 0]);
        assert_eq!(v.overflow, 1);
        let empty = InstanceVocabulary::build(&[], 4);
        assert!(empty.is_empty());
        assert_eq!(empty.dense(0), Some(0));
        assert!(matches!(empty.apply(&mut [scan_with(vec![3])]), Err(Error::UnknownInstance(3))));
    }

    fn scan_with(instances: Vec<u32>) -> LabeledScan {
        let n = instances.len();
        LabeledScan {
            origin: [0.0; 3],
            points: vec![[1.0, 0.0, 0.0]; n],
            labels: vec![1; n],
            instances,
            pose: IDENTITY_POSE,
        }
    }

    #[test]
    fn sequence_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let pose = parse_poses("0 -1 0 5 1 0 0 6 0 0 1 7").unwrap()[0];
        let mut scans = vec![scan_with(vec![40, 0, 40]), scan_with(vec![0, 12, 40])];
        for s in &mut scans {
            s.pose = pose;
            s.origin = [5.0, 6.0, 7.0];
            s.points = vec![[5.0, 7.0, 7.0], [4.0, 6.0, 8.0], [5.5, 6.25, 7.0]];
        }
        write_sequence(d.path(), &scans).unwrap();
        let cfg = DatasetConfig {
            scans: "velodyne".into(),
            labels: Some("labels".into()),
            poses: "poses.txt".into(),
            calibration: None,
            palette: None,
            first: 0,
            last: None,
            stride: 1,
            max_instances: 64,
        };
        let mut cfg = cfg;
        cfg.resolve(d.path());
        // Raw class 1 is "outlier" in the KITTI raw map, which maps to 0.
        let mut pal = Palette::semantic_kitti();
        pal.raw_map.push((1, 1));
        pal.raw_map.retain(|r| *r != (1, 0));
        let (back, vocab, stats) = load_sequence(&cfg, &pal).unwrap();
        assert_eq!(stats.frames, vec![0, 1]);
        assert_eq!(vocab.raw_ids(), &[40, 12]);
        assert_eq!(back[0].instances, vec![1, 0, 1]);
        assert_eq!(back[1].instances, vec![0, 2, 1]);
        for (a, b) in back.iter().zip(&scans) {
            assert_eq!(a.points, b.points);
            assert_eq!(a.origin, b.origin);
        }
    }

    #[test]
    fn nuscenes_conversion() {
        let d = tempfile::tempdir().unwrap();
        let mut pcd = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, 7.0, -1.0, -2.0, -3.0, 0.25, 9.0] {
            pcd.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(d.path().join("s.pcd.bin"), &pcd).unwrap();
        let pan: Vec<u8> = [17_003u16, 24_000].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(d.path().join("s.pan"), &pan).unwrap();
        std::fs::write(d.path().join("list.txt"), "s.pcd.bin s.pan\n").unwrap();
        std::fs::write(d.path().join("poses.txt"), "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let out = d.path().join("kitti");
        assert_eq!(convert_nuscenes(&d.path().join("list.txt"), &d.path().join("poses.txt"), &out).unwrap(), 1);
        let cfg = DatasetConfig {
            scans: out.join("velodyne"),
            labels: Some(out.join("labels")),
            poses: out.join("poses.txt"),
            calibration: None,
            palette: Some(out.join("palette.txt")),
            first: 0,
            last: None,
            stride: 1,
            max_instances: 8,
        };
        let pal = cfg.load_palette().unwrap();
        assert_eq!(pal, nuscenes_palette());
        let (scans, _, _) = load_sequence(&cfg, &pal).unwrap();
        assert_eq!(scans[0].points, vec![[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]]);
        // Raw 17 is car (4, a thing); raw 24 is driveable surface (11).
        assert_eq!(scans[0].labels, vec![4, 11]);
        assert_eq!(scans[0].instances, vec![1, 0]);
    }

    fn random_rigid(seed: u64) -> Pose {
        let mut rng = stream_rng(seed, 3, 3);
        let t = crate::merge::RigidTransform::from_axis_angle(
            [rng.random(), rng.random(), rng.random::<f64>() + 0.1],
            rng.random_range(-3.0..3.0),
            [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-5.0..5.0)],
        );
        t.to_pose()
    }

    proptest! {
        #[test]
        fn pose_text_round_trips(seeds in prop::collection::vec(0u64..1_000_000, 1..8)) {
            let poses: Vec<Pose> = seeds.iter().map(|&s| random_rigid(s)).collect();
            let text = format_poses(&poses);
            let back = parse_poses(&text).unwrap();
            prop_assert_eq!(&back, &poses);
            prop_assert_eq!(format_poses(&back), text);
        }

        #[test]
        fn point_and_label_files_round_trip(seed in 0u64..1000, n in 0usize..50) {
            let d = tempfile::tempdir().unwrap();
            let mut rng = stream_rng(seed, 4, 4);
            let pts: Vec<[f32; 4]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random(), rng.random()]).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.random()).collect();
            let (b, l) = (d.path().join("x.bin"), d.path().join("x.label"));
            write_points(&b, &pts).unwrap();
            write_labels(&l, &labels).unwrap();
            let bytes = (std::fs::read(&b).unwrap(), std::fs::read(&l).unwrap());
            write_points(&b, &read_points(&b).unwrap()).unwrap();
            write_labels(&l, &read_labels(&l).unwrap()).unwrap();
            prop_assert_eq!(bytes, (std::fs::read(&b).unwrap(), std::fs::read(&l).unwrap()));
        }
    }
}
