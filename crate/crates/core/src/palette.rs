//! Class palette: training ids, names, colors and the raw-label map.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    /// Indexed by training id; id 0 is unlabeled.
    pub classes: Vec<ClassInfo>,
    /// Raw dataset label to training id; unknown raw labels map to 0.
    pub raw_map: Vec<(u16, u16)>,
    /// Training ids that carry instances.
    pub things: Vec<u16>,
}

const KITTI_CLASSES: [(&str, [u8; 3]); 20] = [
    ("unlabeled", [0, 0, 0]),
    ("car", [100, 150, 245]),
    ("bicycle", [100, 230, 245]),
    ("motorcycle", [30, 60, 150]),
    ("truck", [80, 30, 180]),
    ("other-vehicle", [0, 0, 255]),
    ("person", [255, 30, 30]),
    ("bicyclist", [255, 40, 200]),
    ("motorcyclist", [150, 30, 90]),
    ("road", [255, 0, 255]),
    ("parking", [255, 150, 255]),
    ("sidewalk", [75, 0, 75]),
    ("other-ground", [175, 0, 75]),
    ("building", [255, 200, 0]),
    ("fence", [255, 120, 50]),
    ("vegetation", [0, 175, 0]),
    ("trunk", [135, 60, 0]),
    ("terrain", [150, 240, 80]),
    ("pole", [255, 240, 150]),
    ("traffic-sign", [255, 0, 0]),
];

const KITTI_RAW_MAP: [(u16, u16); 34] = [
    (0, 0),
    (1, 0),
    (10, 1),
    (11, 2),
    (13, 5),
    (15, 3),
    (16, 5),
    (18, 4),
    (20, 5),
    (30, 6),
    (31, 7),
    (32, 8),
    (40, 9),
    (44, 10),
    (48, 11),
    (49, 12),
    (50, 13),
    (51, 14),
    (52, 0),
    (60, 9),
    (70, 15),
    (71, 16),
    (72, 17),
    (80, 18),
    (81, 19),
    (99, 0),
    (252, 1),
    (253, 7),
    (254, 6),
    (255, 8),
    (256, 5),
    (257, 5),
    (258, 4),
    (259, 5),
];

impl Default for Palette {
    fn default() -> Self {
        Palette::semantic_kitti()
    }
}

impl Palette {
    /// The 19-class SemanticKITTI training palette plus unlabeled.
    pub fn semantic_kitti() -> Self {
        Palette {
            classes: KITTI_CLASSES
                .iter()
                .map(|(n, c)| ClassInfo {
                    name: n.to_string(),
                    color: *c,
                })
                .collect(),
            raw_map: KITTI_RAW_MAP.to_vec(),
            things: (1..=8).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn color(&self, class: u16) -> [u8; 3] {
        self.classes.get(class as usize).map_or([0, 0, 0], |c| c.color)
    }

    /// Training id of a raw label, or `None` if the raw label is unknown.
    pub fn train_id(&self, raw: u16) -> Option<u16> {
        self.raw_map.iter().find(|(r, _)| *r == raw).map(|(_, t)| *t)
    }

    pub fn class_by_name(&self, name: &str) -> Option<u16> {
        self.classes.iter().position(|c| c.name == name).map(|i| i as u16)
    }

    /// Custom palette file: `id name r g b` per line, `raw <raw> <id>` lines
    /// for the raw map and an optional `things <id> <id> ...` line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut classes: Vec<Option<ClassInfo>> = Vec::new();
        let mut raw_map = Vec::new();
        let mut things = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let perr = |d: String| Error::Parse { line: line_no, detail: d };
            let t: Vec<&str> = line.split('#').next().unwrap_or("").split_whitespace().collect();
            if t.is_empty() {
                continue;
            }
            let num = |s: &str| s.parse::<u16>().map_err(|_| perr(format!("{s:?} is not an integer id")));
            match t[0] {
                "raw" if t.len() == 3 => raw_map.push((num(t[1])?, num(t[2])?)),
                "things" => {
                    for s in &t[1..] {
                        things.push(num(s)?);
                    }
                }
                _ if t.len() == 5 => {
                    let id = num(t[0])? as usize;
                    let mut color = [0u8; 3];
                    for (c, s) in color.iter_mut().zip(&t[2..]) {
                        *c = s.parse().map_err(|_| perr(format!("{s:?} is not a color component")))?;
                    }
                    if classes.len() <= id {
                        classes.resize(id + 1, None);
                    }
                    classes[id] = Some(ClassInfo {
                        name: t[1].to_string(),
                        color,
                    });
                }
                _ => return Err(perr(format!("unrecognized palette line {line:?}"))),
            }
        }
        let mut out = Vec::with_capacity(classes.len());
        for (id, c) in classes.into_iter().enumerate() {
            out.push(c.ok_or_else(|| Error::format(path, format!("class id {id} missing from palette")))?);
        }
        if out.len() < 2 {
            return Err(Error::format(path, "palette needs unlabeled plus at least one class"));
        }
        let n = out.len() as u16;
        if let Some(bad) = raw_map.iter().map(|(_, t)| *t).chain(things.iter().copied()).find(|&t| t >= n) {
            return Err(Error::format(path, format!("class id {bad} not defined")));
        }
        Ok(Palette {
            classes: out,
            raw_map,
            things,
        })
    }

    /// Sidecar text mapping class id to name and color.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, c) in self.classes.iter().enumerate() {
            writeln!(f, "{i} {} {} {} {}", c.name, c.color[0], c.color[1], c.color[2])?;
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_palette_shape() {
        let p = Palette::semantic_kitti();
        assert_eq!(p.len(), 20);
        assert_eq!(p.train_id(10), Some(1));
        assert_eq!(p.train_id(252), Some(1));
        assert_eq!(p.train_id(1), Some(0));
        assert_eq!(p.train_id(7), None);
        assert_eq!(p.class_by_name("building"), Some(13));
        assert!(p.raw_map.iter().all(|(_, t)| (*t as usize) < p.len()));
    }

    #[test]
    fn sidecar_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = Palette::semantic_kitti();
        let path = dir.path().join("classes.txt");
        p.write_sidecar(&path).unwrap();
        let q = Palette::load(&path).unwrap();
        assert_eq!(q.classes, p.classes);
        assert!(q.raw_map.is_empty());
    }

    #[test]
    fn custom_palette_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        std::fs::write(&path, "0 none 0 0 0\n2 wall 1 2 3\n").unwrap();
        assert!(matches!(Palette::load(&path), Err(Error::Format { .. })));
        std::fs::write(&path, "0 none 0 0 0\n1 wall 1 2 3\nraw 5 1\nthings 1\n").unwrap();
        let p = Palette::load(&path).unwrap();
        assert_eq!(p.train_id(5), Some(1));
        assert_eq!(p.things, vec![1]);
        std::fs::write(&path, "0 none 0 0 0\n1 wall 1 2 x\n").unwrap();
        assert!(matches!(Palette::load(&path), Err(Error::Parse { line: 2, .. })));
    }
}
