//! Binary map snapshots.
//!
//! Layout (little-endian): magic `LNSF`, version u32, leaf size f64, levels
//! u32, geometry width u32, semantic width u32; per level a u64 record count
//! followed by records of (morton code u64, geometry f32s, semantic f32s).
//! Then each decoder as layer count u32 and per layer (rows u32, cols u32,
//! row-major f32 weights, f32 biases). A trailing `META` block (u32 length,
//! TOML text) holds the remaining settings.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::model::{Mode, NeuralMap};
use crate::octree::{FeatureMerge, FeatureTable, GridConfig, OctreeFeatureGrid};
use crate::sampler::Pose;

const MAGIC: &[u8; 4] = b"LNSF";
const META: &[u8; 4] = b"META";
pub const VERSION: u32 = 1;

/// Settings stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub mode: Mode,
    pub merge: FeatureMerge,
    pub things: Vec<u16>,
    pub grid_seed: u64,
    pub init_std: f64,
    /// World pose of the map frame (submaps).
    #[serde(default)]
    pub reference_pose: Option<Pose>,
    /// Scan range `[start, end)` the map was trained on.
    #[serde(default)]
    pub scans: Option<(usize, usize)>,
    /// Classes treated as dynamic during training.
    #[serde(default)]
    pub dynamic_classes: Vec<u16>,
}

impl SnapshotMeta {
    pub fn for_map(map: &NeuralMap, mode: Mode) -> Self {
        let c = map.grid.config();
        SnapshotMeta {
            mode,
            merge: c.merge,
            things: map.things.clone(),
            grid_seed: c.seed,
            init_std: c.init_std,
            reference_pose: None,
            scans: None,
            dynamic_classes: Vec::new(),
        }
    }
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f32s(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.0.write_all(&(*x as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

pub fn save_map(path: &Path, map: &NeuralMap, meta: &SnapshotMeta) -> Result<()> {
    map.check_shapes()?;
    let c = map.grid.config();
    let mut w = Writer(BufWriter::new(std::fs::File::create(path)?));
    w.0.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.f64(c.leaf_size)?;
    w.u32(c.levels as u32)?;
    w.u32(c.geo_dim as u32)?;
    w.u32(c.sem_dim as u32)?;
    for rows in map.grid.rows_by_level() {
        w.u64(rows.len() as u64)?;
        for r in rows {
            w.u64(map.grid.row_code(r).1)?;
            w.f32s(map.grid.row_feature(FeatureTable::Geometry, r))?;
            w.f32s(map.grid.row_feature(FeatureTable::Semantic, r))?;
        }
    }
    for mlp in [Some(&map.gnf), Some(&map.snf), map.instance.as_ref()].into_iter().flatten() {
        w.u32(mlp.num_layers() as u32)?;
        for l in 0..mlp.num_layers() {
            let (rows, cols) = mlp.layer_shape(l);
            w.u32(rows as u32)?;
            w.u32(cols as u32)?;
            w.f32s(mlp.weight(l))?;
            w.f32s(mlp.bias(l))?;
        }
    }
    let text = toml::to_string(meta).map_err(|e| Error::contract(format!("snapshot metadata: {e}")))?;
    w.0.write_all(META)?;
    w.u32(text.len() as u32)?;
    w.0.write_all(text.as_bytes())?;
    w.0.flush()?;
    Ok(())
}

struct Reader<'a, R: Read> {
    r: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::format(self.path, "truncated snapshot"))?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "truncated snapshot"))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn mlp(&mut self, layers: u32) -> Result<Mlp> {
        if layers == 0 || layers > 64 {
            return Err(Error::format(self.path, format!("implausible decoder layer count {layers}")));
        }
        let mut spec = Vec::with_capacity(layers as usize);
        for _ in 0..layers {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            if rows == 0 || cols == 0 || rows * cols > 1 << 26 {
                return Err(Error::format(self.path, format!("implausible layer shape {rows}x{cols}")));
            }
            let w = self.f32s(rows * cols)?;
            let b = self.f32s(rows)?;
            spec.push((rows, cols, w, b));
        }
        Mlp::from_layers(&spec).map_err(|e| Error::format(self.path, e.to_string()))
    }
}

pub fn load_map(path: &Path) -> Result<(NeuralMap, SnapshotMeta)> {
    let mut r = Reader {
        r: BufReader::new(std::fs::File::open(path)?),
        path,
    };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::format(path, "not a map snapshot (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported snapshot version {version}")));
    }
    let leaf_size = r.f64()?;
    let levels = r.u32()? as usize;
    let geo_dim = r.u32()? as usize;
    let sem_dim = r.u32()? as usize;
    if levels == 0 || levels > 16 || geo_dim == 0 || sem_dim == 0 || geo_dim > 4096 || sem_dim > 4096 {
        return Err(Error::format(path, "implausible grid header"));
    }
    let mut records = Vec::with_capacity(levels);
    for _ in 0..levels {
        let n = r.u64()?;
        let mut level = Vec::with_capacity(n.min(1 << 24) as usize);
        for _ in 0..n {
            let code = r.u64()?;
            level.push((code, r.f32s(geo_dim)?, r.f32s(sem_dim)?));
        }
        records.push(level);
    }
    let mut decoders = Vec::new();
    let meta = loop {
        let tag = r.bytes::<4>()?;
        if &tag == META {
            let len = r.u32()? as usize;
            let mut text = vec![0u8; len];
            r.r
                .read_exact(&mut text)
                .map_err(|_| Error::format(path, "truncated metadata"))?;
            let text = String::from_utf8(text).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
            break toml::from_str::<SnapshotMeta>(&text).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        }
        if decoders.len() == 3 {
            return Err(Error::format(path, "more than three decoders"));
        }
        let layers = u32::from_le_bytes(tag);
        decoders.push(r.mlp(layers)?);
    };
    let mut trailing = [0u8; 1];
    if r.r.read(&mut trailing)? != 0 {
        return Err(Error::format(path, "trailing bytes after metadata"));
    }

    let mut grid = OctreeFeatureGrid::new(GridConfig {
        leaf_size,
        levels,
        geo_dim,
        sem_dim,
        seed: meta.grid_seed,
        init_std: meta.init_std,
        merge: meta.merge,
    })
    .map_err(|e| Error::format(path, e.to_string()))?;
    for (level, recs) in records.into_iter().enumerate() {
        for (code, g, s) in recs {
            grid.insert_with_features(level as u8, code, &g, &s)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    let mut it = decoders.into_iter();
    let (Some(gnf), Some(snf)) = (it.next(), it.next()) else {
        return Err(Error::format(path, "snapshot needs geometry and semantic decoders"));
    };
    let instance = it.next();
    if instance.is_some() != meta.mode.is_panoptic() {
        return Err(Error::format(path, format!("decoder count does not match mode {}", meta.mode)));
    }
    let map = NeuralMap::from_parts(grid, gnf, snf, instance, meta.things.clone())
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((map, meta))
}
