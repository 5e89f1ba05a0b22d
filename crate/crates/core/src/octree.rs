//! Sparse multi-level octree of trainable corner features.
//!
//! Only the finest `L` levels are kept. Level 0 is the finest; a voxel at
//! level `k` has side `leaf_size * 2^k`. Every allocated corner owns one
//! geometry feature (length `geo_dim`) and one semantic feature (length
//! `sem_dim`); both tables share a single `(level, morton code) -> row` index
//! so their key sets are identical by construction.
//!
//! A point is decoded by trilinearly interpolating the eight corner features
//! of its voxel at every level and concatenating the per-level vectors from
//! coarse to fine (`[level L-1 | ... | level 0]`).

use rand_distr::{Distribution, Normal};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{mix64, stream_rng, Vec3};

/// Exclusive bound on `|ix|, |iy|, |iz|`.
pub const COORD_LIMIT: i64 = 1 << 20;
const MORTON_OFFSET: i64 = 1 << 20;

/// Spread the low 21 bits of `v` so that two zero bits separate each.
#[inline]
fn spread21(v: u64) -> u64 {
    let mut x = v & 0x1F_FFFF;
    x = (x | (x << 32)) & 0x001F_0000_0000_FFFF;
    x = (x | (x << 16)) & 0x001F_0000_FF00_00FF;
    x = (x | (x << 8)) & 0x100F_00F0_0F00_F00F;
    x = (x | (x << 4)) & 0x10C3_0C30_C30C_30C3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact21(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10C3_0C30_C30C_30C3;
    x = (x | (x >> 4)) & 0x100F_00F0_0F00_F00F;
    x = (x | (x >> 8)) & 0x001F_0000_FF00_00FF;
    x = (x | (x >> 16)) & 0x001F_0000_0000_FFFF;
    x = (x | (x >> 32)) & 0x1F_FFFF;
    x
}

/// Interleave offset-shifted grid coordinates into a 63-bit Morton code
/// (x in bit 0, y in bit 1, z in bit 2 of every triple).
pub fn morton_encode(ix: i64, iy: i64, iz: i64) -> Result<u64> {
    for v in [ix, iy, iz] {
        if v.abs() >= COORD_LIMIT {
            return Err(Error::Range { value: v });
        }
    }
    let ux = (ix + MORTON_OFFSET) as u64;
    let uy = (iy + MORTON_OFFSET) as u64;
    let uz = (iz + MORTON_OFFSET) as u64;
    Ok(spread21(ux) | (spread21(uy) << 1) | (spread21(uz) << 2))
}

/// Inverse of [`morton_encode`].
pub fn morton_decode(code: u64) -> [i64; 3] {
    [
        compact21(code) as i64 - MORTON_OFFSET,
        compact21(code >> 1) as i64 - MORTON_OFFSET,
        compact21(code >> 2) as i64 - MORTON_OFFSET,
    ]
}

/// A corner of the level-`level` lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VoxelKey {
    pub level: u8,
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn new(level: u8, ix: i64, iy: i64, iz: i64) -> Self {
        VoxelKey { level, ix, iy, iz }
    }

    pub fn code(&self) -> Result<u64> {
        morton_encode(self.ix, self.iy, self.iz)
    }

    pub fn from_code(level: u8, code: u64) -> Self {
        let [ix, iy, iz] = morton_decode(code);
        VoxelKey { level, ix, iy, iz }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTable {
    Geometry,
    Semantic,
}

/// How per-level interpolated features are combined into the decoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMerge {
    #[default]
    Concat,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// Finest corner spacing in meters.
    pub leaf_size: f64,
    pub levels: usize,
    pub geo_dim: usize,
    pub sem_dim: usize,
    pub seed: u64,
    pub init_std: f64,
    pub merge: FeatureMerge,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            leaf_size: 0.2,
            levels: 3,
            geo_dim: 8,
            sem_dim: 16,
            seed: 0,
            init_std: 0.01,
            merge: FeatureMerge::Concat,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.leaf_size.is_finite() && self.leaf_size > 0.0) {
            errs.push(format!("leaf_size must be positive, got {}", self.leaf_size));
        }
        if self.levels == 0 || self.levels > 16 {
            errs.push(format!("levels must be in 1..=16, got {}", self.levels));
        }
        if self.geo_dim == 0 || self.sem_dim == 0 {
            errs.push("feature lengths must be positive".to_string());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            errs.push(format!("init_std must be non-negative, got {}", self.init_std));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Trilinear stencil of one level: the eight corner rows, their weights and
/// the spatial gradient of each weight (1/m).
#[derive(Clone, Copy, Debug)]
pub struct LevelStencil {
    pub rows: [u32; 8],
    pub weights: [f64; 8],
    pub dweights: [[f64; 3]; 8],
}

/// Per-level stencils of a point, in concatenation order (coarsest first).
/// `None` marks a level whose voxel is not fully allocated.
#[derive(Clone, Debug, Default)]
pub struct Stencil {
    pub slots: Vec<Option<LevelStencil>>,
}

/// Integer voxel index and fractional position of `x` on a lattice of side `side`.
#[inline]
fn locate(x: f64, side: f64) -> (i64, f64) {
    let s = x / side;
    let i = s.floor();
    (i as i64, s - i)
}

/// Trilinear weights of corner `c` (bit 0 = +x, bit 1 = +y, bit 2 = +z) and
/// their gradients with respect to the fractional coordinates.
#[inline]
pub fn trilinear_weights(u: Vec3) -> ([f64; 8], [[f64; 3]; 8]) {
    let mut w = [0.0; 8];
    let mut dw = [[0.0; 3]; 8];
    for c in 0..8 {
        let mut f = [0.0; 3];
        let mut df = [0.0; 3];
        for a in 0..3 {
            if (c >> a) & 1 == 1 {
                f[a] = u[a];
                df[a] = 1.0;
            } else {
                f[a] = 1.0 - u[a];
                df[a] = -1.0;
            }
        }
        w[c] = f[0] * f[1] * f[2];
        dw[c] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
    }
    (w, dw)
}

#[derive(Clone, Debug)]
pub struct OctreeFeatureGrid {
    config: GridConfig,
    index: Vec<FxHashMap<u64, u32>>,
    keys: Vec<(u8, u64)>,
    geo: Vec<f64>,
    sem: Vec<f64>,
    bounds: Vec<Option<([i64; 3], [i64; 3])>>,
}

impl OctreeFeatureGrid {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.levels;
        Ok(OctreeFeatureGrid {
            config,
            index: vec![FxHashMap::default(); levels],
            keys: Vec::new(),
            geo: Vec::new(),
            sem: Vec::new(),
            bounds: vec![None; levels],
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    /// Number of allocated corners over all levels.
    pub fn rows(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn level_side(&self, level: usize) -> f64 {
        self.config.leaf_size * (1u64 << level) as f64
    }

    pub fn feature_dim(&self, table: FeatureTable) -> usize {
        match table {
            FeatureTable::Geometry => self.config.geo_dim,
            FeatureTable::Semantic => self.config.sem_dim,
        }
    }

    /// Width of the decoder input built from `table`.
    pub fn input_dim(&self, table: FeatureTable) -> usize {
        match self.config.merge {
            FeatureMerge::Concat => self.config.levels * self.feature_dim(table),
            FeatureMerge::Sum => self.feature_dim(table),
        }
    }

    pub fn features(&self, table: FeatureTable) -> &[f64] {
        match table {
            FeatureTable::Geometry => &self.geo,
            FeatureTable::Semantic => &self.sem,
        }
    }

    pub fn features_mut(&mut self, table: FeatureTable) -> &mut [f64] {
        match table {
            FeatureTable::Geometry => &mut self.geo,
            FeatureTable::Semantic => &mut self.sem,
        }
    }

    pub fn row_feature(&self, table: FeatureTable, row: u32) -> &[f64] {
        let dim = self.feature_dim(table);
        let start = row as usize * dim;
        &self.features(table)[start..start + dim]
    }

    pub fn row_feature_mut(&mut self, table: FeatureTable, row: u32) -> &mut [f64] {
        let dim = self.feature_dim(table);
        let start = row as usize * dim;
        &mut self.features_mut(table)[start..start + dim]
    }

    pub fn row_key(&self, row: u32) -> VoxelKey {
        let (level, code) = self.keys[row as usize];
        VoxelKey::from_code(level, code)
    }

    pub fn row_of(&self, key: &VoxelKey) -> Option<u32> {
        let code = key.code().ok()?;
        self.index.get(key.level as usize)?.get(&code).copied()
    }

    /// Per-level `(min, max)` corner coordinates of allocated keys.
    pub fn bounds(&self, level: usize) -> Option<([i64; 3], [i64; 3])> {
        self.bounds.get(level).copied().flatten()
    }

    /// Rows grouped by level, each group in allocation order.
    pub fn rows_by_level(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.config.levels];
        for (row, &(level, _)) in self.keys.iter().enumerate() {
            out[level as usize].push(row as u32);
        }
        out
    }

    pub fn row_code(&self, row: u32) -> (u8, u64) {
        self.keys[row as usize]
    }

    fn init_feature(&self, table: FeatureTable, level: u8, code: u64, out: &mut [f64]) {
        if self.config.init_std == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let salt = match table {
            FeatureTable::Geometry => 0x6765_6F00,
            FeatureTable::Semantic => 0x7365_6D00,
        };
        let mut rng = stream_rng(self.config.seed, mix64(code) ^ level as u64, salt);
        let normal = Normal::new(0.0, self.config.init_std).expect("finite std");
        for v in out.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }

    /// Insert a corner if absent; returns its row and whether it was new.
    fn insert_corner(&mut self, level: u8, c: [i64; 3]) -> Result<(u32, bool)> {
        let code = morton_encode(c[0], c[1], c[2])?;
        if let Some(&row) = self.index[level as usize].get(&code) {
            return Ok((row, false));
        }
        let row = self.keys.len() as u32;
        self.index[level as usize].insert(code, row);
        self.keys.push((level, code));
        let gd = self.config.geo_dim;
        let sd = self.config.sem_dim;
        let mut g = vec![0.0; gd];
        let mut s = vec![0.0; sd];
        self.init_feature(FeatureTable::Geometry, level, code, &mut g);
        self.init_feature(FeatureTable::Semantic, level, code, &mut s);
        self.geo.extend_from_slice(&g);
        self.sem.extend_from_slice(&s);
        let b = &mut self.bounds[level as usize];
        *b = Some(match *b {
            None => (c, c),
            Some((lo, hi)) => (
                [lo[0].min(c[0]), lo[1].min(c[1]), lo[2].min(c[2])],
                [hi[0].max(c[0]), hi[1].max(c[1]), hi[2].max(c[2])],
            ),
        });
        Ok((row, true))
    }

    /// Allocate the eight corners of the voxel containing each point at every
    /// retained level. Returns the number of newly created corners.
    pub fn allocate_for_points(&mut self, points: &[Vec3]) -> Result<usize> {
        let mut created = 0;
        for p in points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::contract(format!("non-finite point {p:?}")));
            }
            for level in 0..self.config.levels {
                let side = self.level_side(level);
                let base = [
                    locate(p[0], side).0,
                    locate(p[1], side).0,
                    locate(p[2], side).0,
                ];
                for c in 0..8 {
                    let corner = [
                        base[0] + (c & 1) as i64,
                        base[1] + ((c >> 1) & 1) as i64,
                        base[2] + ((c >> 2) & 1) as i64,
                    ];
                    if self.insert_corner(level as u8, corner)?.1 {
                        created += 1;
                    }
                }
            }
        }
        Ok(created)
    }

    /// Re-insert a corner with explicit feature values (snapshot loading).
    pub(crate) fn insert_with_features(
        &mut self,
        level: u8,
        code: u64,
        geo: &[f64],
        sem: &[f64],
    ) -> Result<()> {
        if level as usize >= self.config.levels {
            return Err(Error::contract(format!("level {level} out of range")));
        }
        let [ix, iy, iz] = morton_decode(code);
        let (row, fresh) = self.insert_corner(level, [ix, iy, iz])?;
        if !fresh {
            return Err(Error::contract(format!("duplicate corner {code} at level {level}")));
        }
        self.row_feature_mut(FeatureTable::Geometry, row).copy_from_slice(geo);
        self.row_feature_mut(FeatureTable::Semantic, row).copy_from_slice(sem);
        Ok(())
    }

    /// Trilinear stencil at one level; `None` if any corner is unallocated.
    pub fn level_stencil(&self, x: Vec3, level: usize) -> Option<LevelStencil> {
        let side = self.level_side(level);
        let (ix, ux) = locate(x[0], side);
        let (iy, uy) = locate(x[1], side);
        let (iz, uz) = locate(x[2], side);
        let map = &self.index[level];
        let mut rows = [0u32; 8];
        for (c, row) in rows.iter_mut().enumerate() {
            let code = morton_encode(
                ix + (c & 1) as i64,
                iy + ((c >> 1) & 1) as i64,
                iz + ((c >> 2) & 1) as i64,
            )
            .ok()?;
            *row = *map.get(&code)?;
        }
        let (weights, mut dweights) = trilinear_weights([ux, uy, uz]);
        let inv = 1.0 / side;
        for d in dweights.iter_mut() {
            for v in d.iter_mut() {
                *v *= inv;
            }
        }
        Some(LevelStencil {
            rows,
            weights,
            dweights,
        })
    }

    /// Fill `out` with the stencils of every level; returns `false` when the
    /// finest level is absent (the point is outside the mapped region).
    pub fn stencil_into(&self, x: Vec3, out: &mut Stencil) -> bool {
        let levels = self.config.levels;
        out.slots.clear();
        out.slots.resize(levels, None);
        let finest = match self.level_stencil(x, 0) {
            Some(s) => s,
            None => return false,
        };
        out.slots[levels - 1] = Some(finest);
        for level in 1..levels {
            out.slots[levels - 1 - level] = self.level_stencil(x, level);
        }
        true
    }

    pub fn stencil(&self, x: Vec3) -> Option<Stencil> {
        let mut s = Stencil::default();
        self.stencil_into(x, &mut s).then_some(s)
    }

    /// Build the decoder input for `table` from a stencil. Absent coarse
    /// levels contribute zeros.
    pub fn assemble(&self, stencil: &Stencil, table: FeatureTable, out: &mut [f64]) {
        let dim = self.feature_dim(table);
        let feats = self.features(table);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (slot, st) in stencil.slots.iter().enumerate() {
            let Some(st) = st else { continue };
            let dst = match self.config.merge {
                FeatureMerge::Concat => &mut out[slot * dim..(slot + 1) * dim],
                FeatureMerge::Sum => &mut out[..dim],
            };
            for c in 0..8 {
                let w = st.weights[c];
                let src = &feats[st.rows[c] as usize * dim..(st.rows[c] as usize + 1) * dim];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }

    /// Spatial Jacobian of the decoder input: `out[j]` is the gradient of
    /// input coordinate `j` with respect to the query position.
    pub fn assemble_jacobian(&self, stencil: &Stencil, table: FeatureTable, out: &mut [[f64; 3]]) {
        let dim = self.feature_dim(table);
        let feats = self.features(table);
        out.iter_mut().for_each(|v| *v = [0.0; 3]);
        for (slot, st) in stencil.slots.iter().enumerate() {
            let Some(st) = st else { continue };
            let dst = match self.config.merge {
                FeatureMerge::Concat => &mut out[slot * dim..(slot + 1) * dim],
                FeatureMerge::Sum => &mut out[..dim],
            };
            for c in 0..8 {
                let dw = st.dweights[c];
                let src = &feats[st.rows[c] as usize * dim..(st.rows[c] as usize + 1) * dim];
                for (d, &s) in dst.iter_mut().zip(src) {
                    d[0] += dw[0] * s;
                    d[1] += dw[1] * s;
                    d[2] += dw[2] * s;
                }
            }
        }
    }

    /// Interpolated feature of one level.
    pub fn query_level_feature(&self, x: Vec3, level: usize, table: FeatureTable) -> Option<Vec<f64>> {
        let st = self.level_stencil(x, level)?;
        let dim = self.feature_dim(table);
        let feats = self.features(table);
        let mut out = vec![0.0; dim];
        for c in 0..8 {
            let src = &feats[st.rows[c] as usize * dim..(st.rows[c] as usize + 1) * dim];
            for (d, s) in out.iter_mut().zip(src) {
                *d += st.weights[c] * s;
            }
        }
        Some(out)
    }

    /// Decoder input at `x`, or `None` outside the finest allocated level.
    pub fn query_concat(&self, x: Vec3, table: FeatureTable) -> Option<Vec<f64>> {
        let st = self.stencil(x)?;
        let mut out = vec![0.0; self.input_dim(table)];
        self.assemble(&st, table, &mut out);
        Some(out)
    }

    /// Metric `(min, max)` of the finest level.
    pub fn metric_bounds(&self) -> Result<(Vec3, Vec3)> {
        let (lo, hi) = self.bounds(0).ok_or(Error::EmptyMap)?;
        let s = self.config.leaf_size;
        Ok((
            [lo[0] as f64 * s, lo[1] as f64 * s, lo[2] as f64 * s],
            [hi[0] as f64 * s, hi[1] as f64 * s, hi[2] as f64 * s],
        ))
    }

    /// Number of marching cubes of side `s_cube` covering the finest-level
    /// extent along each axis.
    pub fn map_cube_counts(&self, s_cube: f64) -> Result<[usize; 3]> {
        if !(s_cube.is_finite() && s_cube > 0.0) {
            return Err(Error::contract(format!("s_cube must be positive, got {s_cube}")));
        }
        let (lo, hi) = self.bounds(0).ok_or(Error::EmptyMap)?;
        let mut m = [0usize; 3];
        for a in 0..3 {
            let extent = (hi[a] - lo[a]) as f64 * self.config.leaf_size;
            m[a] = cube_count(extent, s_cube);
        }
        Ok(m)
    }
}

/// `ceil(extent / s_cube)`, tolerant of representation error in the ratio.
pub fn cube_count(extent: f64, s_cube: f64) -> usize {
    let r = extent / s_cube;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * r.abs().max(1.0) {
        n as usize
    } else {
        r.ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn grid(levels: usize) -> OctreeFeatureGrid {
        OctreeFeatureGrid::new(GridConfig {
            levels,
            ..GridConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn origin_round_trips() {
        let code = morton_encode(0, 0, 0).unwrap();
        assert_eq!(morton_decode(code), [0, 0, 0]);
        assert_eq!(morton_decode(0), [-MORTON_OFFSET; 3]);
        assert_eq!(morton_decode(morton_encode(3, -2, 7).unwrap()), [3, -2, 7]);
    }

    #[test]
    fn unit_offsets_flip_one_lane_bit() {
        let o = morton_encode(0, 0, 0).unwrap();
        let codes = [
            morton_encode(1, 0, 0).unwrap(),
            morton_encode(0, 1, 0).unwrap(),
            morton_encode(0, 0, 1).unwrap(),
        ];
        for (lane, c) in codes.iter().enumerate() {
            assert_eq!(c ^ o, 1 << lane);
        }
        let distinct: HashSet<_> = codes.iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(matches!(morton_encode(1 << 20, 0, 0), Err(Error::Range { .. })));
        assert!(matches!(morton_encode(0, -(1 << 20), 0), Err(Error::Range { .. })));
        assert!(morton_encode((1 << 20) - 1, -((1 << 20) - 1), 0).is_ok());
    }

    #[test]
    fn exhaustive_small_box_is_bijective() {
        let mut seen = HashSet::new();
        for x in -8..=8 {
            for y in -8..=8 {
                for z in -8..=8 {
                    let c = morton_encode(x, y, z).unwrap();
                    assert_eq!(morton_decode(c), [x, y, z]);
                    assert!(seen.insert(c));
                }
            }
        }
    }

    #[test]
    fn single_point_allocates_eight_corners_per_level() {
        let mut g = grid(3);
        assert_eq!(g.allocate_for_points(&[[0.05, 0.07, 0.11]]).unwrap(), 24);
        assert_eq!(g.allocate_for_points(&[[0.05, 0.07, 0.11]]).unwrap(), 0);
        assert_eq!(g.rows(), 24);
    }

    #[test]
    fn face_neighbours_share_four_leaf_corners() {
        let mut g = grid(1);
        let n = g.allocate_for_points(&[[0.1, 0.1, 0.1], [0.3, 0.1, 0.1]]).unwrap();
        // brute-force union of corner sets
        let mut set = HashSet::new();
        for base in [[0i64, 0, 0], [1, 0, 0]] {
            for c in 0..8i64 {
                set.insert([base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1)]);
            }
        }
        assert_eq!(n, set.len());
        assert_eq!(n, 12);
    }

    #[test]
    fn corner_query_returns_feature_verbatim() {
        let mut g = grid(3);
        g.allocate_for_points(&[[0.1, 0.1, 0.1]]).unwrap();
        let row = g.row_of(&VoxelKey::new(0, 0, 0, 0)).unwrap();
        let f = g.row_feature(FeatureTable::Geometry, row).to_vec();
        let q = g.query_level_feature([0.0, 0.0, 0.0], 0, FeatureTable::Geometry).unwrap();
        assert_eq!(q, f);
    }

    #[test]
    fn center_of_constant_field_is_constant() {
        let mut g = grid(1);
        g.allocate_for_points(&[[0.1, 0.1, 0.1]]).unwrap();
        for v in g.features_mut(FeatureTable::Semantic).iter_mut() {
            *v = 0.75;
        }
        let q = g.query_level_feature([0.1, 0.1, 0.1], 0, FeatureTable::Semantic).unwrap();
        assert!(q.iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn center_query_matches_weighted_sum_oracle() {
        let mut g = grid(1);
        g.allocate_for_points(&[[0.1, 0.1, 0.1]]).unwrap();
        for row in 0..g.rows() as u32 {
            let k = g.row_key(row);
            let xc = k.ix as f64 * 0.2;
            g.row_feature_mut(FeatureTable::Geometry, row).iter_mut().for_each(|v| *v = xc);
        }
        let x = [0.1, 0.1, 0.1];
        let q = g.query_level_feature(x, 0, FeatureTable::Geometry).unwrap();
        // oracle: explicit eight-term sum with hand-computed weights
        let mut oracle = 0.0;
        for c in 0..8i64 {
            let corner = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                let t = x[a] / 0.2;
                w *= if corner[a] == 1 { t } else { 1.0 - t };
            }
            oracle += w * corner[0] as f64 * 0.2;
        }
        assert!((q[0] - oracle).abs() < 1e-15);
        assert!((q[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn weights_partition_unity() {
        for u in [[0.3, 0.9, 0.01], [0.5, 0.5, 0.5], [0.999, 0.0, 0.42]] {
            let (w, dw) = trilinear_weights(u);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for a in 0..3 {
                assert!(dw.iter().map(|d| d[a]).sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_zero_fills_missing_coarse_level() {
        let mut g = grid(3);
        g.allocate_for_points(&[[0.1, 0.1, 0.1]]).unwrap();
        // drop the level-2 voxel by querying a point whose level-2 voxel differs
        // but whose level-0 and level-1 voxels are allocated: allocate only finer levels manually
        let mut h = grid(3);
        for c in 0..8i64 {
            for level in 0..2u8 {
                let code = morton_encode(c & 1, (c >> 1) & 1, (c >> 2) & 1).unwrap();
                h.insert_with_features(level, code, &[1.0; 8], &[2.0; 16]).unwrap();
            }
        }
        let q = h.query_concat([0.1, 0.1, 0.1], FeatureTable::Geometry).unwrap();
        assert_eq!(q.len(), 24);
        assert!(q[..8].iter().all(|&v| v == 0.0));
        assert!(q[8..].iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(g.query_concat([5.0, 5.0, 5.0], FeatureTable::Geometry).is_none());
    }

    #[test]
    fn cube_counts_follow_ceiling_rule() {
        let mut g = grid(1);
        g.allocate_for_points(&[[0.1, 0.1, 0.1], [9.9, 9.9, 9.9]]).unwrap();
        assert_eq!(g.map_cube_counts(0.1).unwrap(), [100, 100, 100]);
        assert_eq!(g.map_cube_counts(10.0).unwrap(), [1, 1, 1]);
        assert_eq!(cube_count(3.15, 0.1), 32);
        assert!(matches!(grid(1).map_cube_counts(0.1), Err(Error::EmptyMap)));
    }
}
