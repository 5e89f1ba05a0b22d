//! Marching cubes extraction of a labeled triangle mesh.
//!
//! The SDF is sampled at the corners of a regular cube lattice covering the
//! finest octree level. The lattice is processed in blocks; vertices are keyed
//! by their global lattice edge so blocks stitch without cracks. A cube with
//! any absent corner emits no surface.

mod ply;
mod tables;

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::model::NeuralMap;
use crate::palette::Palette;
use crate::util::{cross, norm, sub, Vec3};

pub use ply::{read_ply, write_ply};
use tables::{EDGE_TABLE, TRIANGLE_TABLE};

pub const DEFAULT_BLOCK: usize = 64;
const MIN_AREA: f64 = 1e-12;
/// Edge crossings this close to a corner (in units of the edge) are welded to it.
const SNAP: f64 = 1e-6;

fn snap(t: f64) -> f64 {
    if t < SNAP {
        0.0
    } else if t > 1.0 - SNAP {
        1.0
    } else {
        t
    }
}

/// Source of SDF samples; `None` marks a point outside the mapped region.
pub trait SdfField: Sync {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<Option<f64>>;
}

impl SdfField for NeuralMap {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<Option<f64>> {
        NeuralMap::sdf_batch(self, points)
    }
}

/// Closed-form SDF that bypasses the decoders.
pub struct AnalyticField<F>(pub F);

impl<F: Fn(Vec3) -> f64 + Sync> SdfField for AnalyticField<F> {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<Option<f64>> {
        points.par_iter().map(|&p| Some((self.0)(p))).collect()
    }
}

/// Regular lattice of `counts` cubes of side `s_cube` starting at `origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubeLattice {
    pub origin: Vec3,
    pub s_cube: f64,
    pub counts: [usize; 3],
}

impl CubeLattice {
    /// Lattice spanning the finest level of the map; `None` for an empty map.
    pub fn for_map(map: &NeuralMap, s_cube: f64) -> Result<Option<Self>> {
        if map.grid.is_empty() {
            return Ok(None);
        }
        let counts = map.grid.map_cube_counts(s_cube)?;
        let (origin, _) = map.grid.metric_bounds()?;
        Ok(Some(CubeLattice { origin, s_cube, counts }))
    }

    /// Lattice covering the box `[lo, hi]`.
    pub fn covering(lo: Vec3, hi: Vec3, s_cube: f64) -> Result<Self> {
        if !(s_cube.is_finite() && s_cube > 0.0) {
            return Err(Error::contract(format!("s_cube must be positive, got {s_cube}")));
        }
        let mut counts = [0; 3];
        for a in 0..3 {
            if !(hi[a] >= lo[a]) {
                return Err(Error::contract("lattice box has hi < lo"));
            }
            counts[a] = crate::octree::cube_count(hi[a] - lo[a], s_cube);
        }
        Ok(CubeLattice { origin: lo, s_cube, counts })
    }

    fn corner(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + i as f64 * self.s_cube,
            self.origin[1] + j as f64 * self.s_cube,
            self.origin[2] + k as f64 * self.s_cube,
        ]
    }

    /// Vertex key: `slot` 0..3 is the edge along that axis, 3 the corner itself.
    fn vertex_key(&self, c: [usize; 3], slot: usize) -> u64 {
        let ny = self.counts[1] as u64 + 1;
        let nz = self.counts[2] as u64 + 1;
        ((c[0] as u64 * ny + c[1] as u64) * nz + c[2] as u64) * 4 + slot as u64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Unnormalized face normal `(b - a) x (c - a)`.
    pub fn face_normal(&self, t: [u32; 3]) -> Vec3 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn total_area(&self) -> f64 {
        self.triangles.iter().map(|&t| self.triangle_area(t)).sum()
    }

    fn edge_uses(&self) -> FxHashMap<(u32, u32), usize> {
        let mut uses = FxHashMap::default();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        uses
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let uses = self.edge_uses();
        let mut seen = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                seen[i as usize] = true;
            }
        }
        let v = seen.iter().filter(|&&s| s).count() as i64;
        v - uses.len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_uses().values().all(|&n| n == 2)
    }

    /// Keeps the triangles selected by `keep` and drops unreferenced vertices.
    /// Returns the new-to-old vertex map.
    fn retain(&mut self, keep: impl Fn(usize, [u32; 3]) -> bool) -> Vec<u32> {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut order = Vec::new();
        let mut tris = Vec::with_capacity(self.triangles.len());
        for (i, &t) in self.triangles.iter().enumerate() {
            if !keep(i, t) {
                continue;
            }
            tris.push(t.map(|v| {
                let r = &mut remap[v as usize];
                if *r == u32::MAX {
                    *r = order.len() as u32;
                    order.push(v);
                }
                *r
            }));
        }
        self.vertices = order.iter().map(|&v| self.vertices[v as usize]).collect();
        self.triangles = tris;
        order
    }
}

// Bourke numbering: corner offsets and, per edge, start corner and axis.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

struct BlockMesh {
    keys: Vec<u64>,
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

/// Marching cubes over `lattice`, in blocks of `block` cubes per axis.
pub fn extract_mesh_blocks(field: &dyn SdfField, lattice: &CubeLattice, iso: f64, block: usize) -> Result<TriMesh> {
    if block == 0 {
        return Err(Error::contract("block size must be positive"));
    }
    if !(lattice.s_cube.is_finite() && lattice.s_cube > 0.0) {
        return Err(Error::contract(format!("s_cube must be positive, got {}", lattice.s_cube)));
    }
    let nb = lattice.counts.map(|n| n.div_ceil(block));
    let blocks: Vec<[usize; 3]> = (0..nb[0])
        .flat_map(|i| (0..nb[1]).flat_map(move |j| (0..nb[2]).map(move |k| [i, j, k])))
        .collect();
    let parts: Vec<BlockMesh> = blocks
        .par_iter()
        .map(|b| {
            let lo = [0, 1, 2].map(|a| b[a] * block);
            let hi = [0, 1, 2].map(|a| ((b[a] + 1) * block).min(lattice.counts[a]));
            march_block(field, lattice, iso, lo, hi)
        })
        .collect();

    let mut mesh = TriMesh::default();
    let mut global: FxHashMap<u64, u32> = FxHashMap::default();
    for part in parts {
        let ids: Vec<u32> = part
            .keys
            .iter()
            .zip(&part.vertices)
            .map(|(&key, &v)| {
                *global.entry(key).or_insert_with(|| {
                    mesh.vertices.push(v);
                    (mesh.vertices.len() - 1) as u32
                })
            })
            .collect();
        mesh.triangles
            .extend(part.triangles.iter().map(|t| t.map(|v| ids[v as usize])));
    }
    collapse_slivers(&mut mesh);
    Ok(mesh)
}

/// Removes triangles below `MIN_AREA` by collapsing their shortest edge, so
/// the surface stays closed where it was closed.
fn collapse_slivers(mesh: &mut TriMesh) {
    let distinct = |t: &[u32; 3]| t[0] != t[1] && t[1] != t[2] && t[0] != t[2];
    mesh.retain(|_, t| distinct(&t));
    loop {
        let mut parent: Vec<u32> = (0..mesh.vertices.len() as u32).collect();
        fn root(p: &mut [u32], mut v: u32) -> u32 {
            while p[v as usize] != v {
                p[v as usize] = p[p[v as usize] as usize];
                v = p[v as usize];
            }
            v
        }
        let mut merged = false;
        for &t in &mesh.triangles {
            if mesh.triangle_area(t) >= MIN_AREA {
                continue;
            }
            let (a, b) = (0..3)
                .map(|e| (t[e], t[(e + 1) % 3]))
                .min_by(|x, y| {
                    let dx = crate::util::dist(mesh.vertices[x.0 as usize], mesh.vertices[x.1 as usize]);
                    let dy = crate::util::dist(mesh.vertices[y.0 as usize], mesh.vertices[y.1 as usize]);
                    dx.total_cmp(&dy)
                })
                .unwrap();
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb) as usize] = ra.min(rb);
                merged = true;
            }
        }
        if !merged {
            break;
        }
        for t in &mut mesh.triangles {
            *t = t.map(|v| root(&mut parent, v));
        }
        mesh.retain(|_, t| distinct(&t));
    }
}

pub fn extract_mesh(field: &dyn SdfField, lattice: &CubeLattice, iso: f64) -> Result<TriMesh> {
    extract_mesh_blocks(field, lattice, iso, DEFAULT_BLOCK)
}

/// Zero level set of the map's geometry field; an empty map gives an empty mesh.
pub fn extract_map_mesh(map: &NeuralMap, s_cube: f64, iso: f64) -> Result<TriMesh> {
    match CubeLattice::for_map(map, s_cube)? {
        Some(lattice) => extract_mesh(map, &lattice, iso),
        None => Ok(TriMesh::default()),
    }
}

fn march_block(field: &dyn SdfField, lat: &CubeLattice, iso: f64, lo: [usize; 3], hi: [usize; 3]) -> BlockMesh {
    let n = [0, 1, 2].map(|a| hi[a] - lo[a] + 1);
    let mut points = Vec::with_capacity(n[0] * n[1] * n[2]);
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                points.push(lat.corner(lo[0] + i, lo[1] + j, lo[2] + k));
            }
        }
    }
    let values = field.sdf_batch(&points);
    let at = |c: [usize; 3]| values[(c[0] * n[1] + c[1]) * n[2] + c[2]];

    let mut out = BlockMesh {
        keys: Vec::new(),
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    let mut local: FxHashMap<u64, u32> = FxHashMap::default();
    let mut corner_vals = [0.0; 8];
    for i in 0..n[0] - 1 {
        for j in 0..n[1] - 1 {
            'cube: for k in 0..n[2] - 1 {
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    match at([i + off[0], j + off[1], k + off[2]]) {
                        Some(v) if v.is_finite() => corner_vals[c] = v,
                        _ => continue 'cube,
                    }
                    if corner_vals[c] < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for (e, &(off, axis)) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let a = [i + off[0], j + off[1], k + off[2]];
                    let mut b = a;
                    b[axis] += 1;
                    let mut g = [lo[0] + a[0], lo[1] + a[1], lo[2] + a[2]];
                    let (va, vb) = (at(a).unwrap(), at(b).unwrap());
                    let t = snap(((iso - va) / (vb - va)).clamp(0.0, 1.0));
                    // A crossing at a corner is shared by every edge meeting
                    // there.
                    let key = if t == 0.0 {
                        lat.vertex_key(g, 3)
                    } else if t == 1.0 {
                        g[axis] += 1;
                        lat.vertex_key(g, 3)
                    } else {
                        lat.vertex_key(g, axis)
                    };
                    edge_vertex[e] = *local.entry(key).or_insert_with(|| {
                        let mut p = lat.corner(g[0], g[1], g[2]);
                        if t > 0.0 && t < 1.0 {
                            p[axis] += t * lat.s_cube;
                        }
                        out.keys.push(key);
                        out.vertices.push(p);
                        (out.vertices.len() - 1) as u32
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let [a, b, c] = [tri[0], tri[1], tri[2]].map(|e| edge_vertex[e as usize]);
                    // Reverse the table order so normals face positive SDF.
                    out.triangles.push([a, c, b]);
                }
            }
        }
    }
    out
}

/// Triangle mesh with one class and instance label per vertex.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticMesh {
    pub mesh: TriMesh,
    pub classes: Vec<u16>,
    pub instances: Vec<u32>,
    pub colors: Vec<[u8; 3]>,
}

impl SemanticMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.mesh.vertices.len();
        if self.classes.len() != n || self.instances.len() != n || self.colors.len() != n {
            return Err(Error::contract("per-vertex label arrays do not match vertex count"));
        }
        if let Some(t) = self.mesh.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::contract(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(())
    }

    /// Triangles whose three vertices share `class`.
    pub fn triangles_with_class(&self, class: u16) -> usize {
        self.mesh
            .triangles
            .iter()
            .filter(|t| t.iter().all(|&v| self.classes[v as usize] == class))
            .count()
    }
}

/// Labels every vertex with the map's class (and instance for things);
/// vertices outside the map get class 0.
pub fn label_mesh(mesh: TriMesh, map: &NeuralMap, palette: &Palette) -> SemanticMesh {
    let labels = map.labels_batch(&mesh.vertices);
    let (classes, instances): (Vec<u16>, Vec<u32>) = labels.into_iter().map(|l| l.unwrap_or((0, 0))).unzip();
    let colors = classes.iter().map(|&c| palette.color(c)).collect();
    SemanticMesh {
        mesh,
        classes,
        instances,
        colors,
    }
}

/// Drops triangles whose vertices all carry a dynamic class.
pub fn filter_dynamic(mesh: &SemanticMesh, dynamic: &[u16], classes: usize) -> Result<SemanticMesh> {
    if let Some(bad) = dynamic.iter().find(|&&c| c as usize >= classes) {
        return Err(Error::config(format!("dynamic class {bad} is not one of the {classes} classes")));
    }
    if dynamic.is_empty() {
        return Ok(mesh.clone());
    }
    let is_dyn: Vec<bool> = mesh.classes.iter().map(|c| dynamic.contains(c)).collect();
    let mut out = mesh.mesh.clone();
    let order = out.retain(|_, t| !t.iter().all(|&v| is_dyn[v as usize]));
    Ok(SemanticMesh {
        mesh: out,
        classes: order.iter().map(|&v| mesh.classes[v as usize]).collect(),
        instances: order.iter().map(|&v| mesh.instances[v as usize]).collect(),
        colors: order.iter().map(|&v| mesh.colors[v as usize]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{dot, scale};

    fn sphere(r: f64) -> AnalyticField<impl Fn(Vec3) -> f64 + Sync> {
        AnalyticField(move |p: Vec3| norm(p) - r)
    }

    #[test]
    fn sphere_is_closed_genus_zero_and_accurate() {
        let lat = CubeLattice::covering([-1.5; 3], [1.5; 3], 0.05).unwrap();
        // Small blocks force many seams.
        let m = extract_mesh_blocks(&sphere(1.0), &lat, 0.0, 16).unwrap();
        assert!(m.triangles.len() > 1000);
        for v in &m.vertices {
            assert!((norm(*v) - 1.0).abs() < 5e-3, "vertex {v:?}");
        }
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_watertight());
        let area = m.total_area();
        assert!((area - 4.0 * std::f64::consts::PI).abs() < 0.02 * area);
    }

    #[test]
    fn block_size_does_not_change_the_surface() {
        let lat = CubeLattice::covering([-1.2; 3], [1.3; 3], 0.1).unwrap();
        let a = extract_mesh_blocks(&sphere(1.0), &lat, 0.0, 7).unwrap();
        let b = extract_mesh_blocks(&sphere(1.0), &lat, 0.0, 64).unwrap();
        assert_eq!(a.triangles.len(), b.triangles.len());
        assert_eq!(a.vertices.len(), b.vertices.len());
        assert!((a.total_area() - b.total_area()).abs() < 1e-9);
    }

    #[test]
    fn normals_point_toward_positive_sdf() {
        let m = extract_mesh(&sphere(1.0), &CubeLattice::covering([-1.5; 3], [1.5; 3], 0.1).unwrap(), 0.0).unwrap();
        for &t in &m.triangles {
            let centroid = scale(
                t.iter().fold([0.0; 3], |a, &i| crate::util::add(a, m.vertices[i as usize])),
                1.0 / 3.0,
            );
            assert!(dot(m.face_normal(t), centroid) > 0.0);
        }
    }

    #[test]
    fn plane_vertices_are_exact() {
        let z0 = 0.237;
        let f = AnalyticField(move |p: Vec3| p[2] - z0);
        let m = extract_mesh(&f, &CubeLattice::covering([-1.0; 3], [1.0; 3], 0.1).unwrap(), 0.0).unwrap();
        assert!(!m.is_empty());
        for v in &m.vertices {
            assert!((v[2] - z0).abs() < 1e-6);
        }
        for &t in &m.triangles {
            assert!(m.face_normal(t)[2] > 0.0);
        }
        assert!((m.total_area() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn positive_field_gives_no_triangles() {
        let f = AnalyticField(|p: Vec3| 1.0 + p[0].abs());
        let m = extract_mesh(&f, &CubeLattice::covering([-1.0; 3], [1.0; 3], 0.1).unwrap(), 0.0).unwrap();
        assert!(m.triangles.is_empty() && m.vertices.is_empty());
    }

    struct Holey;
    impl SdfField for Holey {
        fn sdf_batch(&self, points: &[Vec3]) -> Vec<Option<f64>> {
            points.iter().map(|p| (p[0] < 0.0).then_some(norm(*p) - 1.0)).collect()
        }
    }

    #[test]
    fn absent_corners_emit_no_surface() {
        let lat = CubeLattice::covering([-1.5; 3], [1.5; 3], 0.1).unwrap();
        let m = extract_mesh(&Holey, &lat, 0.0).unwrap();
        assert!(!m.is_empty());
        assert!(m.vertices.iter().all(|v| v[0] < 0.0 && (norm(*v) - 1.0).abs() < 0.01));
        assert!(!m.is_watertight());
    }

    #[test]
    fn table_edges_match_triangle_edges_and_sign_changes() {
        for case in 0..256usize {
            let mut used = 0u16;
            for &e in TRIANGLE_TABLE[case].iter().take_while(|&&e| e >= 0) {
                used |= 1 << e;
            }
            let mut crossing = 0u16;
            for (e, &(off, axis)) in EDGES.iter().enumerate() {
                let mut b = off;
                b[axis] += 1;
                let ci = CORNERS.iter().position(|c| *c == off).unwrap();
                let cj = CORNERS.iter().position(|c| *c == b).unwrap();
                if (case >> ci) & 1 != (case >> cj) & 1 {
                    crossing |= 1 << e;
                }
            }
            assert_eq!(EDGE_TABLE[case], used, "case {case}");
            assert_eq!(EDGE_TABLE[case], crossing, "case {case}");
        }
    }

    fn labeled(classes: Vec<u16>) -> SemanticMesh {
        let n = classes.len();
        SemanticMesh {
            mesh: TriMesh {
                vertices: (0..n).map(|i| [i as f64, (i * i) as f64, 0.0]).collect(),
                triangles: vec![[0, 1, 2], [1, 2, 3], [2, 3, 4]],
            },
            instances: vec![0; n],
            colors: vec![[0; 3]; n],
            classes,
        }
    }

    #[test]
    fn dynamic_filter_cases() {
        let m = labeled(vec![1, 1, 1, 9, 9]);
        assert_eq!(filter_dynamic(&m, &[], 20).unwrap(), m);
        let f = filter_dynamic(&m, &[1], 20).unwrap();
        assert_eq!(f.mesh.triangles.len(), 2);
        f.validate().unwrap();
        assert_eq!(f.mesh.vertices.len(), 4);
        let all: Vec<u16> = (0..20).collect();
        assert!(filter_dynamic(&m, &all, 20).unwrap().mesh.is_empty());
        assert!(matches!(filter_dynamic(&m, &[20], 20), Err(Error::Config(_))));
    }
}
