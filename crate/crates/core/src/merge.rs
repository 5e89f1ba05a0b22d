//! Submap alignment and fusion: normal estimation, point-to-plane ICP with
//! gated correspondences, and mesh-level merging into the first submap's frame.

use nalgebra::{Matrix3, Matrix6, Rotation3, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use rustc_hash::FxHashSet;

use crate::error::{Error, Result};
use crate::eval::{sample_surface_indexed, SpatialHash};
use crate::mesh::{SemanticMesh, TriMesh};
use crate::sampler::Pose;
use crate::util::{add, dot, norm, scale, sub, Vec3};

fn v3(p: Vec3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn arr(v: Vector3<f64>) -> Vec3 {
    [v.x, v.y, v.z]
}

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.check(1e-6)?;
        Ok(t)
    }

    /// Rotation of `angle` radians about `axis`, then translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(v3(axis)), angle);
        RigidTransform {
            rotation: *r.matrix(),
            translation: v3(translation),
        }
    }

    pub fn from_pose(pose: &Pose) -> Result<Self> {
        crate::sampler::validate_rigid(pose, 1e-6)?;
        let rotation = Matrix3::from_fn(|i, j| pose[i][j]);
        Self::new(rotation, Vector3::new(pose[0][3], pose[1][3], pose[2][3]))
    }

    pub fn to_pose(&self) -> Pose {
        let mut p = crate::sampler::IDENTITY_POSE;
        for i in 0..3 {
            for j in 0..3 {
                p[i][j] = self.rotation[(i, j)];
            }
            p[i][3] = self.translation[i];
        }
        p
    }

    /// `R^T R = I` within `tol` and `det R = +1`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let e = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(e <= tol) || !((r.determinant() - 1.0).abs() <= tol) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::contract(format!("not a rigid transform (orthogonality error {e:.3e})")));
        }
        Ok(())
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        arr(self.rotation * v3(p) + self.translation)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        arr(self.rotation * v3(v))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Nearest proper rotation (SVD projection).
    pub fn orthonormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        d[(2, 2)] = (u * vt).determinant().signum();
        RigidTransform {
            rotation: u * d * vt,
            translation: self.translation,
        }
    }

    /// Rotation angle (radians) and translation distance between two transforms.
    pub fn difference(&self, other: &RigidTransform) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.angle(), (self.translation - other.translation).norm())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceNormal {
    pub normal: Vec3,
    /// `λ0 / (λ0 + λ1 + λ2)` of the neighborhood covariance.
    pub curvature: f64,
}

/// Grid cell for neighbor searches over roughly `k` points of a surface sample.
fn neighbor_cell(points: &[Vec3], k: usize) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-6)).collect();
    ext.sort_by(|a, b| b.total_cmp(a));
    (ext[0] * ext[1] * k as f64 / points.len() as f64).sqrt().max(1e-6)
}

/// Per-point normals from the `k` nearest neighbors (including the point).
/// Each normal is flipped toward its viewpoint: `viewpoints` holds either one
/// sensor origin or one viewpoint per point. Rank-deficient neighborhoods
/// give `None`.
pub fn estimate_normals(points: &[Vec3], k: usize, viewpoints: &[Vec3]) -> Result<Vec<Option<SurfaceNormal>>> {
    if k < 3 || points.len() < k + 1 {
        return Err(Error::contract(format!(
            "normal estimation needs k >= 3 and at least k + 1 points (k = {k}, {} points)",
            points.len()
        )));
    }
    if viewpoints.len() != 1 && viewpoints.len() != points.len() {
        return Err(Error::contract("viewpoints must hold one origin or one per point"));
    }
    let index = SpatialHash::new(points.to_vec(), neighbor_cell(points, k)).map_err(|e| Error::contract(e.to_string()))?;
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let nn = index.k_nearest(p, k);
            let mut mean = Vector3::zeros();
            for &(j, _) in &nn {
                mean += v3(points[j]);
            }
            mean /= nn.len() as f64;
            let mut cov = Matrix3::zeros();
            for &(j, _) in &nn {
                let d = v3(points[j]) - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut order = [0, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let l = order.map(|o| eig.eigenvalues[o].max(0.0));
            let total = l[0] + l[1] + l[2];
            if !(total > 0.0) || l[1] <= 1e-10 * total {
                return None;
            }
            let mut n = arr(eig.eigenvectors.column(order[0]).into_owned());
            let view = if viewpoints.len() == 1 { viewpoints[0] } else { viewpoints[i] };
            if dot(n, sub(view, p)) < 0.0 {
                n = scale(n, -1.0);
            }
            Some(SurfaceNormal {
                normal: n,
                curvature: l[0] / total,
            })
        })
        .collect())
}

/// Points with optional normals.
#[derive(Clone, Debug, Default)]
pub struct OrientedCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Option<SurfaceNormal>>,
}

impl OrientedCloud {
    pub fn from_points(points: Vec<Vec3>, k: usize, viewpoints: &[Vec3]) -> Result<Self> {
        let normals = estimate_normals(&points, k, viewpoints)?;
        Ok(OrientedCloud { points, normals })
    }

    /// Area-weighted mesh samples; each normal is oriented by its source
    /// triangle, which faces free space.
    pub fn from_mesh(mesh: &SemanticMesh, n: usize, k: usize, seed: u64) -> Result<Self> {
        let (samples, tri) = sample_surface_indexed(mesh, n, seed)?;
        let views: Vec<Vec3> = samples
            .points
            .iter()
            .zip(&tri)
            .map(|(&p, &t)| {
                let f = mesh.mesh.face_normal(mesh.mesh.triangles[t as usize]);
                add(p, scale(f, 1.0 / norm(f).max(1e-300)))
            })
            .collect();
        Self::from_points(samples.points, k, &views)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop when the update (rotation radians plus translation meters) is below this.
    pub tol: f64,
    pub max_distance: f64,
    pub max_normal_angle_deg: f64,
    pub min_correspondences: usize,
    /// Smallest-to-largest eigenvalue ratio of the scaled normal matrix below
    /// which the problem is reported degenerate.
    pub degeneracy_ratio: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iter: 50,
            tol: 1e-7,
            max_distance: 1.0,
            max_normal_angle_deg: 30.0,
            min_correspondences: 50,
            degeneracy_ratio: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates into the target frame.
    pub transform: RigidTransform,
    /// RMS point-to-plane residual of the final correspondences, meters.
    pub rms: f64,
    pub correspondences: usize,
    pub iterations: usize,
    pub converged: bool,
    /// RMS residual at every accepted iterate; non-increasing.
    pub history: Vec<f64>,
    /// Set when the problem is rank deficient; names the weakest direction.
    pub degeneracy: Option<String>,
}

struct Correspondences {
    /// Transformed source point, target point, target normal.
    pairs: Vec<(Vec3, Vec3, Vec3)>,
    rms: f64,
}

fn correspond(
    source: &OrientedCloud,
    target: &OrientedCloud,
    index: &SpatialHash,
    ids: &[usize],
    x: &RigidTransform,
    cfg: &IcpConfig,
) -> Correspondences {
    let cos_gate = cfg.max_normal_angle_deg.to_radians().cos();
    let pairs: Vec<(Vec3, Vec3, Vec3)> = source
        .points
        .par_iter()
        .zip(&source.normals)
        .filter_map(|(&p, n)| {
            let n = n.as_ref()?;
            let q = x.apply(p);
            let (j, _) = index.nearest_within(q, cfg.max_distance)?;
            let t = &target.normals[ids[j]].as_ref().unwrap();
            (dot(x.rotate(n.normal), t.normal) >= cos_gate).then_some((q, target.points[ids[j]], t.normal))
        })
        .collect();
    let ss: f64 = pairs.iter().map(|(q, t, n)| dot(*n, sub(*q, *t)).powi(2)).sum();
    let rms = (ss / pairs.len().max(1) as f64).sqrt();
    Correspondences { pairs, rms }
}

/// Point-to-plane ICP from `source` to `target`, starting at `init`.
///
/// Each iteration linearizes the rotation about the correspondence centroid
/// and solves the 6x6 normal equations. A step that would raise the residual
/// is rejected and ends the iteration.
pub fn icp_point_to_plane(
    source: &OrientedCloud,
    target: &OrientedCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    let fail = |d: String| Error::Alignment {
        pair: "source->target".into(),
        detail: d,
    };
    let ids: Vec<usize> = (0..target.len()).filter(|&i| target.normals[i].is_some()).collect();
    if ids.len() < cfg.min_correspondences {
        return Err(fail(format!("target has only {} points with valid normals", ids.len())));
    }
    let index = SpatialHash::new(ids.iter().map(|&i| target.points[i]).collect(), cfg.max_distance)
        .map_err(|e| fail(e.to_string()))?;

    let mut x = init.orthonormalized();
    let mut history: Vec<f64> = Vec::new();
    let mut accepted: Option<(RigidTransform, usize)> = None;
    let mut converged = false;
    let mut degeneracy = None;
    let mut small_step = false;
    let mut iterations = 0;
    loop {
        let c = correspond(source, target, &index, &ids, &x, cfg);
        if c.pairs.len() < cfg.min_correspondences {
            if let Some((prev, _)) = accepted {
                // The last step moved out of overlap; keep the previous iterate.
                x = prev;
                converged = true;
                break;
            }
            return Err(fail(format!(
                "{} valid correspondences (< {}) within {} m and {} deg",
                c.pairs.len(),
                cfg.min_correspondences,
                cfg.max_distance,
                cfg.max_normal_angle_deg
            )));
        }
        if let (Some(&last), Some((prev, _))) = (history.last(), accepted) {
            if c.rms > last {
                x = prev;
                converged = true;
                break;
            }
        }
        history.push(c.rms);
        accepted = Some((x, c.pairs.len()));
        if small_step {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }
        iterations += 1;

        let mut centroid = Vector3::zeros();
        for (q, _, _) in &c.pairs {
            centroid += v3(*q);
        }
        centroid /= c.pairs.len() as f64;
        let scale_len = (c.pairs.iter().map(|(q, _, _)| (v3(*q) - centroid).norm_squared()).sum::<f64>()
            / c.pairs.len() as f64)
            .sqrt()
            .max(1e-9);
        let mut a = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for (q, t, n) in &c.pairs {
            let p = v3(*q) - centroid;
            let nv = v3(*n);
            let pc = p.cross(&nv);
            let j = Vector6::new(pc.x, pc.y, pc.z, nv.x, nv.y, nv.z);
            let r = nv.dot(&(v3(*q) - v3(*t)));
            a += j * j.transpose();
            b += j * r;
        }
        // Rotation columns divided by the lever arm for a unit-consistent spectrum.
        let inv = 1.0 / scale_len;
        let d = Matrix6::from_diagonal(&Vector6::new(inv, inv, inv, 1.0, 1.0, 1.0));
        let scaled = d * a * d;
        let eig = SymmetricEigen::new(scaled);
        let (mut imin, mut imax) = (0, 0);
        for i in 1..6 {
            if eig.eigenvalues[i] < eig.eigenvalues[imin] {
                imin = i;
            }
            if eig.eigenvalues[i] > eig.eigenvalues[imax] {
                imax = i;
            }
        }
        let ratio = eig.eigenvalues[imin] / eig.eigenvalues[imax];
        if !(ratio >= cfg.degeneracy_ratio) {
            let w = eig.eigenvectors.column(imin);
            degeneracy = Some(format!(
                "rank-deficient constraints (eigenvalue ratio {ratio:.2e}); weakest direction rotation [{:.3}, {:.3}, {:.3}] translation [{:.3}, {:.3}, {:.3}]",
                w[0], w[1], w[2], w[3], w[4], w[5]
            ));
            break;
        }
        let Some(step) = a.cholesky().map(|ch| ch.solve(&(-b))) else {
            degeneracy = Some("normal equations are not positive definite".into());
            break;
        };
        let omega = Vector3::new(step[0], step[1], step[2]);
        let v = Vector3::new(step[3], step[4], step[5]);
        let r = Rotation3::new(omega);
        // q -> R (q - c) + c + v
        let delta = RigidTransform {
            rotation: *r.matrix(),
            translation: centroid - r * centroid + v,
        };
        x = delta.compose(&x).orthonormalized();
        small_step = omega.norm() + v.norm() < cfg.tol;
    }
    let (_, n_corr) = accepted.expect("at least one accepted iterate");
    Ok(IcpResult {
        transform: x,
        rms: *history.last().unwrap(),
        correspondences: n_corr,
        iterations,
        converged: converged && degeneracy.is_none(),
        history,
        degeneracy,
    })
}

pub fn transform_mesh(mesh: &SemanticMesh, t: &RigidTransform) -> SemanticMesh {
    let mut out = mesh.clone();
    for v in &mut out.mesh.vertices {
        *v = t.apply(*v);
    }
    out
}

/// A submap: its mesh in its own frame, the estimated pose of that frame in
/// the world, and its scan range `[start, end)`.
#[derive(Clone, Debug)]
pub struct Submap {
    pub mesh: SemanticMesh,
    pub reference: RigidTransform,
    pub scans: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeConfig {
    pub icp: IcpConfig,
    /// Surface samples per submap used for alignment.
    pub samples: usize,
    pub normal_k: usize,
    /// Overlap deduplication cell, meters.
    pub s_cube: f64,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            icp: IcpConfig::default(),
            samples: 30_000,
            normal_k: 16,
            s_cube: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MergeReport {
    pub mesh: SemanticMesh,
    /// Transform of each submap into submap 0's frame.
    pub transforms: Vec<RigidTransform>,
    /// Alignment of submap `i + 1` onto submap `i`.
    pub pairs: Vec<IcpResult>,
}

/// Aligns consecutive submaps, chains the transforms into submap 0's frame and
/// concatenates the meshes, dropping later triangles that fall next to
/// geometry an earlier submap already covers.
pub fn merge_submaps(submaps: &[Submap], cfg: &MergeConfig) -> Result<MergeReport> {
    let Some(first) = submaps.first() else {
        return Err(Error::config("merge needs at least one submap"));
    };
    if !(cfg.s_cube.is_finite() && cfg.s_cube > 0.0) {
        return Err(Error::config(format!("s_cube must be positive, got {}", cfg.s_cube)));
    }
    for (i, w) in submaps.windows(2).enumerate() {
        let overlap = w[0].scans.1.min(w[1].scans.1) as i64 - w[0].scans.0.max(w[1].scans.0) as i64;
        if overlap < 1 {
            return Err(Error::config(format!(
                "submaps {i} and {} share no scan ({:?} vs {:?})",
                i + 1,
                w[0].scans,
                w[1].scans
            )));
        }
    }
    if submaps.len() == 1 {
        return Ok(MergeReport {
            mesh: first.mesh.clone(),
            transforms: vec![RigidTransform::identity()],
            pairs: Vec::new(),
        });
    }
    let clouds: Vec<OrientedCloud> = submaps
        .par_iter()
        .enumerate()
        .map(|(i, s)| OrientedCloud::from_mesh(&s.mesh, cfg.samples, cfg.normal_k, crate::util::mix64(cfg.seed ^ i as u64)))
        .collect::<Result<_>>()?;
    let pairs: Vec<IcpResult> = (1..submaps.len())
        .into_par_iter()
        .map(|i| {
            let init = submaps[i - 1].reference.inverse().compose(&submaps[i].reference);
            icp_point_to_plane(&clouds[i], &clouds[i - 1], &init, &cfg.icp).map_err(|e| match e {
                Error::Alignment { detail, .. } => Error::Alignment {
                    pair: format!("{}<-{}", i - 1, i),
                    detail,
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    for (i, p) in pairs.iter().enumerate() {
        if let Some(d) = &p.degeneracy {
            log::warn!("alignment {}<-{}: {d}", i, i + 1);
        }
    }
    let mut transforms = vec![RigidTransform::identity()];
    for p in &pairs {
        let prev = *transforms.last().unwrap();
        transforms.push(prev.compose(&p.transform).orthonormalized());
    }

    let cell = |p: Vec3| p.map(|v| (v / cfg.s_cube).floor() as i64);
    let mut occupied: FxHashSet<[i64; 3]> = FxHashSet::default();
    let mut out = SemanticMesh::default();
    for (s, t) in submaps.iter().zip(&transforms) {
        let m = transform_mesh(&s.mesh, t);
        let near_earlier = |p: Vec3| {
            let c = cell(p);
            (-1..=1).any(|dx| (-1..=1).any(|dy| (-1..=1).any(|dz| occupied.contains(&[c[0] + dx, c[1] + dy, c[2] + dz]))))
        };
        let centroid = |tri: [u32; 3]| scale(tri.iter().fold([0.0; 3], |a, &i| add(a, m.mesh.vertices[i as usize])), 1.0 / 3.0);
        let keep: Vec<bool> = m.mesh.triangles.iter().map(|&tri| !near_earlier(centroid(tri))).collect();
        let base = out.mesh.vertices.len() as u32;
        let mut remap = vec![u32::MAX; m.mesh.vertices.len()];
        let mut added = TriMesh::default();
        for (tri, _) in m.mesh.triangles.iter().zip(&keep).filter(|(_, k)| **k) {
            let local = tri.map(|v| {
                if remap[v as usize] == u32::MAX {
                    remap[v as usize] = added.vertices.len() as u32;
                    added.vertices.push(m.mesh.vertices[v as usize]);
                    out.classes.push(m.classes[v as usize]);
                    out.instances.push(m.instances[v as usize]);
                    out.colors.push(m.colors[v as usize]);
                }
                remap[v as usize]
            });
            added.triangles.push(local);
        }
        // This submap's kept geometry shadows later submaps.
        for &tri in &added.triangles {
            let c = scale(tri.iter().fold([0.0; 3], |a, &i| add(a, added.vertices[i as usize])), 1.0 / 3.0);
            occupied.insert(cell(c));
        }
        for &v in &added.vertices {
            occupied.insert(cell(v));
        }
        out.mesh.vertices.extend(added.vertices);
        out.mesh.triangles.extend(added.triangles.iter().map(|t| t.map(|i| i + base)));
    }
    out.validate()?;
    Ok(MergeReport {
        mesh: out,
        transforms,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Ground plane, two boxes and a sphere, sampled uniformly per surface.
    fn structured_scene(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = stream_rng(seed, 7, 7);
        let mut pts = Vec::with_capacity(n);
        while pts.len() < n {
            let u: f64 = rng.random();
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let p = if u < 0.4 {
                [-6.0 + 12.0 * a, -6.0 + 12.0 * b, 0.0]
            } else if u < 0.75 {
                // Box 1 faces: x = 2, y = 1.5 (facing -x and -y), 2 m wide, 1.5 m tall.
                if rng.random::<bool>() {
                    [2.0, 1.5 + 2.0 * a, 1.5 * b]
                } else {
                    [2.0 + 2.0 * a, 1.5, 1.5 * b]
                }
            } else if u < 0.85 {
                [-3.0 + 1.0 * a, -2.0, 2.0 * b]
            } else {
                let z: f64 = 2.0 * a - 1.0;
                let phi = std::f64::consts::TAU * b;
                let r = (1.0 - z * z).sqrt();
                [-2.0 + 0.8 * r * phi.cos(), 2.5 + 0.8 * r * phi.sin(), 1.0 + 0.8 * z]
            };
            pts.push(p);
        }
        pts
    }

    fn cloud(points: Vec<Vec3>) -> OrientedCloud {
        OrientedCloud::from_points(points, 12, &[[0.0, 0.0, 1.8]]).unwrap()
    }

    #[test]
    fn transform_algebra() {
        let a = RigidTransform::from_axis_angle([0.3, -1.0, 0.2], 0.7, [1.0, 2.0, -0.5]);
        let b = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], -1.1, [0.2, 0.0, 3.0]);
        a.check(1e-12).unwrap();
        let p = [0.4, -1.3, 2.2];
        let ab = a.compose(&b);
        let q = ab.apply(p);
        let q2 = a.apply(b.apply(p));
        assert!(norm(sub(q, q2)) < 1e-12);
        assert!(norm(sub(ab.inverse().apply(q), p)) < 1e-12);
        assert!((a.angle() - 0.7).abs() < 1e-12);
        let back = RigidTransform::from_pose(&a.to_pose()).unwrap();
        assert!(back.difference(&a).0 < 1e-12 && back.difference(&a).1 < 1e-12);
        let mut skew = a;
        skew.rotation[(0, 1)] += 1e-3;
        assert!(skew.check(1e-6).is_err());
        skew.orthonormalized().check(1e-12).unwrap();
        let reflect = RigidTransform {
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            translation: Vector3::zeros(),
        };
        assert!(reflect.check(1e-6).is_err());
    }

    #[test]
    fn plane_normals_face_the_sensor() {
        let mut rng = stream_rng(1, 0, 0);
        let pts: Vec<Vec3> = (0..500).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0]).collect();
        for n in estimate_normals(&pts, 10, &[[0.5, 0.5, 2.0]]).unwrap() {
            let n = n.unwrap();
            assert!((n.normal[2] - 1.0).abs() < 1e-12);
            assert!(n.curvature < 1e-12);
        }
        for n in estimate_normals(&pts, 10, &[[0.5, 0.5, -2.0]]).unwrap() {
            assert!((n.unwrap().normal[2] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = stream_rng(2, 0, 0);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                [2.0 * r * phi.cos(), 2.0 * r * phi.sin(), 2.0 * z]
            })
            .collect();
        let normals = estimate_normals(&pts, 16, &[[0.0; 3]]).unwrap();
        let cos5 = 5f64.to_radians().cos();
        for (p, n) in pts.iter().zip(normals) {
            let n = n.unwrap();
            // Oriented toward the center.
            assert!(dot(n.normal, scale(*p, -0.5)) > cos5);
        }
    }

    #[test]
    fn collinear_points_have_no_normal() {
        let pts: Vec<Vec3> = (0..40).map(|i| [i as f64 * 0.1, 2.0 * i as f64 * 0.1, 0.5]).collect();
        assert!(estimate_normals(&pts, 8, &[[0.0; 3]]).unwrap().iter().all(|n| n.is_none()));
        assert!(estimate_normals(&pts[..5], 8, &[[0.0; 3]]).is_err());
    }

    #[test]
    fn icp_identity() {
        let c = cloud(structured_scene(4000, 1));
        let r = icp_point_to_plane(&c, &c, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.rms, 0.0);
        let (da, dt) = r.transform.difference(&RigidTransform::identity());
        assert!(da < 1e-12 && dt < 1e-12);
    }

    #[test]
    fn icp_recovers_known_transform() {
        let src = structured_scene(8000, 3);
        let truth = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 2f64.to_radians(), [0.1, -0.05, 0.02]);
        let tgt: Vec<Vec3> = structured_scene(8000, 4).iter().map(|p| truth.apply(*p)).collect();
        let view = truth.apply([0.0, 0.0, 1.8]);
        let target = OrientedCloud::from_points(tgt, 12, &[view]).unwrap();
        let r = icp_point_to_plane(&cloud(src), &target, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        let (da, dt) = r.transform.difference(&truth);
        assert!(r.converged, "{:?}", r.degeneracy);
        assert!(da.to_degrees() < 0.2 && dt < 0.01, "angle {} deg, offset {dt} m", da.to_degrees());
        r.transform.check(1e-9).unwrap();
    }

    #[test]
    fn two_planes_are_degenerate() {
        let mut rng = stream_rng(5, 0, 0);
        let pts: Vec<Vec3> = (0..3000)
            .map(|i| {
                let (a, b): (f64, f64) = (rng.random_range(-4.0..4.0), rng.random_range(0.0..3.0));
                if i % 2 == 0 { [b + 0.5, a, 0.0] } else { [0.0, a, b] }
            })
            .collect();
        let c = OrientedCloud::from_points(pts, 12, &[[2.0, 0.0, 1.5]]).unwrap();
        let shift = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.0, [0.05, 0.1, 0.0]);
        let r = icp_point_to_plane(&c, &c, &shift, &IcpConfig::default()).unwrap();
        assert!(!r.converged);
        let msg = r.degeneracy.unwrap();
        assert!(msg.contains("rank-deficient"), "{msg}");
    }

    #[test]
    fn too_few_correspondences_is_an_error() {
        let c = cloud(structured_scene(3000, 6));
        let far = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.0, [50.0, 0.0, 0.0]);
        assert!(matches!(
            icp_point_to_plane(&c, &c, &far, &IcpConfig::default()),
            Err(Error::Alignment { .. })
        ));
    }

    fn tiny_mesh(offset: f64) -> SemanticMesh {
        SemanticMesh {
            mesh: TriMesh {
                vertices: vec![[offset, 0.0, 0.0], [offset + 1.0, 0.0, 0.0], [offset, 1.0, 0.0]],
                triangles: vec![[0, 1, 2]],
            },
            classes: vec![1; 3],
            instances: vec![0; 3],
            colors: vec![[0; 3]; 3],
        }
    }

    #[test]
    fn merge_preconditions() {
        let one = Submap {
            mesh: tiny_mesh(0.0),
            reference: RigidTransform::identity(),
            scans: (0, 5),
        };
        let r = merge_submaps(std::slice::from_ref(&one), &MergeConfig::default()).unwrap();
        assert_eq!(r.mesh, one.mesh);
        assert!(r.pairs.is_empty());
        let disjoint = Submap { scans: (5, 9), ..one.clone() };
        assert!(matches!(merge_submaps(&[one, disjoint], &MergeConfig::default()), Err(Error::Config(_))));
        assert!(matches!(merge_submaps(&[], &MergeConfig::default()), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn icp_residual_never_increases(yaw in -3.0f64..3.0, tx in -0.2f64..0.2, ty in -0.2f64..0.2, seed in 0u64..100) {
            let c = cloud(structured_scene(3000, seed));
            let t = cloud(structured_scene(3000, seed + 1000));
            let init = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], yaw.to_radians(), [tx, ty, 0.0]);
            let r = icp_point_to_plane(&c, &t, &init, &IcpConfig::default()).unwrap();
            prop_assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(r.transform.check(1e-9).is_ok());
        }
    }
}
