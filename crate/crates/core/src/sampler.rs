//! Training-sample generation along LiDAR rays.
//!
//! Each ray yields `N` samples: half in a band of half-width `band_width`
//! around the endpoint (signed offset, positive toward the sensor) and half in
//! the free segment between `min_range` and the start of the band. The
//! supervision target is the along-ray distance to the endpoint.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::util::{add, dist, scale, stream_rng, sub, Vec3};

pub type Pose = [[f64; 4]; 4];

pub const IDENTITY_POSE: Pose = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Apply a homogeneous rigid transform to a point.
pub fn transform_point(pose: &Pose, p: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = pose[r][0] * p[0] + pose[r][1] * p[1] + pose[r][2] * p[2] + pose[r][3];
    }
    out
}

pub fn compose_poses(a: &Pose, b: &Pose) -> Pose {
    let mut out = [[0.0; 4]; 4];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

/// Check that the rotation block is orthonormal with determinant +1.
pub fn validate_rigid(pose: &Pose, tol: f64) -> Result<()> {
    for r in 0..3 {
        for c in 0..3 {
            let d: f64 = (0..3).map(|k| pose[k][r] * pose[k][c]).sum();
            let want = if r == c { 1.0 } else { 0.0 };
            if (d - want).abs() > tol {
                return Err(Error::contract(format!("pose rotation is not orthonormal (RᵀR[{r}][{c}] = {d})")));
            }
        }
    }
    let m = |r: usize, c: usize| pose[r][c];
    let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    if (det - 1.0).abs() > tol {
        return Err(Error::contract(format!("pose rotation has determinant {det}")));
    }
    if pose[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::contract("pose bottom row must be (0, 0, 0, 1)"));
    }
    Ok(())
}

/// One posed LiDAR scan with per-point labels, in the world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScan {
    pub origin: Vec3,
    pub points: Vec<Vec3>,
    /// Training class id per point (0 = unlabeled).
    pub labels: Vec<u16>,
    /// Instance id per point (0 = stuff / none).
    pub instances: Vec<u32>,
    pub pose: Pose,
}

impl LabeledScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.points.len() || self.instances.len() != self.points.len() {
            return Err(Error::contract(format!(
                "scan has {} points, {} labels, {} instances",
                self.points.len(),
                self.labels.len(),
                self.instances.len()
            )));
        }
        validate_rigid(&self.pose, 1e-6)
    }

    /// The same scan expressed in another frame (`frame_from_world`).
    pub fn transformed(&self, frame_from_world: &Pose) -> LabeledScan {
        LabeledScan {
            origin: transform_point(frame_from_world, self.origin),
            points: self.points.iter().map(|&p| transform_point(frame_from_world, p)).collect(),
            labels: self.labels.clone(),
            instances: self.instances.clone(),
            pose: compose_poses(frame_from_world, &self.pose),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Surface,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    pub x: Vec3,
    /// Signed along-ray distance to the endpoint (positive toward the sensor).
    pub d: f64,
    /// Label target; only surface samples carry one.
    pub class_id: Option<u16>,
    pub instance_id: u32,
    pub band: Band,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub samples_per_ray: usize,
    pub band_width: f64,
    pub min_range: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            samples_per_ray: 6,
            band_width: 0.3,
            min_range: 1.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.samples_per_ray == 0 || !self.samples_per_ray.is_multiple_of(2) {
            errs.push(format!("samples_per_ray must be a positive even number, got {}", self.samples_per_ray));
        }
        if !(self.band_width > 0.0 && self.band_width.is_finite()) {
            errs.push(format!("band_width must be positive, got {}", self.band_width));
        }
        if !(self.min_range >= 0.0 && self.min_range.is_finite()) {
            errs.push(format!("min_range must be non-negative, got {}", self.min_range));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Append the samples of one ray to `out`. Returns `false` (and appends
/// nothing) when the ray is not longer than the band.
///
/// `class_id` of `None` marks an endpoint excluded from surface supervision
/// (e.g. a dynamic object): its free-space samples are still emitted.
pub fn sample_ray_into<R: Rng>(
    origin: Vec3,
    endpoint: Vec3,
    label: Option<(u16, u32)>,
    cfg: &SamplerConfig,
    rng: &mut R,
    out: &mut Vec<TrainingSample>,
) -> bool {
    let len = dist(origin, endpoint);
    if !(len > cfg.band_width) {
        return false;
    }
    let dir = scale(sub(endpoint, origin), 1.0 / len);
    let half = cfg.samples_per_ray / 2;
    if let Some((class_id, instance_id)) = label {
        for _ in 0..half {
            let s = rng.random_range(-cfg.band_width..=cfg.band_width);
            out.push(TrainingSample {
                x: sub(endpoint, scale(dir, s)),
                d: s,
                class_id: Some(class_id),
                instance_id,
                band: Band::Surface,
            });
        }
    }
    let free_end = len - cfg.band_width;
    let free_start = if cfg.min_range < free_end { cfg.min_range } else { 0.0 };
    for _ in 0..half {
        let r = rng.random_range(free_start..=free_end);
        out.push(TrainingSample {
            x: add(origin, scale(dir, r)),
            d: len - r,
            class_id: None,
            instance_id: 0,
            band: Band::Free,
        });
    }
    true
}

/// Samples of one ray, or `None` if the ray is shorter than the band.
pub fn sample_ray<R: Rng>(
    origin: Vec3,
    endpoint: Vec3,
    class_id: u16,
    instance_id: u32,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Option<Vec<TrainingSample>> {
    let mut out = Vec::with_capacity(cfg.samples_per_ray);
    sample_ray_into(origin, endpoint, Some((class_id, instance_id)), cfg, rng, &mut out).then_some(out)
}

/// Maps global ray indices onto `(scan, point)` pairs.
#[derive(Clone, Debug)]
pub struct RayIndex {
    offsets: Vec<usize>,
}

impl RayIndex {
    pub fn new(scans: &[LabeledScan]) -> Self {
        let mut offsets = Vec::with_capacity(scans.len() + 1);
        let mut n = 0;
        offsets.push(0);
        for s in scans {
            n += s.len();
            offsets.push(n);
        }
        RayIndex { offsets }
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn locate(&self, ray: usize) -> (usize, usize) {
        let scan = self.offsets.partition_point(|&o| o <= ray) - 1;
        (scan, ray - self.offsets[scan])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub rays: usize,
    /// Rays not longer than the band.
    pub skipped: usize,
    /// Rays whose endpoint class was excluded from surface supervision.
    pub excluded: usize,
}

/// Ray ids of step `step`: uniform without replacement over all scans, sorted.
pub fn select_rays(total: usize, rays_per_step: usize, seed: u64, step: u64) -> Vec<usize> {
    let k = rays_per_step.min(total);
    if k == total {
        return (0..total).collect();
    }
    let mut rng = stream_rng(seed, 0x53_454C, step);
    let mut ids = index::sample(&mut rng, total, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Assemble the samples of one optimization step.
///
/// `exclude(class)` drops the surface samples of rays ending on that class.
pub fn build_batch(
    scans: &[LabeledScan],
    rays_per_step: usize,
    seed: u64,
    step: u64,
    cfg: &SamplerConfig,
    exclude: &dyn Fn(u16) -> bool,
) -> (Vec<TrainingSample>, BatchStats) {
    let index = RayIndex::new(scans);
    let rays = select_rays(index.total(), rays_per_step, seed, step);
    let mut out = Vec::with_capacity(rays.len() * cfg.samples_per_ray);
    let mut stats = BatchStats {
        rays: rays.len(),
        ..Default::default()
    };
    for ray in rays {
        let (s, p) = index.locate(ray);
        let scan = &scans[s];
        let class = scan.labels[p];
        let label = if exclude(class) {
            stats.excluded += 1;
            None
        } else {
            Some((class, scan.instances[p]))
        };
        let mut rng = stream_rng(seed ^ 0x52_4159, step, ray as u64);
        if !sample_ray_into(scan.origin, scan.points[p], label, cfg, &mut rng, &mut out) {
            stats.skipped += 1;
        }
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{cross, norm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scan(n: usize) -> LabeledScan {
        LabeledScan {
            origin: [0.0, 0.0, 1.0],
            points: (0..n).map(|i| [5.0 + i as f64 * 0.01, 1.0, 0.0]).collect(),
            labels: vec![9; n],
            instances: vec![0; n],
            pose: IDENTITY_POSE,
        }
    }

    #[test]
    fn samples_lie_on_ray_with_consistent_targets() {
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = [0.2, -0.1, 1.8];
        let e = [6.0, 2.0, -0.3];
        let dir = {
            let v = sub(e, o);
            scale(v, 1.0 / norm(v))
        };
        for _ in 0..200 {
            let s = sample_ray(o, e, 4, 2, &cfg, &mut rng).unwrap();
            assert_eq!(s.len(), 6);
            for t in &s {
                let off = sub(t.x, o);
                assert!(norm(cross(off, dir)) < 1e-9);
                match t.band {
                    Band::Surface => {
                        assert!(t.d.abs() <= cfg.band_width);
                        let signed = crate::util::dot(sub(e, t.x), dir);
                        assert!((signed - t.d).abs() < 1e-9);
                        assert_eq!((t.class_id, t.instance_id), (Some(4), 2));
                    }
                    Band::Free => {
                        assert!(t.d > 0.0);
                        assert!(t.class_id.is_none());
                        assert!((dist(t.x, e) - t.d).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn short_rays_are_skipped() {
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_ray([0.0; 3], [0.2, 0.0, 0.0], 1, 0, &cfg, &mut rng).is_none());
    }

    #[test]
    fn full_batch_covers_every_ray_once() {
        let scans = vec![scan(7), scan(5)];
        let cfg = SamplerConfig::default();
        assert_eq!(select_rays(12, 12, 1, 0), (0..12).collect::<Vec<_>>());
        let (b, stats) = build_batch(&scans, 12, 1, 0, &cfg, &|_| false);
        assert_eq!(stats.rays, 12);
        assert_eq!(b.len(), 72);
    }

    #[test]
    fn batches_are_reproducible() {
        let scans = vec![scan(50), scan(30)];
        let cfg = SamplerConfig::default();
        for step in 0..3 {
            let a = build_batch(&scans, 20, 9, step, &cfg, &|_| false);
            let b = build_batch(&scans, 20, 9, step, &cfg, &|_| false);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn excluded_class_keeps_free_samples_only() {
        let scans = vec![scan(4)];
        let cfg = SamplerConfig::default();
        let (b, stats) = build_batch(&scans, 4, 1, 0, &cfg, &|c| c == 9);
        assert_eq!(stats.excluded, 4);
        assert_eq!(b.len(), 12);
        assert!(b.iter().all(|s| s.band == Band::Free));
    }

    #[test]
    fn endpoint_and_two_meter_targets() {
        let o = [0.0, 0.0, 0.0];
        let e = [5.0, 0.0, 0.0];
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_ray(o, e, 1, 0, &cfg, &mut rng).unwrap();
        for t in s.iter().filter(|t| t.band == Band::Free) {
            assert!((t.d - (5.0 - t.x[0])).abs() < 1e-12);
            assert!(t.x[0] >= cfg.min_range && t.x[0] <= 5.0 - cfg.band_width);
        }
        for t in s.iter().filter(|t| t.band == Band::Surface) {
            assert!((t.d - (5.0 - t.x[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn free_segment_falls_back_to_origin_when_short() {
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_ray([0.0; 3], [1.0, 0.0, 0.0], 1, 0, &cfg, &mut rng).unwrap();
        for t in s.iter().filter(|t| t.band == Band::Free) {
            assert!(t.x[0] >= 0.0 && t.x[0] <= 0.7 && t.d >= 0.3);
        }
    }

    #[test]
    fn surface_offsets_pass_ks_against_uniform() {
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut offs = Vec::with_capacity(100_000);
        let mut buf = Vec::new();
        while offs.len() < 100_000 {
            buf.clear();
            sample_ray_into([0.0; 3], [4.0, 1.0, 0.5], Some((1, 0)), &cfg, &mut rng, &mut buf);
            offs.extend(buf.iter().filter(|t| t.band == Band::Surface).map(|t| t.d));
        }
        offs.truncate(100_000);
        offs.sort_by(f64::total_cmp);
        let n = offs.len() as f64;
        let w = cfg.band_width;
        let mut dmax = 0.0f64;
        for (i, &x) in offs.iter().enumerate() {
            let f = (x + w) / (2.0 * w);
            dmax = dmax.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
        }
        // Asymptotic Kolmogorov critical value at alpha = 0.01.
        let crit = 1.627_61 / n.sqrt();
        assert!(dmax < crit, "KS statistic {dmax} exceeds {crit}");
    }

    #[test]
    fn selection_frequencies_are_uniform() {
        let total = 200;
        let k = 20;
        let steps = 5000u64;
        let mut counts = vec![0usize; total];
        for step in 0..steps {
            let ids = select_rays(total, k, 42, step);
            assert_eq!(ids.len(), k);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            for i in ids {
                counts[i] += 1;
            }
        }
        let p = k as f64 / total as f64;
        let mean = steps as f64 * p;
        let sd = (steps as f64 * p * (1.0 - p)).sqrt();
        let outside = counts.iter().filter(|&&c| (c as f64 - mean).abs() > 3.0 * sd).count();
        // Expected 0.27 % outside 3 sigma; allow a few.
        assert!(outside <= 3, "{outside} rays outside 3 sigma");
        assert!(counts.iter().all(|&c| (c as f64 - mean).abs() < 5.0 * sd));
    }

    #[test]
    fn ray_index_locates() {
        let idx = RayIndex::new(&[scan(3), scan(0), scan(2)]);
        assert_eq!(idx.total(), 5);
        assert_eq!(idx.locate(0), (0, 0));
        assert_eq!(idx.locate(3), (2, 0));
        assert_eq!(idx.locate(4), (2, 1));
    }

    #[test]
    fn rejects_non_rigid_pose() {
        let mut s = scan(1);
        s.pose[0][0] = 2.0;
        assert!(s.validate().is_err());
        let mut s = scan(1);
        s.labels.pop();
        assert!(s.validate().is_err());
    }
}
