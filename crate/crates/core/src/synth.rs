//! Synthetic labeled LiDAR scenes built from analytic primitives.
//!
//! A scene document has one item per line, `kind key=value ...`, with `#`
//! comments:
//!
//! ```text
//! plane z=0 half_extent=14 class=9
//! box center=4,2,0.75 size=1.5,2,1.5 class=1 instance=1 motion=0,0.4,0 frames=0..5
//! sphere center=6,-3,1 radius=1 class=13
//! sensor height=1.8 max_range=9 ground_radius=8 min_ground_radius=1 horizon_fraction=0.2 horizon_max_deg=15
//! trajectory start=0,0 end=6,0
//! ```
//!
//! Boxes and spheres translate by `motion` per scan and exist only in the
//! scans listed by `frames` (half-open range, default all).

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sampler::{LabeledScan, Pose};
use crate::util::{add, dot, norm, scale, stream_rng, sub, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Finite horizontal square `|x|, |y| <= half_extent` at height `z`.
    Plane { z: f64, half_extent: f64 },
    Box { center: Vec3, size: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class_id: u16,
    pub instance_id: u32,
    pub motion: Vec3,
    pub frames: Option<(usize, usize)>,
}

impl Primitive {
    pub fn is_dynamic(&self) -> bool {
        self.motion != [0.0; 3] || self.frames.is_some()
    }

    pub fn present(&self, scan: usize) -> bool {
        self.frames.is_none_or(|(a, b)| scan >= a && scan < b)
    }

    /// Shape as placed in scan `scan`.
    pub fn shape_at(&self, scan: usize) -> Shape {
        let off = scale(self.motion, scan as f64);
        match self.shape {
            Shape::Box { center, size } => Shape::Box {
                center: add(center, off),
                size,
            },
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: add(center, off),
                radius,
            },
            s => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorModel {
    pub height: f64,
    pub max_range: f64,
    pub ground_radius: f64,
    pub min_ground_radius: f64,
    pub horizon_fraction: f64,
    pub horizon_max_deg: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            height: 1.8,
            max_range: 9.0,
            ground_radius: 8.0,
            min_ground_radius: 1.0,
            horizon_fraction: 0.2,
            horizon_max_deg: 15.0,
        }
    }
}

impl SensorModel {
    /// Elevation bands (radians) covered by the sensor: the ground footprint
    /// and the horizon band.
    pub fn elevation_bands(&self) -> [(f64, f64); 2] {
        [
            (
                -(self.height / self.min_ground_radius).atan(),
                -(self.height / self.ground_radius).atan(),
            ),
            (0.0, self.horizon_max_deg.to_radians()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub sensor: SensorModel,
    pub start: [f64; 2],
    pub end: [f64; 2],
}

fn parse_vec<const N: usize>(v: &str, line: usize, key: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != N {
        return Err(Error::Parse {
            line,
            detail: format!("{key} needs {N} comma-separated numbers, got {v:?}"),
        });
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_f64(p, line, key)?;
    }
    Ok(out)
}

fn parse_f64(v: &str, line: usize, key: &str) -> Result<f64> {
    let x: f64 = v.trim().parse().map_err(|_| Error::Parse {
        line,
        detail: format!("{key}: {v:?} is not a number"),
    })?;
    if !x.is_finite() {
        return Err(Error::Parse {
            line,
            detail: format!("{key} must be finite"),
        });
    }
    Ok(x)
}

fn parse_int<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Parse {
        line,
        detail: format!("{key}: {v:?} is not a valid integer"),
    })
}

impl SceneSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut primitives = Vec::new();
        let mut sensor = SensorModel::default();
        let mut traj = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut tokens = content.split_whitespace();
            let kind = tokens.next().unwrap_or_default();
            let mut kv = Vec::new();
            for t in tokens {
                let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
                    line,
                    detail: format!("expected key=value, got {t:?}"),
                })?;
                kv.push((k, v));
            }
            let get = |k: &str| kv.iter().find(|(key, _)| *key == k).map(|(_, v)| *v);
            let need = |k: &str| {
                get(k).ok_or_else(|| Error::Parse {
                    line,
                    detail: format!("{kind} needs {k}="),
                })
            };
            let allowed: &[&str] = match kind {
                "plane" => &["z", "half_extent", "class", "instance"],
                "box" => &["center", "size", "class", "instance", "motion", "frames"],
                "sphere" => &["center", "radius", "class", "instance", "motion", "frames"],
                "sensor" => &[
                    "height",
                    "max_range",
                    "ground_radius",
                    "min_ground_radius",
                    "horizon_fraction",
                    "horizon_max_deg",
                ],
                "trajectory" => &["start", "end"],
                _ => {
                    return Err(Error::Parse {
                        line,
                        detail: format!("unknown item {kind:?}"),
                    })
                }
            };
            if let Some((k, _)) = kv.iter().find(|(k, _)| !allowed.contains(k)) {
                return Err(Error::Parse {
                    line,
                    detail: format!("unknown key {k:?} for {kind}"),
                });
            }
            match kind {
                "sensor" => {
                    for (k, v) in &kv {
                        let x = parse_f64(v, line, k)?;
                        match *k {
                            "height" => sensor.height = x,
                            "max_range" => sensor.max_range = x,
                            "ground_radius" => sensor.ground_radius = x,
                            "min_ground_radius" => sensor.min_ground_radius = x,
                            "horizon_fraction" => sensor.horizon_fraction = x,
                            _ => sensor.horizon_max_deg = x,
                        }
                    }
                }
                "trajectory" => {
                    traj = Some((
                        parse_vec::<2>(need("start")?, line, "start")?,
                        parse_vec::<2>(need("end")?, line, "end")?,
                    ));
                }
                _ => {
                    let shape = match kind {
                        "plane" => Shape::Plane {
                            z: get("z").map_or(Ok(0.0), |v| parse_f64(v, line, "z"))?,
                            half_extent: parse_f64(need("half_extent")?, line, "half_extent")?,
                        },
                        "box" => Shape::Box {
                            center: parse_vec::<3>(need("center")?, line, "center")?,
                            size: parse_vec::<3>(need("size")?, line, "size")?,
                        },
                        _ => Shape::Sphere {
                            center: parse_vec::<3>(need("center")?, line, "center")?,
                            radius: parse_f64(need("radius")?, line, "radius")?,
                        },
                    };
                    let frames = match get("frames") {
                        None => None,
                        Some(v) => {
                            let (a, b) = v.split_once("..").ok_or_else(|| Error::Parse {
                                line,
                                detail: format!("frames must be a..b, got {v:?}"),
                            })?;
                            Some((parse_int(a, line, "frames")?, parse_int(b, line, "frames")?))
                        }
                    };
                    primitives.push(Primitive {
                        shape,
                        class_id: parse_int(need("class")?, line, "class")?,
                        instance_id: get("instance").map_or(Ok(0), |v| parse_int(v, line, "instance"))?,
                        motion: get("motion").map_or(Ok([0.0; 3]), |v| parse_vec::<3>(v, line, "motion"))?,
                        frames,
                    });
                }
            }
        }
        let (start, end) = traj.unwrap_or(([0.0, 0.0], [0.0, 0.0]));
        let spec = SceneSpec {
            primitives,
            sensor,
            start,
            end,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.primitives.is_empty() {
            errs.push("scene has no primitives".to_string());
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match p.shape {
                Shape::Plane { half_extent, .. } => half_extent > 0.0,
                Shape::Box { size, .. } => size.iter().all(|&s| s > 0.0),
                Shape::Sphere { radius, .. } => radius > 0.0,
            };
            if !ok {
                errs.push(format!("primitive {i} has a non-positive size"));
            }
            if let Some((a, b)) = p.frames {
                if a >= b {
                    errs.push(format!("primitive {i} has an empty frame range"));
                }
            }
        }
        let s = &self.sensor;
        if !(s.height > 0.0 && s.max_range > 0.0 && s.ground_radius > s.min_ground_radius && s.min_ground_radius > 0.0) {
            errs.push("sensor needs height, max_range > 0 and ground_radius > min_ground_radius > 0".to_string());
        }
        if !(0.0..=1.0).contains(&s.horizon_fraction) {
            errs.push("horizon_fraction must lie in [0, 1]".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Sensor pose of scan `k` out of `n`: positions interpolate the
    /// trajectory, heading follows its direction.
    pub fn pose(&self, k: usize, n: usize) -> Pose {
        let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
        let x = self.start[0] + t * (self.end[0] - self.start[0]);
        let y = self.start[1] + t * (self.end[1] - self.start[1]);
        let (dx, dy) = (self.end[0] - self.start[0], self.end[1] - self.start[1]);
        let yaw = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
        let (s, c) = yaw.sin_cos();
        [
            [c, -s, 0.0, x],
            [s, c, 0.0, y],
            [0.0, 0.0, 1.0, self.sensor.height],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Analytic signed distance of the scene as placed in scan `scan`
    /// (the ground plane counts as a half-space).
    pub fn sdf(&self, scan: usize, x: Vec3) -> f64 {
        self.primitives
            .iter()
            .filter(|p| p.present(scan))
            .map(|p| shape_sdf(&p.shape_at(scan), x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Static primitives only.
    pub fn static_sdf(&self, x: Vec3) -> f64 {
        self.primitives
            .iter()
            .filter(|p| !p.is_dynamic())
            .map(|p| shape_sdf(&p.shape, x))
            .fold(f64::INFINITY, f64::min)
    }

    /// First hit along `dir` (unit) from `origin` within `max_t`:
    /// `(t, primitive index)`.
    pub fn cast(&self, scan: usize, origin: Vec3, dir: Vec3, max_t: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if !p.present(scan) {
                continue;
            }
            if let Some(t) = intersect(&p.shape_at(scan), origin, dir) {
                if t <= max_t && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }
}

pub fn shape_sdf(shape: &Shape, x: Vec3) -> f64 {
    match *shape {
        Shape::Plane { z, .. } => x[2] - z,
        Shape::Sphere { center, radius } => norm(sub(x, center)) - radius,
        Shape::Box { center, size } => {
            let mut q = [0.0; 3];
            for a in 0..3 {
                q[a] = (x[a] - center[a]).abs() - size[a] / 2.0;
            }
            let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
            outside + q[0].max(q[1]).max(q[2]).min(0.0)
        }
    }
}

/// Smallest positive ray parameter hitting the shape surface.
pub fn intersect(shape: &Shape, o: Vec3, d: Vec3) -> Option<f64> {
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Plane { z, half_extent } => {
            if d[2].abs() < 1e-15 {
                return None;
            }
            let t = (z - o[2]) / d[2];
            let p = add(o, scale(d, t));
            (t > EPS && p[0].abs() <= half_extent && p[1].abs() <= half_extent).then_some(t)
        }
        Shape::Sphere { center, radius } => {
            let oc = sub(o, center);
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            [-b - s, -b + s].into_iter().find(|&t| t > EPS)
        }
        Shape::Box { center, size } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for a in 0..3 {
                let lo = center[a] - size[a] / 2.0;
                let hi = center[a] + size[a] / 2.0;
                if d[a].abs() < 1e-15 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
            if t0 > t1 {
                return None;
            }
            [t0, t1].into_iter().find(|&t| t > EPS)
        }
    }
}

/// One ray direction of the ground-footprint scanner, in the world frame.
fn sensor_direction<R: Rng>(sensor: &SensorModel, origin: Vec3, yaw: f64, rng: &mut R) -> Vec3 {
    if rng.random::<f64>() < sensor.horizon_fraction {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = rng.random_range(0.0..=sensor.horizon_max_deg.to_radians());
        let (se, ce) = el.sin_cos();
        [ce * az.cos(), ce * az.sin(), se]
    } else {
        let (r0, r1) = (sensor.min_ground_radius, sensor.ground_radius);
        let r = (rng.random::<f64>() * (r1 * r1 - r0 * r0) + r0 * r0).sqrt();
        let az = yaw + rng.random_range(0.0..std::f64::consts::TAU);
        let target = [origin[0] + r * az.cos(), origin[1] + r * az.sin(), origin[2] - sensor.height];
        let v = sub(target, origin);
        scale(v, 1.0 / norm(v))
    }
}

/// Simulate `n_scans` scans of `rays_per_scan` rays each. Rays without a hit
/// inside the maximum range produce no point. `agent` selects an
/// independent ray stream for the same trajectory.
pub fn synth_scans(spec: &SceneSpec, n_scans: usize, rays_per_scan: usize, seed: u64) -> Result<Vec<LabeledScan>> {
    synth_scans_range(spec, 0..n_scans, n_scans, rays_per_scan, seed)
}

/// Scans `range` of an `n_total`-scan trajectory.
pub fn synth_scans_range(
    spec: &SceneSpec,
    range: std::ops::Range<usize>,
    n_total: usize,
    rays_per_scan: usize,
    seed: u64,
) -> Result<Vec<LabeledScan>> {
    if rays_per_scan == 0 || n_total == 0 {
        return Err(Error::config("synthetic scenes need a positive ray budget and scan count"));
    }
    let mut scans = Vec::with_capacity(range.len());
    for k in range {
        let pose = spec.pose(k, n_total);
        let origin = [pose[0][3], pose[1][3], pose[2][3]];
        let yaw = pose[1][0].atan2(pose[0][0]);
        let mut rng = stream_rng(seed, 0x5343_414E, k as u64);
        let mut scan = LabeledScan {
            origin,
            points: Vec::new(),
            labels: Vec::new(),
            instances: Vec::new(),
            pose,
        };
        for _ in 0..rays_per_scan {
            let dir = sensor_direction(&spec.sensor, origin, yaw, &mut rng);
            if let Some((t, i)) = spec.cast(k, origin, dir, spec.sensor.max_range) {
                let p = &spec.primitives[i];
                scan.points.push(add(origin, scale(dir, t)));
                scan.labels.push(p.class_id);
                scan.instances.push(p.instance_id);
            }
        }
        scans.push(scan);
    }
    Ok(scans)
}

/// A labeled ground-truth surface point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub x: Vec3,
    pub class_id: u16,
    pub instance_id: u32,
}

fn shape_area(shape: &Shape) -> f64 {
    match *shape {
        Shape::Plane { half_extent, .. } => 4.0 * half_extent * half_extent,
        Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        Shape::Box { size, .. } => 2.0 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2]),
    }
}

fn sample_shape<R: Rng>(shape: &Shape, rng: &mut R) -> Vec3 {
    match *shape {
        Shape::Plane { z, half_extent } => [
            rng.random_range(-half_extent..=half_extent),
            rng.random_range(-half_extent..=half_extent),
            z,
        ],
        Shape::Sphere { center, radius } => {
            let v: Vec3 = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            add(center, scale(v, radius / norm(v)))
        }
        Shape::Box { center, size } => {
            let areas = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
            let total = 2.0 * (areas[0] + areas[1] + areas[2]);
            let mut u = rng.random::<f64>() * total;
            let mut face = 0;
            for (f, a) in areas.iter().flat_map(|a| [a, a]).enumerate() {
                if u < *a || f == 5 {
                    face = f;
                    break;
                }
                u -= a;
            }
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = if a == axis {
                    center[a] + sign * size[a] / 2.0
                } else {
                    center[a] + rng.random_range(-0.5..=0.5) * size[a]
                };
            }
            p
        }
    }
}

/// Whether `p` on the static scene is seen by the sensor at `pose` of scan
/// `scan`: in range, inside the elevation support and unoccluded.
pub fn visible_from(spec: &SceneSpec, scan: usize, origin: Vec3, p: Vec3) -> bool {
    let v = sub(p, origin);
    let r = norm(v);
    if r == 0.0 || r > spec.sensor.max_range {
        return false;
    }
    let el = (v[2] / r).asin();
    if !spec.sensor.elevation_bands().iter().any(|&(lo, hi)| el >= lo && el <= hi) {
        return false;
    }
    let dir = scale(v, 1.0 / r);
    match spec.cast(scan, origin, dir, spec.sensor.max_range) {
        Some((t, _)) => t >= r - 1e-6 * r.max(1.0),
        None => false,
    }
}

/// `n` area-uniform points on the static primitives that are visible from at
/// least one of the `n_scans` poses.
pub fn sample_visible_surface(spec: &SceneSpec, n_scans: usize, n: usize, seed: u64) -> Vec<SurfacePoint> {
    let statics: Vec<&Primitive> = spec.primitives.iter().filter(|p| !p.is_dynamic()).collect();
    if statics.is_empty() || n == 0 {
        return Vec::new();
    }
    let areas: Vec<f64> = statics.iter().map(|p| shape_area(&p.shape)).collect();
    let total: f64 = areas.iter().sum();
    let origins: Vec<Vec3> = (0..n_scans)
        .map(|k| {
            let p = spec.pose(k, n_scans);
            [p[0][3], p[1][3], p[2][3]]
        })
        .collect();
    let mut rng = stream_rng(seed, 0x4754, 0);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n && attempts < n * 1000 {
        attempts += 1;
        let mut u = rng.random::<f64>() * total;
        let mut idx = statics.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                idx = i;
                break;
            }
            u -= a;
        }
        let prim = statics[idx];
        let x = sample_shape(&prim.shape, &mut rng);
        // Skip points buried inside another static primitive.
        if statics
            .iter()
            .enumerate()
            .any(|(j, q)| j != idx && !matches!(q.shape, Shape::Plane { .. }) && shape_sdf(&q.shape, x) < -1e-9)
        {
            continue;
        }
        if origins.iter().enumerate().any(|(k, &o)| visible_from(spec, k, o, x)) {
            out.push(SurfacePoint {
                x,
                class_id: prim.class_id,
                instance_id: prim.instance_id,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE: &str = "\
# test scene
plane z=0 half_extent=12 class=9
box center=4,0,0.75 size=1.5,1.5,1.5 class=1 instance=1
sphere center=0,4,1 radius=1 class=13
sensor height=2 max_range=9
trajectory start=0,0 end=2,0
";

    #[test]
    fn parses_scene() {
        let s = SceneSpec::parse(SCENE).unwrap();
        assert_eq!(s.primitives.len(), 3);
        assert_eq!(s.sensor.height, 2.0);
        assert_eq!(s.primitives[1].instance_id, 1);
        assert_eq!(s.end, [2.0, 0.0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = SceneSpec::parse("plane z=0 half_extent=3 class=1\nbox center=1,2 size=1,1,1 class=1").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = SceneSpec::parse("cone r=1").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = SceneSpec::parse("plane z=0 half_extent=3 class=1 colour=red").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn plane_endpoints_are_exact() {
        let s = SceneSpec::parse("plane z=0 half_extent=50 class=9\nsensor height=2 max_range=30").unwrap();
        let scans = synth_scans(&s, 2, 500, 1).unwrap();
        for sc in &scans {
            assert!(!sc.points.is_empty());
            for p in &sc.points {
                assert!(p[2].abs() < 1e-9);
            }
            assert!(sc.labels.iter().all(|&c| c == 9));
        }
    }

    #[test]
    fn endpoints_lie_on_surfaces() {
        let s = SceneSpec::parse(SCENE).unwrap();
        for (k, sc) in synth_scans(&s, 3, 2000, 2).unwrap().iter().enumerate() {
            for p in &sc.points {
                assert!(s.sdf(k, *p).abs() < 1e-9);
            }
        }
    }

    /// Independent sphere-tracing hit test.
    fn trace(s: &SceneSpec, o: Vec3, d: Vec3, max_t: f64) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..10_000 {
            // The plane extends beyond max_t, so its half-space distance is exact here.
            let v = s.sdf(0, add(o, scale(d, t)));
            if v < 1e-10 {
                return Some(t);
            }
            t += v;
            if t > max_t {
                return None;
            }
        }
        None
    }

    #[test]
    fn occlusion_matches_sphere_tracing() {
        let s = SceneSpec::parse(SCENE).unwrap();
        let mut rng = stream_rng(3, 0, 0);
        let o = [0.0, 0.0, 2.0];
        let mut shadowed = 0;
        for _ in 0..2000 {
            let d = sensor_direction(&s.sensor, o, 0.0, &mut rng);
            let a = s.cast(0, o, d, 9.0).map(|(t, _)| t);
            let b = trace(&s, o, d, 9.0);
            match (a, b) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-6, "{x} vs {y}"),
                (None, None) => {}
                other => panic!("disagreement {other:?} for {d:?}"),
            }
            // Plane points behind the box never receive endpoints.
            if let (Some(t), Some(tp)) = (a, intersect(&s.primitives[0].shape, o, d)) {
                if tp > t + 1e-6 {
                    shadowed += 1;
                }
            }
        }
        assert!(shadowed > 0);
    }

    #[test]
    fn moving_box_changes_endpoints() {
        let text = "plane z=0 half_extent=12 class=9\nbox center=3,0,0.5 size=1,1,1 class=1 motion=0,0.5,0 frames=0..2\nsphere center=-3,0,1 radius=1 class=13";
        let s = SceneSpec::parse(text).unwrap();
        let scans = synth_scans(&s, 3, 3000, 4).unwrap();
        let on = |k: usize, cls: u16| -> Vec<Vec3> {
            scans[k]
                .points
                .iter()
                .zip(&scans[k].labels)
                .filter(|(_, &c)| c == cls)
                .map(|(p, _)| *p)
                .collect()
        };
        let b0 = on(0, 1);
        let b1 = on(1, 1);
        assert!(!b0.is_empty() && !b1.is_empty());
        assert!(b1.iter().all(|p| shape_sdf(&s.primitives[1].shape_at(1), *p).abs() < 1e-9));
        assert!(b0.iter().any(|p| shape_sdf(&s.primitives[1].shape_at(1), *p).abs() > 1e-3));
        assert!(on(2, 1).is_empty());
        for k in 0..3 {
            assert!(on(k, 13).iter().all(|p| shape_sdf(&s.primitives[2].shape, *p).abs() < 1e-9));
        }
    }

    #[test]
    fn visible_surface_points() {
        let s = SceneSpec::parse(SCENE).unwrap();
        let pts = sample_visible_surface(&s, 3, 2000, 5);
        assert_eq!(pts.len(), 2000);
        for p in &pts {
            assert!(s.static_sdf(p.x).abs() < 1e-9);
        }
        assert!(pts.iter().any(|p| p.class_id == 1) && pts.iter().any(|p| p.class_id == 13));
        // Nothing from the hidden far side of the box.
        assert!(pts.iter().filter(|p| p.class_id == 1).all(|p| p.x[0] < 4.75 - 1e-9));
    }

    #[test]
    fn zero_ray_budget_is_config_error() {
        let s = SceneSpec::parse(SCENE).unwrap();
        assert!(matches!(synth_scans(&s, 1, 0, 0), Err(Error::Config(_))));
    }
}
