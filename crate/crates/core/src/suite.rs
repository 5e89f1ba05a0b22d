//! Desk-scale verification suites on synthetic scenes with analytic ground
//! truth. Each suite trains with fixed seeds and reports named checks.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rustc_hash::FxHashMap;

use crate::config::MeshConfig;
use crate::error::{Error, Result};
use crate::eval::{brute_force_nearest, reconstruction_metrics, sample_surface, SpatialHash};
use crate::io::{invert_rigid, InstanceVocabulary};
use crate::loss::LossWeights;
use crate::merge::{merge_submaps, transform_mesh, MergeConfig, RigidTransform, Submap};
use crate::mesh::SemanticMesh;
use crate::mlp::AdamConfig;
use crate::model::{DecoderConfig, Mode, NeuralMap};
use crate::octree::{FeatureTable, GridConfig};
use crate::palette::Palette;
use crate::pipeline::mesh_map;
use crate::sampler::{build_batch, LabeledScan};
use crate::synth::{sample_visible_surface, shape_sdf, synth_scans, synth_scans_range, SceneSpec};
use crate::train::{evaluate_batch, train, MapGrads, TrainConfig};
use crate::util::{mix64, Vec3};

pub const SUITES: [&str; 7] = ["geometry", "semantic", "panoptic", "forgetting", "dynamic", "merge", "sparsity"];

/// Scene fixture text by name.
pub fn fixture(name: &str) -> Option<&'static str> {
    Some(match name {
        "geometry" => include_str!("../fixtures/geometry.scene"),
        "semantic" => include_str!("../fixtures/semantic.scene"),
        "panoptic" => include_str!("../fixtures/panoptic.scene"),
        "dynamic" => include_str!("../fixtures/dynamic.scene"),
        "merge" => include_str!("../fixtures/merge.scene"),
        "forgetting" => include_str!("../fixtures/forgetting.scene"),
        _ => return None,
    })
}

fn scene(name: &str) -> Result<SceneSpec> {
    SceneSpec::parse(fixture(name).ok_or_else(|| Error::contract(format!("no fixture {name}")))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl Cmp {
    fn holds(self, v: f64, t: f64) -> bool {
        match self {
            Cmp::Lt => v < t,
            Cmp::Le => v <= t,
            Cmp::Gt => v > t,
            Cmp::Ge => v >= t,
            Cmp::Eq => v == t,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Eq => "==",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub cmp: Cmp,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<Check>,
    /// Informational measurements.
    pub notes: Vec<(String, f64)>,
    pub seconds: f64,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport {
            name: name.to_string(),
            ..Default::default()
        }
    }

    fn check(&mut self, name: &str, value: f64, cmp: Cmp, threshold: f64) {
        self.checks.push(Check {
            name: name.to_string(),
            value,
            cmp,
            threshold,
            passed: cmp.holds(value, threshold),
        });
    }

    fn note(&mut self, name: &str, value: f64) {
        self.notes.push((name.to_string(), value));
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, check: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == check)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "suite {}: {verdict} ({:.1} s)", self.name, self.seconds)?;
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "  [{mark}] {} = {} {} {}", c.name, fmt_num(c.value), c.cmp.symbol(), fmt_num(c.threshold))?;
        }
        for (n, v) in &self.notes {
            writeln!(f, "  {n} = {}", fmt_num(*v))?;
        }
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e12 {
        format!("{v}")
    } else {
        format!("{v:.6}")
    }
}

/// One row per check: `suite,check,value,cmp,threshold,passed`.
pub fn write_csv(path: &Path, reports: &[SuiteReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "suite,check,value,cmp,threshold,passed")?;
    for r in reports {
        for c in &r.checks {
            writeln!(w, "{},{},{},{},{},{}", r.name, c.name, c.value, c.cmp.symbol(), c.threshold, c.passed)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shared settings of a suite run.
#[derive(Clone, Debug)]
pub struct SuiteContext {
    pub seed: u64,
}

impl SuiteContext {
    pub fn new(seed: u64) -> Self {
        SuiteContext { seed }
    }

    fn stream(&self, tag: u64) -> u64 {
        mix64(self.seed ^ tag)
    }

    fn map(&self, panoptic: bool, max_instances: usize) -> Result<NeuralMap> {
        NeuralMap::new(
            GridConfig {
                seed: self.stream(1),
                ..Default::default()
            },
            &DecoderConfig {
                seed: self.stream(2),
                max_instances,
                ..Default::default()
            },
            panoptic,
        )
    }
}

pub fn run_suite(name: &str, ctx: &SuiteContext) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = match name {
        "geometry" => geometry(ctx),
        "semantic" => semantic(ctx),
        "panoptic" => panoptic(ctx),
        "forgetting" => forgetting(ctx),
        "dynamic" => dynamic(ctx),
        "merge" => merge(ctx),
        "sparsity" => sparsity(ctx),
        _ => Err(Error::config(format!("unknown suite {name:?}; choose from {}", SUITES.join(", ")))),
    }?;
    r.seconds = start.elapsed().as_secs_f64();
    Ok(r)
}

fn batch_config(mode: Mode, steps: usize, rays: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        rays_per_step: rays,
        seed,
        weights: LossWeights {
            lambda2: if mode.is_incremental() { crate::config::INCREMENTAL_LAMBDA2 } else { 0.3 },
            ..Default::default()
        },
        ..Default::default()
    }
}

fn mesh_of(map: &NeuralMap, dynamic: &[u16]) -> Result<SemanticMesh> {
    mesh_map(map, &Palette::semantic_kitti(), &MeshConfig::default(), dynamic)
}

/// Reconstruction against the analytic visible surface at τ = 0.1 m.
fn geometry(ctx: &SuiteContext) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = SuiteReport::new("geometry");
    let spec = scene("geometry")?;
    let scans = synth_scans(&spec, 10, 4000, ctx.stream(3))?;
    let mut map = ctx.map(false, 64)?;
    train(&mut map, &scans, &batch_config(Mode::BatchSemantic, 2000, 1024, ctx.seed))?;
    let mesh = mesh_of(&map, &[])?;
    let pred = sample_surface(&mesh, 50_000, ctx.stream(4))?;
    let gt: Vec<Vec3> = sample_visible_surface(&spec, 10, 50_000, ctx.stream(5)).iter().map(|p| p.x).collect();
    let m = reconstruction_metrics(&pred.points, &gt, 0.1)?;
    r.check("chamfer_l1_cm", m.chamfer_l1_cm, Cmp::Lt, 5.0);
    r.check("completion_ratio_pct", m.completion_ratio, Cmp::Gt, 90.0);
    r.check("runtime_s", start.elapsed().as_secs_f64(), Cmp::Lt, 600.0);
    r.note("f_score", m.f_score);
    r.note("accuracy_cm", m.accuracy_cm);
    r.note("completion_cm", m.completion_cm);
    r.note("vertices", mesh.mesh.vertices.len() as f64);
    r.note("triangles", mesh.mesh.triangles.len() as f64);
    let worst = map.sdf_batch(&mesh.mesh.vertices).into_iter().flatten().map(f64::abs).fold(0.0, f64::max);
    r.note("max_abs_sdf_at_vertices_m", worst);
    Ok(r)
}

/// Vertex labels against the nearest labeled point, and SNF speed against
/// the brute-force nearest-point lookup.
fn semantic(ctx: &SuiteContext) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("semantic");
    let spec = scene("semantic")?;
    let scans = synth_scans(&spec, 10, 4000, ctx.stream(3))?;
    let mut map = ctx.map(false, 64)?;
    train(&mut map, &scans, &batch_config(Mode::BatchSemantic, 1000, 1024, ctx.seed))?;
    let mesh = mesh_of(&map, &[])?;

    let cloud: Vec<Vec3> = scans.iter().flat_map(|s| s.points.iter().copied()).collect();
    let labels: Vec<u16> = scans.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let hash = SpatialHash::new(cloud.clone(), 0.25)?;
    let (mut labeled, mut agree) = (0usize, 0usize);
    for (v, &c) in mesh.mesh.vertices.iter().zip(&mesh.classes) {
        if c == 0 {
            continue;
        }
        labeled += 1;
        if let Some((i, _)) = hash.nearest(*v) {
            agree += usize::from(labels[i] == c);
        }
    }
    let accuracy = if labeled == 0 { 0.0 } else { agree as f64 / labeled as f64 };
    r.check("vertex_label_agreement", accuracy, Cmp::Ge, 0.95);
    r.note("labeled_vertices", labeled as f64);
    let classes: std::collections::BTreeSet<u16> = mesh.classes.iter().copied().filter(|&c| c != 0).collect();
    r.note("distinct_predicted_classes", classes.len() as f64);

    let queries = sample_surface(&mesh, 100_000, ctx.stream(6))?.points;
    let t = Instant::now();
    let snf = map.labels_batch(&queries);
    let snf_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let brute: Vec<u16> = queries
        .iter()
        .map(|q| brute_force_nearest(&cloud, *q).map_or(0, |(i, _)| labels[i]))
        .collect();
    let brute_s = t.elapsed().as_secs_f64();
    r.check("speedup_vs_brute_force", brute_s / snf_s.max(1e-9), Cmp::Ge, 5.0);
    r.note("snf_seconds_1e5", snf_s);
    r.note("brute_force_seconds_1e5", brute_s);
    let same = snf.iter().zip(&brute).filter(|(a, b)| a.map(|l| l.0) == Some(**b)).count();
    r.note("snf_vs_brute_force_agreement", same as f64 / queries.len() as f64);
    Ok(r)
}

/// Index of the primitive whose surface is closest to `x`.
fn nearest_primitive(spec: &SceneSpec, x: Vec3) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in spec.primitives.iter().enumerate() {
        let d = shape_sdf(&p.shape, x).abs();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Rows touched with a non-zero gradient, by level.
fn levels_with_gradient(map: &NeuralMap, g: &crate::train::SparseRowGrad) -> std::collections::BTreeSet<u8> {
    g.touched()
        .iter()
        .filter(|&&row| g.row(row).iter().any(|&v| v != 0.0))
        .map(|&row| map.grid.row_code(row).0)
        .collect()
}

fn sparse_rows(g: &crate::train::SparseRowGrad) -> Vec<(u32, Vec<f64>)> {
    let mut rows: Vec<(u32, Vec<f64>)> = g.touched().iter().map(|&r| (r, g.row(r).to_vec())).filter(|(_, v)| v.iter().any(|&x| x != 0.0)).collect();
    rows.sort_by_key(|(r, _)| *r);
    rows
}

/// Instance purity of two same-class things and exact σ-split disjointness.
fn panoptic(ctx: &SuiteContext) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("panoptic");
    let spec = scene("panoptic")?;
    let mut scans = synth_scans(&spec, 10, 4000, ctx.stream(3))?;
    let vocab = InstanceVocabulary::build(&scans, 64);
    vocab.apply(&mut scans)?;
    let mut map = ctx.map(true, 64)?;
    let mut cfg = batch_config(Mode::BatchPanoptic, 1000, 1024, ctx.seed);
    cfg.weights.lambda5 = 1.0;
    train(&mut map, &scans, &cfg)?;
    let mesh = mesh_of(&map, &[])?;

    let things: Vec<usize> = (0..spec.primitives.len()).filter(|&i| spec.primitives[i].instance_id != 0).collect();
    let mut majority = Vec::new();
    for (k, &pi) in things.iter().enumerate() {
        let mut hist: FxHashMap<u32, usize> = FxHashMap::default();
        let mut n = 0usize;
        for (v, &inst) in mesh.mesh.vertices.iter().zip(&mesh.instances) {
            if nearest_primitive(&spec, *v) == pi {
                *hist.entry(inst).or_default() += 1;
                n += 1;
            }
        }
        let (id, count) = hist.into_iter().max_by_key(|&(id, c)| (c, std::cmp::Reverse(id))).unwrap_or((0, 0));
        let purity = if n == 0 { 0.0 } else { count as f64 / n as f64 };
        r.check(&format!("instance_{}_purity", k + 1), purity, Cmp::Ge, 0.95);
        r.note(&format!("instance_{}_vertices", k + 1), n as f64);
        r.note(&format!("instance_{}_majority_id", k + 1), id as f64);
        majority.push(id);
    }
    let distinct = majority.len() == 2 && majority[0] != majority[1] && majority.iter().all(|&m| m != 0);
    r.check("distinct_nonzero_instance_ids", f64::from(u8::from(distinct)), Cmp::Eq, 1.0);

    // σ-split: the class head reads the coarsest slot, the instance head the rest.
    let (samples, _) = build_batch(&scans, 1024, ctx.seed, 0, &cfg.sampler, &|_| false);
    let zero = LossWeights {
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        lambda5: 0.0,
        ..Default::default()
    };
    let grads = |w: LossWeights| -> Result<MapGrads> {
        let mut g = MapGrads::new(&map);
        evaluate_batch(&map, &samples, &w, &mut g, None)?;
        Ok(g)
    };
    let g1 = grads(zero)?;
    let g4 = grads(LossWeights { lambda4: 1.0, ..zero })?;
    let g5 = grads(LossWeights { lambda5: 1.0, ..zero })?;
    let l4 = levels_with_gradient(&map, &g4.sem);
    let l5 = levels_with_gradient(&map, &g5.sem);
    let coarsest = (map.grid.levels() - 1) as u8;
    let sem_in = map.grid.input_dim(FeatureTable::Semantic);
    let class_in = map.snf.input_dim();
    r.check("class_input_fraction", class_in as f64 / sem_in as f64, Cmp::Eq, 1.0 / 3.0);
    let stray4 = l4.iter().filter(|&&l| l != coarsest).count() + usize::from(l4.is_empty());
    let overlap = l4.intersection(&l5).count() + usize::from(l5.is_empty());
    r.check("semantic_grad_levels_outside_class_slot", stray4 as f64, Cmp::Eq, 0.0);
    r.check("semantic_instance_grad_overlap", overlap as f64, Cmp::Eq, 0.0);
    // L1 alone touches no semantic parameter, and neither label loss moves the
    // geometry side or the other head.
    let nonzero = |v: &[f64]| v.iter().filter(|&&x| x != 0.0).count();
    let leaked = nonzero(&g1.snf)
        + nonzero(&g1.inst)
        + g1.sem.touched().iter().map(|&row| nonzero(g1.sem.row(row))).sum::<usize>()
        + [&g4, &g5].iter().map(|g| usize::from(sparse_rows(&g.geo) != sparse_rows(&g1.geo)) + usize::from(g.gnf != g1.gnf)).sum::<usize>()
        + nonzero(&g4.inst)
        + nonzero(&g5.snf);
    r.check("label_grad_leaks_outside_own_head", leaked as f64, Cmp::Eq, 0.0);
    Ok(r)
}

fn mean_abs_sdf(map: &NeuralMap, points: &[Vec3]) -> f64 {
    let (sum, n) = map.sdf_batch(points).into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
    if n == 0 { f64::INFINITY } else { sum / n as f64 }
}

/// Incremental training over two disjoint regions with and without L3.
fn forgetting(ctx: &SuiteContext) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("forgetting");
    let spec = scene("forgetting")?;
    let (total, last) = (15, 14);
    let mut scans = synth_scans_range(&spec, 0..1, total, 8000, ctx.stream(3))?;
    scans.extend(synth_scans_range(&spec, last..last + 1, total, 8000, ctx.stream(3))?);
    let held = |range: std::ops::Range<usize>, keep: &dyn Fn(&Vec3) -> bool| -> Result<Vec<Vec3>> {
        Ok(synth_scans_range(&spec, range, total, 4000, ctx.stream(7))?
            .into_iter()
            .flat_map(|s| s.points)
            .filter(|p| keep(p))
            .collect())
    };
    let region1 = held(0..1, &|p| p[0] < 9.0)?;
    let region2 = held(last..last + 1, &|p| p[0] > 19.0)?;

    let config = |lambda3: f64| {
        let mut cfg = batch_config(Mode::IncrementalSemantic, 4000, 256, ctx.seed);
        cfg.weights.lambda3 = lambda3;
        cfg.decoder_adam = AdamConfig { lr: 1e-2, ..Default::default() };
        cfg.feature_adam = AdamConfig { lr: 1e-2, ..Default::default() };
        cfg
    };
    // The penalty has no effect on the first scan, so one run serves both arms.
    let mut first = ctx.map(false, 64)?;
    train(&mut first, &scans[..1], &config(0.0))?;
    r.note("region1_error_before_region2_m", mean_abs_sdf(&first, &region1));
    let mut errors = Vec::new();
    for lambda3 in [0.0, 1.0] {
        let mut map = ctx.map(false, 64)?;
        train(&mut map, &scans, &config(lambda3))?;
        let e = (mean_abs_sdf(&map, &region1), mean_abs_sdf(&map, &region2));
        r.note(&format!("lambda3_{lambda3}_region1_m"), e.0);
        r.note(&format!("lambda3_{lambda3}_region2_m"), e.1);
        errors.push(e);
    }
    let (off, on) = (errors[0], errors[1]);
    r.check("region1_error_with_minus_without", on.0 - off.0, Cmp::Lt, 0.0);
    r.check("region2_error_ratio", on.1 / off.1, Cmp::Le, 1.2);
    Ok(r)
}

/// Moving object excluded by class; static geometry compared to an
/// object-free run.
fn dynamic(ctx: &SuiteContext) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("dynamic");
    let spec = scene("dynamic")?;
    let mut still = spec.clone();
    still.primitives.retain(|p| !p.is_dynamic());
    let dynamic: Vec<u16> = spec.primitives.iter().filter(|p| p.is_dynamic()).map(|p| p.class_id).collect();
    let mut cfg = batch_config(Mode::BatchSemantic, 1000, 1024, ctx.seed);
    cfg.dynamic_classes = dynamic.clone();
    let run = |s: &SceneSpec, cfg: &TrainConfig| -> Result<SemanticMesh> {
        let scans = synth_scans(s, 10, 4000, ctx.stream(3))?;
        let mut map = ctx.map(false, 64)?;
        train(&mut map, &scans, cfg)?;
        mesh_of(&map, &cfg.dynamic_classes)
    };
    let with = run(&spec, &cfg)?;
    let without = run(&still, &cfg)?;
    let dyn_tris: usize = dynamic.iter().map(|&c| with.triangles_with_class(c)).sum();
    r.check("dynamic_class_triangles", dyn_tris as f64, Cmp::Eq, 0.0);
    let (a, b) = (with.mesh.triangles.len() as f64, without.mesh.triangles.len() as f64);
    r.check("static_triangle_count_rel_diff", (a - b).abs() / b.max(1.0), Cmp::Le, 0.02);
    r.note("triangles_with_object", a);
    r.note("triangles_without_object", b);
    let touching = with
        .mesh
        .triangles
        .iter()
        .filter(|t| t.iter().any(|&v| dynamic.contains(&with.classes[v as usize])))
        .count();
    r.note("triangles_touching_dynamic_class", touching as f64);

    let mut unfiltered = cfg.clone();
    unfiltered.dynamic_classes.clear();
    let ghost = run(&spec, &unfiltered)?;
    r.note("triangles_without_filtering", ghost.mesh.triangles.len() as f64);
    let ghost_dyn: usize = dynamic.iter().map(|&c| ghost.triangles_with_class(c)).sum();
    r.note("dynamic_class_triangles_without_filtering", ghost_dyn as f64);
    Ok(r)
}

fn submap(ctx: &SuiteContext, spec: &SceneSpec, range: (usize, usize), total: usize, steps: usize) -> Result<(SemanticMesh, RigidTransform)> {
    let scans = synth_scans_range(spec, range.0..range.1, total, 4000, ctx.stream(3))?;
    let reference = scans[0].pose;
    let into = invert_rigid(&reference);
    let local: Vec<LabeledScan> = scans.iter().map(|s| s.transformed(&into)).collect();
    let mut map = ctx.map(false, 64)?;
    train(&mut map, &local, &batch_config(Mode::BatchSemantic, steps, 1024, ctx.seed))?;
    Ok((mesh_of(&map, &[])?, RigidTransform::from_pose(&reference)?))
}

/// Two submaps with a known relative pose, perturbed and re-aligned.
fn merge(ctx: &SuiteContext) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("merge");
    let spec = scene("merge")?;
    let total = 24;
    let half = 12;
    let steps = 800;
    let (mesh_a, ref_a) = submap(ctx, &spec, (0, half), total, steps)?;
    let drift = RigidTransform::from_axis_angle([0.2, 0.1, 1.0], 1.5f64.to_radians(), [0.25, -0.15, 0.05]);
    let cfg = MergeConfig {
        seed: ctx.seed,
        ..Default::default()
    };
    let mut residuals = Vec::new();
    let mut fused = None;
    for overlap in [1usize, 5, 10] {
        let range = (half - overlap, total);
        let (mesh_b, ref_b) = submap(ctx, &spec, range, total, steps)?;
        let subs = [
            Submap {
                mesh: mesh_a.clone(),
                reference: ref_a,
                scans: (0, half),
            },
            Submap {
                mesh: mesh_b,
                reference: ref_b.compose(&drift),
                scans: range,
            },
        ];
        let rep = merge_submaps(&subs, &cfg)?;
        let truth = ref_a.inverse().compose(&ref_b);
        let (angle, dist) = rep.pairs[0].transform.difference(&truth);
        r.note(&format!("overlap_{overlap}_rotation_error_deg"), angle.to_degrees());
        r.note(&format!("overlap_{overlap}_translation_error_m"), dist);
        r.note(&format!("overlap_{overlap}_icp_rms_m"), rep.pairs[0].rms);
        residuals.push(rep.pairs[0].rms);
        if overlap == 5 {
            r.check("rotation_error_deg", angle.to_degrees(), Cmp::Le, 0.2);
            r.check("translation_error_m", dist, Cmp::Le, 0.01);
            fused = Some(transform_mesh(&rep.mesh, &ref_a));
        }
    }
    let increases = residuals.windows(2).filter(|w| w[1] > w[0]).count();
    r.check("icp_residual_increases_over_1_5_10", increases as f64, Cmp::Eq, 0.0);

    let scans = synth_scans(&spec, total, 4000, ctx.stream(3))?;
    let mut single = ctx.map(false, 64)?;
    train(&mut single, &scans, &batch_config(Mode::BatchSemantic, steps, 1024, ctx.seed))?;
    let single = mesh_of(&single, &[])?;
    let gt: Vec<Vec3> = sample_visible_surface(&spec, total, 50_000, ctx.stream(5)).iter().map(|p| p.x).collect();
    let score = |m: &SemanticMesh| -> Result<f64> {
        let pred = sample_surface(m, 50_000, ctx.stream(4))?;
        Ok(reconstruction_metrics(&pred.points, &gt, 0.1)?.chamfer_l1_cm)
    };
    let fused = fused.ok_or_else(|| Error::contract("no fused mesh"))?;
    let (cf, cs) = (score(&fused)?, score(&single)?);
    r.check("fused_to_single_chamfer_ratio", cf / cs, Cmp::Le, 1.2);
    r.note("fused_chamfer_l1_cm", cf);
    r.note("single_chamfer_l1_cm", cs);
    Ok(r)
}

/// Fewer rays per scan leave more of the surface untriangulated.
fn sparsity(ctx: &SuiteContext) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("sparsity");
    let spec = scene("geometry")?;
    let gt: Vec<Vec3> = sample_visible_surface(&spec, 10, 50_000, ctx.stream(5)).iter().map(|p| p.x).collect();
    let mut holes = Vec::new();
    for rays in [2000usize, 1000] {
        let scans = synth_scans(&spec, 10, rays, ctx.stream(3))?;
        let mut map = ctx.map(false, 64)?;
        train(&mut map, &scans, &batch_config(Mode::BatchSemantic, 600, 512, ctx.seed))?;
        let mesh = mesh_of(&map, &[])?;
        let pred = sample_surface(&mesh, 50_000, ctx.stream(4))?;
        let m = reconstruction_metrics(&pred.points, &gt, 0.1)?;
        let hole = 100.0 - m.completion_ratio;
        r.note(&format!("hole_pct_{rays}_rays"), hole);
        holes.push(hole);
    }
    r.check("hole_pct_increase_when_halving_rays", holes[1] - holes[0], Cmp::Gt, 0.0);
    Ok(r)
}
