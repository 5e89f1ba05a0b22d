//! Finite-difference verification of every training gradient.
//!
//! Each configuration builds a random map and sample batch, then compares the
//! analytic gradient of one objective (`L1` alone or `L1 + λk·Lk`) against
//! central differences on randomly chosen decoder parameters and corner
//! features, and checks the spatial SDF gradient at random points.
//! Coordinates whose perturbation flips a ReLU (or, for positions, crosses a
//! voxel face) are resampled, since the difference quotient is meaningless
//! across a kink.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::Result;
use crate::loss::{ImportanceStore, LossWeights};
use crate::model::{DecoderConfig, Mode, NeuralMap};
use crate::octree::{FeatureTable, GridConfig};
use crate::sampler::{Band, TrainingSample};
use crate::train::{evaluate_batch, MapGrads};
use crate::util::{stream_rng, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum GradKind {
    /// Decoder parameters.
    Decoder,
    /// Corner features, reached through interpolation.
    Interpolation,
    /// Query position.
    Position,
}

impl GradKind {
    pub fn tolerance(self) -> f64 {
        match self {
            GradKind::Decoder => 1e-4,
            GradKind::Interpolation | GradKind::Position => 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub configs: usize,
    pub coords_per_tensor: usize,
    pub points_per_config: usize,
    pub samples: usize,
    pub step: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            configs: 100,
            coords_per_tensor: 3,
            points_per_config: 3,
            samples: 24,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradStat {
    pub checks: usize,
    pub max_rel: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub configs: usize,
    /// Keyed by (objective term, gradient kind).
    pub stats: BTreeMap<(&'static str, GradKind), GradStat>,
    pub resampled: usize,
    pub worst: Option<String>,
}

impl GradCheckReport {
    fn record(&mut self, term: &'static str, kind: GradKind, rel: f64, what: impl FnOnce() -> String) {
        let s = self.stats.entry((term, kind)).or_default();
        s.checks += 1;
        if rel > s.max_rel {
            s.max_rel = rel;
        }
        if rel >= kind.tolerance() && self.worst.is_none() {
            self.worst = Some(what());
        }
    }

    pub fn max_rel(&self, kind: GradKind) -> f64 {
        self.stats
            .iter()
            .filter(|((_, k), _)| *k == kind)
            .map(|(_, s)| s.max_rel)
            .fold(0.0, f64::max)
    }

    pub fn checks(&self) -> usize {
        self.stats.values().map(|s| s.checks).sum()
    }

    pub fn passed(&self) -> bool {
        !self.stats.is_empty() && self.stats.iter().all(|((_, k), s)| s.max_rel < k.tolerance())
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configurations, {} checks, {} kink resamples", self.configs, self.checks(), self.resampled)?;
        for ((term, kind), s) in &self.stats {
            writeln!(f, "  {term:>4} {kind:?}: {} checks, max rel err {:.2e}", s.checks, s.max_rel)?;
        }
        if let Some(w) = &self.worst {
            writeln!(f, "  first failure: {w}")?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
enum Coord {
    Geo(usize),
    Sem(usize),
    Gnf(usize),
    Snf(usize),
    Inst(usize),
}

fn coord_mut(map: &mut NeuralMap, c: Coord) -> &mut f64 {
    match c {
        Coord::Geo(j) => &mut map.grid.features_mut(FeatureTable::Geometry)[j],
        Coord::Sem(j) => &mut map.grid.features_mut(FeatureTable::Semantic)[j],
        Coord::Gnf(j) => &mut map.gnf.params_mut()[j],
        Coord::Snf(j) => &mut map.snf.params_mut()[j],
        Coord::Inst(j) => &mut map.instance.as_mut().expect("instance head").params_mut()[j],
    }
}

/// Corner rows of the stencil at `x`, per level.
fn cell_rows(map: &NeuralMap, x: Vec3) -> Option<Vec<Option<[u32; 8]>>> {
    map.grid.stencil(x).map(|s| s.slots.iter().map(|l| l.as_ref().map(|l| l.rows)).collect())
}

/// ReLU state of every decoder evaluation the batch performs.
fn activation_pattern(map: &NeuralMap, samples: &[TrainingSample]) -> Vec<bool> {
    let mut out = Vec::new();
    let split = map.class_input_dim();
    for s in samples {
        let Some(z) = map.grid.query_concat(s.x, FeatureTable::Geometry) else {
            continue;
        };
        if let Ok((_, t)) = map.gnf.forward(&z, 1) {
            out.extend(t.active_units());
        }
        if s.band != Band::Surface || matches!(s.class_id, None | Some(0)) {
            continue;
        }
        let Some(z) = map.grid.query_concat(s.x, FeatureTable::Semantic) else {
            continue;
        };
        if let Ok((_, t)) = map.snf.forward(&z[..split], 1) {
            out.extend(t.active_units());
        }
        if let Some(head) = &map.instance {
            if let Ok((_, t)) = head.forward(&z[split..], 1) {
                out.extend(t.active_units());
            }
        }
    }
    out
}

struct Objective {
    term: &'static str,
    mode: Mode,
    weights: LossWeights,
    forgetting: Option<ImportanceStore>,
}

impl Objective {
    fn value(&self, map: &NeuralMap, samples: &[TrainingSample], scratch: &mut MapGrads) -> Result<f64> {
        scratch.clear();
        let (mut terms, _) = evaluate_batch(map, samples, &self.weights, scratch, None)?;
        if let Some(store) = &self.forgetting {
            terms.l3 = store.forgetting_loss(&map.tensors())?;
        }
        Ok(terms.total(&self.weights, self.mode))
    }

    fn gradient(&self, map: &NeuralMap, samples: &[TrainingSample]) -> Result<MapGrads> {
        let mut g = MapGrads::new(map);
        evaluate_batch(map, samples, &self.weights, &mut g, None)?;
        if let Some(store) = &self.forgetting {
            let t = map.tensors();
            let l3 = self.weights.lambda3;
            for (idx, sg) in [(0, &mut g.geo), (1, &mut g.sem)] {
                let dim = sg.dim();
                for r in 0..map.grid.rows() {
                    store.forgetting_term(idx, t[idx], r * dim..(r + 1) * dim, l3, sg.row_mut(r as u32));
                }
            }
            for (idx, dg) in [(2, &mut g.gnf), (3, &mut g.snf), (4, &mut g.inst)] {
                if idx < t.len() {
                    store.forgetting_term(idx, t[idx], 0..t[idx].len(), l3, dg);
                }
            }
        }
        Ok(g)
    }
}

fn analytic(g: &MapGrads, c: Coord) -> f64 {
    let dense = |sg: &crate::train::SparseRowGrad, j: usize| sg.row((j / sg.dim()) as u32)[j % sg.dim()];
    match c {
        Coord::Geo(j) => dense(&g.geo, j),
        Coord::Sem(j) => dense(&g.sem, j),
        Coord::Gnf(j) => g.gnf[j],
        Coord::Snf(j) => g.snf[j],
        Coord::Inst(j) => g.inst[j],
    }
}

fn random_map(rng: &mut impl Rng, panoptic: bool) -> Result<(NeuralMap, Vec<Vec3>)> {
    let grid = GridConfig {
        init_std: rng.random_range(0.05..0.5),
        seed: rng.random(),
        ..Default::default()
    };
    let dec = DecoderConfig {
        seed: rng.random(),
        ..Default::default()
    };
    let mut map = NeuralMap::new(grid, &dec, panoptic)?;
    let c: Vec3 = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)];
    let anchors: Vec<Vec3> = (0..6)
        .map(|_| [c[0] + rng.random_range(-0.6..0.6), c[1] + rng.random_range(-0.6..0.6), c[2] + rng.random_range(-0.6..0.6)])
        .collect();
    map.grid.allocate_for_points(&anchors)?;
    Ok((map, anchors))
}

fn random_samples(rng: &mut impl Rng, anchors: &[Vec3], n: usize, classes: u16, slots: u32) -> Vec<TrainingSample> {
    (0..n)
        .map(|_| {
            let a = anchors[rng.random_range(0..anchors.len())];
            let x = [
                a[0] + rng.random_range(-0.08..0.08),
                a[1] + rng.random_range(-0.08..0.08),
                a[2] + rng.random_range(-0.08..0.08),
            ];
            let surface = rng.random_bool(0.7);
            TrainingSample {
                x,
                d: if surface { rng.random_range(-0.2..0.2) } else { rng.random_range(0.3..3.0) },
                class_id: if surface { Some(rng.random_range(0..classes)) } else { None },
                instance_id: rng.random_range(0..slots),
                band: if surface { Band::Surface } else { Band::Free },
            }
        })
        .collect()
}

fn objectives(rng: &mut impl Rng, mode: Mode, map: &NeuralMap) -> Vec<Objective> {
    let zero = LossWeights {
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        lambda5: 0.0,
        ..Default::default()
    };
    let mut out = vec![Objective {
        term: "L1",
        mode,
        weights: zero,
        forgetting: None,
    }];
    out.push(Objective {
        term: "L2",
        mode,
        weights: LossWeights {
            lambda2: rng.random_range(0.05..1.0),
            ..zero
        },
        forgetting: None,
    });
    out.push(Objective {
        term: "L4",
        mode,
        weights: LossWeights {
            lambda4: rng.random_range(0.1..2.0),
            ..zero
        },
        forgetting: None,
    });
    if mode.is_panoptic() {
        out.push(Objective {
            term: "L5",
            mode,
            weights: LossWeights {
                lambda5: rng.random_range(0.1..2.0),
                ..zero
            },
            forgetting: None,
        });
    }
    if mode.is_incremental() {
        let mut store = ImportanceStore::new(1000.0);
        for (k, t) in map.tensors().iter().enumerate() {
            let shifted: Vec<f64> = t.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            store.register(&format!("t{k}"), &shifted);
            let beta: Vec<f64> = (0..t.len()).map(|_| rng.random_range(0.0..5.0)).collect();
            store.accumulate(k, 0, &beta);
        }
        out.push(Objective {
            term: "L3",
            mode,
            weights: LossWeights {
                lambda3: rng.random_range(0.5..100.0),
                ..zero
            },
            forgetting: Some(store),
        });
    }
    out
}

fn pick_coords(rng: &mut impl Rng, map: &NeuralMap, g: &MapGrads, n: usize) -> Vec<Coord> {
    let mut out = Vec::new();
    let mut from = |len: usize, make: &dyn Fn(usize) -> Coord, touched: Option<&[u32]>, dim: usize| {
        if len == 0 {
            return;
        }
        for _ in 0..n {
            // Prefer coordinates with a non-zero gradient.
            let mut c = make(0);
            for _ in 0..20 {
                let j = match touched {
                    Some(rows) if !rows.is_empty() => {
                        rows[rng.random_range(0..rows.len())] as usize * dim + rng.random_range(0..dim)
                    }
                    _ => rng.random_range(0..len),
                };
                c = make(j);
                if analytic(g, c) != 0.0 {
                    break;
                }
            }
            out.push(c);
        }
    };
    let geo = map.grid.features(FeatureTable::Geometry).len();
    let sem = map.grid.features(FeatureTable::Semantic).len();
    from(geo, &Coord::Geo, Some(g.geo.touched()), g.geo.dim());
    from(sem, &Coord::Sem, Some(g.sem.touched()), g.sem.dim());
    from(map.gnf.num_params(), &Coord::Gnf, None, 1);
    from(map.snf.num_params(), &Coord::Snf, None, 1);
    from(map.instance.as_ref().map_or(0, |m| m.num_params()), &Coord::Inst, None, 1);
    out
}

fn check_position(
    map: &NeuralMap,
    rng: &mut impl Rng,
    anchors: &[Vec3],
    cfg: &GradCheckConfig,
    report: &mut GradCheckReport,
    config: usize,
) {
    let h = 1e-6;
    let mut done = 0;
    let mut tries = 0;
    while done < cfg.points_per_config && tries < 50 * cfg.points_per_config {
        tries += 1;
        let a = anchors[rng.random_range(0..anchors.len())];
        let x = [
            a[0] + rng.random_range(-0.08..0.08),
            a[1] + rng.random_range(-0.08..0.08),
            a[2] + rng.random_range(-0.08..0.08),
        ];
        let Some((_, g)) = map.sdf_gradient(x) else { continue };
        let base = cell_rows(map, x);
        let pattern = |p: Vec3| {
            let z = map.grid.query_concat(p, FeatureTable::Geometry)?;
            let (_, t) = map.gnf.forward(&z, 1).ok()?;
            Some(t.active_units())
        };
        let p0 = pattern(x);
        let mut fd = [0.0; 3];
        let mut smooth = true;
        for ax in 0..3 {
            let mut p = x;
            let mut q = x;
            p[ax] += h;
            q[ax] -= h;
            let same_cells = cell_rows(map, p) == base && cell_rows(map, q) == base;
            if !same_cells || pattern(p) != p0 || pattern(q) != p0 {
                smooth = false;
                break;
            }
            match (map.sdf(p), map.sdf(q)) {
                (Some(a), Some(b)) => fd[ax] = (a - b) / (2.0 * h),
                _ => smooth = false,
            }
        }
        if !smooth {
            report.resampled += 1;
            continue;
        }
        for ax in 0..3 {
            let rel = rel_err(g[ax], fd[ax], cfg.floor);
            report.record("sdf", GradKind::Position, rel, || {
                format!("config {config}: position axis {ax} at {x:?}: analytic {} vs fd {}", g[ax], fd[ax])
            });
        }
        done += 1;
    }
}

/// Runs the full check; see [`GradCheckConfig`].
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        configs: cfg.configs,
        ..Default::default()
    };
    let h = cfg.step;
    for i in 0..cfg.configs {
        let mut rng = stream_rng(cfg.seed, 0x4752_4144, i as u64);
        let mode = Mode::ALL[i % Mode::ALL.len()];
        let (mut map, anchors) = random_map(&mut rng, mode.is_panoptic())?;
        let slots = map.instance_slots().max(1) as u32;
        let samples = random_samples(&mut rng, &anchors, cfg.samples, map.classes() as u16, slots);
        let base_pattern = activation_pattern(&map, &samples);
        let mut scratch = MapGrads::new(&map);
        for obj in objectives(&mut rng, mode, &map) {
            let g = obj.gradient(&map, &samples)?;
            for c in pick_coords(&mut rng, &map, &g, cfg.coords_per_tensor) {
                let kind = match c {
                    Coord::Geo(_) | Coord::Sem(_) => GradKind::Interpolation,
                    _ => GradKind::Decoder,
                };
                let orig = *coord_mut(&mut map, c);
                *coord_mut(&mut map, c) = orig + h;
                let kink_p = activation_pattern(&map, &samples) != base_pattern;
                let fp = obj.value(&map, &samples, &mut scratch)?;
                *coord_mut(&mut map, c) = orig - h;
                let kink_m = activation_pattern(&map, &samples) != base_pattern;
                let fm = obj.value(&map, &samples, &mut scratch)?;
                *coord_mut(&mut map, c) = orig;
                if kink_p || kink_m {
                    report.resampled += 1;
                    continue;
                }
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic(&g, c);
                let rel = rel_err(a, fd, cfg.floor);
                report.record(obj.term, kind, rel, || {
                    format!("config {i} ({mode}), {} {c:?}: analytic {a} vs fd {fd}", obj.term)
                });
            }
        }
        check_position(&map, &mut rng, &anchors, cfg, &mut report, i);
    }
    Ok(report)
}
