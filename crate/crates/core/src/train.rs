//! Loss evaluation with analytic gradients, and the batch and incremental
//! training loops that optimize features and decoders jointly.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::{bce_sdf, cross_entropy_into, eikonal_residual, instance_target, ImportanceStore, LossWeights};
use crate::mlp::{adam_step, adam_step_rows, AdamConfig, AdamState, ForwardTrace, TangentTrace};
use crate::model::{Mode, NeuralMap};
use crate::octree::{FeatureMerge, FeatureTable, OctreeFeatureGrid, Stencil};
use crate::sampler::{build_batch, Band, LabeledScan, SamplerConfig, TrainingSample};
use crate::util::{dot, scale, sub, Vec3};

/// Samples per gradient chunk; fixed so results never depend on threading.
pub const GRAD_CHUNK: usize = 256;

/// Row-sparse gradient of a feature table.
#[derive(Clone, Debug)]
pub struct SparseRowGrad {
    dim: usize,
    data: Vec<f64>,
    touched: Vec<u32>,
    mark: Vec<bool>,
}

impl SparseRowGrad {
    pub fn new(dim: usize) -> Self {
        SparseRowGrad {
            dim,
            data: Vec::new(),
            touched: Vec::new(),
            mark: Vec::new(),
        }
    }

    pub fn ensure_rows(&mut self, rows: usize) {
        if self.mark.len() < rows {
            self.mark.resize(rows, false);
            self.data.resize(rows * self.dim, 0.0);
        }
    }

    #[inline]
    pub fn row_mut(&mut self, r: u32) -> &mut [f64] {
        let i = r as usize;
        if !self.mark[i] {
            self.mark[i] = true;
            self.touched.push(r);
        }
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row(&self, r: u32) -> &[f64] {
        let i = r as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows that received a contribution, in first-touch order.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    /// Dense view (`rows x dim`).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn clear(&mut self) {
        for &r in &self.touched {
            let i = r as usize;
            self.mark[i] = false;
            self.data[i * self.dim..(i + 1) * self.dim].iter_mut().for_each(|v| *v = 0.0);
        }
        self.touched.clear();
    }

    pub fn add_scaled(&mut self, other: &SparseRowGrad, w: f64) {
        for &r in other.touched() {
            let src = other.row(r);
            for (d, s) in self.row_mut(r).iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
}

/// Gradients of every trainable tensor of a [`NeuralMap`].
#[derive(Clone, Debug)]
pub struct MapGrads {
    pub geo: SparseRowGrad,
    pub sem: SparseRowGrad,
    pub gnf: Vec<f64>,
    pub snf: Vec<f64>,
    pub inst: Vec<f64>,
}

impl MapGrads {
    pub fn new(map: &NeuralMap) -> Self {
        let mut g = MapGrads {
            geo: SparseRowGrad::new(map.grid.feature_dim(FeatureTable::Geometry)),
            sem: SparseRowGrad::new(map.grid.feature_dim(FeatureTable::Semantic)),
            gnf: vec![0.0; map.gnf.num_params()],
            snf: vec![0.0; map.snf.num_params()],
            inst: vec![0.0; map.instance.as_ref().map_or(0, |m| m.num_params())],
        };
        g.fit(map);
        g
    }

    /// Grow the row buffers to the current grid size.
    pub fn fit(&mut self, map: &NeuralMap) {
        self.geo.ensure_rows(map.grid.rows());
        self.sem.ensure_rows(map.grid.rows());
    }

    pub fn clear(&mut self) {
        self.geo.clear();
        self.sem.clear();
        for v in [&mut self.gnf, &mut self.snf, &mut self.inst] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn add_scaled(&mut self, other: &MapGrads, w: f64) {
        self.geo.add_scaled(&other.geo, w);
        self.sem.add_scaled(&other.sem, w);
        for (a, b) in [
            (&mut self.gnf, &other.gnf),
            (&mut self.snf, &other.snf),
            (&mut self.inst, &other.inst),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
}

impl LossTerms {
    /// Weighted objective of `mode`.
    pub fn total(&self, w: &LossWeights, mode: Mode) -> f64 {
        let mut t = self.l1 + w.lambda2 * self.l2 + w.lambda4 * self.l4;
        if mode.is_incremental() {
            t += w.lambda3 * self.l3;
        }
        if mode.is_panoptic() {
            t += w.lambda5 * self.l5;
        }
        t
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("L1", self.l1), ("L2", self.l2), ("L3", self.l3), ("L4", self.l4), ("L5", self.l5)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchCounts {
    pub samples: usize,
    /// Samples outside the mapped region.
    pub absent: usize,
    pub surface: usize,
    /// Surface samples carrying a non-zero class.
    pub labeled: usize,
}

#[derive(Clone, Copy)]
struct Flags {
    eikonal: bool,
    semantic: bool,
    instance: bool,
    alpha: f64,
}

#[derive(Default)]
struct ChunkOut {
    l1: f64,
    l2: f64,
    l4: f64,
    l5: f64,
    absent: usize,
    surface: usize,
    stencils: Vec<Stencil>,
    d_geo: Vec<f64>,
    g_geo: Vec<f64>,
    eik: Vec<Vec3>,
    labeled: Vec<usize>,
    d_sem: Vec<f64>,
    gnf_l1: Vec<f64>,
    gnf_eik: Vec<f64>,
    snf: Vec<f64>,
    inst: Vec<f64>,
}

fn slot_range(merge: FeatureMerge, slot: usize, dim: usize) -> std::ops::Range<usize> {
    match merge {
        FeatureMerge::Concat => slot * dim..(slot + 1) * dim,
        FeatureMerge::Sum => 0..dim,
    }
}

/// Add `scale · w_c · v[slot]` to the rows of every stencil corner.
fn scatter_input(grid: &OctreeFeatureGrid, st: &Stencil, v: &[f64], scale: f64, out: &mut SparseRowGrad) {
    let dim = out.dim();
    let merge = grid.config().merge;
    for (slot, ls) in st.slots.iter().enumerate() {
        let Some(ls) = ls else { continue };
        let src = &v[slot_range(merge, slot, dim)];
        if src.iter().all(|&x| x == 0.0) {
            continue;
        }
        for c in 0..8 {
            let w = scale * ls.weights[c];
            for (d, s) in out.row_mut(ls.rows[c]).iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
}

/// Add `scale · (e · ∇w_c) · g[slot]` to the rows of every stencil corner.
fn scatter_eikonal(grid: &OctreeFeatureGrid, st: &Stencil, e: Vec3, g: &[f64], scale: f64, out: &mut SparseRowGrad) {
    let dim = out.dim();
    let merge = grid.config().merge;
    for (slot, ls) in st.slots.iter().enumerate() {
        let Some(ls) = ls else { continue };
        let src = &g[slot_range(merge, slot, dim)];
        for c in 0..8 {
            let w = scale * dot(e, ls.dweights[c]);
            if w == 0.0 {
                continue;
            }
            for (d, s) in out.row_mut(ls.rows[c]).iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
}

fn process_chunk(
    map: &NeuralMap,
    samples: &[TrainingSample],
    ids: &[usize],
    surface: bool,
    flags: Flags,
) -> Result<ChunkOut> {
    let grid = &map.grid;
    let gnf = &map.gnf;
    let gdim = gnf.input_dim();
    let eikonal = surface && flags.eikonal;
    let mut out = ChunkOut {
        gnf_l1: vec![0.0; gnf.num_params()],
        gnf_eik: vec![0.0; if eikonal { gnf.num_params() } else { 0 }],
        ..Default::default()
    };
    let mut z = Vec::with_capacity(ids.len() * gdim);
    let mut jac: Vec<[f64; 3]> = Vec::new();
    let mut valid = Vec::with_capacity(ids.len());
    let mut st = Stencil::default();
    let mut row = vec![0.0; gdim];
    let mut jrow = vec![[0.0; 3]; gdim];
    for &i in ids {
        if !grid.stencil_into(samples[i].x, &mut st) {
            out.absent += 1;
            continue;
        }
        grid.assemble(&st, FeatureTable::Geometry, &mut row);
        z.extend_from_slice(&row);
        if eikonal {
            grid.assemble_jacobian(&st, FeatureTable::Geometry, &mut jrow);
            jac.extend_from_slice(&jrow);
        }
        out.stencils.push(st.clone());
        valid.push(i);
    }
    let n = valid.len();
    if n == 0 {
        return Ok(out);
    }
    let mut trace = ForwardTrace::default();
    gnf.forward_into(&z, n, &mut trace)?;
    let mut dout = vec![0.0; n];
    for (k, (&i, &p)) in valid.iter().zip(trace.output()).enumerate() {
        let (l, g) = bce_sdf(p, samples[i].d, flags.alpha);
        out.l1 += l;
        dout[k] = g;
    }
    out.d_geo = vec![0.0; n * gdim];
    gnf.backward_into(&trace, &dout, &mut out.gnf_l1, Some(&mut out.d_geo))?;
    if !surface {
        return Ok(out);
    }
    out.surface = n;
    let ones = vec![1.0; n];
    if eikonal {
        out.g_geo = vec![0.0; n * gdim];
        gnf.input_gradient(&trace, &ones, &mut out.g_geo)?;
        let mut t = vec![0.0; n * gdim];
        for k in 0..n {
            let g = &out.g_geo[k * gdim..(k + 1) * gdim];
            let jk = &jac[k * gdim..(k + 1) * gdim];
            let mut s = [0.0; 3];
            for (j, &gj) in jk.iter().zip(g) {
                for a in 0..3 {
                    s[a] += j[a] * gj;
                }
            }
            let (v, e) = eikonal_residual(s);
            out.l2 += v;
            out.eik.push(e);
            for (tj, j) in t[k * gdim..(k + 1) * gdim].iter_mut().zip(jk) {
                *tj = dot(*j, e);
            }
        }
        let mut tt = TangentTrace::default();
        gnf.tangent_forward(&trace, &t, &mut tt)?;
        gnf.tangent_backward(&trace, &tt, &ones, &mut out.gnf_eik)?;
    }
    if flags.semantic || flags.instance {
        semantic_chunk(map, samples, &valid, flags, &mut out)?;
    }
    Ok(out)
}

fn semantic_chunk(
    map: &NeuralMap,
    samples: &[TrainingSample],
    valid: &[usize],
    flags: Flags,
    out: &mut ChunkOut,
) -> Result<()> {
    let grid = &map.grid;
    let classes = map.classes();
    let sem_in = grid.input_dim(FeatureTable::Semantic);
    let split = map.class_input_dim();
    let mut class_in = Vec::new();
    let mut inst_in = Vec::new();
    let mut targets = Vec::new();
    let mut row = vec![0.0; sem_in];
    for (k, &i) in valid.iter().enumerate() {
        let s = &samples[i];
        let Some(c) = s.class_id else { continue };
        if c == 0 {
            continue;
        }
        if c as usize >= classes {
            return Err(Error::contract(format!("class id {c} outside [0, {classes})")));
        }
        out.labeled.push(k);
        grid.assemble(&out.stencils[k], FeatureTable::Semantic, &mut row);
        class_in.extend_from_slice(&row[..split]);
        inst_in.extend_from_slice(&row[split..]);
        targets.push((c, s.instance_id));
    }
    let m = targets.len();
    out.d_sem = vec![0.0; m * sem_in];
    if m == 0 {
        return Ok(());
    }
    if flags.semantic {
        let (logits, trace) = map.snf.forward(&class_in, m)?;
        let mut dl = vec![0.0; logits.len()];
        for (r, &(c, _)) in targets.iter().enumerate() {
            out.l4 += cross_entropy_into(
                &logits[r * classes..(r + 1) * classes],
                c as usize,
                &mut dl[r * classes..(r + 1) * classes],
            );
        }
        out.snf = vec![0.0; map.snf.num_params()];
        let mut din = vec![0.0; m * split];
        map.snf.backward_into(&trace, &dl, &mut out.snf, Some(&mut din))?;
        for r in 0..m {
            out.d_sem[r * sem_in..r * sem_in + split].copy_from_slice(&din[r * split..(r + 1) * split]);
        }
    }
    if let (true, Some(head)) = (flags.instance, &map.instance) {
        let q = head.output_dim();
        let idim = sem_in - split;
        let (logits, trace) = head.forward(&inst_in, m)?;
        let mut dl = vec![0.0; logits.len()];
        for (r, &(c, inst)) in targets.iter().enumerate() {
            let t = instance_target(map.is_thing(c), inst);
            if t as usize >= q {
                return Err(Error::UnknownInstance(t));
            }
            out.l5 += cross_entropy_into(&logits[r * q..(r + 1) * q], t as usize, &mut dl[r * q..(r + 1) * q]);
        }
        out.inst = vec![0.0; head.num_params()];
        let mut din = vec![0.0; m * idim];
        head.backward_into(&trace, &dl, &mut out.inst, Some(&mut din))?;
        for r in 0..m {
            out.d_sem[r * sem_in + split..(r + 1) * sem_in].copy_from_slice(&din[r * idim..(r + 1) * idim]);
        }
    }
    Ok(())
}

fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
    if src.is_empty() || w == 0.0 {
        return;
    }
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
}

/// Loss terms L1, L2, L4, L5 of a sample batch (batch means) and their
/// weighted gradients, accumulated into `grads`. When `l1_grads` is given it
/// additionally receives the unweighted gradient of L1 alone.
///
/// Terms whose weight is zero are neither evaluated nor differentiated.
pub fn evaluate_batch(
    map: &NeuralMap,
    samples: &[TrainingSample],
    weights: &LossWeights,
    grads: &mut MapGrads,
    mut l1_grads: Option<&mut MapGrads>,
) -> Result<(LossTerms, BatchCounts)> {
    let flags = Flags {
        eikonal: weights.lambda2 > 0.0,
        semantic: weights.lambda4 > 0.0,
        instance: map.is_panoptic() && weights.lambda5 > 0.0,
        alpha: weights.alpha,
    };
    let surface: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].band == Band::Surface).collect();
    let free: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].band == Band::Free).collect();
    let jobs: Vec<(&[usize], bool)> = surface
        .chunks(GRAD_CHUNK)
        .map(|c| (c, true))
        .chain(free.chunks(GRAD_CHUNK).map(|c| (c, false)))
        .collect();
    let outs: Vec<ChunkOut> = jobs
        .par_iter()
        .map(|&(ids, surf)| process_chunk(map, samples, ids, surf, flags))
        .collect::<Result<_>>()?;

    let mut counts = BatchCounts {
        samples: samples.len(),
        ..Default::default()
    };
    let mut terms = LossTerms::default();
    let mut valid = 0usize;
    for o in &outs {
        counts.absent += o.absent;
        counts.surface += o.surface;
        counts.labeled += o.labeled.len();
        valid += o.stencils.len();
        terms.l1 += o.l1;
        terms.l2 += o.l2;
        terms.l4 += o.l4;
        terms.l5 += o.l5;
    }
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    terms.l1 *= inv(valid);
    terms.l2 *= inv(counts.surface);
    terms.l4 *= inv(counts.labeled);
    terms.l5 *= inv(counts.labeled);
    let s1 = inv(valid);
    let s2 = weights.lambda2 * inv(counts.surface);
    let s4 = weights.lambda4 * inv(counts.labeled);
    let s5 = weights.lambda5 * inv(counts.labeled);

    grads.fit(map);
    if let Some(l1) = l1_grads.as_deref_mut() {
        l1.fit(map);
    }
    let grid = &map.grid;
    let gdim = map.gnf.input_dim();
    let sem_in = grid.input_dim(FeatureTable::Semantic);
    let split = map.class_input_dim();
    let mut scaled = vec![0.0; sem_in];
    for o in &outs {
        axpy(&mut grads.gnf, &o.gnf_l1, s1);
        axpy(&mut grads.gnf, &o.gnf_eik, s2);
        axpy(&mut grads.snf, &o.snf, s4);
        axpy(&mut grads.inst, &o.inst, s5);
        for (k, st) in o.stencils.iter().enumerate() {
            let d = &o.d_geo[k * gdim..(k + 1) * gdim];
            scatter_input(grid, st, d, s1, &mut grads.geo);
        }
        if let Some(l1) = l1_grads.as_deref_mut() {
            axpy(&mut l1.gnf, &o.gnf_l1, s1);
            for (k, st) in o.stencils.iter().enumerate() {
                scatter_input(grid, st, &o.d_geo[k * gdim..(k + 1) * gdim], s1, &mut l1.geo);
            }
        }
        for (k, &e) in o.eik.iter().enumerate() {
            let g = &o.g_geo[k * gdim..(k + 1) * gdim];
            scatter_eikonal(grid, &o.stencils[k], e, g, s2, &mut grads.geo);
        }
        for (r, &k) in o.labeled.iter().enumerate() {
            let d = &o.d_sem[r * sem_in..(r + 1) * sem_in];
            for (j, (dst, &v)) in scaled.iter_mut().zip(d).enumerate() {
                *dst = v * if j < split { s4 } else { s5 };
            }
            scatter_input(grid, &o.stencils[k], &scaled, 1.0, &mut grads.sem);
        }
    }
    Ok((terms, counts))
}

/// Points whose voxels are allocated for a scan: each endpoint and the two
/// ends of its near-surface band. Endpoints of excluded classes are skipped.
pub fn allocation_points(scan: &LabeledScan, band_width: f64, exclude: &dyn Fn(u16) -> bool) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(scan.len() * 3);
    for (p, &c) in scan.points.iter().zip(&scan.labels) {
        if exclude(c) {
            continue;
        }
        let v = sub(*p, scan.origin);
        let len = crate::util::norm(v);
        if !(len > band_width) {
            continue;
        }
        let d = scale(v, band_width / len);
        pts.push(*p);
        pts.push(sub(*p, d));
        pts.push(crate::util::add(*p, d));
    }
    pts
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Batch mode: total steps. Incremental mode: steps per scan.
    pub steps: usize,
    pub rays_per_step: usize,
    pub sampler: SamplerConfig,
    pub weights: LossWeights,
    pub feature_adam: AdamConfig,
    pub decoder_adam: AdamConfig,
    pub seed: u64,
    /// Classes excluded from surface supervision and allocation.
    pub dynamic_classes: Vec<u16>,
    /// Steps between rollback checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::BatchSemantic,
            steps: 1000,
            rays_per_step: 1024,
            sampler: SamplerConfig::default(),
            weights: LossWeights::default(),
            feature_adam: AdamConfig::default(),
            decoder_adam: AdamConfig::default(),
            seed: 0,
            dynamic_classes: Vec::new(),
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                match e {
                    Error::Config(v) => errs.extend(v),
                    other => errs.push(other.to_string()),
                }
            }
        };
        push(self.sampler.validate());
        push(self.weights.validate());
        if self.rays_per_step == 0 {
            errs.push("rays_per_step must be positive".to_string());
        }
        if self.checkpoint_every == 0 {
            errs.push("checkpoint_every must be positive".to_string());
        }
        for (name, a) in [("feature", &self.feature_adam), ("decoder", &self.decoder_adam)] {
            if !(a.lr > 0.0 && a.lr.is_finite()) {
                errs.push(format!("{name} learning rate must be positive"));
            }
            if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
                errs.push(format!("{name} Adam betas must lie in [0, 1)"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub terms: LossTerms,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    pub steps: usize,
    pub skipped_rays: usize,
    pub excluded_rays: usize,
    pub absent_samples: usize,
    pub allocated_corners: usize,
}

/// Write the loss history as CSV (`step,L1,L2,L3,L4,L5,total`).
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,L1,L2,L3,L4,L5,total")?;
    for r in history {
        let t = &r.terms;
        writeln!(w, "{},{},{},{},{},{},{}", r.step, t.l1, t.l2, t.l3, t.l4, t.l5, r.total)?;
    }
    w.flush()?;
    Ok(())
}

const GEO: usize = 0;
const SEM: usize = 1;
const GNF: usize = 2;
const SNF: usize = 3;
const INST: usize = 4;

struct Optimizers {
    geo: AdamState,
    sem: AdamState,
    gnf: AdamState,
    snf: AdamState,
    inst: AdamState,
}

impl Optimizers {
    fn new(map: &NeuralMap, cfg: &TrainConfig) -> Self {
        Optimizers {
            geo: AdamState::new(cfg.feature_adam, map.grid.features(FeatureTable::Geometry).len()),
            sem: AdamState::new(cfg.feature_adam, map.grid.features(FeatureTable::Semantic).len()),
            gnf: AdamState::new(cfg.decoder_adam, map.gnf.num_params()),
            snf: AdamState::new(cfg.decoder_adam, map.snf.num_params()),
            inst: AdamState::new(cfg.decoder_adam, map.instance.as_ref().map_or(0, |m| m.num_params())),
        }
    }

    fn fit(&mut self, map: &NeuralMap) {
        self.geo.resize(map.grid.features(FeatureTable::Geometry).len());
        self.sem.resize(map.grid.features(FeatureTable::Semantic).len());
    }
}

/// Importance bookkeeping of incremental mode.
struct Forgetting {
    store: ImportanceStore,
    /// `Σ |∂L1/∂η|` of the current scan, merged into β at the scan boundary.
    pending: Vec<Vec<f64>>,
    /// Feature rows modified since the last snapshot.
    dirty: [Vec<u32>; 2],
    dirty_mark: [Vec<bool>; 2],
}

impl Forgetting {
    fn new(map: &NeuralMap, beta_max: f64) -> Self {
        let mut store = ImportanceStore::new(beta_max);
        let names = ["geometry features", "semantic features", "geometry decoder", "semantic decoder", "instance decoder"];
        let tensors = map.tensors();
        let mut pending = Vec::new();
        for (name, t) in names.iter().zip(&tensors) {
            store.register(name, t);
            pending.push(vec![0.0; t.len()]);
        }
        Forgetting {
            store,
            pending,
            dirty: [Vec::new(), Vec::new()],
            dirty_mark: [vec![false; map.grid.rows()], vec![false; map.grid.rows()]],
        }
    }

    fn fit(&mut self, map: &NeuralMap) -> Result<()> {
        let tensors = map.tensors();
        for idx in [GEO, SEM] {
            self.store.grow(idx, tensors[idx])?;
            self.pending[idx].resize(tensors[idx].len(), 0.0);
            self.dirty_mark[idx].resize(map.grid.rows(), false);
        }
        Ok(())
    }

    fn mark(&mut self, table: usize, rows: &[u32]) {
        for &r in rows {
            if !self.dirty_mark[table][r as usize] {
                self.dirty_mark[table][r as usize] = true;
                self.dirty[table].push(r);
            }
        }
    }

    /// Add `λ3 · ∇L3` to `grads`; returns L3.
    fn penalty(&self, map: &NeuralMap, lambda3: f64, grads: &mut MapGrads) -> f64 {
        let tensors = map.tensors();
        let mut l3 = 0.0;
        for (idx, g) in [(GEO, &mut grads.geo), (SEM, &mut grads.sem)] {
            let dim = g.dim();
            let beta = &self.store.tensor(idx).beta;
            for &r in &self.dirty[idx] {
                let range = r as usize * dim..(r as usize + 1) * dim;
                if beta[range.clone()].iter().all(|&b| b == 0.0) {
                    continue;
                }
                l3 += self.store.forgetting_term(idx, tensors[idx], range, lambda3, g.row_mut(r));
            }
        }
        for (idx, g) in [(GNF, &mut grads.gnf), (SNF, &mut grads.snf), (INST, &mut grads.inst)] {
            if idx < tensors.len() {
                l3 += self.store.forgetting_term(idx, tensors[idx], 0..tensors[idx].len(), lambda3, g);
            }
        }
        l3
    }

    fn collect(&mut self, l1: &MapGrads) {
        for (idx, g) in [(GEO, &l1.geo), (SEM, &l1.sem)] {
            let dim = g.dim();
            for &r in g.touched() {
                let p = &mut self.pending[idx][r as usize * dim..(r as usize + 1) * dim];
                for (a, b) in p.iter_mut().zip(g.row(r)) {
                    *a += b.abs();
                }
            }
        }
        for (idx, g) in [(GNF, &l1.gnf), (SNF, &l1.snf), (INST, &l1.inst)] {
            if idx < self.pending.len() {
                for (a, b) in self.pending[idx].iter_mut().zip(g) {
                    *a += b.abs();
                }
            }
        }
    }

    /// Merge the scan's importance into β and snapshot the parameters.
    fn consolidate(&mut self, map: &NeuralMap) -> Result<()> {
        for (idx, p) in self.pending.iter_mut().enumerate() {
            self.store.accumulate(idx, 0, p);
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        self.store.snapshot(&map.tensors())?;
        for t in 0..2 {
            for &r in &self.dirty[t] {
                self.dirty_mark[t][r as usize] = false;
            }
            self.dirty[t].clear();
        }
        Ok(())
    }
}

/// Optimizes `map` on `scans` according to `cfg`.
///
/// On a non-finite loss or gradient the map is restored to the last
/// checkpoint and the error is returned.
pub fn train(map: &mut NeuralMap, scans: &[LabeledScan], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scans.is_empty() {
        return Err(Error::contract("training needs at least one scan"));
    }
    for s in scans {
        s.validate()?;
    }
    if cfg.mode.is_panoptic() != map.is_panoptic() {
        return Err(Error::contract(format!("map heads do not match mode {}", cfg.mode)));
    }
    let mut t = Trainer::new(map, cfg);
    if cfg.mode.is_incremental() {
        for i in 0..scans.len() {
            t.allocate(&scans[i..i + 1])?;
            if i == 0 {
                t.forgetting = Some(Forgetting::new(t.map, cfg.weights.beta_max));
            } else if let Some(f) = t.forgetting.as_mut() {
                f.fit(t.map)?;
            }
            for _ in 0..cfg.steps {
                t.step(&scans[i..i + 1])?;
            }
            if let Some(f) = t.forgetting.as_mut() {
                f.consolidate(t.map)?;
            }
        }
    } else {
        t.allocate(scans)?;
        for _ in 0..cfg.steps {
            t.step(scans)?;
        }
    }
    Ok(t.report)
}

struct Trainer<'a> {
    map: &'a mut NeuralMap,
    cfg: &'a TrainConfig,
    opt: Optimizers,
    grads: MapGrads,
    l1: MapGrads,
    forgetting: Option<Forgetting>,
    checkpoint: (usize, NeuralMap),
    report: TrainReport,
}

impl<'a> Trainer<'a> {
    fn new(map: &'a mut NeuralMap, cfg: &'a TrainConfig) -> Self {
        let opt = Optimizers::new(map, cfg);
        let grads = MapGrads::new(map);
        let l1 = MapGrads::new(map);
        let checkpoint = (0, map.clone());
        Trainer {
            map,
            cfg,
            opt,
            grads,
            l1,
            forgetting: None,
            checkpoint,
            report: TrainReport::default(),
        }
    }

    fn is_dynamic(&self, c: u16) -> bool {
        self.cfg.dynamic_classes.contains(&c)
    }

    fn allocate(&mut self, scans: &[LabeledScan]) -> Result<()> {
        for s in scans {
            let pts = allocation_points(s, self.cfg.sampler.band_width, &|c| self.is_dynamic(c));
            self.report.allocated_corners += self.map.grid.allocate_for_points(&pts)?;
        }
        self.opt.fit(self.map);
        self.grads.fit(self.map);
        self.l1.fit(self.map);
        if self.report.steps == 0 {
            self.checkpoint = (0, self.map.clone());
        }
        Ok(())
    }

    fn rollback(&mut self) -> usize {
        let (step, good) = &self.checkpoint;
        *self.map = good.clone();
        *step
    }

    fn step(&mut self, scans: &[LabeledScan]) -> Result<()> {
        let cfg = self.cfg;
        let step = self.report.steps;
        let dynamic = &cfg.dynamic_classes;
        let (samples, stats) = build_batch(
            scans,
            cfg.rays_per_step,
            cfg.seed,
            step as u64,
            &cfg.sampler,
            &|c| dynamic.contains(&c),
        );
        self.report.skipped_rays += stats.skipped;
        self.report.excluded_rays += stats.excluded;
        self.grads.clear();
        self.l1.clear();
        let want_l1 = self.forgetting.is_some();
        let (mut terms, counts) = evaluate_batch(
            self.map,
            &samples,
            &cfg.weights,
            &mut self.grads,
            if want_l1 { Some(&mut self.l1) } else { None },
        )?;
        self.report.absent_samples += counts.absent;
        if let Some(f) = &self.forgetting {
            if cfg.weights.lambda3 > 0.0 {
                terms.l3 = f.penalty(self.map, cfg.weights.lambda3, &mut self.grads);
            }
        }
        let total = terms.total(&cfg.weights, cfg.mode);
        if !total.is_finite() {
            let term = terms.non_finite_term().unwrap_or("total").to_string();
            let last_good_step = self.rollback();
            return Err(Error::Diverged {
                step,
                last_good_step,
                term,
            });
        }
        if let Err(e) = self.apply() {
            self.rollback();
            return Err(e);
        }
        if let Some(f) = self.forgetting.as_mut() {
            f.collect(&self.l1);
            f.mark(GEO, self.grads.geo.touched());
            f.mark(SEM, self.grads.sem.touched());
        }
        self.report.history.push(LossRecord { step, terms, total });
        self.report.steps += 1;
        if self.report.steps.is_multiple_of(cfg.checkpoint_every) && self.map.all_finite() {
            self.checkpoint = (self.report.steps, self.map.clone());
        }
        Ok(())
    }

    fn apply(&mut self) -> Result<()> {
        let g = &self.grads;
        let gd = g.geo.dim();
        let sd = g.sem.dim();
        adam_step_rows(
            "geometry features",
            self.map.grid.features_mut(FeatureTable::Geometry),
            g.geo.data(),
            &mut self.opt.geo,
            g.geo.touched(),
            gd,
        )?;
        if !g.sem.touched().is_empty() {
            adam_step_rows(
                "semantic features",
                self.map.grid.features_mut(FeatureTable::Semantic),
                g.sem.data(),
                &mut self.opt.sem,
                g.sem.touched(),
                sd,
            )?;
        }
        adam_step("geometry decoder", self.map.gnf.params_mut(), &g.gnf, &mut self.opt.gnf)?;
        if g.snf.iter().any(|&v| v != 0.0) || self.opt.snf.step > 0 {
            adam_step("semantic decoder", self.map.snf.params_mut(), &g.snf, &mut self.opt.snf)?;
        }
        if let Some(inst) = self.map.instance.as_mut() {
            if g.inst.iter().any(|&v| v != 0.0) || self.opt.inst.step > 0 {
                adam_step("instance decoder", inst.params_mut(), &g.inst, &mut self.opt.inst)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DecoderConfig;
    use crate::octree::GridConfig;
    use crate::sampler::IDENTITY_POSE;

    fn plane_scan(n: usize, seed: u64) -> LabeledScan {
        use rand::Rng;
        let mut rng = crate::util::stream_rng(seed, 1, 2);
        let origin = [0.0, 0.0, 2.0];
        let mut points = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.random_range(1.5..5.0);
            let y: f64 = rng.random_range(-2.0..2.0);
            points.push([x, y, 0.0]);
        }
        LabeledScan {
            origin,
            labels: points.iter().map(|p| if p[1] < 0.0 { 9 } else { 11 }).collect(),
            instances: vec![0; n],
            points,
            pose: IDENTITY_POSE,
        }
    }

    fn tiny_map(panoptic: bool) -> NeuralMap {
        NeuralMap::new(GridConfig::default(), &DecoderConfig::default(), panoptic).unwrap()
    }

    #[test]
    fn sparse_grad_clear_and_add() {
        let mut a = SparseRowGrad::new(2);
        a.ensure_rows(4);
        a.row_mut(2)[1] = 3.0;
        let mut b = SparseRowGrad::new(2);
        b.ensure_rows(4);
        b.add_scaled(&a, 2.0);
        assert_eq!(b.row(2), &[0.0, 6.0]);
        assert_eq!(b.touched(), &[2]);
        b.clear();
        assert!(b.touched().is_empty());
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lambdas_reduce_to_sdf_loss() {
        let scan = plane_scan(200, 1);
        let mut map = tiny_map(false);
        map.grid.allocate_for_points(&allocation_points(&scan, 0.3, &|_| false)).unwrap();
        let (samples, _) = build_batch(&[scan], 100, 3, 0, &SamplerConfig::default(), &|_| false);
        let w = LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..Default::default()
        };
        let mut g = MapGrads::new(&map);
        let (terms, counts) = evaluate_batch(&map, &samples, &w, &mut g, None).unwrap();
        let mut preds = Vec::new();
        let mut ds = Vec::new();
        for s in &samples {
            if let Some(p) = map.sdf(s.x) {
                preds.push(p);
                ds.push(s.d);
            }
        }
        assert_eq!(preds.len(), counts.samples - counts.absent);
        let want = crate::loss::sdf_loss(&preds, &ds, 0.05).unwrap();
        assert!((terms.l1 - want).abs() < 1e-12);
        assert_eq!(terms.total(&w, Mode::IncrementalPanoptic), terms.l1);
        assert!(g.sem.touched().is_empty());
        assert!(g.snf.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let scans = vec![plane_scan(400, 4)];
        let cfg = TrainConfig {
            steps: 60,
            rays_per_step: 128,
            ..Default::default()
        };
        let run = || {
            let mut map = tiny_map(false);
            let rep = train(&mut map, &scans, &cfg).unwrap();
            (rep, map)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a.history, b.history);
        assert_eq!(ma.gnf.params(), mb.gnf.params());
        let first: f64 = a.history[..10].iter().map(|r| r.terms.l1).sum();
        let last: f64 = a.history[50..].iter().map(|r| r.terms.l1).sum();
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn incremental_mode_tracks_l3() {
        let scans = vec![plane_scan(200, 5), plane_scan(200, 6)];
        let cfg = TrainConfig {
            mode: Mode::IncrementalSemantic,
            steps: 10,
            rays_per_step: 64,
            ..Default::default()
        };
        let mut map = tiny_map(false);
        let rep = train(&mut map, &scans, &cfg).unwrap();
        assert_eq!(rep.history.len(), 20);
        assert!(rep.history[..10].iter().all(|r| r.terms.l3 == 0.0));
        assert!(rep.history[11..].iter().any(|r| r.terms.l3 > 0.0));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let mut map = tiny_map(false);
        let cfg = TrainConfig {
            mode: Mode::BatchPanoptic,
            ..Default::default()
        };
        assert!(train(&mut map, &[plane_scan(10, 1)], &cfg).is_err());
    }

    #[test]
    fn divergence_rolls_back() {
        let scans = vec![plane_scan(100, 7)];
        let mut map = tiny_map(false);
        map.grid.allocate_for_points(&allocation_points(&scans[0], 0.3, &|_| false)).unwrap();
        let before = map.clone();
        map.gnf.params_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            steps: 5,
            rays_per_step: 32,
            ..Default::default()
        };
        let mut poisoned = map.clone();
        let err = train(&mut poisoned, &scans, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, last_good_step: 0, .. }), "{err}");
        assert_eq!(poisoned.grid.rows(), before.grid.rows());
    }

    #[test]
    fn loss_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let rec = LossRecord {
            step: 3,
            terms: LossTerms {
                l1: 0.5,
                l2: 0.1,
                ..Default::default()
            },
            total: 0.53,
        };
        write_loss_csv(&p, &[rec]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s, "step,L1,L2,L3,L4,L5,total\n3,0.5,0.1,0,0,0,0.53\n");
    }
}
