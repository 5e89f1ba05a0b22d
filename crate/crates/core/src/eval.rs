//! Reconstruction metrics: completion, accuracy, Chamfer-L1, completion
//! ratio, F-score and the class-restricted (semantic) Chamfer distance.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, weighted::WeightedAliasIndex};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::mesh::SemanticMesh;
use crate::util::{add, dist, scale, stream_rng, sub, Vec3};

/// Points with one class label each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPoints {
    pub points: Vec<Vec3>,
    pub classes: Vec<u16>,
}

impl LabeledPoints {
    pub fn new(points: Vec<Vec3>, classes: Vec<u16>) -> Result<Self> {
        if points.len() != classes.len() {
            return Err(Error::Metric(format!(
                "{} points but {} labels",
                points.len(),
                classes.len()
            )));
        }
        Ok(LabeledPoints { points, classes })
    }

    pub fn unlabeled(points: Vec<Vec3>) -> Self {
        let classes = vec![0; points.len()];
        LabeledPoints { points, classes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points of one class, in input order.
    pub fn of_class(&self, class: u16) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(&self.classes)
            .filter(|(_, c)| **c == class)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Distinct classes, ascending.
    pub fn class_set(&self) -> Vec<u16> {
        let mut c = self.classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Exact nearest-neighbor index on a uniform grid of cubic cells.
pub struct SpatialHash {
    cell: f64,
    points: Vec<Vec3>,
    cells: FxHashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl SpatialHash {
    pub fn new(points: Vec<Vec3>, cell: f64) -> Result<Self> {
        if !(cell.is_finite() && cell > 0.0) {
            return Err(Error::Metric(format!("cell size must be positive, got {cell}")));
        }
        let mut cells: FxHashMap<[i64; 3], Vec<u32>> = FxHashMap::default();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Metric(format!("non-finite point {p:?}")));
            }
            let c = cell_of(*p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        Ok(SpatialHash {
            cell,
            points,
            cells,
            lo,
            hi,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index and distance of the nearest stored point; `None` when empty.
    /// Among equidistant points the lowest index wins.
    pub fn nearest(&self, q: Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.search(q, |i, d| {
            if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                best = Some((i, d));
            }
            best.map(|b| b.1)
        });
        best
    }

    /// Nearest stored point no farther than `max`.
    pub fn nearest_within(&self, q: Vec3, max: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.search(q, |i, d| {
            if d <= max && best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                best = Some((i, d));
            }
            Some(best.map_or(max, |b| b.1))
        });
        best
    }

    /// The `k` nearest stored points ordered by distance, then index.
    pub fn k_nearest(&self, q: Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        self.search(q, |i, d| {
            let pos = best.partition_point(|&(bi, bd)| bd < d || (bd == d && bi < i));
            if pos < k {
                best.insert(pos, (i, d));
                best.truncate(k);
            }
            (best.len() == k).then(|| best[k - 1].1)
        });
        best
    }

    /// Visits candidate points ring by ring around `q`'s cell. `visit`
    /// returns the current pruning radius once it has enough candidates;
    /// the search stops when no unvisited point can be closer.
    fn search(&self, q: Vec3, mut visit: impl FnMut(usize, f64) -> Option<f64>) {
        if self.points.is_empty() {
            return;
        }
        let qc = cell_of(q, self.cell);
        // Chebyshev cell distance beyond which no points exist.
        let max_ring = (0..3)
            .map(|a| (qc[a] - self.lo[a]).abs().max((self.hi[a] - qc[a]).abs()))
            .max()
            .unwrap();
        let mut radius = None;
        let mut take = |ids: &[u32], radius: &mut Option<f64>| {
            for &i in ids {
                *radius = visit(i as usize, dist(q, self.points[i as usize]));
            }
        };
        let mut r: i64 = 0;
        while r <= max_ring {
            let ring_cells = if r == 0 { 1 } else { (2 * r + 1).pow(3) - (2 * r - 1).pow(3) };
            if ring_cells as usize > self.cells.len() {
                // Cheaper to visit the occupied cells that are not yet covered.
                let mut rest: Vec<(&[i64; 3], &Vec<u32>)> = self
                    .cells
                    .iter()
                    .filter(|(c, _)| (0..3).map(|a| (c[a] - qc[a]).abs()).max().unwrap() >= r)
                    .collect();
                rest.sort_unstable_by_key(|(c, _)| **c);
                for (_, ids) in rest {
                    take(ids, &mut radius);
                }
                return;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    let step = if dx.abs() == r || dy.abs() == r { 1 } else { 2 * r as usize };
                    for dz in (-r..=r).step_by(step) {
                        if let Some(ids) = self.cells.get(&[qc[0] + dx, qc[1] + dy, qc[2] + dz]) {
                            take(ids, &mut radius);
                        }
                    }
                }
            }
            // Points in rings beyond r are at least r cells away.
            if radius.is_some_and(|d| d < r as f64 * self.cell) {
                return;
            }
            r += 1;
        }
    }

    /// Nearest-neighbor distance for every query, in parallel.
    pub fn distances(&self, queries: &[Vec3]) -> Vec<f64> {
        queries
            .par_iter()
            .map(|&q| self.nearest(q).map_or(f64::INFINITY, |(_, d)| d))
            .collect()
    }
}

fn cell_of(p: Vec3, cell: f64) -> [i64; 3] {
    p.map(|v| (v / cell).floor() as i64)
}

/// O(n) scan; lowest index wins ties.
pub fn brute_force_nearest(points: &[Vec3], q: Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in points.iter().enumerate() {
        let d = dist(q, p);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

/// Area-weighted uniform samples of the mesh surface. Each sample takes the
/// majority class of its triangle's vertices (lowest class when all differ).
pub fn sample_surface(mesh: &SemanticMesh, n: usize, seed: u64) -> Result<LabeledPoints> {
    Ok(sample_surface_indexed(mesh, n, seed)?.0)
}

/// As [`sample_surface`], also returning the source triangle of each sample.
pub fn sample_surface_indexed(mesh: &SemanticMesh, n: usize, seed: u64) -> Result<(LabeledPoints, Vec<u32>)> {
    mesh.validate()?;
    let m = &mesh.mesh;
    let areas: Vec<f64> = m.triangles.iter().map(|&t| m.triangle_area(t)).collect();
    if areas.is_empty() || !areas.iter().any(|&a| a > 0.0) {
        return Err(Error::Metric("cannot sample an empty mesh".into()));
    }
    let pick = WeightedAliasIndex::new(areas).map_err(|e| Error::Metric(format!("triangle weights: {e}")))?;
    let mut rng = stream_rng(seed, 0x5355_5246, 0);
    let mut points = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    let mut source = Vec::with_capacity(n);
    for _ in 0..n {
        let ti = pick.sample(&mut rng);
        source.push(ti as u32);
        let t = m.triangles[ti];
        let [a, b, c] = t.map(|i| m.vertices[i as usize]);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let p = add(a, add(scale(sub(b, a), s * (1.0 - r2)), scale(sub(c, a), s * r2)));
        points.push(p);
        classes.push(majority(t.map(|i| mesh.classes[i as usize])));
    }
    Ok((LabeledPoints { points, classes }, source))
}

fn majority(c: [u16; 3]) -> u16 {
    if c[0] == c[1] || c[0] == c[2] {
        c[0]
    } else if c[1] == c[2] {
        c[1]
    } else {
        c[0].min(c[1]).min(c[2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean nearest distances `(R -> T, T -> R)`.
pub fn chamfer(r: &[Vec3], t: &[Vec3], cell: f64) -> Result<(f64, f64)> {
    if r.is_empty() || t.is_empty() {
        return Err(Error::Metric("Chamfer distance needs two non-empty sets".into()));
    }
    let ht = SpatialHash::new(t.to_vec(), cell)?;
    let hr = SpatialHash::new(r.to_vec(), cell)?;
    Ok((mean(&ht.distances(r)), mean(&hr.distances(t))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScd {
    pub class: u16,
    pub n_pred: usize,
    pub n_gt: usize,
    /// Mean same-class distance from predicted to ground-truth points, meters.
    pub pred_to_gt: f64,
    pub gt_to_pred: f64,
}

impl ClassScd {
    pub fn scd(&self) -> f64 {
        0.5 * (self.pred_to_gt + self.gt_to_pred)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScdReport {
    pub per_class: Vec<ClassScd>,
    /// Classes present in only one of the sets; excluded from the aggregate.
    pub only_pred: Vec<u16>,
    pub only_gt: Vec<u16>,
    pub pred_to_gt: f64,
    pub gt_to_pred: f64,
}

impl ScdReport {
    pub fn scd(&self) -> f64 {
        0.5 * (self.pred_to_gt + self.gt_to_pred)
    }
}

/// Semantic Chamfer distance: nearest neighbors restricted to the same class.
pub fn scd(pred: &LabeledPoints, gt: &LabeledPoints, cell: f64) -> Result<ScdReport> {
    let pc = pred.class_set();
    let gc = gt.class_set();
    let shared: Vec<u16> = pc.iter().copied().filter(|c| gc.contains(c)).collect();
    if shared.is_empty() {
        return Err(Error::Metric("predicted and ground-truth sets share no class".into()));
    }
    let mut per_class = Vec::with_capacity(shared.len());
    let (mut sum_pg, mut sum_gp, mut n_p, mut n_g) = (0.0, 0.0, 0usize, 0usize);
    for &c in &shared {
        let p = pred.of_class(c);
        let g = gt.of_class(c);
        let dpg = SpatialHash::new(g.clone(), cell)?.distances(&p);
        let dgp = SpatialHash::new(p.clone(), cell)?.distances(&g);
        sum_pg += dpg.iter().sum::<f64>();
        sum_gp += dgp.iter().sum::<f64>();
        n_p += p.len();
        n_g += g.len();
        per_class.push(ClassScd {
            class: c,
            n_pred: p.len(),
            n_gt: g.len(),
            pred_to_gt: mean(&dpg),
            gt_to_pred: mean(&dgp),
        });
    }
    Ok(ScdReport {
        per_class,
        only_pred: pc.iter().copied().filter(|c| !gc.contains(c)).collect(),
        only_gt: gc.iter().copied().filter(|c| !pc.contains(c)).collect(),
        pred_to_gt: sum_pg / n_p as f64,
        gt_to_pred: sum_gp / n_g as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub tau: f64,
    pub n_pred: usize,
    pub n_gt: usize,
    pub completion_cm: f64,
    pub accuracy_cm: f64,
    pub chamfer_l1_cm: f64,
    pub completion_ratio: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub scd: Option<ScdReport>,
}

/// Geometric metrics of predicted points `pred` against ground truth `gt` at
/// threshold `tau` (meters). Distances are reported in centimeters, ratios in
/// percent; a point counts as matched when its distance is strictly below `tau`.
pub fn reconstruction_metrics(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<MetricReport> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Metric(format!("threshold must be positive, got {tau}")));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Metric("metrics need non-empty predicted and ground-truth sets".into()));
    }
    let d_pg = SpatialHash::new(gt.to_vec(), tau)?.distances(pred);
    let d_gp = SpatialHash::new(pred.to_vec(), tau)?.distances(gt);
    let within = |d: &[f64]| 100.0 * d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64;
    let accuracy = mean(&d_pg);
    let completion = mean(&d_gp);
    let precision = within(&d_pg);
    let recall = within(&d_gp);
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricReport {
        tau,
        n_pred: pred.len(),
        n_gt: gt.len(),
        completion_cm: 100.0 * completion,
        accuracy_cm: 100.0 * accuracy,
        chamfer_l1_cm: 50.0 * (completion + accuracy),
        completion_ratio: recall,
        precision,
        recall,
        f_score,
        scd: None,
    })
}

/// Geometric metrics plus the per-class SCD table.
pub fn semantic_metrics(pred: &LabeledPoints, gt: &LabeledPoints, tau: f64) -> Result<MetricReport> {
    let mut r = reconstruction_metrics(&pred.points, &gt.points, tau)?;
    r.scd = Some(scd(pred, gt, tau)?);
    Ok(r)
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "tau_m,n_pred,n_gt,completion_cm,accuracy_cm,chamfer_l1_cm,completion_ratio,precision,recall,f_score";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.tau,
            self.n_pred,
            self.n_gt,
            self.completion_cm,
            self.accuracy_cm,
            self.chamfer_l1_cm,
            self.completion_ratio,
            self.precision,
            self.recall,
            self.f_score
        )
    }

    /// Writes one or more reports as CSV.
    pub fn write_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::CSV_HEADER)?;
        for r in reports {
            writeln!(f, "{}", r.csv_row())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Per-class SCD table as CSV; class names come from `names` when given.
    pub fn write_scd_csv(&self, path: &Path, names: Option<&crate::palette::Palette>) -> Result<()> {
        let scd = self
            .scd
            .as_ref()
            .ok_or_else(|| Error::Metric("report has no per-class table".into()))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "class,name,n_pred,n_gt,pred_to_gt_cm,gt_to_pred_cm,scd_cm")?;
        let name = |c: u16| {
            names
                .and_then(|p| p.classes.get(c as usize))
                .map_or_else(|| c.to_string(), |i| i.name.clone())
        };
        for c in &scd.per_class {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                c.class,
                name(c.class),
                c.n_pred,
                c.n_gt,
                100.0 * c.pred_to_gt,
                100.0 * c.gt_to_pred,
                100.0 * c.scd()
            )?;
        }
        for &c in &scd.only_pred {
            writeln!(f, "{c},{},,0,,,", name(c))?;
        }
        for &c in &scd.only_gt {
            writeln!(f, "{c},{},0,,,,", name(c))?;
        }
        f.flush()?;
        Ok(())
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "threshold        {:.3} m", self.tau)?;
        writeln!(f, "points           {} predicted, {} ground truth", self.n_pred, self.n_gt)?;
        writeln!(f, "completion       {:.3} cm", self.completion_cm)?;
        writeln!(f, "accuracy         {:.3} cm", self.accuracy_cm)?;
        writeln!(f, "chamfer-L1       {:.3} cm", self.chamfer_l1_cm)?;
        writeln!(f, "completion ratio {:.2} %", self.completion_ratio)?;
        write!(f, "F-score          {:.2} %", self.f_score)?;
        if let Some(s) = &self.scd {
            write!(f, "\nSCD              {:.3} cm", 100.0 * s.scd())?;
            for c in &s.per_class {
                write!(f, "\n  class {:>3}      {:.3} cm", c.class, 100.0 * c.scd())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::TriMesh;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64, extent: f64) -> Vec<Vec3> {
        let mut rng = stream_rng(seed, 1, 2);
        (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-extent..extent)))
            .collect()
    }

    #[test]
    fn hash_matches_brute_force() {
        for (n, cell) in [(1, 0.1), (200, 0.05), (2000, 0.3), (500, 7.0)] {
            let pts = cloud(n, n as u64, 2.0);
            let h = SpatialHash::new(pts.clone(), cell).unwrap();
            // Queries both inside and far outside the cloud.
            for q in cloud(300, 99, 6.0) {
                assert_eq!(h.nearest(q), brute_force_nearest(&pts, q));
            }
        }
        assert!(SpatialHash::new(vec![], 0.1).unwrap().nearest([0.0; 3]).is_none());
    }

    #[test]
    fn k_nearest_matches_sorted_scan() {
        let pts = cloud(700, 11, 2.0);
        let h = SpatialHash::new(pts.clone(), 0.25).unwrap();
        for q in cloud(50, 12, 4.0) {
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, dist(q, *p))).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for k in [1, 5, 16, 700, 900] {
                let want: Vec<_> = all.iter().copied().take(k).collect();
                assert_eq!(h.k_nearest(q, k), want);
            }
            for max in [0.05, 0.3, 1.0] {
                assert_eq!(h.nearest_within(q, max), all.first().copied().filter(|b| b.1 <= max));
            }
        }
    }

    #[test]
    fn scd_uses_same_class_partner() {
        let pred = LabeledPoints::new(vec![[0.0; 3], [5.0, 0.0, 0.0]], vec![1, 2]).unwrap();
        let gt = LabeledPoints::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![2, 1]).unwrap();
        let r = scd(&pred, &gt, 0.1).unwrap();
        let c1 = &r.per_class[0];
        assert_eq!((c1.class, c1.pred_to_gt, c1.gt_to_pred), (1, 1.0, 1.0));
        let c2 = &r.per_class[1];
        assert_eq!((c2.class, c2.pred_to_gt), (2, 5.0));
    }

    #[test]
    fn scd_of_identical_sets_is_zero_and_reports_missing_classes() {
        let pts = cloud(100, 3, 1.0);
        let classes: Vec<u16> = (0..100).map(|i| (i % 3) as u16).collect();
        let a = LabeledPoints::new(pts.clone(), classes.clone()).unwrap();
        let r = scd(&a, &a, 0.1).unwrap();
        assert_eq!(r.scd(), 0.0);
        let mut other = classes.clone();
        other[0] = 7;
        let b = LabeledPoints::new(pts, other).unwrap();
        let r = scd(&b, &a, 0.1).unwrap();
        assert_eq!(r.only_pred, vec![7]);
        assert!(r.only_gt.is_empty());
    }

    #[test]
    fn shifted_plane_oracle() {
        let tau = 0.1;
        let grid: Vec<Vec3> = (0..40)
            .flat_map(|i| (0..40).map(move |j| [i as f64 * 0.05, j as f64 * 0.05, 0.0]))
            .collect();
        let shifted: Vec<Vec3> = grid.iter().map(|p| [p[0], p[1], tau / 2.0]).collect();
        let r = reconstruction_metrics(&grid, &shifted, tau).unwrap();
        assert_eq!(r.completion_ratio, 100.0);
        assert_eq!(r.f_score, 100.0);
        assert!((r.chamfer_l1_cm - 5.0).abs() < 1e-9);
        let r = reconstruction_metrics(&grid, &shifted, tau / 4.0).unwrap();
        assert_eq!(r.completion_ratio, 0.0);
        assert_eq!(r.f_score, 0.0);
        let r = reconstruction_metrics(&grid, &grid, tau).unwrap();
        assert_eq!((r.accuracy_cm, r.completion_cm, r.f_score), (0.0, 0.0, 100.0));
    }

    #[test]
    fn metric_errors() {
        let p = vec![[0.0; 3]];
        assert!(matches!(reconstruction_metrics(&p, &[], 0.1), Err(Error::Metric(_))));
        assert!(matches!(reconstruction_metrics(&p, &p, 0.0), Err(Error::Metric(_))));
        let empty = SemanticMesh::default();
        assert!(matches!(sample_surface(&empty, 10, 0), Err(Error::Metric(_))));
    }

    fn two_triangles() -> SemanticMesh {
        // Areas 0.5 and 1.5.
        SemanticMesh {
            mesh: TriMesh {
                vertices: vec![
                    [0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0],
                    [10.0, 0.0, 0.0],
                    [13.0, 0.0, 0.0],
                    [10.0, 1.0, 0.0],
                ],
                triangles: vec![[0, 1, 2], [3, 4, 5]],
            },
            classes: vec![4, 4, 9, 2, 2, 2],
            instances: vec![0; 6],
            colors: vec![[0; 3]; 6],
        }
    }

    #[test]
    fn area_weighted_sampling() {
        let m = two_triangles();
        let n = 40_000;
        let s = sample_surface(&m, n, 5).unwrap();
        let first = s.points.iter().filter(|p| p[0] < 5.0).count() as f64;
        // Binomial(n, 1/4): mean n/4, sd sqrt(n * 1/4 * 3/4).
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        assert!((first - n as f64 * 0.25).abs() < 3.0 * sd, "{first}");
        for (p, c) in s.points.iter().zip(&s.classes) {
            let inside = if p[0] < 5.0 {
                p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12 && *c == 4
            } else {
                let (u, v) = ((p[0] - 10.0) / 3.0, p[1]);
                u >= 0.0 && v >= 0.0 && u + v <= 1.0 + 1e-12 && *c == 2
            };
            assert!(inside, "{p:?} class {c}");
        }
        assert_eq!(sample_surface(&m, 100, 5).unwrap(), sample_surface(&m, 100, 5).unwrap());
        assert_eq!(majority([3, 1, 2]), 1);
        assert_eq!(majority([3, 1, 1]), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn uniform_labels_reduce_to_chamfer(seed in 0u64..1000, n in 1usize..300, m in 1usize..300) {
            let a = cloud(n, seed, 1.0);
            let b = cloud(m, seed + 7, 1.5);
            let (ab, ba) = chamfer(&a, &b, 0.2).unwrap();
            let r = scd(&LabeledPoints::unlabeled(a.clone()), &LabeledPoints::unlabeled(b.clone()), 0.2).unwrap();
            prop_assert!((r.scd() - 0.5 * (ab + ba)).abs() < 1e-12);
            // Swapping the sets swaps the directions.
            let (ba2, ab2) = chamfer(&b, &a, 0.2).unwrap();
            prop_assert_eq!((ab, ba), (ab2, ba2));
            prop_assert!(ab >= 0.0 && ba >= 0.0);
        }

        #[test]
        fn f_score_is_monotone_in_tau(seed in 0u64..1000) {
            let a = cloud(200, seed, 1.0);
            let b = cloud(200, seed + 1, 1.0);
            let f1 = reconstruction_metrics(&a, &b, 0.1).unwrap();
            let f2 = reconstruction_metrics(&a, &b, 0.2).unwrap();
            prop_assert!(f2.f_score >= f1.f_score);
            for r in [&f1, &f2] {
                prop_assert!((0.0..=100.0).contains(&r.completion_ratio));
                prop_assert!((0.0..=100.0).contains(&r.f_score));
                prop_assert!((r.chamfer_l1_cm - 0.5 * (r.completion_cm + r.accuracy_cm)).abs() < 1e-9);
            }
        }

        #[test]
        fn labeled_nearest_matches_brute_force(seed in 0u64..10_000, n in 1usize..400, cell in 0.01f64..1.0) {
            let pts = cloud(n, seed, 1.0);
            let h = SpatialHash::new(pts.clone(), cell).unwrap();
            for q in cloud(20, seed ^ 0xabc, 3.0) {
                prop_assert_eq!(h.nearest(q), brute_force_nearest(&pts, q));
            }
        }
    }
}
