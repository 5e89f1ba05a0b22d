//! Loss terms and the importance-weighted parameter penalty.
//!
//! Every function returns the loss value together with its derivative with
//! respect to the prediction it consumes, so that the trainer can chain the
//! gradients through the decoders and the feature grid.

use crate::error::{Error, Result};
use crate::mlp::log_sum_exp;
use crate::util::{norm, scale, Vec3};

/// Probability logs are clamped below at this value.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Sigmoid scale of the SDF loss, meters.
    pub alpha: f64,
    /// Cap on accumulated importance.
    pub beta_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda2: 0.3,
            lambda3: 100.0,
            lambda4: 1.0,
            lambda5: 1.0,
            alpha: 0.05,
            beta_max: 1000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            errs.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta_max.is_finite() && self.beta_max > 0.0) {
            errs.push(format!("beta_max must be positive, got {}", self.beta_max));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross entropy between `logistic(pred/alpha)` and `logistic(d/alpha)`
/// for one sample; returns `(loss, dloss/dpred)`.
#[inline]
pub fn bce_sdf(pred: f64, d: f64, alpha: f64) -> (f64, f64) {
    let z = pred / alpha;
    let y = logistic(d / alpha);
    let p = logistic(z);
    let floor = LOG_CLAMP.ln();
    // ln p = -softplus(-z), ln(1 - p) = -softplus(z)
    let (log_p, dp) = clamp_log(-softplus(-z), floor);
    let (log_q, dq) = clamp_log(-softplus(z), floor);
    let loss = -(y * log_p + (1.0 - y) * log_q);
    let grad = (-y * (1.0 - p) * dp + (1.0 - y) * p * dq) / alpha;
    (loss, grad)
}

#[inline]
fn clamp_log(v: f64, floor: f64) -> (f64, f64) {
    if v < floor {
        (floor, 0.0)
    } else {
        (v, 1.0)
    }
}

/// Batch-mean SDF loss.
pub fn sdf_loss(preds: &[f64], targets: &[f64], alpha: f64) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::contract(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = preds.iter().zip(targets).map(|(&p, &d)| bce_sdf(p, d, alpha).0).sum();
    Ok(s / preds.len() as f64)
}

/// `−log softmax(logits)[target]`; writes `softmax − onehot` into `grad`.
pub fn cross_entropy_into(logits: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logits);
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - lse).exp();
    }
    grad[target] -= 1.0;
    lse - logits[target]
}

pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; logits.len()];
    let l = cross_entropy_into(logits, target, &mut g);
    (l, g)
}

fn batch_cross_entropy(logits: &[f64], width: usize, targets: &[usize], what: &str) -> Result<f64> {
    if width == 0 || logits.len() != width * targets.len() {
        return Err(Error::contract(format!(
            "{what}: {} logits for {} samples of width {width}",
            logits.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (row, &t) in logits.chunks_exact(width).zip(targets) {
        if t >= width {
            return Err(Error::contract(format!("{what}: target {t} outside [0, {width})")));
        }
        sum += log_sum_exp(row) - row[t];
    }
    Ok(sum / targets.len() as f64)
}

/// Batch-mean class cross entropy over row-major `logits` of width `classes`.
pub fn semantic_loss(logits: &[f64], classes: usize, targets: &[usize]) -> Result<f64> {
    batch_cross_entropy(logits, classes, targets, "semantic loss")
}

/// Instance target of a labeled sample: stuff classes always map to 0.
#[inline]
pub fn instance_target(is_thing: bool, instance_id: u32) -> u32 {
    if is_thing {
        instance_id
    } else {
        0
    }
}

/// Batch-mean instance cross entropy; id 0 is the stuff/none slot.
pub fn panoptic_instance_loss(logits: &[f64], slots: usize, targets: &[usize]) -> Result<f64> {
    batch_cross_entropy(logits, slots, targets, "instance loss")
}

/// `|‖g‖ − 1|` and its derivative with respect to `g`.
#[inline]
pub fn eikonal_residual(g: Vec3) -> (f64, Vec3) {
    let n = norm(g);
    let r = n - 1.0;
    if n == 0.0 {
        return (1.0, [0.0; 3]);
    }
    let s = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    (r.abs(), scale(g, s / n))
}

/// One importance-tracked parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTensor {
    pub name: String,
    pub beta: Vec<f64>,
    pub snapshot: Vec<f64>,
}

/// Accumulated per-parameter importance and the previous-task parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceStore {
    pub beta_max: f64,
    tensors: Vec<ImportanceTensor>,
}

impl ImportanceStore {
    pub fn new(beta_max: f64) -> Self {
        ImportanceStore {
            beta_max,
            tensors: Vec::new(),
        }
    }

    /// Track a tensor with zero importance, snapshotting its current values.
    pub fn register(&mut self, name: &str, values: &[f64]) -> usize {
        self.tensors.push(ImportanceTensor {
            name: name.to_string(),
            beta: vec![0.0; values.len()],
            snapshot: values.to_vec(),
        });
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[ImportanceTensor] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &ImportanceTensor {
        &self.tensors[idx]
    }

    /// Extend a tensor that grew at its tail (newly allocated features):
    /// the new entries get zero importance and their current values as snapshot.
    pub fn grow(&mut self, idx: usize, live: &[f64]) -> Result<()> {
        let t = &mut self.tensors[idx];
        if live.len() < t.snapshot.len() {
            return Err(Error::contract(format!(
                "tensor {} shrank from {} to {}",
                t.name,
                t.snapshot.len(),
                live.len()
            )));
        }
        let old = t.snapshot.len();
        t.snapshot.extend_from_slice(&live[old..]);
        t.beta.resize(live.len(), 0.0);
        Ok(())
    }

    fn check(&self, live: &[&[f64]]) -> Result<()> {
        if live.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "{} live tensors for {} tracked",
                live.len(),
                self.tensors.len()
            )));
        }
        for (t, l) in self.tensors.iter().zip(live) {
            if t.snapshot.len() != l.len() {
                return Err(Error::contract(format!(
                    "tensor {} has {} live values but {} in the snapshot",
                    t.name,
                    l.len(),
                    t.snapshot.len()
                )));
            }
        }
        Ok(())
    }

    /// `Σ β (η − η_prev)²` over all tracked tensors.
    pub fn forgetting_loss(&self, live: &[&[f64]]) -> Result<f64> {
        self.check(live)?;
        let mut sum = 0.0;
        for (t, l) in self.tensors.iter().zip(live) {
            for ((&b, &s), &v) in t.beta.iter().zip(&t.snapshot).zip(l.iter()) {
                let d = v - s;
                sum += b * d * d;
            }
        }
        Ok(sum)
    }

    /// Penalty and gradient restricted to `range` of tensor `idx`;
    /// `grad` receives `weight · 2β(η − η_prev)` for each entry of the range.
    pub fn forgetting_term(
        &self,
        idx: usize,
        live: &[f64],
        range: std::ops::Range<usize>,
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        let t = &self.tensors[idx];
        let mut sum = 0.0;
        for (k, i) in range.enumerate() {
            let d = live[i] - t.snapshot[i];
            sum += t.beta[i] * d * d;
            grad[k] += weight * 2.0 * t.beta[i] * d;
        }
        sum
    }

    /// `β ← min(β + |g|, β_max)` over a contiguous slice starting at `offset`.
    pub fn accumulate(&mut self, idx: usize, offset: usize, grads: &[f64]) {
        let cap = self.beta_max;
        let t = &mut self.tensors[idx];
        for (b, g) in t.beta[offset..offset + grads.len()].iter_mut().zip(grads) {
            *b = (*b + g.abs()).min(cap);
        }
    }

    /// Freeze the current parameters as the previous-task reference.
    pub fn snapshot(&mut self, live: &[&[f64]]) -> Result<()> {
        self.check(live)?;
        for (t, l) in self.tensors.iter_mut().zip(live) {
            t.snapshot.copy_from_slice(l);
        }
        Ok(())
    }
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::mlp::softmax;

    // (pred, d, loss) with alpha = 0.05; reference values from a 50-digit
    // evaluation of the clamped cross entropy.
    const BCE_ORACLE: [(f64, f64, f64); 8] = [
        (0.0123, -0.071, 0.77580593370966191),
        (-0.2, 0.35, 4.0145057231402072),
        (0.04, 0.04, 0.61912108104568777),
        (0.5, -0.5, 9.9995914202121925),
        (-0.031, 0.0, 0.74044674402949608),
        (0.25, 0.1, 0.60272995859970585),
        (0.0, 0.0, std::f64::consts::LN_2),
        (2.0, -2.0, 27.631021115928548),
    ];

    #[test]
    fn bce_matches_extended_precision() {
        for &(p, d, want) in &BCE_ORACLE {
            let (got, _) = bce_sdf(p, d, 0.05);
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "pred {p} d {d}: {got} vs {want}");
        }
    }

    #[test]
    fn bce_minimum_at_target() {
        for &d in &[-0.3, -0.07, 0.0, 0.01, 0.2, 0.5] {
            let (l, g) = bce_sdf(d, d, 0.05);
            assert!(g.abs() < 1e-9);
            for dp in [-1e-3, 1e-3] {
                assert!(bce_sdf(d + dp, d, 0.05).0 > l);
            }
        }
        let (l0, g0) = bce_sdf(0.0, 0.0, 0.05);
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g0, 0.0);
    }

    #[test]
    fn bce_gradient_matches_difference() {
        for &(p, d, _) in &BCE_ORACLE[..6] {
            let h = 1e-6;
            let fd = (bce_sdf(p + h, d, 0.05).0 - bce_sdf(p - h, d, 0.05).0) / (2.0 * h);
            let (_, g) = bce_sdf(p, d, 0.05);
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "{fd} vs {g}");
        }
    }

    #[test]
    fn bce_clamped_region_has_zero_gradient() {
        let (l, g) = bce_sdf(2.0, -2.0, 0.05);
        assert!((l - 27.631021115928547).abs() < 1e-9);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn sdf_loss_is_mean() {
        let l = sdf_loss(&[0.0, 0.04], &[0.0, 0.04], 0.05).unwrap();
        assert!((l - (BCE_ORACLE[6].2 + BCE_ORACLE[2].2) / 2.0).abs() < 1e-12);
        assert!(sdf_loss(&[0.0], &[], 0.05).is_err());
    }

    // logits, target, loss: 50-digit reference values.
    const CE_ORACLE: [(&[f64], usize, f64); 4] = [
        (&[0.3, -1.2, 2.5, 0.0], 2, 0.19689130355934991),
        (&[0.3, -1.2, 2.5, 0.0], 1, 3.8968913035593499),
        (&[-4.0, 7.5, 1.25], 0, 11.501938703728704),
        (&[10.0, 10.0], 1, std::f64::consts::LN_2),
    ];

    #[test]
    fn cross_entropy_matches_extended_precision() {
        for &(logits, t, want) in &CE_ORACLE {
            let (got, g) = cross_entropy(logits, t);
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "{got} vs {want}");
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    // Softmax of [0.3, -1.2, 2.5, 0.0]; 50-digit reference values.
    const SOFTMAX_ORACLE: [f64; 4] = [
        0.091000406671348963,
        0.020304935314150336,
        0.82127989866291923,
        0.067414759351581467,
    ];

    #[test]
    fn softmax_matches_extended_precision() {
        let s = softmax(&[0.3, -1.2, 2.5, 0.0]);
        for (a, b) in s.iter().zip(SOFTMAX_ORACLE) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        for c in [2usize, 5, 20] {
            let l = semantic_loss(&vec![0.7; c], c, &[c - 1]).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12);
        }
        let l = panoptic_instance_loss(&[0.0, 0.0], 2, &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_true_class_loss_vanishes() {
        let l = semantic_loss(&[800.0, 0.0, -3.0], 3, &[0]).unwrap();
        assert!(l.abs() < 1e-300);
    }

    #[test]
    fn stuff_samples_target_slot_zero() {
        assert_eq!(instance_target(false, 7), 0);
        assert_eq!(instance_target(true, 7), 7);
    }

    #[test]
    fn out_of_range_targets_rejected() {
        assert!(semantic_loss(&[0.0, 0.0], 2, &[2]).is_err());
        assert!(semantic_loss(&[0.0, 0.0, 0.0], 2, &[0]).is_err());
    }

    #[test]
    fn eikonal_residual_cases() {
        assert_eq!(eikonal_residual([0.6, 0.8, 0.0]).0, 0.0);
        let (v, g) = eikonal_residual([2.0, 0.0, 0.0]);
        assert_eq!(v, 1.0);
        assert_eq!(g, [1.0, 0.0, 0.0]);
        let (v, g) = eikonal_residual([0.0, 0.5, 0.0]);
        assert_eq!(v, 0.5);
        assert_eq!(g, [0.0, -1.0, 0.0]);
    }

    fn store(beta: &[f64], snap: &[f64]) -> ImportanceStore {
        let mut s = ImportanceStore::new(1000.0);
        s.register("w", snap);
        s.tensors[0].beta = beta.to_vec();
        s
    }

    #[test]
    fn forgetting_hand_case() {
        let s = store(&[1.0, 2.0], &[0.5, 0.5]);
        let l = s.forgetting_loss(&[&[0.6, 0.3]]).unwrap();
        assert!((l - 0.09).abs() < 1e-15);
        assert_eq!(s.forgetting_loss(&[&[0.5, 0.5]]).unwrap(), 0.0);
        let z = store(&[0.0, 0.0], &[0.5, 0.5]);
        assert_eq!(z.forgetting_loss(&[&[9.0, -9.0]]).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_term_gradient() {
        let s = store(&[1.0, 2.0], &[0.5, 0.5]);
        let mut g = [0.0; 2];
        let l = s.forgetting_term(0, &[0.6, 0.3], 0..2, 3.0, &mut g);
        assert!((l - 0.09).abs() < 1e-15);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] + 2.4).abs() < 1e-12);
    }

    #[test]
    fn shape_drift_is_contract_error() {
        let s = store(&[1.0, 2.0], &[0.5, 0.5]);
        assert!(matches!(s.forgetting_loss(&[&[0.5]]), Err(Error::Contract(_))));
        assert!(s.forgetting_loss(&[]).is_err());
    }

    #[test]
    fn importance_accumulates_with_cap() {
        let mut s = ImportanceStore::new(1.0);
        s.register("w", &[0.0, 0.0, 0.0]);
        s.accumulate(0, 0, &[0.0, 0.0, 0.0]);
        assert_eq!(s.tensor(0).beta, vec![0.0; 3]);
        let seq = [[0.3, -0.5, 0.05], [-0.4, 0.2, 0.05], [0.5, -0.6, 0.05]];
        for g in &seq {
            s.accumulate(0, 0, g);
        }
        // Hand sums: 1.2 → cap 1.0; 0.5 + 0.2 = 0.7 → +0.6 → cap 1.0; 0.15.
        assert_eq!(s.tensor(0).beta[0], 1.0);
        assert_eq!(s.tensor(0).beta[1], 1.0);
        assert!((s.tensor(0).beta[2] - 0.15).abs() < 1e-15);
        s.accumulate(0, 0, &[5.0, 5.0, 0.0]);
        assert_eq!(&s.tensor(0).beta[..2], &[1.0, 1.0]);
    }

    #[test]
    fn grow_and_snapshot() {
        let mut s = ImportanceStore::new(10.0);
        s.register("f", &[1.0]);
        s.accumulate(0, 0, &[2.0]);
        s.grow(0, &[1.5, 3.0]).unwrap();
        assert_eq!(s.tensor(0).snapshot, vec![1.0, 3.0]);
        assert_eq!(s.tensor(0).beta, vec![2.0, 0.0]);
        assert!(s.grow(0, &[1.0]).is_err());
        s.snapshot(&[&[4.0, 5.0]]).unwrap();
        assert_eq!(s.tensor(0).snapshot, vec![4.0, 5.0]);
    }
}
